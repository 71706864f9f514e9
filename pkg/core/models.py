from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, PositiveInt, model_validator


class HyperParams(BaseModel):
    """Shape and behaviour hyper-parameters of the recommendation graph."""
    model_config = ConfigDict(extra="forbid")

    k: PositiveInt = Field(8, description="Embedding dimension of users and items")
    num_features: PositiveInt = Field(4, description="|F|: number of semantic views")
    num_categories: PositiveInt = Field(4, description="|C|: latent categories per view")
    num_ratings: int = Field(5, ge=2, description="|R|: discrete rating levels 1..|R|")
    sigma: float = Field(..., gt=0, description="Bandwidth of the matching factor exp(-|Pz - Py| / sigma)")
    diversity_lower: float = Field(2.5, description="Lower edge of the diversity band (inclusive)")
    diversity_upper: float = Field(4.0, description="Upper edge of the diversity band (inclusive)")
    user_hidden: List[PositiveInt] = Field(default_factory=lambda: [32], description="Hidden widths of the user category network")
    item_hidden: List[PositiveInt] = Field(default_factory=lambda: [32], description="Hidden widths of the item category network")
    feature_hidden: List[PositiveInt] = Field(default_factory=lambda: [32], description="Hidden widths of the feature-mixture network")
    diversity_hidden: List[PositiveInt] = Field(default_factory=lambda: [32], description="Hidden widths of the diversity network")

    @model_validator(mode="after")
    def _check_band(self) -> "HyperParams":
        if self.diversity_lower > self.diversity_upper:
            raise ValueError("diversity_lower must not exceed diversity_upper")
        if self.diversity_active and not (1.0 <= self.diversity_lower and self.diversity_upper <= self.num_ratings):
            raise ValueError(
                f"diversity band must lie within [1, {self.num_ratings}] "
                "(or use lower == upper < 1 to disable it)"
            )
        return self

    @property
    def diversity_active(self) -> bool:
        """lower == upper < 1 is the disabled sentinel: no prediction can fall in it."""
        return not (self.diversity_lower == self.diversity_upper and self.diversity_upper < 1.0)


class AdamConfig(BaseModel):
    """Optimizer settings."""
    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-3, ge=0, description="Learning rate alpha")
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class RunConfig(BaseModel):
    """Everything a recommender training run needs, in one JSON document."""
    model_config = ConfigDict(extra="forbid")

    data_path: str = Field(..., description="ML-100k style ratings file")
    checkpoint_path: str = Field("checkpoint.json", description="Where the trained checkpoint is written")
    epoch_log_path: Optional[str] = Field(None, description="JSON-lines epoch log (optional)")
    test_fraction: float = Field(0.2, gt=0, lt=1)
    epochs: int = Field(50, ge=1)
    batch_size: PositiveInt = 128
    seed: int = 0
    workers: PositiveInt = Field(1, description="Gradient shards per mini-batch (data-parallel mode when > 1)")
    diversity_enabled: bool = Field(True, description="False compiles to the disabled band sentinel")
    hyper: HyperParams
    optimizer: AdamConfig = Field(default_factory=AdamConfig)

    def effective_hyper(self) -> HyperParams:
        if self.diversity_enabled:
            return self.hyper
        return self.hyper.model_copy(update={"diversity_lower": 0.0, "diversity_upper": 0.0})


class TextClfConfig(BaseModel):
    """Settings of the topic-model text classifier demo."""
    model_config = ConfigDict(extra="forbid")

    embed_dim: PositiveInt = 8
    hidden_size: PositiveInt = 16
    num_topics: PositiveInt = 2
    epochs: int = Field(100, ge=1)
    batch_size: PositiveInt = 20
    test_fraction: float = Field(0.2, gt=0, lt=1)
    seed: int = 0
    optimizer: AdamConfig = Field(default_factory=lambda: AdamConfig(lr=0.02))


class EpochRecord(BaseModel):
    """One line of the epoch log."""
    epoch: int
    train_loss: float
    val_rmse: Optional[float] = None
    val_mae: Optional[float] = None


class EvaluationMetrics(BaseModel):
    rmse: float
    mae: float
    n: int


class PlantedReport(BaseModel):
    """Outcome of training on ratings generated by a ground-truth model."""
    num_ratings: int
    num_train: int
    num_test: int
    epochs: int
    rmse: float = Field(..., description="Held-out RMSE of the trained model")
    global_mean_rmse: float = Field(..., description="Held-out RMSE of the mean training rating")
    ratio: float
    passed: bool = Field(..., description="ratio <= threshold")


class ParamBlob(BaseModel):
    shape: List[int]
    data: List[float]


class Vocab(BaseModel):
    users: List[str] = Field(default_factory=list)
    items: List[str] = Field(default_factory=list)


class Checkpoint(BaseModel):
    """Self-describing checkpoint document."""
    format_version: Literal[1] = 1
    hyper: HyperParams
    params: Dict[str, ParamBlob]
    vocab: Vocab


class SuiteResult(BaseModel):
    name: str
    passed: bool
    checks: int = 0
    failures: List[str] = Field(default_factory=list)


class VerificationReport(BaseModel):
    passed: bool
    suites: List[SuiteResult]
