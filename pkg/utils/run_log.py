"""
Run log - JSON-lines epoch records and an optional plotly training-curve page.
"""
import json
import logging
from pathlib import Path
from typing import List, Sequence, Union

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from core.models import EpochRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class EpochLogWriter:
    """Appends one JSON object per epoch; the file is truncated on open."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")

    def __call__(self, record: EpochRecord) -> None:
        with open(self.path, "a") as f:
            f.write(json.dumps(record.model_dump()) + "\n")


def read_epoch_log(path: PathLike) -> List[EpochRecord]:
    with open(path, "r") as f:
        return [EpochRecord.model_validate_json(line) for line in f if line.strip()]


def epoch_frame(records: Sequence[EpochRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in records], columns=["epoch", "train_loss", "val_rmse", "val_mae"])


def create_training_curve(records: Sequence[EpochRecord], title: str = "Training curve") -> go.Figure:
    """Training loss on the left axis, validation RMSE / MAE on the right when present."""
    df = epoch_frame(records)
    fig = make_subplots(specs=[[{"secondary_y": True}]])
    fig.add_trace(go.Scatter(x=df["epoch"], y=df["train_loss"], mode="lines+markers", name="train loss (MSE)"),
                  secondary_y=False)
    for column, label in (("val_rmse", "validation RMSE"), ("val_mae", "validation MAE")):
        if df[column].notna().any():
            fig.add_trace(go.Scatter(x=df["epoch"], y=df[column], mode="lines", name=label), secondary_y=True)
    fig.update_layout(title=title, xaxis_title="epoch", hovermode="x unified", height=450)
    fig.update_yaxes(title_text="train loss", secondary_y=False)
    fig.update_yaxes(title_text="rating error", secondary_y=True)
    return fig


def write_training_curve(records: Sequence[EpochRecord], path: PathLike) -> None:
    create_training_curve(records).write_html(str(path), include_plotlyjs="cdn")
    logger.info("Wrote training curve to %s", path)
