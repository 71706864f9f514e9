"""
iGraph - command-line entry point.

    python app.py train --config run.json [--plot curve.html]
    python app.py eval --checkpoint checkpoint.json --data ratings.tsv [--baseline]
    python app.py predict --checkpoint checkpoint.json --user 196 --item 242
    python app.py verify
    python app.py demo-textclf (--corpus corpus.tsv | --planted 200) [--config textclf.json]
    python app.py planted [--hyper hyper.json]

Results are one JSON document on stdout; logs go to stderr.
Exit codes: 0 ok, 1 config error, 2 data error, 3 verification failure.
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from core.data_ingest import load_corpus, load_movielens, reindex, split
from core.errors import ConfigError, IGraphError, UnknownNameError
from core.experiments import PLANTED_LR, run_planted_experiment
from core.models import AdamConfig, HyperParams, RunConfig, TextClfConfig, Vocab
from core.recommender import SemanticRecommender
from core.textclf import make_planted_corpus, run_demo
from core.trainer import evaluate, global_mean_metrics, train, user_mean_metrics
from core.verification import run_verification
from utils.checkpoint import load_checkpoint, save_checkpoint
from utils.run_log import EpochLogWriter, write_training_curve

logger = logging.getLogger("igraph")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


def emit(document: dict) -> None:
    print(json.dumps(document))


def _resolve(base: Path, path: Optional[str]) -> Optional[str]:
    """Config paths are relative to the config file's directory."""
    if path is None:
        return None
    p = Path(path)
    return str(p if p.is_absolute() else base / p)


def load_run_config(path: str) -> RunConfig:
    config = RunConfig.model_validate_json(Path(path).read_text())
    base = Path(path).resolve().parent
    return config.model_copy(update={
        "data_path": _resolve(base, config.data_path),
        "checkpoint_path": _resolve(base, config.checkpoint_path),
        "epoch_log_path": _resolve(base, config.epoch_log_path),
    })


def cmd_train(args: argparse.Namespace) -> int:
    config = load_run_config(args.config)
    if args.data:
        config = config.model_copy(update={"data_path": args.data})
    if args.checkpoint:
        config = config.model_copy(update={"checkpoint_path": args.checkpoint})
    hyper = config.effective_hyper()

    dataset = load_movielens(config.data_path, hyper.num_ratings)
    train_ds, test_ds = split(dataset, config.test_fraction, config.seed)
    model = SemanticRecommender.create(hyper, dataset.num_users, dataset.num_items, seed=config.seed)
    on_epoch = EpochLogWriter(config.epoch_log_path) if config.epoch_log_path else None
    result = train(
        model,
        train_ds,
        config.optimizer,
        config.epochs,
        config.seed,
        batch_size=config.batch_size,
        val_ds=test_ds if len(test_ds) else None,
        workers=config.workers,
        on_epoch=on_epoch,
    )
    vocab = Vocab(users=list(dataset.user_vocab), items=list(dataset.item_vocab))
    digest = save_checkpoint(result.model, vocab, config.checkpoint_path)
    if args.plot:
        write_training_curve(result.epoch_log, args.plot)

    last = result.epoch_log[-1]
    emit({
        "checkpoint": config.checkpoint_path,
        "sha256": digest,
        "epochs": len(result.epoch_log),
        "num_train": len(train_ds),
        "num_test": len(test_ds),
        "train_loss": last.train_loss,
        "val_rmse": last.val_rmse,
        "val_mae": last.val_mae,
    })
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, vocab = load_checkpoint(args.checkpoint)
    dataset = reindex(load_movielens(args.data, model.hyper.num_ratings), vocab.users, vocab.items)
    document = evaluate(model, dataset).model_dump()
    if args.baseline:
        document["baseline"] = {
            "global_mean_rmse": global_mean_metrics(dataset, dataset).rmse,
            "user_mean_rmse": user_mean_metrics(dataset, dataset).rmse,
        }
    emit(document)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    model, vocab = load_checkpoint(args.checkpoint)
    lookup = reindex_ids(vocab)
    user = lookup("user", args.user)
    item = lookup("item", args.item)
    print(json.dumps(model.predict(user, item)))
    return EXIT_OK


def reindex_ids(vocab: Vocab):
    tables = {"user": {raw: i for i, raw in enumerate(vocab.users)},
              "item": {raw: i for i, raw in enumerate(vocab.items)}}

    def lookup(kind: str, raw: str) -> int:
        if raw not in tables[kind]:
            raise UnknownNameError(f"unknown {kind} id '{raw}'")
        return tables[kind][raw]

    return lookup


def cmd_verify(args: argparse.Namespace) -> int:
    report = run_verification(seed=args.seed)
    emit(report.model_dump())
    for suite in report.suites:
        for failure in suite.failures:
            logger.error("%s: %s", suite.name, failure)
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_demo_textclf(args: argparse.Namespace) -> int:
    config = TextClfConfig.model_validate_json(Path(args.config).read_text()) if args.config else TextClfConfig()
    if args.planted:
        corpus = make_planted_corpus(num_docs=args.planted, seed=config.seed)
    elif args.corpus:
        corpus = load_corpus(args.corpus)
    else:
        raise ConfigError("demo-textclf needs --corpus or --planted")
    result = run_demo(corpus, config)
    emit({
        "accuracy": result.accuracy,
        "num_train": result.num_train,
        "num_test": result.num_test,
        "degenerate": result.degenerate,
        "final_loss": result.epoch_losses[-1] if result.epoch_losses else None,
    })
    return EXIT_OK


def cmd_planted(args: argparse.Namespace) -> int:
    if args.hyper:
        hyper = HyperParams.model_validate_json(Path(args.hyper).read_text())
    else:
        hyper = HyperParams(sigma=args.sigma)
    report = run_planted_experiment(
        hyper, AdamConfig(lr=args.lr), num_ratings=args.num_ratings, epochs=args.epochs, seed=args.seed
    )
    emit(report.model_dump())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="igraph", description="Neural / probabilistic / logic computation graphs")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the recommender from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--data", help="override data_path")
    p.add_argument("--checkpoint", help="override checkpoint_path")
    p.add_argument("--plot", help="write an HTML training curve")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="RMSE / MAE of a checkpoint on a ratings file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", action="store_true", help="add global-mean and per-user-mean RMSE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predicted rating of one (user, item) pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user", required=True)
    p.add_argument("--item", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("verify", help="run the property suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("demo-textclf", help="train and score the topic-model text classifier")
    source = p.add_mutually_exclusive_group()
    source.add_argument("--corpus")
    source.add_argument("--planted", type=int, metavar="N", help="generate N planted two-topic documents")
    p.add_argument("--config")
    p.set_defaults(func=cmd_demo_textclf)

    p = sub.add_parser("planted", help="learn back ratings generated by a ground-truth model")
    p.add_argument("--hyper", help="HyperParams JSON")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--num-ratings", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=PLANTED_LR, help="Adam learning rate")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_planted)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (IGraphError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
