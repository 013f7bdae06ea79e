"""Command line: ``tessella <command> --config exp.toml --out WORKSPACE``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import functools
import logging
import os
import sys
from pathlib import Path

import click

from . import pipeline as pl
from .core.params import CheckpointError
from .evaluation import EvalError
from .features import FeatureStoreError
from .interpret import InterpretError
from .mil import HEADS, MILError
from .moco import MoCoError
from .slides import SlideError

logger = logging.getLogger("tessella")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def default_workers() -> int:
    v = os.environ.get("TESSELLA_THREADS")
    if v is None:
        return 1
    try:
        n = int(v)
    except ValueError:
        raise click.UsageError(f"TESSELLA_THREADS must be an integer, got {v!r}") from None
    return max(1, n)


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def command(fn):
    """Shared options, config loading and the mapping from exceptions to exit codes."""

    @click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                  help="TOML experiment config; defaults apply when omitted.")
    @click.option("--seed", type=int, default=None, help="Overrides the config's global seed.")
    @click.option("--workers", type=int, default=None, help="Process cap (default: TESSELLA_THREADS or 1).")
    @click.option("--out", "out", type=click.Path(file_okay=False), required=True, help="Workspace directory.")
    @click.option("--force", is_flag=True, help="Overwrite existing outputs.")
    @functools.wraps(fn)
    def wrapper(config_path, seed, workers, out, force, **kw):
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        try:
            cfg = pl.load_config(config_path) if config_path else pl.ExperimentConfig()
            if seed is not None:
                cfg.seed = seed
        except pl.ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        n = workers if workers is not None else default_workers()
        if n < 1:
            _fail(EXIT_CONFIG, "--workers must be >= 1")
        try:
            fn(cfg=cfg, out=Path(out), workers=n, force=force, **kw)
        except pl.ConfigError as exc:
            _fail(EXIT_CONFIG, str(exc))
        except (FloatingPointError, ArithmeticError) as exc:
            _fail(EXIT_NUMERIC, str(exc))
        except MoCoError as exc:
            # configuration problems are caught while loading; what is left is divergence
            _fail(EXIT_NUMERIC, str(exc))
        except (SlideError, FeatureStoreError, CheckpointError, MILError, EvalError, InterpretError,
                FileNotFoundError, KeyError, ValueError) as exc:
            _fail(EXIT_DATA, str(exc) or type(exc).__name__)

    return wrapper


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Self-supervised tile features and multiple-instance slide classification."""


@main.command()
@command
def synth(cfg, out, workers, force):
    """Generate the synthetic slide corpus and its manifest."""
    if out.exists() and any(out.iterdir()) and not force:
        raise pl.ConfigError(f"{out} is not empty; pass --force to overwrite")
    records = pl.synth(cfg, out, workers, progress=lambda i, n: logger.info("synth %d/%d", i, n))
    n_pos = sum(r.label for r in records)
    logger.info("%d slides (%d with lesions) -> %s", len(records), n_pos, out / "manifest.jsonl")


@main.command()
@command
def tile(cfg, out, workers, force):
    """Detect tissue and record the retained tile grid of every slide."""
    grids = pl.tile(cfg, out, workers)
    logger.info("%d tiles -> %s", sum(len(g) for g in grids.values()), out / "tiles.csv")


@main.command()
@click.option("--name", default=None, help="Encoder name (default: moco, or nonhistology for that source).")
@click.option("--resume", is_flag=True, help="Continue from the saved pretraining state.")
@click.option("--random-init", is_flag=True, help="Write an untrained encoder instead of pretraining.")
@command
def pretrain(cfg, out, workers, force, name, resume, random_init):
    """Self-supervised pretraining of the tile encoder."""
    if random_init:
        name = name or "random"
        pl.random_encoder(cfg, out, name)
        logger.info("untrained encoder -> %s", out / "pretrain" / f"{name}.tnsr")
        return
    name = name or ("moco" if cfg.pretrain.source == "corpus" else cfg.pretrain.source)
    target = out / "pretrain" / f"{name}.tnsr"
    if target.exists() and not (force or resume):
        raise pl.ConfigError(f"{target} exists; pass --force to retrain or --resume to continue")
    if cfg.moco.momentum == 1.0:
        logger.warning("moco.momentum = 1: the key encoder will stay at its initialization")

    def log(step, epoch, loss, lr, elapsed):
        if step % 50 == 0 or step == 1:
            logger.info("step %d epoch %d loss %.4f lr %.4g (%.0fs)", step, epoch, loss, lr, elapsed)

    with pl.threadpool_limits(limits=1):
        state = pl.pretrain_encoder(cfg, out, name, resume=resume, log=log)
    logger.info("%d steps -> %s", state.step, target)


@main.command()
@click.option("--encoder", "encoder_path", type=click.Path(dir_okay=False), default=None,
              help="Encoder checkpoint (default: WORKSPACE/pretrain/moco.tnsr).")
@click.option("--name", default=None, help="Feature set name (default: encoder file stem).")
@command
def extract(cfg, out, workers, force, encoder_path, name):
    """Encode every retained tile with a frozen encoder."""
    encoder_path = Path(encoder_path) if encoder_path else out / "pretrain" / "moco.tnsr"
    index = pl.extract(cfg, out, encoder_path, name, workers=workers,
                       progress=lambda i, sid, n: logger.info("%s: %d tiles", sid, n) if i % 20 == 0 else None)
    dim = cfg.encoder.feature_dim
    logger.info("%d slides, %d x %d features, fingerprint %s", len(index),
                sum(e.n_tiles for e in index.entries), dim, index.fingerprint.hex()[:16])


def _heads(head):
    return [head] if head else None


@main.command()
@click.option("--features", "name", default="moco", help="Feature set name under WORKSPACE/features.")
@click.option("--head", type=click.Choice(HEADS), default=None, help="Train one head (default: all configured).")
@command
def train(cfg, out, workers, force, name, head):
    """Train MIL heads on the whole corpus."""
    models = pl.train_heads(cfg, out, name, _heads(head))
    for h, m in models.items():
        logger.info("%s: final train loss %.4f", h, m.history[-1] if m.history else float("nan"))


@main.command(name="eval")
@click.option("--features", "name", default="moco", help="Feature set name under WORKSPACE/features.")
@click.option("--head", type=click.Choice(HEADS), default=None, help="Evaluate one head (default: all configured).")
@command
def eval_cmd(cfg, out, workers, force, name, head):
    """Repeated k-fold cross-validation of MIL heads."""
    reports = pl.evaluate(cfg, out, name, _heads(head), workers)
    click.echo((out / "eval" / name / "summary.txt").read_text(), nl=False)
    for r in reports:
        if len(r.runs) != cfg.eval.folds * cfg.eval.repeats:
            raise EvalError(f"{r.head}: {len(r.runs)} runs recorded")


@main.command()
@click.option("--features", "name", default="moco", help="Feature set name under WORKSPACE/features.")
@command
def cluster(cfg, out, workers, force, name):
    """k-means over tile features, lesion AUC per cluster, representative tiles."""
    model, best, table = pl.cluster(cfg, out, name)
    logger.info("best cluster %d, lesion AUC %.4f", best, table[best][1])


@main.command()
@click.option("--features", "name", default="moco", help="Feature set name under WORKSPACE/features.")
@click.option("--slide", "slides", multiple=True, help="Slide id (repeatable; default: from config).")
@command
def heatmap(cfg, out, workers, force, name, slides):
    """Per-cluster similarity heatmaps for selected slides."""
    paths = pl.heatmaps(cfg, out, name, list(slides) or None)
    logger.info("%d heatmaps -> %s", len(paths), out / "heatmaps" / name)


if __name__ == "__main__":
    main()
