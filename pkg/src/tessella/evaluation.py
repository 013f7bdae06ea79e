"""Cross-validated evaluation of MIL heads: AUC, one-vs-all macro AUC, repeated k-fold, reporting."""

from __future__ import annotations

import csv
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_DOWN, Decimal

import numpy as np
from scipy.stats import rankdata
from sklearn.model_selection import KFold, StratifiedKFold

from .features import CorpusIndex
from .mil import MILTrainConfig, predict, train_mil

__all__ = [
    "EvalError",
    "CVPlan",
    "Corpus",
    "RunResult",
    "MetricReport",
    "auc",
    "one_vs_all",
    "repeated_kfold",
    "run_seed",
    "run_experiment",
    "run_holdout",
    "format_report",
    "write_results_csv",
    "summary_block",
]


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic, ties counted one half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise EvalError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise EvalError("labels must be binary 0/1")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC needs both classes present")
    if not np.isfinite(s).all():
        raise EvalError("scores must be finite")
    # midranks handle ties; integer-valued sums keep the statistic exact
    ranks = rankdata(s, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def one_vs_all(scores, labels, n_classes: int | None = None) -> tuple[np.ndarray, float]:
    """Per-class AUCs of column c against (label == c), and their unweighted mean."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).reshape(-1)
    if s.ndim != 2 or s.shape[0] != y.size:
        raise EvalError(f"scores must be (n, C) with n = {y.size}")
    C = n_classes or s.shape[1]
    if s.shape[1] != C:
        raise EvalError(f"expected {C} score columns, got {s.shape[1]}")
    missing = sorted(set(range(C)) - set(y.tolist()))
    if missing:
        raise EvalError(f"class(es) {missing} absent from the labels")
    per_class = np.array([auc(s[:, c], (y == c).astype(int)) for c in range(C)])
    return per_class, float(per_class.mean())


def format_report(mean: float, std: float) -> str:
    """Percent mean to one decimal (truncated) and std in tenths of a percent, e.g. ``65.3(137)``."""
    if not 0 <= mean <= 1:
        raise EvalError(f"mean must lie in [0, 1], got {mean}")
    if std < 0:
        raise EvalError("std must be non-negative")
    # decimal from the shortest repr so that 0.653 becomes exactly 65.3, not 65.29999...; the
    # snap to 1e-9 absorbs summation noise such as a mean of 0.9099999999999999 for runs at 0.91
    pct = (Decimal(repr(float(mean))) * 100).quantize(Decimal("1e-9"))
    pct = pct.quantize(Decimal("0.1"), rounding=ROUND_DOWN)
    s = int((Decimal(repr(float(std))) * 1000).quantize(Decimal("1")))
    return f"{pct}({s})"


# ---------------------------------------------------------------------------
# fold plans


@dataclass
class CVPlan:
    folds: int = 5
    repeats: int = 5
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.folds < 2 or self.repeats < 1:
            raise EvalError("need folds >= 2 and repeats >= 1")

    def repeat_seed(self, repeat: int) -> int:
        return int(np.random.SeedSequence([self.seed, repeat, 0x464F4C44]).generate_state(1)[0])

    def assignment(self, slide_ids, labels) -> list[dict]:
        """Per repeat, a mapping slide_id -> validation fold index."""
        out = [{} for _ in range(self.repeats)]
        ids = list(slide_ids)
        for r, f, _, valid in repeated_kfold(ids, labels, self):
            for i in valid:
                out[r][ids[i]] = f
        return out


def run_seed(plan_seed: int, repeat: int, fold: int) -> int:
    """Model seed of one (repeat, fold) run."""
    return int(np.random.SeedSequence([plan_seed, repeat, fold]).generate_state(1)[0])


def repeated_kfold(slide_ids, labels, plan: CVPlan):
    """List of (repeat, fold, train_idx, valid_idx); indices refer to positions in ``slide_ids``."""
    n = len(slide_ids)
    y = np.asarray(labels).reshape(-1)
    if y.size != n:
        raise EvalError("one label per slide required")
    if len(set(slide_ids)) != n:
        raise EvalError("duplicate slide ids")
    if plan.stratified:
        _, counts = np.unique(y, return_counts=True)
        if counts.min() < plan.folds:
            raise EvalError(f"stratified {plan.folds}-fold needs >= {plan.folds} slides per class, "
                            f"smallest class has {counts.min()}")
    elif n < plan.folds:
        raise EvalError(f"{n} slides cannot fill {plan.folds} folds")
    out = []
    X = np.zeros((n, 1))
    for r in range(plan.repeats):
        seed = plan.repeat_seed(r)
        if plan.stratified:
            splitter = StratifiedKFold(plan.folds, shuffle=True, random_state=seed)
        else:
            splitter = KFold(plan.folds, shuffle=True, random_state=seed)
        for f, (tr, va) in enumerate(splitter.split(X, y)):
            out.append((r, f, tr, va))
    return out


# ---------------------------------------------------------------------------
# experiments


@dataclass
class Corpus:
    """Bags of frozen tile features with slide labels, all produced by one encoder."""

    slide_ids: list
    bags: list
    labels: np.ndarray
    fingerprint: bytes = b""

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not (len(self.slide_ids) == len(self.bags) == len(self.labels)):
            raise EvalError("slide_ids, bags and labels must have equal length")

    def __len__(self) -> int:
        return len(self.slide_ids)

    @classmethod
    def from_index(cls, index: CorpusIndex, base=None) -> "Corpus":
        """Load every slide of an index; slides without tiles are dropped with a warning."""
        ids, bags, labels = [], [], []
        dropped = []
        for entry, fm in zip(index.entries, index.load(base)):
            if fm.is_degenerate:
                dropped.append(entry.slide_id)
                continue
            ids.append(entry.slide_id)
            bags.append(fm.data)
            labels.append(entry.label)
        if dropped:
            warnings.warn(f"dropping {len(dropped)} slide(s) without tiles: {dropped[:5]}", stacklevel=2)
        return cls(ids, bags, np.array(labels), index.fingerprint)

    def subset(self, idx) -> "Corpus":
        return Corpus([self.slide_ids[i] for i in idx], [self.bags[i] for i in idx], self.labels[idx],
                      self.fingerprint)


@dataclass
class RunResult:
    repeat: int
    fold: int
    auc: float  # binary AUC, or macro AUC for multiclass
    per_class: list = field(default_factory=list)  # multiclass only


@dataclass
class MetricReport:
    head: str
    runs: list
    n_classes: int = 2
    fingerprint: bytes = b""

    @property
    def values(self) -> np.ndarray:
        return np.array([r.auc for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        # sample standard deviation; a single run has std 0
        v = self.values
        return float(v.std(ddof=1)) if v.size > 1 and np.ptp(v) > 0 else 0.0

    def class_mean_std(self, c: int) -> tuple[float, float]:
        v = np.array([r.per_class[c] for r in self.runs])
        return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 and np.ptp(v) > 0 else 0.0

    @property
    def formatted(self) -> str:
        return format_report(self.mean, self.std)


def _one_run(head, train, valid, cfg, seed, repeat, fold) -> RunResult:
    model = train_mil(head, train.bags, train.labels, cfg, seed=seed)
    p = predict(model, valid.bags)
    if not np.isfinite(p).all():
        raise FloatingPointError(f"non-finite predictions in repeat {repeat} fold {fold}")
    if cfg.n_classes == 2:
        return RunResult(repeat, fold, auc(p, valid.labels))
    per_class, macro = one_vs_all(p, valid.labels, cfg.n_classes)
    return RunResult(repeat, fold, macro, per_class.tolist())


def _run_job(args):
    return _one_run(*args)


def run_experiment(head: str, corpus: Corpus, plan: CVPlan | None = None, train_cfg: MILTrainConfig | None = None,
                   workers: int = 1, progress=None) -> MetricReport:
    """Train on every (repeat, fold) split and score the held-out fold.

    Each run's model seed depends only on (plan seed, repeat, fold), so the
    report does not depend on ``workers``.
    """
    plan = plan or CVPlan()
    cfg = train_cfg or MILTrainConfig()
    if cfg.n_classes != len(np.unique(corpus.labels)):
        raise EvalError(f"config has {cfg.n_classes} classes, corpus has {len(np.unique(corpus.labels))}")
    jobs = [(head, corpus.subset(tr), corpus.subset(va), cfg, run_seed(plan.seed, r, f), r, f)
            for r, f, tr, va in repeated_kfold(corpus.slide_ids, corpus.labels, plan)]
    runs = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, res in enumerate(ex.map(_run_job, jobs)):
                runs.append(res)
                if progress is not None:
                    progress(i + 1, len(jobs), res)
    else:
        for i, job in enumerate(jobs):
            runs.append(_run_job(job))
            if progress is not None:
                progress(i + 1, len(jobs), runs[-1])
    return MetricReport(head, runs, cfg.n_classes, corpus.fingerprint)


def run_holdout(head: str, train: Corpus, test: Corpus, train_cfg: MILTrainConfig | None = None,
                seeds=(0, 1, 2, 3, 4)) -> MetricReport:
    """Independent runs on a fixed train/test split, one per seed."""
    cfg = train_cfg or MILTrainConfig()
    runs = [_one_run(head, train, test, cfg, s, i, 0) for i, s in enumerate(seeds)]
    return MetricReport(head, runs, cfg.n_classes, train.fingerprint)


# ---------------------------------------------------------------------------
# output


def write_results_csv(reports, path) -> None:
    """Rows ``repeat,fold,class,auc``; binary runs use class ``1``, multiclass adds a ``macro`` row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["head", "repeat", "fold", "class", "auc"])
        for rep in reports:
            for run in rep.runs:
                if rep.n_classes == 2:
                    w.writerow([rep.head, run.repeat, run.fold, 1, repr(run.auc)])
                    continue
                for c, v in enumerate(run.per_class):
                    w.writerow([rep.head, run.repeat, run.fold, c, repr(float(v))])
                w.writerow([rep.head, run.repeat, run.fold, "macro", repr(run.auc)])


def summary_block(reports, title: str = "") -> str:
    lines = [title] if title else []
    for rep in reports:
        line = f"{rep.head:<8} AUC {rep.formatted:>10}  runs={len(rep.runs)}"
        if rep.n_classes > 2:
            parts = [format_report(*rep.class_mean_std(c)) for c in range(rep.n_classes)]
            line += "  per-class " + " ".join(parts)
        lines.append(line)
    return "\n".join(lines) + "\n"
