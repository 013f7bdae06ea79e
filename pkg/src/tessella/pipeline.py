"""Experiment configuration and the on-disk stages shared by the command line and batch scripts.

A workspace directory holds every artifact::

    manifest.jsonl              one SlideRecord per line
    slides/<id>.png, <id>_mask.png
    tiles.csv                   retained tiles of every slide
    pretrain/<name>.tnsr        encoder; state.ckpt and loss.csv next to it
    features/<name>/            one HFSX file per slide + index.jsonl
    models/<head>.tnsr          heads trained on the full corpus
    eval/                       results CSV and summary text per feature set
    cluster/<name>/             k-means model, cluster report, representatives
    heatmaps/<name>/            per-slide, per-cluster heatmaps

Every random draw is seeded from the global seed through a named stream, so
artifacts are a pure function of (config, seed).
"""

from __future__ import annotations

import json
import logging
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AugmentationConfig, AugmentError
from .encoder import EncoderConfig, EncoderError, fingerprint, init_encoder, load_encoder, save_encoder
from .evaluation import Corpus, CVPlan, MetricReport, run_experiment, summary_block, write_results_csv
from .features import CorpusIndex, SlideSource, extract_features
from .interpret import (
    best_cluster,
    kmeans,
    load_cluster_model,
    rank_by_cosine,
    render_heatmap,
    save_cluster_model,
    top_representatives,
    write_cluster_report,
    write_montage,
    write_representatives_csv,
)
from .mil import HEADS, MILError, MILTrainConfig, save_model, train_mil, write_train_log
from .moco import LarsConfig, MoCoConfig, MoCoError, load_state, pretrain, save_state, write_loss_csv
from .slides import (
    MAX_TILES,
    SlideRecord,
    detect_tissue,
    extract_grid,
    generate_nonhistology_tiles,
    generate_synthetic_slide,
    make_corpus_specs,
    read_grid_csv,
    read_manifest,
    read_raster_png,
    read_tiles,
    sample_tiles,
    write_grid_csv,
    write_manifest,
    write_mask_png,
    write_raster_png,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CorpusConfig:
    n_slides: int = 200
    grid_cells: int = 16  # slide side in tiles
    positive_share: float = 0.5
    lesion_range: tuple = (0.06, 0.25)
    tissue_range: tuple = (0.75, 0.9)
    max_tiles: int = MAX_TILES
    min_tissue_fraction: float = 0.5


@dataclass
class PretrainConfig:
    tiles: int = 4096  # tiles sampled from the corpus and held in memory for pretraining
    source: str = "corpus"  # or "nonhistology": synthetic out-of-domain textures


@dataclass
class EvalConfig:
    folds: int = 5
    repeats: int = 5
    stratified: bool = True
    heads: tuple = HEADS


@dataclass
class InterpretConfig:
    k: int = 10
    n_representatives: int = 5
    lesion_threshold: float = 0.5  # a tile counts as lesion when this share of it is lesion
    heatmap_slides: int = 2  # number of slides (lesion-bearing first) to render
    heatmap_scale: int = 8


@dataclass
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    moco: MoCoConfig = field(default_factory=MoCoConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    mil: MILTrainConfig = field(default_factory=MILTrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    interpret: InterpretConfig = field(default_factory=InterpretConfig)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in ("corpus", "pretrain", "eval", "interpret"):
            out[name] = asdict(getattr(self, name))
        out["augment"] = self.augment.to_dict()
        out["encoder"] = self.encoder.to_dict()
        out["moco"] = self.moco.to_dict()
        out["mil"] = self.mil.to_dict()
        # tuples become lists, as they would after a trip through a config file
        return json.loads(json.dumps(out))


_SECTIONS = {
    "corpus": CorpusConfig, "pretrain": PretrainConfig, "eval": EvalConfig, "interpret": InterpretConfig,
}


def _build(cls, section: str, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**values)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    if "seed" not in d:
        raise ConfigError("config must set a global seed")
    top = {"seed", "augment", "encoder", "moco", "mil", *_SECTIONS}
    unknown = set(d) - top
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    try:
        kw = {"seed": int(d["seed"])}
        for name, cls in _SECTIONS.items():
            if name in d:
                kw[name] = _build(cls, name, d[name])
        if "augment" in d:
            kw["augment"] = AugmentationConfig.from_dict(d["augment"])
        if "encoder" in d:
            kw["encoder"] = _build(EncoderConfig, "encoder", d["encoder"])
        if "moco" in d:
            m = dict(d["moco"])
            lars = _build(LarsConfig, "moco.lars", m.pop("lars", {}))
            kw["moco"] = _build(MoCoConfig, "moco", {**m, "lars": lars})
        if "mil" in d:
            kw["mil"] = _build(MILTrainConfig, "mil", d["mil"])
        cfg = ExperimentConfig(**kw)
    except (TypeError, AugmentError, EncoderError, MoCoError, MILError) as exc:
        raise ConfigError(str(exc)) from None
    if cfg.augment.output_size != cfg.encoder.input_size:
        raise ConfigError("augment.output_size must equal encoder.input_size")
    bad = set(cfg.eval.heads) - set(HEADS)
    if bad:
        raise ConfigError(f"unknown heads {sorted(bad)}")
    if cfg.pretrain.source not in ("corpus", "nonhistology"):
        raise ConfigError(f"unknown pretrain source {cfg.pretrain.source!r}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            d = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(d)


def stream_seed(seed: int, name: str) -> int:
    """Seed of the named random stream derived from the global seed."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# workers


def _limited(fn, *args):
    # one BLAS thread per process so results do not depend on how work is spread
    with threadpool_limits(limits=1):
        return fn(*args)


def pmap(fn, items, workers: int = 1):
    """Ordered map, in-process for one worker and over a process pool otherwise."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [_limited(fn, *it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_limited, [fn] * len(items), *zip(*items)))


# ---------------------------------------------------------------------------
# stages


def _slide_job(sid, spec, seed, label, slide_dir):
    raster = generate_synthetic_slide(spec, seed, slide_id=sid)
    write_raster_png(raster, slide_dir / f"{sid}.png")
    write_mask_png(raster.mask, slide_dir / f"{sid}_mask.png")
    return SlideRecord(sid, f"slides/{sid}.png", f"slides/{sid}_mask.png", label)


def synth(cfg: ExperimentConfig, out: Path, workers: int = 1, progress=None) -> list:
    c = cfg.corpus
    specs = make_corpus_specs(c.n_slides, stream_seed(cfg.seed, "corpus"), grid_cells=c.grid_cells,
                              positive_share=c.positive_share, lesion_range=tuple(c.lesion_range),
                              tissue_range=tuple(c.tissue_range))
    slide_dir = out / "slides"
    slide_dir.mkdir(parents=True, exist_ok=True)
    records = []
    # chunks keep memory bounded and let progress be reported
    chunk = max(1, workers) * 4
    for i in range(0, len(specs), chunk):
        part = [(sid, spec, seed, label, slide_dir) for sid, spec, seed, label in specs[i:i + chunk]]
        records += pmap(_slide_job, part, workers)
        if progress is not None:
            progress(len(records), len(specs))
    write_manifest(records, out / "manifest.jsonl")
    return records


def _tile_job(rec: SlideRecord, out: Path, c: CorpusConfig, seed: int):
    raster = read_raster_png(out / rec.raster_path, out / rec.mask_path, slide_id=rec.slide_id)
    grid = extract_grid(raster, detect_tissue(raster), min_tissue_fraction=c.min_tissue_fraction)
    return sample_tiles(grid, c.max_tiles, seed=stream_seed(seed, f"sample/{rec.slide_id}"))


def tile(cfg: ExperimentConfig, out: Path, workers: int = 1) -> dict:
    records = read_manifest(out / "manifest.jsonl")
    grids = pmap(_tile_job, [(r, out, cfg.corpus, cfg.seed) for r in records], workers)
    n = write_grid_csv(grids, out / "tiles.csv")
    logger.info("%d tiles from %d slides", n, len(grids))
    return {g.slide_id: g for g in grids}


def load_grids(out: Path) -> dict:
    if not (out / "tiles.csv").exists():
        raise FileNotFoundError(f"{out / 'tiles.csv'} missing; run the tile step first")
    return read_grid_csv(out / "tiles.csv")


def slide_tiles(out: Path, rec: SlideRecord, grid) -> np.ndarray:
    raster = read_raster_png(out / rec.raster_path, slide_id=rec.slide_id)
    return read_tiles(raster, grid)


def pretraining_tiles(cfg: ExperimentConfig, out: Path, size: int | None = None) -> np.ndarray:
    """The in-memory tile set used for pretraining: a seeded uniform sample over the corpus tiles."""
    n = cfg.pretrain.tiles
    size = size or cfg.encoder.input_size
    if cfg.pretrain.source == "nonhistology":
        return generate_nonhistology_tiles(n, stream_seed(cfg.seed, "nonhistology"), size=size)
    records = {r.slide_id: r for r in read_manifest(out / "manifest.jsonl")}
    grids = load_grids(out)
    pairs = [(sid, i) for sid in sorted(grids) for i in range(len(grids[sid].tiles))]
    if not pairs:
        raise ValueError("corpus has no tiles")
    rng = np.random.default_rng(stream_seed(cfg.seed, "pretrain/tiles"))
    pick = np.sort(rng.choice(len(pairs), size=min(n, len(pairs)), replace=False))
    by_slide: dict = {}
    for j in pick:
        sid, i = pairs[j]
        by_slide.setdefault(sid, []).append(i)
    out_tiles = np.empty((len(pick), size, size, 3), dtype=np.uint8)
    k = 0
    for sid in sorted(by_slide):
        g = grids[sid]
        sub = type(g)([g.tiles[i] for i in by_slide[sid]], g.tile_size, g.stride, sid)
        t = slide_tiles(out, records[sid], sub)
        if t.shape[1] != size:
            raise ValueError(f"tiles are {t.shape[1]}px but the encoder expects {size}px")
        out_tiles[k:k + len(t)] = t
        k += len(t)
    return out_tiles


def pretrain_encoder(cfg: ExperimentConfig, out: Path, name: str = "moco", tiles=None, resume: bool = False,
                     log=None):
    """Pretrain and write pretrain/<name>.tnsr, pretrain/<name>.state.ckpt and pretrain/<name>.loss.csv."""
    pdir = out / "pretrain"
    pdir.mkdir(parents=True, exist_ok=True)
    ckpt = pdir / f"{name}.state.ckpt"
    state = load_state(ckpt) if resume and ckpt.exists() else None
    if tiles is None:
        tiles = pretraining_tiles(cfg, out)
    seed = stream_seed(cfg.seed, f"pretrain/{name}")
    state = pretrain(tiles, cfg.moco, cfg.encoder, cfg.augment, seed=seed, state=state, log=log)
    save_state(state, ckpt)
    save_encoder(state.query_params, pdir / f"{name}.tnsr")
    write_loss_csv(state.history, pdir / f"{name}.loss.csv")
    return state


def random_encoder(cfg: ExperimentConfig, out: Path, name: str = "random"):
    """A frozen, never-trained encoder written like a pretrained one."""
    pdir = out / "pretrain"
    pdir.mkdir(parents=True, exist_ok=True)
    params = init_encoder(cfg.encoder, seed=stream_seed(cfg.seed, f"init/{name}"))
    save_encoder(params, pdir / f"{name}.tnsr")
    return params


def _extract_job(out: Path, rec: SlideRecord, grid, encoder_path, fdir: Path, input_size: int,
                 batch_size: int):
    params = load_encoder(encoder_path)
    if grid is None:
        src = SlideSource(rec.slide_id, rec.label, np.zeros((0, 4)),
                          np.zeros((0, input_size, input_size, 3), np.uint8))
    else:
        src = SlideSource(rec.slide_id, rec.label, grid.coords(), lambda: slide_tiles(out, rec, grid))
    return extract_features([src], params, fdir, batch_size=batch_size).entries[0]


def extract(cfg: ExperimentConfig, out: Path, encoder_path, name: str | None = None, progress=None,
            batch_size: int = 64, workers: int = 1) -> CorpusIndex:
    """Encode every slide of the manifest into features/<name>/; slides are spread over ``workers``."""
    params = load_encoder(encoder_path)
    name = name or Path(encoder_path).stem
    fdir = out / "features" / name
    index_path = fdir / "index.jsonl"
    if index_path.exists():
        index_path.unlink()
    records = read_manifest(out / "manifest.jsonl")
    grids = load_grids(out)
    fp = fingerprint(params)
    jobs = [(out, rec, grids.get(rec.slide_id), Path(encoder_path), fdir, cfg.encoder.input_size, batch_size)
            for rec in records]
    index = CorpusIndex(fp)
    for i, entry in enumerate(pmap(_extract_job, jobs, workers)):
        index.add(entry, fp)
        if progress is not None:
            progress(i + 1, entry.slide_id, entry.n_tiles)
    index.write(index_path)
    return index


def load_corpus(out: Path, name: str) -> Corpus:
    fdir = out / "features" / name
    return Corpus.from_index(CorpusIndex.read(fdir / "index.jsonl"), fdir)


def evaluate(cfg: ExperimentConfig, out: Path, name: str, heads=None, workers: int = 1, progress=None) -> list:
    corpus = load_corpus(out, name)
    plan = CVPlan(cfg.eval.folds, cfg.eval.repeats, stream_seed(cfg.seed, "cv"), cfg.eval.stratified)
    reports = []
    for head in heads or cfg.eval.heads:
        with threadpool_limits(limits=1):
            reports.append(run_experiment(head, corpus, plan, cfg.mil, workers=workers,
                                          progress=progress))
    edir = out / "eval" / name
    edir.mkdir(parents=True, exist_ok=True)
    write_results_csv(reports, edir / "results.csv")
    (edir / "summary.txt").write_text(summary_block(reports, f"features: {name}"))
    return reports


def train_heads(cfg: ExperimentConfig, out: Path, name: str, heads=None) -> dict:
    corpus = load_corpus(out, name)
    mdir = out / "models" / name
    mdir.mkdir(parents=True, exist_ok=True)
    models = {}
    for head in heads or cfg.eval.heads:
        with threadpool_limits(limits=1):
            m = train_mil(head, corpus.bags, corpus.labels, cfg.mil, seed=stream_seed(cfg.seed, f"train/{head}"))
        save_model(m, mdir / f"{head}.tnsr")
        write_train_log(m, mdir / f"{head}.log.csv")
        models[head] = m
    return models


def tile_truth(corpus: Corpus, grids: dict, threshold: float) -> np.ndarray:
    return np.concatenate([grids[sid].lesion_fractions() >= threshold for sid in corpus.slide_ids]).astype(int)


def cluster(cfg: ExperimentConfig, out: Path, name: str):
    """k-means over the tiles of training slides, cluster-vs-lesion AUC table, representatives."""
    corpus = load_corpus(out, name)
    records = {r.slide_id: r for r in read_manifest(out / "manifest.jsonl")}
    keep = [i for i, sid in enumerate(corpus.slide_ids) if records[sid].split_hint == "train"]
    corpus = corpus.subset(keep)
    grids = load_grids(out)
    X = np.concatenate(corpus.bags)
    row_ids = [(sid, i) for sid, b in zip(corpus.slide_ids, corpus.bags) for i in range(len(b))]
    ic = cfg.interpret
    model = kmeans(X, ic.k, seed=stream_seed(cfg.seed, "kmeans"), fingerprint=corpus.fingerprint)
    truth = tile_truth(corpus, grids, ic.lesion_threshold)
    best, table = best_cluster(model, X, truth)
    cdir = out / "cluster" / name
    cdir.mkdir(parents=True, exist_ok=True)
    save_cluster_model(model, cdir / "kmeans.tnsr")
    write_cluster_report(table, cdir / "report.csv")
    (cdir / "best.txt").write_text(f"{best}\n")
    reps = top_representatives(model, X, ic.n_representatives)
    write_representatives_csv(reps, row_ids, cdir / "representatives.csv")
    montage = {}
    for c, members in reps.items():
        montage[c] = [_one_tile(out, records[row_ids[i][0]], grids[row_ids[i][0]], row_ids[i][1]) for i, _ in members]
    write_montage(montage, cdir / "montage.png", n=ic.n_representatives)
    return model, best, table


def _one_tile(out, rec, grid, i):
    sub = type(grid)([grid.tiles[i]], grid.tile_size, grid.stride, grid.slide_id)
    return slide_tiles(out, rec, sub)[0]


def heatmaps(cfg: ExperimentConfig, out: Path, name: str, slide_ids=None) -> list:
    """One heatmap per cluster for each requested slide; cosine similarity to the centroid per tile."""
    model = load_cluster_model(out / "cluster" / name / "kmeans.tnsr")
    corpus = load_corpus(out, name)
    if model.fingerprint != corpus.fingerprint:
        raise ValueError("cluster model and features come from different encoders")
    grids = load_grids(out)
    ic = cfg.interpret
    if slide_ids is None:
        order = sorted(range(len(corpus)), key=lambda i: (-int(corpus.labels[i]), corpus.slide_ids[i]))
        slide_ids = [corpus.slide_ids[i] for i in order[:ic.heatmap_slides]]
    hdir = out / "heatmaps" / name
    hdir.mkdir(parents=True, exist_ok=True)
    written = []
    pos = {sid: i for i, sid in enumerate(corpus.slide_ids)}
    for sid in slide_ids:
        if sid not in pos:
            raise KeyError(f"unknown slide {sid!r}")
        feats = corpus.bags[pos[sid]]
        g = grids[sid]
        for c in range(model.k):
            scores = rank_by_cosine(feats, model.centroids[c], c).scores()
            path = hdir / f"{sid}_c{c}.png"
            render_heatmap(g, scores, path, scale=ic.heatmap_scale, vrange=(-1.0, 1.0))
            written.append(path)
    return written


def write_reports(reports, out: Path, name: str) -> None:
    edir = out / "eval" / name
    edir.mkdir(parents=True, exist_ok=True)
    write_results_csv(reports, edir / "results.csv")
    (edir / "summary.txt").write_text(summary_block(reports, f"features: {name}"))


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "CorpusConfig",
    "PretrainConfig",
    "EvalConfig",
    "InterpretConfig",
    "MetricReport",
    "config_from_dict",
    "load_config",
    "stream_seed",
    "pmap",
    "synth",
    "tile",
    "load_grids",
    "pretraining_tiles",
    "pretrain_encoder",
    "random_encoder",
    "extract",
    "load_corpus",
    "evaluate",
    "train_heads",
    "cluster",
    "heatmaps",
    "tile_truth",
]
