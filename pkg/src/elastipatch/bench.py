"""Experiment harness: named sweeps over perturbations, samplers and
training regimes, with CSV/JSON results and patch-layout visualization.

Every sweep point evaluates the model on the validation split with
per-sample generators derived from (seed, experiment, axis value, sample
position), so identity points agree exactly across experiments and reruns
are idempotent. Results are written as a CSV with header
``experiment,seed,param,value,tokens,accuracy`` plus a JSON mirror carrying
the full configuration echo.
"""

from __future__ import annotations

import csv
import json
import math
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .augment import TrainAugmentConfig
from .data import DatasetSpec, split_indices, synth_shapes
from .errors import ConfigError
from .extract import Image, load_image, save_image
from .geometry import (
    add_redundant_patches,
    block_drop,
    block_rescale,
    make_density_grid,
    make_grid,
    rasterize_coverage,
)
from .model import (
    ModelConfig,
    ModelParams,
    TrainConfig,
    evaluate,
    load_checkpoint,
    params_from_checkpoint,
    save_checkpoint,
    train,
)
from .perturb import PerturbConfig, apply_pipeline, subset_indices
from .sampling import central_sampling, edge_sampling

CSV_HEADER = ("experiment", "seed", "param", "value", "tokens", "accuracy")

# combined-perturbation setting used by tradeoff/stability sweeps
FULL_PERTURB = PerturbConfig(s1=0.5, s2=2.0, q=0.5, d=0.5)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment run: which sweep, on which checkpoint and dataset."""

    experiment: str
    checkpoint: str
    dataset: DatasetSpec
    out: str = "sweep"
    seeds: tuple[int, ...] = (0,)
    values: tuple | None = None
    eval_limit: int | None = None

    def echo(self) -> dict:
        return {
            "experiment": self.experiment,
            "checkpoint": self.checkpoint,
            "dataset": self.dataset.to_dict(),
            "out": self.out,
            "seeds": list(self.seeds),
            "values": list(self.values) if self.values is not None else None,
            "eval_limit": self.eval_limit,
        }


@dataclass(frozen=True)
class SweepRow:
    experiment: str
    seed: int
    param: str
    value: float
    tokens: float
    accuracy: float

    def key(self):
        return (self.experiment, self.param, self.value, self.seed)


@dataclass
class SweepResult:
    """Rows of one experiment plus the configuration they came from."""

    rows: list[SweepRow]
    config: dict = field(default_factory=dict)

    def sorted_rows(self):
        return sorted(self.rows, key=lambda r: (r.param, r.value, r.seed))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(CSV_HEADER)
            for r in self.sorted_rows():
                w.writerow([r.experiment, r.seed, r.param, repr(r.value), r.tokens, r.accuracy])

    def write_json(self, path):
        payload = {
            "config": self.config,
            "rows": [
                {
                    "experiment": r.experiment,
                    "seed": r.seed,
                    "param": r.param,
                    "value": r.value,
                    "tokens": r.tokens,
                    "accuracy": r.accuracy,
                }
                for r in self.sorted_rows()
            ],
        }
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def read_csv_rows(path) -> list[SweepRow]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ConfigError(f"unexpected CSV header {header}, want {list(CSV_HEADER)}")
        for rec in reader:
            rows.append(
                SweepRow(
                    experiment=rec[0],
                    seed=int(rec[1]),
                    param=rec[2],
                    value=float(rec[3]),
                    tokens=float(rec[4]),
                    accuracy=float(rec[5]),
                )
            )
    return rows


@dataclass(frozen=True)
class SweepPoint:
    """One axis point: how to sample/perturb, and the value to record."""

    param: str
    value: float
    perturb: PerturbConfig | None = None
    sampler: str = "grid"
    sampler_params: dict | None = None
    builder_key: str | None = None  # custom patch-set builder
    checkpoint_value: float | None = None  # substituted into the path pattern


def _geom(lo: float, hi: float, n: int) -> list[float]:
    return [float(lo * (hi / lo) ** (i / (n - 1))) for i in range(n)]


def _scale_sweep(n_tokens):
    return [SweepPoint("scale", v, PerturbConfig(s1=v, s2=v)) for v in _geom(0.5, 2.0, 9)]


def _dropout_sweep(n_tokens):
    return [SweepPoint("dropout", d, PerturbConfig(d=d)) for d in np.linspace(0.0, 0.8, 9)]


def _shake_sweep(n_tokens):
    return [SweepPoint("shake", q, PerturbConfig(q=q)) for q in np.linspace(0.0, 0.5, 9)]


def _shake_dropout(n_tokens):
    pts = []
    for t in range(9):
        q = 0.5 * t / 8.0
        d = 0.8 * t / 8.0
        pts.append(SweepPoint("shake|dropout", q, PerturbConfig(q=q, d=d)))
    return pts


def _shake_scale(n_tokens):
    pts = []
    for t in range(-8, 9, 2):
        s = 2.0 ** (t / 8.0)
        q = 0.5 * abs(t) / 8.0
        pts.append(SweepPoint("scale|shake", s, PerturbConfig(s1=s, s2=s, q=q)))
    return pts


def _dropout_scale(n_tokens):
    pts = []
    for t in range(-8, 9, 2):
        s = 2.0 ** (t / 8.0)
        d = 0.8 * abs(t) / 8.0
        pts.append(SweepPoint("scale|dropout", s, PerturbConfig(s1=s, s2=s, d=d)))
    return pts


def _grid_density(n_tokens):
    side = int(round(math.sqrt(n_tokens)))
    ns = sorted({max(1, side // 4), side // 2, side, side * 2} | {side - 2, side + 4})
    return [
        SweepPoint("grid_side", float(n), sampler="density", sampler_params={"n": int(n)})
        for n in ns
        if n >= 1
    ]


def _dropout_vs_rescale(n_tokens):
    side = int(round(math.sqrt(n_tokens)))
    max_blocks = (side // 2) ** 2
    ks = sorted({0, max_blocks // 4, max_blocks // 2, 3 * max_blocks // 4, max_blocks})
    pts = []
    for k in ks:
        pts.append(SweepPoint("rescale_blocks", float(k), builder_key=f"rescale:{k}"))
        pts.append(SweepPoint("drop_blocks", float(k), builder_key=f"drop:{k}"))
    return pts


def _redundancy(n_tokens):
    ks = [0, n_tokens // 8, n_tokens // 4, n_tokens // 2, n_tokens]
    return [SweepPoint("redundant", float(k), builder_key=f"redundant:{k}") for k in sorted(set(ks))]


def _sampler_curve(n_tokens):
    side = int(round(math.sqrt(n_tokens)))
    grid_ns = [n for n in (2, 3, 4, 5, 6, side) if n <= side]
    quad_targets = [t for t in (4, 7, 16, 25, 37, 49, n_tokens) if (t - 4) % 3 == 0 and t <= n_tokens]
    pts = [
        SweepPoint("grid", float(n * n), sampler="density", sampler_params={"n": n})
        for n in sorted(set(grid_ns))
    ]
    pts += [
        SweepPoint("central", float(t), sampler="central", sampler_params={"target": t})
        for t in quad_targets
    ]
    pts += [
        SweepPoint("edge", float(t), sampler="edge", sampler_params={"target": t})
        for t in quad_targets
    ]
    return pts


def _training_tradeoff(n_tokens):
    return [
        SweepPoint("elastic_fraction", f, FULL_PERTURB, checkpoint_value=f)
        for f in (0.0, 0.15, 0.3, 0.7, 1.0)
    ]


def _seed_stability(n_tokens):
    return [SweepPoint("perturbed", 0.0, FULL_PERTURB)]


REGISTRY = {
    "scale_sweep": _scale_sweep,
    "dropout_sweep": _dropout_sweep,
    "shake_sweep": _shake_sweep,
    "shake_dropout": _shake_dropout,
    "shake_scale": _shake_scale,
    "dropout_scale": _dropout_scale,
    "grid_density": _grid_density,
    "dropout_vs_rescale": _dropout_vs_rescale,
    "redundancy": _redundancy,
    "sampler_curve": _sampler_curve,
    "training_tradeoff": _training_tradeoff,
    "seed_stability": _seed_stability,
}


def _entropy(seed: int, experiment: str, value: float) -> tuple[int, ...]:
    """Derived-seed prefix: master seed, experiment hash, axis-value hash."""
    return (
        int(seed),
        zlib.crc32(experiment.encode()),
        zlib.crc32(repr(float(value)).encode()),
    )


def _make_builder(key: str, spec, r: int):
    """Patch-set builders for experiments that modify the grid directly."""
    kind, _, arg = key.partition(":")
    k = int(arg)
    blocks_x = (spec.width // r) // 2
    blocks_y = (spec.height // r) // 2
    all_blocks = [(bx, by) for by in range(blocks_y) for bx in range(blocks_x)]

    def builder(i, rng):
        P = make_grid(spec, r)
        if kind == "redundant":
            return add_redundant_patches(P, k, 0.5, 2.0, rng) if k else P
        chosen = sorted(subset_indices(len(all_blocks), k, rng))
        for bi in chosen:
            if kind == "rescale":
                P = block_rescale(P, all_blocks[bi])
            else:
                P = block_drop(P, all_blocks[bi], rng)
        return P

    return builder


def _val_indices(dataset, checkpoint_path, eval_limit):
    """Recover the validation split recorded in the checkpoint metadata."""
    _, tensors = load_checkpoint(checkpoint_path)
    val_fraction = float(tensors.get("meta.val_fraction", np.array(1.0 / 6.0)))
    split_seed = int(tensors.get("meta.split_seed", np.array(0.0)))
    _, val_idx = split_indices(len(dataset), val_fraction, split_seed)
    if eval_limit is not None:
        val_idx = val_idx[:eval_limit]
    return val_idx


def run_experiment(cfg: ExperimentConfig) -> SweepResult:
    """Execute one registered sweep and write `<out>.csv` and `<out>.json`.

    Reruns are idempotent: rows already present in an existing JSON output
    with an identical configuration echo are reused rather than recomputed.
    """
    if cfg.experiment not in REGISTRY:
        raise ConfigError(
            f"unknown experiment {cfg.experiment!r}; known: {sorted(REGISTRY)}"
        )
    dataset = synth_shapes(cfg.dataset)
    points = REGISTRY[cfg.experiment]((cfg.dataset.side // _peek_r(cfg)) ** 2)
    if cfg.values is not None:
        points = [p for p in points if p.value in set(cfg.values)]
        if not points:
            raise ConfigError(f"no registry points match values {cfg.values}")

    json_path = f"{cfg.out}.json"
    done: dict[tuple, SweepRow] = {}
    if os.path.exists(json_path):
        with open(json_path) as f:
            previous = json.load(f)
        if previous.get("config") == cfg.echo():
            for r in previous["rows"]:
                row = SweepRow(**r)
                done[row.key()] = row

    cache: dict[str, tuple[ModelParams, np.ndarray]] = {}

    def load_point(value):
        path = cfg.checkpoint
        if "{value}" in path:
            path = path.replace("{value}", _fmt_value(value))
        if path not in cache:
            cache[path] = (
                params_from_checkpoint(path),
                _val_indices(dataset, path, cfg.eval_limit),
            )
        return cache[path]

    rows: list[SweepRow] = []
    for point in points:
        params, dataset_val = load_point(point.checkpoint_value)
        builder = (
            _make_builder(point.builder_key, dataset.native_spec, params.config.r)
            if point.builder_key
            else None
        )
        for seed in cfg.seeds:
            key = (cfg.experiment, point.param, point.value, seed)
            if key in done:
                rows.append(done[key])
                continue
            acc = evaluate(
                params,
                dataset,
                indices=dataset_val,
                perturb=point.perturb,
                sampler=point.sampler,
                sampler_params=point.sampler_params,
                seed_entropy=_entropy(seed, cfg.experiment, point.value),
                patchset_builder=builder,
            )
            tokens = _expected_tokens(point, params.config, dataset.native_spec)
            rows.append(
                SweepRow(
                    experiment=cfg.experiment,
                    seed=int(seed),
                    param=point.param,
                    value=float(point.value),
                    tokens=tokens,
                    accuracy=acc,
                )
            )
    result = SweepResult(rows=rows, config=cfg.echo())
    result.write_csv(f"{cfg.out}.csv")
    result.write_json(json_path)
    return result


def _fmt_value(value) -> str:
    if value is None:
        return ""
    as_int = int(value)
    return str(as_int) if as_int == value else str(value)


def _peek_r(cfg: ExperimentConfig) -> int:
    path = cfg.checkpoint.replace("{value}", _fmt_value(0.0))
    model_cfg, _ = load_checkpoint(path)
    return model_cfg.r


def _expected_tokens(point: SweepPoint, model_cfg: ModelConfig, spec) -> float:
    n = (spec.width // model_cfg.r) * (spec.height // model_cfg.r)
    if point.sampler in ("central", "edge"):
        n = point.sampler_params["target"]
    elif point.sampler == "density":
        n = point.sampler_params["n"] ** 2
    if point.builder_key:
        kind, _, arg = point.builder_key.partition(":")
        k = int(arg)
        if kind == "redundant":
            n = n + k
        else:
            n = n - 3 * k
    if point.perturb is not None:
        n = n - point.perturb.resolve_d(n)
    return float(n)


# ---------------------------------------------------------------------------
# Training entry point


def train_cmd(config: dict, resume: str | None = None):
    """Train a model from a parsed config and write checkpoint + history CSV.

    Returns (checkpoint_path, history). The checkpoint stores optimizer
    moments and split metadata so training can resume deterministically.
    """
    for key in ("dataset", "out"):
        if key not in config:
            raise ConfigError(f"training config is missing required key {key!r}")
    dataset_spec = DatasetSpec.from_dict(config["dataset"])
    model_cfg = ModelConfig(**config.get("model", {}))
    aug = TrainAugmentConfig(**config.get("augment", {}))
    regime = TrainConfig(augment=aug, **config.get("regime", {}))
    dataset = synth_shapes(dataset_spec)

    start_epoch = 0
    resume_tensors = None
    if resume:
        cfg_loaded, tensors = load_checkpoint(resume)
        if cfg_loaded != model_cfg:
            raise ConfigError("resume checkpoint model config differs from requested config")
        start_epoch = int(tensors["meta.epoch"]) + 1
        resume_tensors = tensors

    params, history, extras = train(
        model_cfg, dataset, regime, start_epoch=start_epoch, resume_tensors=resume_tensors
    )

    out = config["out"]
    save_checkpoint(out, params, extra=extras)
    hist_path = os.path.splitext(out)[0] + "_history.csv"
    with open(hist_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for row in history:
            w.writerow(list(row))
    return out, history


# ---------------------------------------------------------------------------
# Visualization


_BORDER = np.array([1.0, 0.05, 0.05])
_OVERLAP_TINT = np.array([1.0, 0.95, 0.3])


def visualize_patches(
    image_path,
    out_path,
    sampler: str = "grid",
    sampler_params: dict | None = None,
    perturb: PerturbConfig | None = None,
    r: int = 16,
    seed: int = 0,
) -> Image:
    """Render a patch layout over an image: red borders, tinted overlap.

    The output image has the same dimensions as the input and is written to
    `out_path` (PNG or PPM by suffix).
    """
    img = load_image(image_path)
    return visualize_patchset_image(img, out_path, sampler, sampler_params, perturb, r, seed)


def visualize_patchset_image(
    img: Image,
    out_path,
    sampler: str = "grid",
    sampler_params: dict | None = None,
    perturb: PerturbConfig | None = None,
    r: int = 16,
    seed: int = 0,
) -> Image:
    sampler_params = sampler_params or {}
    spec = img.spec
    if sampler == "grid":
        P = make_grid(spec, r)
    elif sampler == "density":
        P = make_density_grid(spec, r, sampler_params["n"])
    elif sampler == "central":
        P = central_sampling(spec, r, sampler_params["target"])
    elif sampler == "edge":
        P = edge_sampling(img, r, sampler_params["target"])
    else:
        raise ConfigError(f"unknown sampler {sampler!r}")
    if perturb is not None:
        P = apply_pipeline(P, perturb, np.random.default_rng(seed))

    rgb = np.repeat(img.pixels, 3, axis=0) if spec.channels == 1 else img.pixels.copy()
    counts = rasterize_coverage(P).counts
    overlap = counts >= 2
    for c in range(3):
        plane = rgb[c]
        plane[overlap] = 0.45 * plane[overlap] + 0.55 * _OVERLAP_TINT[c]
    from .geometry import footprint_pixel_box

    for p in P.patches:
        x0, x1, y0, y1 = footprint_pixel_box(p, P.r, spec.width, spec.height)
        if x0 >= x1 or y0 >= y1:
            continue
        for c in range(3):
            rgb[c, y0, x0:x1] = _BORDER[c]
            rgb[c, y1 - 1, x0:x1] = _BORDER[c]
            rgb[c, y0:y1, x0] = _BORDER[c]
            rgb[c, y0:y1, x1 - 1] = _BORDER[c]
    out_spec = replace(spec, channels=3)
    out = Image(spec=out_spec, pixels=np.clip(rgb, 0.0, 1.0))
    save_image(out, out_path)
    return out
