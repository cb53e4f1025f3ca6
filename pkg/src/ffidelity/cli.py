"""Command-line front end.

Every command reads one JSON experiment config and writes deterministic
CSV/JSON artefacts into an output directory::

    ffid train        --config exp.json --out runs/a
    ffid finetune     --config exp.json
    ffid evaluate     --config exp.json --seed 3
    ffid theorem-check --config exp.json
    ffid size-recover --config exp.json --jobs 4
    ffid report       --config exp.json

Exit codes: 0 success, 1 failed verdict (theorem-check only), 2 config
error, 3 numerical failure. ``FFID_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import re
import sys
import types
import typing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .core import Dataset, load_dataset
from .explain import NoiseLadder, get_explainer
from .harness import (
    DEFAULT_GRID,
    FAMILIES,
    GammaDigitTask,
    SweepResult,
    aggregate_reports,
    correlation_report,
    gen_gamma_digit_dataset,
    gen_tiered_dataset,
    run_degradation_experiment,
    run_size_recovery,
)
from .masking import LERF, MORF
from .metrics import MetricConfig
from .model import MlpModel, NumericalError, TrainConfig, finetune, load_model, save_model, train
from .theory import (
    TierSpec,
    TieredClassifier,
    check_theorem,
    e_curve,
    expected_ffid_plus_montecarlo,
    linear_g,
    logistic_g,
    random_world,
    recover_tier_size,
)

log = logging.getLogger("ffidelity")

CONFIG_VERSION = 1
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid experiment configuration; ``key`` is the dotted path."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key, self.line = key, line
        where = f"line {line}: " if line else ""
        what = f"{key}: " if key else ""
        super().__init__(f"{where}{what}{message}")


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    """``kind`` is ``gamma-digit``, ``tiered`` or ``csv``.

    ``csv`` reads ``path`` (training split) and ``eval_path`` (defaults to
    ``path``) in the format of ``core.save_dataset``.
    """

    kind: str = "gamma-digit"
    gamma: float = 0.2
    side: int = 16
    class_count: int = 4
    n_train: int = 2000
    n_eval: int = 400
    background: tuple[float, float] = (0.2, 0.6)
    max_shift: int = 2
    path: str | None = None
    eval_path: str | None = None
    tier_sizes: tuple[int, ...] = (8, 16, 24)
    tier_weights: tuple[float, ...] = (1.0, 0.5, 0.25)
    tier_g: str = "linear"


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (64,)
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 32
    standardize: bool = False
    mask_kind: str = "random"
    patch: tuple[int, int] = (2, 2)


@dataclass(frozen=True)
class MetricSpec:
    alpha_plus: float = 0.5
    alpha_minus: float = 0.5
    beta: float = 0.1
    T: int = 50
    grid: tuple[float, ...] = DEFAULT_GRID


@dataclass(frozen=True)
class WorldSpec:
    sizes: tuple[int, ...]
    weights: tuple[float, ...]
    g: str = "linear"
    steepness: float = 8.0
    midpoint: float = 0.5


@dataclass(frozen=True)
class TheoremSpec:
    """Random worlds per seed plus any explicitly listed ones.

    Each random world is checked at one (alpha, beta) pair, cycling through
    all combinations; explicit worlds are checked at every pair.
    """

    worlds: int = 20
    r_max: int = 4
    td_max: int = 60
    alphas: tuple[float, ...] = (0.3, 0.5, 0.7)
    betas: tuple[float, ...] = (0.05, 0.1, 0.2)
    mc_trials: int = 10000
    explicit: tuple[WorldSpec, ...] = ()


@dataclass(frozen=True)
class SizeRecoverySpec:
    """``betas=None`` picks ``beta = beta_fraction * gamma * alpha_plus`` per task,
    which keeps the truncation threshold below the glyph size."""

    gammas: tuple[float, ...] = (0.1, 0.15, 0.2, 0.25)
    betas: tuple[float, ...] | None = None
    beta_fraction: float = 0.8
    s_max: int | None = None
    rel_band: float = 0.05
    se_mult: float = 3.0
    explainer: str = "planted"


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    metric: MetricSpec = field(default_factory=MetricSpec)
    ladder: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    explainer: str = "ig"
    families: tuple[str, ...] = ("fid", "rfid", "ffid")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs/default"
    theorem: TheoremSpec = field(default_factory=TheoremSpec)
    size_recovery: SizeRecoverySpec = field(default_factory=SizeRecoverySpec)

    def metric_config(self, seed: int) -> MetricConfig:
        m = self.metric
        return MetricConfig(m.alpha_plus, m.alpha_minus, m.beta, m.T, 0.5, seed)

    def train_config(self, seed: int) -> TrainConfig:
        m = self.model
        return TrainConfig(epochs=m.epochs, learning_rate=m.learning_rate, batch_size=m.batch_size, seed=seed,
                           hidden=m.hidden, mask_kind=m.mask_kind, patch=m.patch, standardize=m.standardize)

    def digit_task(self, seed: int, gamma: float | None = None) -> GammaDigitTask:
        d = self.dataset
        return GammaDigitTask(side=d.side, gamma=d.gamma if gamma is None else gamma, class_count=d.class_count,
                              seed=seed, max_shift=d.max_shift, background=d.background)


def _convert(tp, value, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, key)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError("expected an object", key)
        return _build(tp, value, key)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError("expected a list", key)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{key}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"expected {len(args)} entries", key)
        return tuple(_convert(a, v, f"{key}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError("expected true or false", key)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError("expected an integer", key)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError("expected a number", key)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError("expected a string", key)
        return value
    raise TypeError(f"unsupported config type {tp}")


def _build(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError("unknown key", f"{prefix}.{unknown[0]}" if prefix else unknown[0])
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}" if prefix else f.name
        if f.name in data:
            kwargs[f.name] = _convert(hints[f.name], data[f.name], key)
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError("required key is missing", key)
    return cls(**kwargs)


def _check_fraction(v: float, key: str, lo_open: bool = False):
    if not (0.0 < v <= 1.0 if lo_open else 0.0 <= v <= 1.0):
        raise ConfigError(f"must lie in {'(0, 1]' if lo_open else '[0, 1]'}, got {v}", key)


def validate(cfg: ExperimentConfig, base_dir: Path | None = None) -> None:
    """Semantic checks beyond types; raises ``ConfigError``."""
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"unsupported version {cfg.version} (expected {CONFIG_VERSION})", "version")
    d = cfg.dataset
    if d.kind not in ("gamma-digit", "tiered", "csv"):
        raise ConfigError(f"unknown kind {d.kind!r}", "dataset.kind")
    if d.kind == "csv":
        if not d.path:
            raise ConfigError("a csv dataset needs a path", "dataset.path")
        for key, p in (("dataset.path", d.path), ("dataset.eval_path", d.eval_path)):
            if p is not None and not _resolve(p, base_dir).exists():
                raise ConfigError(f"file not found: {p}", key)
    if d.kind == "tiered":
        if len(d.tier_sizes) != len(d.tier_weights):
            raise ConfigError("need one weight per tier", "dataset.tier_weights")
        if d.tier_g not in ("linear", "logistic"):
            raise ConfigError(f"unknown g {d.tier_g!r}", "dataset.tier_g")
    _check_fraction(d.gamma, "dataset.gamma", lo_open=True)
    for key, v in (("dataset.side", d.side), ("dataset.class_count", d.class_count),
                   ("dataset.n_train", d.n_train), ("dataset.n_eval", d.n_eval)):
        if v < 1:
            raise ConfigError("must be >= 1", key)
    m = cfg.metric
    for name in ("alpha_plus", "alpha_minus", "beta"):
        _check_fraction(getattr(m, name), f"metric.{name}")
    if m.T < 1:
        raise ConfigError("must be >= 1", "metric.T")
    if not m.grid or any(not 0 < g <= 1 for g in m.grid) or any(b <= a for a, b in zip(m.grid, m.grid[1:])):
        raise ConfigError("must be increasing values in (0, 1]", "metric.grid")
    try:
        NoiseLadder(cfg.ladder)
    except ValueError as exc:
        raise ConfigError(str(exc), "ladder") from None
    try:
        cfg.train_config(0)
    except ValueError as exc:
        raise ConfigError(str(exc), "model") from None
    bad = sorted(set(cfg.families) - set(FAMILIES))
    if bad or not cfg.families:
        raise ConfigError(f"choose from {list(FAMILIES)}", "families")
    if not cfg.seeds:
        raise ConfigError("need at least one seed", "seeds")
    if cfg.explainer != "planted":
        try:
            get_explainer(cfg.explainer)
        except ValueError as exc:
            raise ConfigError(str(exc), "explainer") from None
    t = cfg.theorem
    for key, vals in (("theorem.alphas", t.alphas), ("theorem.betas", t.betas)):
        if not vals:
            raise ConfigError("need at least one value", key)
        for v in vals:
            _check_fraction(v, key)
    if t.mc_trials < 2:
        raise ConfigError("must be >= 2", "theorem.mc_trials")
    sr = cfg.size_recovery
    if sr.betas is not None and len(sr.betas) != len(sr.gammas):
        raise ConfigError("need one beta per gamma", "size_recovery.betas")
    for g in sr.gammas:
        _check_fraction(g, "size_recovery.gammas", lo_open=True)


def _line_of(text: str, key: str | None) -> int | None:
    """Line of the deepest part of a dotted ``key`` that appears in ``text``."""
    if not key or not text:
        return None
    for part in reversed(key.split(".")):
        leaf = re.sub(r"\[\d+\]$", "", part)
        m = re.search(r'"%s"\s*:' % re.escape(leaf), text)
        if m:
            return text.count("\n", 0, m.start()) + 1
    return None


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse and validate a JSON config; errors carry the offending line."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(exc.msg, line=exc.lineno) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be an object", line=1)
    try:
        cfg = _build(ExperimentConfig, raw)
        validate(cfg, base_dir)
    except ConfigError as exc:
        raise ConfigError(str(exc).split(": ", 1)[-1] if exc.key else str(exc), exc.key,
                          _line_of(text, exc.key)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", "--config") from None
    return parse_config(text, path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    return plain(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical JSON: every field present, keys sorted."""
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()


def _resolve(p: str, base_dir: Path | None) -> Path:
    path = Path(p)
    return path if path.is_absolute() or base_dir is None else base_dir / path


# --- shared pipeline pieces ----------------------------------------------------


def _datasets(cfg: ExperimentConfig, seed: int, base_dir: Path | None):
    d = cfg.dataset
    if d.kind == "gamma-digit":
        task = cfg.digit_task(seed)
        return (gen_gamma_digit_dataset(task, d.n_train, [seed, 1], "train"),
                gen_gamma_digit_dataset(task, d.n_eval, [seed, 2], "eval"))
    if d.kind == "csv":
        tr = load_dataset(_resolve(d.path, base_dir), "train")
        ev = load_dataset(_resolve(d.eval_path or d.path, base_dir), "eval")
        return tr, ev
    raise ConfigError("tiered datasets use the built-in oracle predictor; there is no model to train",
                      "dataset.kind")


def _tiered_world(cfg: ExperimentConfig) -> TieredClassifier:
    d = cfg.dataset
    return _world_from_spec(WorldSpec(d.tier_sizes, d.tier_weights, d.tier_g), "dataset")


def _world_from_spec(spec: WorldSpec, key: str) -> TieredClassifier:
    try:
        if spec.g == "linear":
            g = linear_g(spec.weights, spec.sizes)
        elif spec.g == "logistic":
            g = logistic_g(spec.weights, spec.sizes, spec.steepness, spec.midpoint)
        else:
            raise ValueError(f"unknown g {spec.g!r}")
        return TieredClassifier(TierSpec(spec.sizes), g)
    except ValueError as exc:
        raise ConfigError(str(exc), key) from None


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed{seed}"


def _models(cfg: ExperimentConfig, seed: int, out: Path, base_dir: Path | None, need_r: bool = True,
            write: bool = True):
    """Original and fine-tuned models for ``seed``, reusing checkpoints in ``out``."""
    tr, ev = _datasets(cfg, seed, base_dir)
    sd = _seed_dir(out, seed)
    tcfg = cfg.train_config(seed)
    mpath, rpath = sd / "model.json", sd / "model_r.json"
    if mpath.exists():
        model = load_model(mpath)
    else:
        init = MlpModel.initialize(tr.shape, cfg.model.hidden, tr.class_count, seed)
        model = train(init, tr, tcfg)
        if write:
            sd.mkdir(parents=True, exist_ok=True)
            save_model(model, mpath)
    model_r = None
    if need_r:
        if rpath.exists():
            model_r = load_model(rpath)
        else:
            model_r = finetune(model, tr, cfg.metric.beta, tcfg)
            if write:
                sd.mkdir(parents=True, exist_ok=True)
                save_model(model_r, rpath)
    return tr, ev, model, model_r


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, files: Sequence[Path]) -> Path:
    """Record the config hash and output digests; entries accumulate while the
    config hash stays the same."""
    from . import __version__

    path = out / "manifest.json"
    h = config_hash(cfg)
    doc = {}
    if path.exists():
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError:
            doc = {}
    if doc.get("config_hash") != h:
        doc = {"config_hash": h, "config": config_to_dict(cfg), "version": __version__, "commands": {}, "outputs": {}}
    doc["commands"][command] = sorted(str(f.relative_to(out)) for f in files)
    for f in files:
        doc["outputs"][str(f.relative_to(out))] = _sha256(f)
    doc["outputs"] = dict(sorted(doc["outputs"].items()))
    doc["commands"] = dict(sorted(doc["commands"].items()))
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    return path


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if v is None:
        return ""
    return v


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    """Ordered map, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# --- commands -----------------------------------------------------------------


@dataclass(frozen=True)
class _Job:
    cfg: ExperimentConfig
    seed: int
    out: str
    base_dir: str | None

    @property
    def out_path(self) -> Path:
        return Path(self.out)

    @property
    def base(self) -> Path | None:
        return None if self.base_dir is None else Path(self.base_dir)


def _train_job(job: _Job) -> list[Path]:
    _models(job.cfg, job.seed, job.out_path, job.base, need_r=False)
    return [_seed_dir(job.out_path, job.seed) / "model.json"]


def _finetune_job(job: _Job) -> list[Path]:
    _models(job.cfg, job.seed, job.out_path, job.base, need_r=True)
    sd = _seed_dir(job.out_path, job.seed)
    return [sd / "model.json", sd / "model_r.json"]


def cmd_train(cfg: ExperimentConfig, out: Path, jobs: int = 1, base_dir: Path | None = None) -> list[Path]:
    files = [f for fs in _map(_train_job, [_Job(cfg, s, str(out), _str(base_dir)) for s in cfg.seeds], jobs) for f in fs]
    files.append(write_manifest(out, cfg, "train", files))
    return files


def cmd_finetune(cfg: ExperimentConfig, out: Path, jobs: int = 1, base_dir: Path | None = None) -> list[Path]:
    files = [f for fs in _map(_finetune_job, [_Job(cfg, s, str(out), _str(base_dir)) for s in cfg.seeds], jobs)
             for f in fs]
    files.append(write_manifest(out, cfg, "finetune", files))
    return files


def _str(p: Path | None) -> str | None:
    return None if p is None else str(p)


def _evaluate_job(job: _Job) -> SweepResult:
    cfg, seed = job.cfg, job.seed
    mcfg = cfg.metric_config(seed)
    ladder = NoiseLadder(cfg.ladder, seed=seed)
    if cfg.dataset.kind == "tiered":
        world = _tiered_world(cfg)
        data, planted, oracle = gen_tiered_dataset(world, cfg.dataset.n_eval, [seed, 2])
        if "roar" in cfg.families:
            raise ConfigError("the roar family needs a trainable model", "families")
        return run_degradation_experiment(oracle, oracle, data, lambda m, x: planted, ladder, mcfg,
                                          cfg.families, cfg.metric.grid)
    tr, ev, model, model_r = _models(cfg, seed, job.out_path, job.base, need_r="ffid" in cfg.families)
    if model_r is not None and model_r.finetune_beta is not None \
            and not math.isclose(model_r.finetune_beta, cfg.metric.beta, rel_tol=0, abs_tol=1e-12):
        raise ConfigError(f"checkpoint seed{seed}/model_r.json was fine-tuned with beta={model_r.finetune_beta}, "
                          f"config asks for {cfg.metric.beta}", "metric.beta")
    explainer = get_explainer(cfg.explainer)
    return run_degradation_experiment(model, model_r, ev, explainer, ladder, mcfg, cfg.families,
                                      cfg.metric.grid, train_data=tr, train_cfg=cfg.train_config(seed))


SWEEP_HEADER = ("family", "side", "noise_p", "rho", "seed", "value")
METRIC_HEADER = ("metric", "side", "explainer", "noise_p", "rho", "value", "stddev", "T", "seed")


def _reports_doc(sweeps: Sequence[SweepResult]) -> dict:
    reports = [correlation_report(sw) for sw in sweeps]
    return {
        "per_seed": {str(sw.seed): r.to_dict() for sw, r in zip(sweeps, reports)},
        "aggregate": aggregate_reports(reports),
    }


def cmd_evaluate(cfg: ExperimentConfig, out: Path, jobs: int = 1, base_dir: Path | None = None) -> list[Path]:
    jobs_ = [_Job(cfg, s, str(out), _str(base_dir)) for s in cfg.seeds]
    sweeps = _map(_evaluate_job, jobs_, jobs)
    explainer = "planted" if cfg.dataset.kind == "tiered" else cfg.explainer
    sweep_rows, metric_rows = [], []
    for sw in sweeps:
        for (fam, side, p, rho), v in sw.values.items():
            sweep_rows.append((fam, side, p, rho, sw.seed, v))
            metric_rows.append((fam, side, explainer, p, rho, v, sw.stddev.get((fam, side, p, rho), 0.0),
                                sw.reps.get((fam, side, p, rho), 1), sw.seed))
    files = [
        _write_csv(out / "sweep.csv", SWEEP_HEADER, sweep_rows),
        _write_csv(out / "metrics.csv", METRIC_HEADER, metric_rows),
        _write_json(out / "report.json", _reports_doc(sweeps)),
    ]
    files.append(write_manifest(out, cfg, "evaluate", files))
    return files


def read_sweeps(path: Path) -> list[SweepResult]:
    """Rebuild per-seed sweeps from a sweep CSV."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0].keys()) != SWEEP_HEADER:
        raise ConfigError(f"{path} is not a sweep CSV", "--out")
    by_seed: dict[int, list] = {}
    for r in rows:
        by_seed.setdefault(int(r["seed"]), []).append(r)
    sweeps = []
    for seed in sorted(by_seed):
        rs = by_seed[seed]
        grid = tuple(sorted({float(r["rho"]) for r in rs}))
        ladder = tuple(sorted({float(r["noise_p"]) for r in rs}))
        sw = SweepResult(grid, ladder, seed=seed)
        for r in rs:
            sw.put((r["family"], r["side"], float(r["noise_p"]), float(r["rho"])), float(r["value"]))
        sweeps.append(sw)
    return sweeps


def cmd_report(cfg: ExperimentConfig, out: Path, jobs: int = 1, base_dir: Path | None = None) -> list[Path]:
    sweep_path = out / "sweep.csv"
    if not sweep_path.exists():
        raise ConfigError(f"no sweep.csv in {out}; run evaluate first", "--out")
    doc = _reports_doc(read_sweeps(sweep_path))
    path = _write_json(out / "report.json", doc)
    print(format_report(doc["aggregate"]))
    return [path, write_manifest(out, cfg, "report", [path])]


def format_report(agg: dict) -> str:
    """Plain-text table: one row per (family, statistic), mean ± std across seeds."""
    comps = list(agg["desired"])
    lines = [f"{'family':<8}{'row':<12}" + "".join(f"{c:>20}" for c in comps)]
    for fam, block in agg["families"].items():
        for row, cells in block.items():
            txt = []
            for c in comps:
                cell = cells[c]
                txt.append("-" if cell["mean"] is None else f"{cell['mean']:+.3f} ± {cell['std']:.3f}")
            lines.append(f"{fam:<8}{row:<12}" + "".join(f"{t:>20}" for t in txt))
    return "\n".join(lines)


def _theorem_worlds(cfg: ExperimentConfig) -> list[tuple[str, TieredClassifier, list[tuple[float, float]]]]:
    t = cfg.theorem
    pairs = [(a, b) for a in t.alphas for b in t.betas]
    worlds = []
    for i, spec in enumerate(t.explicit):
        worlds.append((f"explicit{i}", _world_from_spec(spec, f"theorem.explicit[{i}]"), pairs))
    for seed in cfg.seeds:
        gen = np.random.default_rng([seed, 4242])
        for k in range(t.worlds):
            worlds.append((f"s{seed}w{k}", random_world(gen, t.r_max, t.td_max), [pairs[k % len(pairs)]]))
    return worlds


def theorem_check(world: TieredClassifier, alpha: float, beta: float, trials: int, seed) -> dict:
    """Analytic and Monte-Carlo curves plus verdicts for one world."""
    td = world.tiers.td
    ana = e_curve(world, alpha, beta, range(1, td + 1))
    mc, se = [], []
    for s in range(1, td + 1):
        m, e = expected_ffid_plus_montecarlo(world, alpha, beta, s, trials, np.random.default_rng([*seed, s]),
                                             return_stderr=True)
        mc.append(m)
        se.append(e)
    verdict = check_theorem(world, alpha, beta, curve=ana)
    agree = [abs(mc[s - 1] - ana[s]) <= 3 * se[s - 1] + 1e-12 for s in range(1, td + 1)]
    est = recover_tier_size(ana, alpha, beta, td)
    return {
        "sizes": list(world.tiers.sizes), "alpha": alpha, "beta": beta,
        "rising_violations": verdict["rising_violations"], "falling_violations": verdict["falling_violations"],
        "monotone_ok": verdict["ok"], "mc_agreement": float(np.mean(agree)),
        "recovered": est.estimate, "recovery_status": est.status,
        "curve": [(s, ana[s], mc[s - 1], se[s - 1]) for s in range(1, td + 1)],
    }


def cmd_theorem_check(cfg: ExperimentConfig, out: Path, jobs: int = 1, base_dir: Path | None = None,
                      min_agreement: float = 0.99):
    rows, summary = [], []
    for name, world, pairs in _theorem_worlds(cfg):
        for a, b in pairs:
            seed = [int(hashlib.sha256(name.encode()).hexdigest()[:8], 16), int(a * 1000), int(b * 1000)]
            res = theorem_check(world, a, b, cfg.theorem.mc_trials, seed)
            for s, ea, em, se in res.pop("curve"):
                rows.append((name, a, b, s, ea, em, se))
            res["world"] = name
            res["pass"] = bool(res["monotone_ok"])
            summary.append(res)
    agreement = float(np.mean([r["mc_agreement"] for r in summary])) if summary else math.nan
    doc = {"worlds": summary, "all_monotone": all(r["pass"] for r in summary),
           "mc_agreement": agreement, "mc_ok": bool(agreement >= min_agreement)}
    for r in summary:
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['world']} sizes={r['sizes']} alpha={r['alpha']} "
              f"beta={r['beta']} mc_agreement={r['mc_agreement']:.3f} recovered={r['recovered']} "
              f"({r['recovery_status']})")
    files = [
        _write_csv(out / "theorem_curves.csv", ("world", "alpha", "beta", "s", "e_analytic", "e_montecarlo",
                                                 "stderr"), rows),
        _write_json(out / "theorem_summary.json", doc),
    ]
    files.append(write_manifest(out, cfg, "theorem-check", files))
    return files, doc["all_monotone"] and doc["mc_ok"]


def _size_job(args) -> dict:
    cfg, seed, gamma, beta = args
    sr = cfg.size_recovery
    explainer = None if sr.explainer == "planted" else get_explainer(sr.explainer)
    res = run_size_recovery(cfg.digit_task(seed, gamma), beta, cfg.metric.alpha_plus, cfg.metric.T, sr.s_max,
                            sr.rel_band, sr.se_mult, explainer, cfg.train_config(seed),
                            cfg.dataset.n_train, cfg.dataset.n_eval)
    return {"gamma": gamma, "beta": beta, "seed": seed, "target": res.target, "estimate": res.estimate.estimate,
            "status": res.estimate.status, "threshold": res.estimate.threshold, "tolerance": res.tolerance,
            "clean_accuracy": res.clean_accuracy, "rows": res.rows()}


def size_betas(cfg: ExperimentConfig) -> list[float]:
    sr = cfg.size_recovery
    if sr.betas is not None:
        return list(sr.betas)
    return [round(sr.beta_fraction * g * cfg.metric.alpha_plus, 6) for g in sr.gammas]


def cmd_size_recover(cfg: ExperimentConfig, out: Path, jobs: int = 1, base_dir: Path | None = None) -> list[Path]:
    if cfg.dataset.kind != "gamma-digit":
        raise ConfigError("size recovery runs on the gamma-digit task", "dataset.kind")
    tasks = [(cfg, seed, g, b) for g, b in zip(cfg.size_recovery.gammas, size_betas(cfg)) for seed in cfg.seeds]
    results = _map(_size_job, tasks, jobs)
    curve_rows = [(r["gamma"], r["beta"], r["seed"], r["s"], r["ffid_plus"], r["stderr"])
                  for res in results for r in res.pop("rows")]
    summary_rows = [(r["gamma"], r["beta"], r["seed"], r["target"], r["estimate"], r["status"]) for r in results]
    for r in results:
        print(f"gamma={r['gamma']} beta={r['beta']} seed={r['seed']} target={r['target']} "
              f"estimate={r['estimate']} ({r['status']})")
    files = [
        _write_csv(out / "size_curves.csv", ("gamma", "beta", "seed", "s", "ffid_plus", "stderr"), curve_rows),
        _write_csv(out / "size_recovery.csv", ("gamma", "beta", "seed", "target", "estimate", "status"),
                   summary_rows),
        _write_json(out / "size_recovery.json", results),
    ]
    files.append(write_manifest(out, cfg, "size-recover", files))
    return files


# --- entry point ----------------------------------------------------------------


def _setup_logging() -> None:
    level = getattr(logging, os.environ.get("FFID_LOG", "WARNING").upper(), None)
    logging.basicConfig(level=level if isinstance(level, int) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffid", description="Fidelity metrics for explanation evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "train the original model per seed"),
                        ("finetune", "fine-tune with random removals (trains the original if needed)"),
                        ("evaluate", "degradation benchmark: sweep CSVs and correlation report"),
                        ("theorem-check", "analytic vs Monte-Carlo e(s) curves with monotonicity verdicts"),
                        ("size-recover", "recover the glyph size from FFid+ curves"),
                        ("report", "recompute the correlation report from sweep.csv")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="run this seed only")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker processes")
        sp.add_argument("--out", help="output directory (default: output_dir from the config)")
    return p


COMMANDS = {
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "size-recover": cmd_size_recover,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = load_config(args.config)
            base_dir = Path(args.config).resolve().parent
        else:
            cfg, base_dir = ExperimentConfig(), None
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seeds=(args.seed,))
        if args.jobs < 1:
            raise ConfigError("must be >= 1", "--jobs")
        out = Path(args.out or _resolve(cfg.output_dir, base_dir))
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "theorem-check":
            _, ok = cmd_theorem_check(cfg, out, args.jobs, base_dir)
            return EXIT_OK if ok else EXIT_FAILED
        COMMANDS[args.command](cfg, out, args.jobs, base_dir)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
