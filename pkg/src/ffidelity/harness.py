"""Degradation benchmark: sparsity sweeps over a ladder of increasingly
noisy explainers, summarised by Spearman correlations against the known
ground-truth order (more noise = less faithful)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import Dataset, RngStream, count_for
from .explain import NoiseLadder
from .masking import LERF, MORF
from .metrics import MetricConfig, fid_minus, fid_plus, ffid, rfid, side_keys
from .model import MlpModel, Predictor, TrainConfig, accuracy, finetune, roar_ablate, roar_retrain, train
from .theory import SizeEstimate, TierOracle, TieredClassifier, recover_tier_size

log = logging.getLogger(__name__)

__all__ = [
    "COMPARISONS",
    "CorrelationReport",
    "DEFAULT_GRID",
    "FAMILIES",
    "GammaDigitTask",
    "SizeRecoveryResult",
    "SweepResult",
    "aggregate_reports",
    "auc_trapezoid",
    "correlation_report",
    "digit_models",
    "ffid_plus_curve",
    "gen_gamma_digit_dataset",
    "gen_tiered_dataset",
    "planted_foreground_scores",
    "run_degradation_experiment",
    "run_size_recovery",
    "spearman",
]

DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
FAMILIES = ("fid", "roar", "rfid", "ffid")
# comparison name -> desired correlation
COMPARISONS = {"MoRF vs GT": -1.0, "LeRF vs GT": 1.0, "MoRF vs LeRF": -1.0}


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties.

    Returns ``nan`` when either side is constant.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D sequences of equal length")
    n = len(x)
    if n < 2:
        raise ValueError("spearman needs at least two points")
    rx, ry = rankdata(x), rankdata(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        return math.nan
    if len(np.unique(rx)) == n and len(np.unique(ry)) == n:
        d2 = float(np.sum((rx - ry) ** 2))
        return 1.0 - 6.0 * d2 / (n * (n * n - 1))
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.clip(rx @ ry / math.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


def auc_trapezoid(grid: Sequence[float], values: Sequence[float]) -> float:
    """Trapezoidal area under ``values`` over ``grid``, divided by the grid span."""
    g = np.asarray(grid, dtype=float)
    v = np.asarray(values, dtype=float)
    if g.shape != v.shape or g.ndim != 1:
        raise ValueError("grid and values must be 1-D and the same length")
    if len(g) == 1:
        return float(v[0])
    span = g[-1] - g[0]
    if span <= 0:
        raise ValueError("grid must be increasing")
    return float(np.sum((v[1:] + v[:-1]) * np.diff(g)) / 2.0 / span)


@dataclass
class SweepResult:
    """Metric values keyed by ``(family, side, noise_p, rho)``.

    ``stddev`` (same keys) holds the spread over repetitions for sampled
    metrics and 0 for deterministic ones; ``reps`` the repetition count.
    """

    grid: tuple[float, ...]
    ladder: tuple[float, ...]
    values: dict = field(default_factory=dict)
    seed: int = 0
    stddev: dict = field(default_factory=dict)
    reps: dict = field(default_factory=dict)

    def put(self, key: tuple, value: float, stddev: float = 0.0, reps: int = 1) -> None:
        self.values[key] = float(value)
        self.stddev[key] = float(stddev)
        self.reps[key] = int(reps)

    @property
    def families(self) -> list[str]:
        seen = []
        for fam, *_ in self.values:
            if fam not in seen:
                seen.append(fam)
        return seen

    def curve(self, family: str, side: str, p: float) -> np.ndarray:
        return np.array([self.values[(family, side, p, rho)] for rho in self.grid])

    def rows(self) -> list[dict]:
        return [
            {"family": fam, "side": side, "noise_p": p, "rho": rho, "seed": self.seed, "value": v}
            for (fam, side, p, rho), v in self.values.items()
        ]


@dataclass
class CorrelationReport:
    """Spearman summaries per metric family.

    ``macro[family][comparison]`` correlates sparsity-AUCs across the
    ladder; ``micro[family][comparison]`` holds one value per sparsity
    (``nan`` where undefined); ``micro_rank`` ranks families at each
    sparsity by distance to the desired correlation (1 = best).
    """

    macro: dict
    micro: dict
    micro_rank: dict
    grid: tuple[float, ...]

    def micro_mean(self, family: str, comparison: str) -> float:
        vals = np.asarray(self.micro[family][comparison], dtype=float)
        ok = ~np.isnan(vals)
        return float(vals[ok].mean()) if ok.any() else math.nan

    def micro_undefined(self, family: str, comparison: str) -> int:
        return int(np.isnan(np.asarray(self.micro[family][comparison], dtype=float)).sum())

    def to_dict(self) -> dict:
        out = {"desired": dict(COMPARISONS), "grid": list(self.grid), "families": {}}
        for fam in self.macro:
            out["families"][fam] = {
                "macro": {c: _json_num(v) for c, v in self.macro[fam].items()},
                "micro": {c: _json_num(self.micro_mean(fam, c)) for c in COMPARISONS},
                "micro_undefined": {c: self.micro_undefined(fam, c) for c in COMPARISONS},
                "micro_rank": {c: _json_num(v) for c, v in self.micro_rank[fam].items()},
                "micro_per_rho": {c: [_json_num(v) for v in self.micro[fam][c]] for c in COMPARISONS},
            }
        return out


def _json_num(v):
    return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)


def correlation_report(sweep: SweepResult, ladder: Sequence[float] | NoiseLadder | None = None) -> CorrelationReport:
    """Spearman correlations of every family's MoRF/LeRF scores against the
    ground-truth order (ascending noise) and against each other."""
    ps = tuple(ladder.proportions if isinstance(ladder, NoiseLadder) else (ladder or sweep.ladder))
    gt = np.arange(len(ps), dtype=float)
    macro, micro = {}, {}
    for fam in sweep.families:
        morf = np.array([sweep.curve(fam, MORF, p) for p in ps])
        lerf = np.array([sweep.curve(fam, LERF, p) for p in ps])
        if len(ps) < 2:
            macro[fam] = {c: math.nan for c in COMPARISONS}
            micro[fam] = {c: [math.nan] * len(sweep.grid) for c in COMPARISONS}
            continue
        auc_m = [auc_trapezoid(sweep.grid, row) for row in morf]
        auc_l = [auc_trapezoid(sweep.grid, row) for row in lerf]
        macro[fam] = {
            "MoRF vs GT": spearman(auc_m, gt),
            "LeRF vs GT": spearman(auc_l, gt),
            "MoRF vs LeRF": spearman(auc_m, auc_l),
        }
        micro[fam] = {
            "MoRF vs GT": [spearman(morf[:, k], gt) for k in range(len(sweep.grid))],
            "LeRF vs GT": [spearman(lerf[:, k], gt) for k in range(len(sweep.grid))],
            "MoRF vs LeRF": [spearman(morf[:, k], lerf[:, k]) for k in range(len(sweep.grid))],
        }
    micro_rank = {fam: {} for fam in micro}
    fams = list(micro)
    for comp, want in COMPARISONS.items():
        ranks = np.zeros((len(fams), len(sweep.grid)))
        for k in range(len(sweep.grid)):
            # undefined correlations rank last
            dist = [abs(want - micro[f][comp][k]) if not math.isnan(micro[f][comp][k]) else math.inf for f in fams]
            ranks[:, k] = rankdata(dist)
        for i, fam in enumerate(fams):
            micro_rank[fam][comp] = float(ranks[i].mean())
    return CorrelationReport(macro, micro, micro_rank, tuple(sweep.grid))


def aggregate_reports(reports: Sequence[CorrelationReport]) -> dict:
    """Mean and standard deviation across seeds, nan-aware, per table cell."""
    if not reports:
        raise ValueError("no reports to aggregate")
    out = {"desired": dict(COMPARISONS), "seeds": len(reports), "families": {}}
    for fam in reports[0].macro:
        block = {}
        for row in ("macro", "micro", "micro_rank"):
            cells = {}
            for comp in COMPARISONS:
                if row == "macro":
                    vals = [r.macro[fam][comp] for r in reports]
                elif row == "micro":
                    vals = [r.micro_mean(fam, comp) for r in reports]
                else:
                    vals = [r.micro_rank[fam][comp] for r in reports]
                arr = np.array(vals, dtype=float)
                ok = arr[~np.isnan(arr)]
                cells[comp] = {
                    "mean": float(ok.mean()) if ok.size else None,
                    "std": float(ok.std()) if ok.size else None,
                    "defined": int(ok.size),
                }
            block[row] = cells
        out["families"][fam] = block
    return out


def run_degradation_experiment(model: Predictor, model_r: Predictor, data: Dataset, base_explainer,
                               ladder: NoiseLadder, cfg: MetricConfig,
                               families: Iterable[str] = ("fid", "rfid", "ffid"),
                               grid: Sequence[float] = DEFAULT_GRID,
                               train_data: Dataset | None = None,
                               train_cfg: TrainConfig | None = None) -> SweepResult:
    """Score every (family, side, noise level, sparsity) cell.

    Score maps come from ``base_explainer`` applied to the original
    ``model`` and are shared by all families. ``fid``/``rfid`` evaluate
    ``model``, ``ffid`` evaluates the fine-tuned ``model_r`` and ``roar``
    retrains ``model`` on ablated ``train_data`` for every cell.
    """
    families = tuple(families)
    unknown = set(families) - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown metric families {sorted(unknown)}")
    grid = tuple(float(g) for g in grid)
    base_scores = base_explainer(model, data.inputs)
    degraded = ladder.apply(base_scores)
    sweep = SweepResult(grid, ladder.proportions, seed=cfg.seed)
    n, td = len(data), data.td

    keys = {}
    if {"rfid", "ffid"} & set(families):
        keys = {side: side_keys(cfg.seed, n, cfg.T, td, side) for side in (MORF, LERF)}

    roar_scores = None
    if "roar" in families:
        if train_data is None or train_cfg is None or not isinstance(model, MlpModel):
            raise ValueError("the roar family needs train_data, train_cfg and an MlpModel")
        train_base = base_explainer(model, train_data.inputs)
        roar_scores = NoiseLadder(ladder.proportions, seed=ladder.seed + 7919).apply(train_base)
        clean_acc = accuracy(model, data.inputs, data.labels)

    for p in ladder.proportions:
        scores = degraded[p]
        for rho in grid:
            c = MetricConfig(cfg.alpha_plus, cfg.alpha_minus, cfg.beta, cfg.T, rho, cfg.seed)
            for fam in families:
                if fam == "fid":
                    sweep.put((fam, MORF, p, rho), fid_plus(model, data, scores, rho).mean)
                    sweep.put((fam, LERF, p, rho), fid_minus(model, data, scores, rho).mean)
                elif fam in ("rfid", "ffid"):
                    metric, m = (rfid, model) if fam == "rfid" else (ffid, model_r)
                    for side in (MORF, LERF):
                        v = metric(m, data, scores, c, side, keys=keys[side])
                        sweep.put((fam, side, p, rho), v.mean, v.std, cfg.T)
                elif fam == "roar":
                    for side in (MORF, LERF):
                        retrained = roar_retrain(model, train_data, None, rho, train_cfg, side=side,
                                                 scores=roar_scores[p])
                        ablated = roar_ablate(data.inputs, scores, rho, side)
                        sweep.put((fam, side, p, rho), clean_acc - accuracy(retrained, ablated, data.labels))
        log.info("noise level %.2f done", p)
    return sweep


# --- synthetic data ---------------------------------------------------------


def gen_tiered_dataset(world: TieredClassifier, n: int, rng, shape: tuple[int, int] | None = None):
    """Marker-coded inputs for a tiered world.

    Every sample gets a random assignment of cells to tiers; a cell of tier
    ``k`` holds the marker ``r - k`` (1-based tiers, so tier 1 holds the
    largest marker). Labels are 0 ("correct") with probability ``g(c)``
    and 1 otherwise. Returns ``(dataset, planted_scores, oracle)``; the
    planted score of tier ``k`` is ``(r - k + 1) / r``.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    sizes = np.asarray(world.tiers.sizes)
    r, td = len(sizes), int(sizes.sum())
    t, d = shape if shape is not None else (td, 1)
    if t * d != td:
        raise ValueError("shape must hold exactly the tier cells")
    tier_of = np.repeat(np.arange(r), sizes)
    markers = np.arange(r, 0, -1, dtype=float)
    inputs = np.empty((n, td))
    scores = np.empty((n, td))
    for i in range(n):
        perm = gen.permutation(tier_of)
        inputs[i] = markers[perm]
        scores[i] = (r - perm) / r
    p_correct = float(world.g(sizes))
    labels = (gen.random(n) >= p_correct).astype(int)
    data = Dataset(inputs.reshape(n, t, d), labels, 2, "eval", {"p_correct": p_correct})
    return data, scores.reshape(n, t, d), TierOracle(world, (t, d), markers)


@dataclass(frozen=True)
class GammaDigitTask:
    """Digit-like task whose foreground covers a fraction ``gamma`` of the image."""

    side: int = 16
    gamma: float = 0.2
    class_count: int = 4
    seed: int = 0
    max_shift: int = 2
    background: tuple[float, float] = (0.2, 0.6)
    foreground: float = 1.0

    @property
    def td(self) -> int:
        return self.side * self.side

    @property
    def foreground_count(self) -> int:
        return count_for(self.gamma, self.td)


def _glyph(cls: int, count: int, box: int) -> np.ndarray:
    """``count`` pixels of class ``cls``'s glyph inside a ``box x box`` frame.

    0 horizontal bar, 1 vertical bar, 2 plus sign, 3 square ring; further
    classes cycle through diagonal bands.
    """
    yy, xx = np.mgrid[0:box, 0:box]
    yy, xx = yy.ravel(), xx.ravel()
    mid = (box - 1) / 2.0
    dy, dx = np.abs(yy - mid), np.abs(xx - mid)
    kind = cls
    if kind == 0:
        key = (np.floor(dy), yy, xx)  # rows grow outward from the middle
    elif kind == 1:
        key = (np.floor(dx), xx, yy)
    elif kind == 2:
        key = (np.minimum(dy, dx), np.maximum(dy, dx), yy, xx)
    elif kind == 3:
        ring = np.maximum(dy, dx)
        key = (-np.floor(ring), np.arctan2(yy - mid, xx - mid), yy, xx)
    else:
        offs = (yy - xx) % (kind - 1)
        key = (offs, np.abs(yy - xx), yy, xx)
    order = np.lexsort(tuple(reversed(key)))
    if count > box * box:
        raise ValueError("glyph does not fit")
    g = np.zeros(box * box, dtype=bool)
    g[order[:count]] = True
    return g.reshape(box, box)


def gen_gamma_digit_dataset(task: GammaDigitTask, n: int, rng, split: str = "train") -> Dataset:
    """Class glyphs of exactly ``round(gamma * side**2)`` pixels on noise.

    Glyphs sit in a centred box, jittered by up to ``max_shift`` pixels.
    The foreground mask of each sample is kept in ``meta["foreground"]``.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    side, k = task.side, task.foreground_count
    box = side - 2 * task.max_shift
    if box < 1:
        raise ValueError("max_shift leaves no room for the glyph")
    glyphs = []
    for c in range(task.class_count):
        g = _glyph(c, k, box)
        if g.sum() != k:
            raise ValueError("glyph does not fit")
        glyphs.append(g)
    labels = gen.integers(0, task.class_count, size=n)
    lo, hi = task.background
    inputs = gen.uniform(lo, hi, size=(n, side, side))
    fg = np.zeros((n, side, side), dtype=bool)
    shifts = gen.integers(-task.max_shift, task.max_shift + 1, size=(n, 2))
    for i in range(n):
        oy, ox = task.max_shift + shifts[i]
        fg[i, oy:oy + box, ox:ox + box] = glyphs[labels[i]]
    inputs[fg] = task.foreground
    meta = {"foreground": fg.reshape(n, side * side, 1), "gamma": task.gamma}
    return Dataset(inputs.reshape(n, side * side, 1), labels, task.class_count, split, meta)


def planted_foreground_scores(data: Dataset, seed: int | None = 0) -> np.ndarray:
    """Ground-truth score maps for a digit dataset: glyph cells in ``[1, 1.5)``,
    background in ``[0, 0.5)``.

    The jitter orders cells within each tier at random (per-sample streams
    of ``seed``), so no glyph region is systematically ranked first.
    ``seed=None`` gives plain 0/1 indicators.
    """
    fg = data.meta.get("foreground") if data.meta else None
    if fg is None:
        raise ValueError("dataset carries no foreground masks")
    scores = np.asarray(fg, dtype=float).reshape(data.inputs.shape)
    if seed is None:
        return scores
    jitter = np.stack([RngStream(seed, i, tag=77).generator().random(scores.shape[1:])
                       for i in range(len(scores))])
    return scores + 0.5 * jitter


def ffid_plus_curve(model_r: Predictor, data: Dataset, scores: np.ndarray, alpha: float, beta: float,
                    s_values: Iterable[int], T: int = 50, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FFid+ at explicit explanation sizes ``s``, with shared removal keys.

    Returns ``(s, e, stderr)``; ``stderr`` is the standard error of each
    point over the ``T`` repetitions.
    """
    s_values = np.asarray(list(s_values), dtype=int)
    if s_values.size == 0 or s_values.min() < 1 or s_values.max() > data.td:
        raise ValueError(f"sizes must lie in [1, {data.td}]")
    keys = side_keys(seed, len(data), T, data.td, MORF)
    e = np.empty(s_values.size)
    se = np.empty(s_values.size)
    for i, s in enumerate(s_values):
        cfg = MetricConfig(alpha_plus=alpha, beta=beta, T=T, rho=s / data.td, seed=seed)
        v = ffid(model_r, data, scores, cfg, MORF, keys=keys)
        e[i] = v.mean
        se[i] = v.std / math.sqrt(T) if T > 1 else 0.0
    return s_values, e, se


@dataclass
class SizeRecoveryResult:
    gamma: float
    seed: int
    alpha: float
    beta: float
    target: int
    s: np.ndarray
    e: np.ndarray
    stderr: np.ndarray
    tolerance: float
    estimate: SizeEstimate
    clean_accuracy: float = float("nan")

    @property
    def error(self) -> float:
        if self.estimate.estimate is None:
            return math.inf
        return abs(self.estimate.estimate - self.target)

    def rows(self) -> list[dict]:
        return [{"gamma": self.gamma, "beta": self.beta, "seed": self.seed, "s": int(s),
                 "ffid_plus": float(e), "stderr": float(se)} for s, e, se in zip(self.s, self.e, self.stderr)]


def digit_models(task: GammaDigitTask, beta: float, train_cfg: TrainConfig | None = None,
                 n_train: int = 2000, n_eval: int = 400, hidden: Sequence[int] = (64,)):
    """Data plus original and fine-tuned MLPs for one digit task.

    Returns ``(train_data, eval_data, model, model_r)``; everything is
    seeded from ``task.seed``.
    """
    cfg = train_cfg or TrainConfig(seed=task.seed, hidden=tuple(hidden))
    tr = gen_gamma_digit_dataset(task, n_train, [task.seed, 1], "train")
    ev = gen_gamma_digit_dataset(task, n_eval, [task.seed, 2], "eval")
    model = train(MlpModel.initialize(tr.shape, cfg.hidden, task.class_count, task.seed), tr, cfg)
    model_r = finetune(model, tr, beta, cfg)
    return tr, ev, model, model_r


def run_size_recovery(task: GammaDigitTask, beta: float, alpha: float = 0.5, T: int = 50,
                      s_max: int | None = None, rel_band: float = 0.05, se_mult: float = 3.0,
                      explainer=None, train_cfg: TrainConfig | None = None,
                      n_train: int = 2000, n_eval: int = 400) -> SizeRecoveryResult:
    """Fine-tune with ``beta``, sweep FFid+ over ``s = 1..s_max`` and read off
    the first tier size.

    The plateau tolerance is ``max(se_mult * largest stderr, rel_band * peak)``.
    Scores default to the planted foreground maps; pass an explainer to
    score with the original model instead.
    """
    tr, ev, model, model_r = digit_models(task, beta, train_cfg, n_train, n_eval)
    scores = planted_foreground_scores(ev, task.seed) if explainer is None else explainer(model, ev.inputs)
    top = ev.td if s_max is None else min(int(s_max), ev.td)
    s, e, se = ffid_plus_curve(model_r, ev, scores, alpha, beta, range(1, top + 1), T, task.seed)
    tol = max(se_mult * float(se.max()), rel_band * float(e.max()))
    est = recover_tier_size((s, e), alpha, beta, ev.td, tol)
    return SizeRecoveryResult(task.gamma, task.seed, alpha, beta, task.foreground_count, s, e, se, tol, est,
                              accuracy(model, ev.inputs, ev.labels))
