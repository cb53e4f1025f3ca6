"""Influence-tier worlds and the expected F-Fidelity+ curve ``e(s)``.

In a tiered world the input cells split into tiers of sizes
``c = (c_1, ..., c_r)`` and the probability of a correct prediction on a
masked input depends only on how many cells of each tier survive,
``g(j_1, ..., j_r)``. With an explainer that ranks tiers in order, the
number of removed cells per tier is multivariate hypergeometric, which
gives ``e(s)`` in closed form.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .core import floor_count
from .masking import MORF, make_plan
from .model import Predictor

__all__ = [
    "SizeEstimate",
    "TierOracle",
    "TierSpec",
    "TieredClassifier",
    "check_theorem",
    "e_curve",
    "expected_ffid_plus_analytic",
    "expected_ffid_plus_montecarlo",
    "linear_g",
    "logistic_g",
    "mvhg_mean",
    "mvhg_outcomes",
    "mvhg_pmf",
    "n_i_counts",
    "random_world",
    "recover_tier_size",
    "removal_count",
]


@dataclass(frozen=True)
class TierSpec:
    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(c) for c in self.sizes)
        if not sizes or any(c < 1 for c in sizes):
            raise ValueError(f"tier sizes must be positive integers, got {self.sizes}")
        object.__setattr__(self, "sizes", sizes)

    @property
    def r(self) -> int:
        return len(self.sizes)

    @property
    def td(self) -> int:
        return sum(self.sizes)

    def as_array(self) -> np.ndarray:
        return np.array(self.sizes, dtype=int)


GFunc = Callable[[np.ndarray], np.ndarray]


def linear_g(weights: Sequence[float], sizes: Sequence[int]) -> GFunc:
    """``g(j) = sum(w * j) / sum(w * c)`` with strictly decreasing positive weights."""
    w = np.asarray(weights, dtype=float)
    c = np.asarray(sizes, dtype=float)
    if w.shape != c.shape or np.any(w <= 0) or np.any(np.diff(w) >= 0):
        raise ValueError("weights must be positive, strictly decreasing, one per tier")
    denom = float(w @ c)

    def g(j):
        return np.asarray(j, dtype=float) @ w / denom

    return g


def logistic_g(weights: Sequence[float], sizes: Sequence[int], steepness: float = 8.0,
               midpoint: float = 0.5) -> GFunc:
    """Logistic squashing of ``linear_g``; monotone whenever ``steepness > 0``."""
    if steepness <= 0:
        raise ValueError("steepness must be positive")
    lin = linear_g(weights, sizes)

    def g(j):
        return 1.0 / (1.0 + np.exp(-steepness * (lin(j) - midpoint)))

    return g


def _lattice(sizes: Sequence[int]) -> np.ndarray:
    return np.array(list(itertools.product(*[range(c + 1) for c in sizes])), dtype=int)


class TieredClassifier:
    """A tier layout together with its accuracy function ``g``.

    ``g`` must not decrease when a surviving cell is added, nor when a
    surviving cell moves from a lower tier to a higher one. Worlds that
    violate this are rejected at construction.
    """

    def __init__(self, tiers: TierSpec, g: GFunc, check: bool = True, samples: int = 20000, seed: int = 0):
        self.tiers = tiers if isinstance(tiers, TierSpec) else TierSpec(tiers)
        self.g = g
        if check:
            bad = self.monotonicity_violations(samples=samples, seed=seed)
            if bad:
                raise ValueError(f"g is not tier-monotone, e.g. at {bad[0]}")

    def monotonicity_violations(self, samples: int = 20000, seed: int = 0, tol: float = 1e-12) -> list:
        """Scan for points where adding or promoting a surviving cell lowers ``g``.

        Exhaustive when the count lattice has at most ``samples`` points,
        otherwise a uniform random sample of that many points.
        """
        c = self.tiers.as_array()
        r = len(c)
        if int(np.prod(c + 1)) <= samples:
            pts = _lattice(c)
        else:
            gen = np.random.default_rng(seed)
            pts = np.stack([gen.integers(0, ck + 1, size=samples) for ck in c], axis=1)
        base = np.asarray(self.g(pts), dtype=float)
        if np.any(base < -tol) or np.any(base > 1 + tol):
            return [("range", pts[np.argmax((base < 0) | (base > 1))].tolist())]
        bad = []
        for k in range(r):
            ok = pts[:, k] < c[k]
            step = pts[ok].copy()
            step[:, k] += 1
            drop = np.asarray(self.g(step)) < base[ok] - tol
            bad += [("add", k, p.tolist()) for p in pts[ok][drop][:3]]
            for m in range(k + 1, r):
                ok2 = (pts[:, k] < c[k]) & (pts[:, m] > 0)
                moved = pts[ok2].copy()
                moved[:, k] += 1
                moved[:, m] -= 1
                drop = np.asarray(self.g(moved)) < base[ok2] - tol
                bad += [("promote", k, m, p.tolist()) for p in pts[ok2][drop][:3]]
        return bad


class TierOracle(Predictor):
    """Two-class predictor realising a tiered world on marker-coded inputs.

    A cell belongs to tier ``k`` when it holds ``markers[k]``; removed cells
    are 0. Class 0 (the correct class) gets probability ``g(j)``, where
    ``j`` counts the surviving cells per tier.
    """

    def __init__(self, world: TieredClassifier, input_shape: tuple[int, int], markers: Sequence[float] | None = None):
        self.world = world
        self.input_shape = tuple(input_shape)
        if input_shape[0] * input_shape[1] != world.tiers.td:
            raise ValueError("input size must equal the total tier size")
        r = world.tiers.r
        self.markers = np.asarray(markers if markers is not None else np.arange(r, 0, -1), dtype=float)
        if np.any(self.markers == 0) or len(set(self.markers.tolist())) != r:
            raise ValueError("markers must be distinct and non-zero")
        self.class_count = 2

    def counts(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(*x.shape[:-2], 1, -1)
        return np.isclose(flat, self.markers[:, None], rtol=0, atol=1e-9).sum(axis=-1)

    def predict_proba(self, x) -> np.ndarray:
        p = np.asarray(self.world.g(self.counts(x)), dtype=float)
        return np.stack([p, 1.0 - p], axis=-1)


def n_i_counts(c: TierSpec | Sequence[int], s: int) -> np.ndarray:
    """How many cells of each tier fall in the top ``s`` when tiers are ranked in order."""
    sizes = np.asarray(c.sizes if isinstance(c, TierSpec) else c, dtype=int)
    td = int(sizes.sum())
    if not 0 <= s <= td:
        raise ValueError(f"s={s} out of range [0, {td}]")
    before = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return np.clip(s - before, 0, sizes)


def mvhg_pmf(n: Sequence[int], K: int, j: Sequence[int]) -> float:
    """``prod_i C(n_i, j_i) / C(sum n, K)``; zero for infeasible ``j``."""
    n = [int(v) for v in n]
    j = [int(v) for v in j]
    if len(n) != len(j):
        raise ValueError("n and j must have the same length")
    if sum(j) != K or any(ji < 0 or ji > ni for ji, ni in zip(j, n)) or K > sum(n) or K < 0:
        return 0.0
    num = math.prod(math.comb(ni, ji) for ni, ji in zip(n, j))
    # int / int is correctly rounded
    return num / math.comb(sum(n), K)


def mvhg_outcomes(n: Sequence[int], K: int) -> Iterator[tuple[int, ...]]:
    """All feasible draw vectors ``j`` with ``sum(j) = K`` and ``j <= n``."""
    n = [int(v) for v in n]
    if K < 0 or K > sum(n):
        return
    suffix = np.concatenate([np.cumsum(n[::-1])[::-1][1:], [0]]).tolist()

    def rec(i, left, acc):
        if i == len(n):
            if left == 0:
                yield tuple(acc)
            return
        lo = max(0, left - suffix[i])
        for ji in range(lo, min(n[i], left) + 1):
            yield from rec(i + 1, left - ji, acc + [ji])

    yield from rec(0, K, [])


def mvhg_mean(n: Sequence[int], K: int) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    return K * n / n.sum()


def removal_count(alpha_orig: float, beta: float, td: int, s: int) -> int:
    """Cells removed from the top ``s`` by F-Fidelity+: ``floor(s * min(alpha, beta*td/s))``."""
    if s == 0:
        return 0
    return make_plan(MORF, alpha_orig, beta, td, s).removal_count


def expected_ffid_plus_analytic(world: TieredClassifier, alpha_orig: float, beta: float, s: int) -> float:
    """Exact expected F-Fidelity+ at sparsity ``s`` for an in-order explainer.

    ``e(s) = g(c) - E[g(c - J)]`` with ``J`` multivariate hypergeometric over
    the per-tier counts of the top ``s`` cells.
    """
    c = world.tiers.as_array()
    td = int(c.sum())
    K = removal_count(alpha_orig, beta, td, s)
    if K > s:
        raise ValueError(f"removal count {K} exceeds s={s}")
    full = float(world.g(c))
    if K == 0:
        return 0.0
    n = n_i_counts(c, s)
    outs = np.array(list(mvhg_outcomes(n, K)), dtype=int)
    probs = np.array([mvhg_pmf(n, K, j) for j in outs])
    return full - float(probs @ np.asarray(world.g(c - outs), dtype=float))


def e_curve(world: TieredClassifier, alpha_orig: float, beta: float, s_values: Sequence[int] | None = None) -> dict[int, float]:
    if s_values is None:
        s_values = range(0, world.tiers.td + 1)
    return {int(s): expected_ffid_plus_analytic(world, alpha_orig, beta, int(s)) for s in s_values}


def expected_ffid_plus_montecarlo(world: TieredClassifier, alpha_orig: float, beta: float, s: int,
                                  trials: int, rng, return_stderr: bool = False):
    """Monte-Carlo twin of ``expected_ffid_plus_analytic``.

    Draws the per-tier removal counts one tier at a time from univariate
    hypergeometrics. ``rng`` is a seed or ``numpy.random.Generator``.
    """
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    c = world.tiers.as_array()
    td = int(c.sum())
    K = removal_count(alpha_orig, beta, td, s)
    if K == 0 or trials < 1:
        return (0.0, 0.0) if return_stderr else 0.0
    n = n_i_counts(c, s)
    J = np.zeros((trials, len(c)), dtype=int)
    left = np.full(trials, K)
    rest = int(n.sum())
    for i, ni in enumerate(n):
        rest -= int(ni)
        if ni == 0:
            continue
        J[:, i] = gen.hypergeometric(int(ni), rest, left) if rest > 0 else left
        left = left - J[:, i]
    vals = float(world.g(c)) - np.asarray(world.g(c - J), dtype=float)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return (mean, se) if return_stderr else mean


def check_theorem(world: TieredClassifier, alpha_orig: float, beta: float, tol: float = 1e-12,
                  curve: Mapping[int, float] | None = None) -> dict:
    """Count monotonicity violations of ``e(s)`` on the two regions the
    theory pins down: rising on ``[1, c_1]``, falling on
    ``[ceil(max(beta*td/alpha, c_1)), td]``."""
    td = world.tiers.td
    c1 = world.tiers.sizes[0]
    e = dict(curve) if curve is not None else e_curve(world, alpha_orig, beta)
    start = c1 if alpha_orig == 0 else max(c1, math.ceil(beta * td / alpha_orig - 1e-9))
    rising = [s for s in range(1, c1) if e[s + 1] < e[s] - tol]
    falling = [s for s in range(start, td) if e[s + 1] > e[s] + tol]
    return {"rising_violations": rising, "falling_violations": falling, "falling_start": start,
            "ok": not rising and not falling}


def random_world(gen: np.random.Generator, r_max: int = 4, td_max: int = 60, td_min: int = 4) -> TieredClassifier:
    """A random tier layout with a random linear or logistic ``g``."""
    r = int(gen.integers(1, r_max + 1))
    td = int(gen.integers(max(td_min, r), td_max + 1))
    cuts = np.sort(gen.choice(np.arange(1, td), size=r - 1, replace=False)) if r > 1 else np.array([], dtype=int)
    sizes = np.diff(np.concatenate([[0], cuts, [td]])).astype(int)
    weights = np.sort(gen.uniform(0.1, 1.0, size=r))[::-1]
    weights = weights + np.arange(r)[::-1] * 1e-3  # strictly decreasing
    if gen.random() < 0.5:
        g = linear_g(weights, sizes)
    else:
        g = logistic_g(weights, sizes, steepness=float(gen.uniform(2.0, 12.0)), midpoint=float(gen.uniform(0.2, 0.8)))
    return TieredClassifier(TierSpec(tuple(sizes)), g)


@dataclass(frozen=True)
class SizeEstimate:
    """Result of reading a tier size off an ``e(s)`` curve.

    ``status`` is ``"tier"`` when the turning point reflects the first tier
    size, ``"truncation-bound"`` when it sits at ``beta*td/alpha`` (the
    truncation threshold, not a tier boundary), or ``"undetermined"``.
    """

    estimate: int | None
    status: str
    plateau: tuple[float, float] | None
    threshold: float

    @property
    def determined(self) -> bool:
        return self.status != "undetermined"


def recover_tier_size(e_curve: Mapping[int, float] | tuple, alpha_orig: float, beta: float, td: int,
                      tolerance: float = 1e-9) -> SizeEstimate:
    """Locate the turning point of an ``e(s)`` curve.

    The turning point is the last ``s`` whose value lies within
    ``tolerance`` of the curve maximum, provided the curve drops below that
    band afterwards. Between ``beta*td/alpha`` and the first tier size the
    ideal curve is flat, so this picks the right end of the plateau.
    """
    if isinstance(e_curve, Mapping):
        items = sorted(e_curve.items())
        s = np.array([k for k, _ in items], dtype=int)
        e = np.array([v for _, v in items], dtype=float)
    else:
        s, e = (np.asarray(a) for a in e_curve)
        order = np.argsort(s)
        s, e = s[order].astype(int), e[order].astype(float)
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    threshold = beta * td / alpha_orig if alpha_orig > 0 else math.inf
    if len(s) < 2 or e.max() - e.min() <= tolerance:
        return SizeEstimate(None, "undetermined", None, threshold)
    near = np.nonzero(e >= e.max() - tolerance)[0]
    i = int(near[-1])
    if i == len(s) - 1:
        # still at the top at the end of the grid: no fall observed
        return SizeEstimate(None, "undetermined", None, threshold)
    turn = int(s[i])
    step = int(s[i + 1] - s[i])
    if turn < threshold + step:
        return SizeEstimate(turn, "truncation-bound", None, threshold)
    return SizeEstimate(turn, "tier", (float(s[near[0]]), float(turn)), threshold)
