"""Bounded random removals: the fine-tuning mask generator and the
MoRF/LeRF removal samplers with their truncation rule.

Every sampler draws one uniform key per cell from its random stream and
removes the ``k`` candidate cells with the smallest keys. That is a
uniform draw of ``k`` cells without replacement, and since the keys only
depend on the stream, draws for different sparsities or explainers that
share a stream are coupled (common random numbers).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Mask, RngStream, as_scores, floor_count, topk_mask

MORF = "morf"
LERF = "lerf"
SIDES = (MORF, LERF)

__all__ = [
    "LERF",
    "MORF",
    "PatchSpec",
    "RemovalPlan",
    "gen_patch_mask",
    "gen_random_mask",
    "make_plan",
    "random_mask_batch",
    "removal_masks",
    "sample_chi_minus",
    "sample_chi_plus",
    "stream_keys",
    "truncate_alpha",
]


def _generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_side(side: str) -> str:
    side = side.lower()
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}, got {side!r}")
    return side


def _check_fraction(name: str, v: float) -> None:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {v}")


def truncate_alpha(alpha_orig: float, beta: float, td: int, s_count: int, side: str) -> float:
    """Effective removal fraction capped so at most ``beta * td`` cells go.

    MoRF draws from the top ``s`` cells, LeRF from the remaining ``td - s``.
    """
    side = _check_side(side)
    _check_fraction("alpha_orig", alpha_orig)
    _check_fraction("beta", beta)
    pool = s_count if side == MORF else td - s_count
    if pool < 1:
        raise ValueError(f"empty removal pool for side={side} (s={s_count}, td={td})")
    return min(alpha_orig, beta * td / pool)


@dataclass(frozen=True)
class RemovalPlan:
    side: str
    alpha_orig: float
    beta: float
    td: int
    s: int
    effective_alpha: float
    removal_count: int

    @property
    def pool_size(self) -> int:
        return self.s if self.side == MORF else self.td - self.s


def make_plan(side: str, alpha_orig: float, beta: float, td: int, s: int, truncate: bool = True) -> RemovalPlan:
    """Build the removal plan for one (side, sparsity) cell of an evaluation.

    With ``truncate=False`` the plan uses ``alpha_orig`` unchanged (the
    R-Fidelity setting) and records ``beta = 1``.
    """
    side = _check_side(side)
    if not 0 <= s <= td:
        raise ValueError(f"s={s} out of range [0, {td}]")
    if truncate:
        alpha = truncate_alpha(alpha_orig, beta, td, s, side)
    else:
        _check_fraction("alpha_orig", alpha_orig)
        pool = s if side == MORF else td - s
        if pool < 1:
            raise ValueError(f"empty removal pool for side={side} (s={s}, td={td})")
        alpha, beta = alpha_orig, 1.0
    pool = s if side == MORF else td - s
    count = min(pool, floor_count(pool * alpha))
    limit = floor_count(beta * td)
    if count > limit:
        raise AssertionError(f"removal count {count} exceeds bound {limit}")
    return RemovalPlan(side, alpha_orig, beta, td, s, alpha, count)


def stream_keys(seed: int, n: int, reps: int, td: int, tag: int = 0) -> np.ndarray:
    """Per-(sample, repetition) cell keys, shape ``(n, reps, td)``.

    Row ``[i, r]`` comes from stream id ``i * reps + r``, so a sample's keys
    do not depend on how many other samples are evaluated.
    """
    out = np.empty((n, reps, td))
    for i in range(n):
        for r in range(reps):
            out[i, r] = RngStream(seed, i * reps + r, tag).generator().random(td)
    return out


def smallest_keys_mask(keys: np.ndarray, candidates: np.ndarray, k: int) -> np.ndarray:
    """Select the ``k`` candidate positions with the smallest keys.

    ``keys`` has shape ``(..., td)``; ``candidates`` broadcasts against it.
    """
    keys = np.asarray(keys, dtype=float)
    cand = np.broadcast_to(candidates, keys.shape)
    out = np.zeros(keys.shape, dtype=bool)
    if k == 0:
        return out
    if np.any(cand.sum(axis=-1) < k):
        raise ValueError(f"fewer than {k} candidates available")
    kk = np.where(cand, keys, np.inf)
    idx = np.argpartition(kk, k - 1, axis=-1)[..., :k]
    np.put_along_axis(out, idx, True, axis=-1)
    return out


def removal_masks(scores: np.ndarray, plan: RemovalPlan, keys: np.ndarray) -> np.ndarray:
    """Batched removal sampling.

    ``scores`` is ``(n, t, d)``, ``keys`` is ``(n, reps, t*d)``. Returns a
    boolean ``(n, reps, t, d)`` array of removed cells.
    """
    n, t, d = scores.shape
    top = topk_mask(scores, plan.s).reshape(n, 1, t * d)
    cand = top if plan.side == MORF else ~top
    rem = smallest_keys_mask(keys, cand, plan.removal_count)
    return rem.reshape(n, keys.shape[1], t, d)


def _sample_side(scores, plan: RemovalPlan, rng, side: str) -> Mask:
    scores = as_scores(scores)
    if scores.ndim != 2:
        raise ValueError("expected a single t x d score map")
    if plan.side != side:
        raise ValueError(f"plan is for side {plan.side!r}, expected {side!r}")
    t, d = scores.shape
    if plan.td != t * d:
        raise ValueError("plan was built for a different input size")
    if plan.pool_size < 1:
        raise ValueError("removal pool is empty")
    keys = _generator(rng).random(t * d)
    rem = removal_masks(scores[None], plan, keys[None, None])
    return Mask(rem[0, 0])


def sample_chi_plus(scores, plan: RemovalPlan, rng) -> Mask:
    """Remove ``plan.removal_count`` cells uniformly from the top-``s`` set."""
    return _sample_side(scores, plan, rng, MORF)


def sample_chi_minus(scores, plan: RemovalPlan, rng) -> Mask:
    """Remove ``plan.removal_count`` cells uniformly from outside the top-``s`` set."""
    return _sample_side(scores, plan, rng, LERF)


def gen_random_mask(t: int, d: int, beta: float, rng) -> Mask:
    """Uniform mask with exactly ``floor(beta * t * d)`` ones."""
    _check_fraction("beta", beta)
    td = t * d
    k = floor_count(beta * td)
    keys = _generator(rng).random(td)
    bits = smallest_keys_mask(keys, np.ones(td, dtype=bool), k)
    return Mask(bits.reshape(t, d))


def random_mask_batch(n: int, t: int, d: int, beta: float, gen: np.random.Generator) -> np.ndarray:
    """``n`` independent ``gen_random_mask`` draws as a boolean ``(n, t, d)`` array."""
    _check_fraction("beta", beta)
    td = t * d
    k = floor_count(beta * td)
    bits = smallest_keys_mask(gen.random((n, td)), np.ones(td, dtype=bool), k)
    return bits.reshape(n, t, d)


@dataclass(frozen=True)
class PatchSpec:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("patch dimensions must be positive")

    @property
    def area(self) -> int:
        return self.height * self.width


def _tiles(h: int, w: int, patch: PatchSpec) -> list[tuple[slice, slice]]:
    return [
        (slice(r, min(r + patch.height, h)), slice(c, min(c + patch.width, w)))
        for r in range(0, h, patch.height)
        for c in range(0, w, patch.width)
    ]


def gen_patch_mask(h: int, w: int, d: int, beta: float, patch: PatchSpec, rng) -> Mask:
    """Mask made of whole-position patches on the aligned patch grid.

    Tiles (clipped at the bottom/right edges) are visited in uniformly random
    order; a tile is taken whenever it moves the total closer to
    ``floor(beta * h * w * d)``. The mask is ``(h * w) x d`` with every
    feature of a chosen position set.
    """
    _check_fraction("beta", beta)
    if patch.height > h or patch.width > w:
        raise ValueError(f"patch {patch.height}x{patch.width} larger than grid {h}x{w}")
    target = floor_count(beta * h * w * d)
    tiles = _tiles(h, w, patch)
    grid = np.zeros((h, w), dtype=bool)
    total = 0
    for i in _generator(rng).permutation(len(tiles)):
        rs, cs = tiles[i]
        size = (rs.stop - rs.start) * (cs.stop - cs.start) * d
        if abs(total + size - target) < abs(total - target):
            grid[rs, cs] = True
            total += size
    bits = np.repeat(grid.reshape(h * w, 1), d, axis=1)
    return Mask(bits)


def patch_mask_batch(n: int, h: int, w: int, d: int, beta: float, patch: PatchSpec, gen) -> np.ndarray:
    return np.stack([gen_patch_mask(h, w, d, beta, patch, gen).bits for _ in range(n)])


def removal_bound(beta: float, td: int) -> int:
    return floor_count(beta * td)


def ceil_ratio(beta: float, td: int, alpha: float) -> int:
    """``ceil(beta * td / alpha)``, the sparsity where truncation kicks in."""
    if alpha <= 0:
        return td
    return int(math.ceil(beta * td / alpha - 1e-9))
