"""Fidelity metrics: Fid+/-, R-Fidelity and F-Fidelity.

Each metric is a dataset mean of per-sample differences
``1(y = f(x)) - 1(y = f(x'))`` where ``x'`` is the input with some cells
removed. ``prob=True`` swaps the indicators for the true-class
probability (not used by the acceptance tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, as_scores, count_for, mask_apply, mask_complement_apply, topk_mask
from .masking import LERF, MORF, make_plan, removal_masks, stream_keys
from .model import Predictor

__all__ = [
    "MetricConfig",
    "MetricValue",
    "ffid",
    "fid_minus",
    "fid_plus",
    "resolve_scores",
    "rfid",
    "side_keys",
]

# stream tags so the two sides never share draws
_SIDE_TAG = {MORF: 1, LERF: 2}
_CHUNK_CELLS = 4_000_000


@dataclass(frozen=True)
class MetricConfig:
    alpha_plus: float = 0.5
    alpha_minus: float = 0.5
    beta: float = 0.1
    T: int = 50
    rho: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        for name in ("alpha_plus", "alpha_minus", "beta", "rho"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def alpha(self, side: str) -> float:
        return self.alpha_plus if side == MORF else self.alpha_minus


@dataclass
class MetricValue:
    """Dataset mean plus per-sample values.

    ``std`` is the standard deviation over repetitions of the dataset mean;
    ``draws`` keeps the raw ``(n, T)`` matrix for sampled metrics.
    """

    mean: float
    per_sample: np.ndarray
    std: float = 0.0
    draws: np.ndarray | None = field(default=None, repr=False)

    @property
    def repetition_variance(self) -> np.ndarray:
        """Per-sample variance of a single draw (zeros for deterministic metrics)."""
        if self.draws is None or self.draws.shape[1] < 2:
            return np.zeros_like(self.per_sample)
        return self.draws.var(axis=1, ddof=1)


def resolve_scores(explainer, data: Dataset, model: Predictor) -> np.ndarray:
    """Score maps for ``data``: an ``(n, t, d)`` array is used as-is,
    anything else is called as ``explainer(model, inputs)``."""
    if isinstance(explainer, np.ndarray) or isinstance(explainer, (list, tuple)):
        scores = as_scores(explainer)
    else:
        scores = as_scores(explainer(model, data.inputs))
    if scores.shape != data.inputs.shape:
        raise ValueError(f"score maps {scores.shape} do not match inputs {data.inputs.shape}")
    return scores


def _outcome(model: Predictor, X: np.ndarray, y: np.ndarray, prob: bool) -> np.ndarray:
    if prob:
        p = model.predict_proba(X)
        return np.take_along_axis(p, y.reshape(*y.shape, 1), axis=-1)[..., 0]
    return (np.asarray(model.predict_label(X)) == y).astype(float)


def _deterministic(model, data, scores, rho, keep: bool, prob: bool) -> MetricValue:
    s = count_for(rho, data.td)
    m = topk_mask(scores, s)
    Xm = mask_apply(data.inputs, m) if keep else mask_complement_apply(data.inputs, m)
    per = _outcome(model, data.inputs, data.labels, prob) - _outcome(model, Xm, data.labels, prob)
    return MetricValue(float(per.mean()), per, 0.0)


def fid_plus(model: Predictor, data: Dataset, explainer, rho: float,
             explained_model: Predictor | None = None, prob: bool = False) -> MetricValue:
    """Change in correctness after removing the top ``round(rho * td)`` cells."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    scores = resolve_scores(explainer, data, explained_model or model)
    return _deterministic(model, data, scores, rho, keep=False, prob=prob)


def fid_minus(model: Predictor, data: Dataset, explainer, rho: float,
              explained_model: Predictor | None = None, prob: bool = False) -> MetricValue:
    """Change in correctness when only the top ``round(rho * td)`` cells are kept."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    scores = resolve_scores(explainer, data, explained_model or model)
    return _deterministic(model, data, scores, rho, keep=True, prob=prob)


def side_keys(seed: int, n: int, T: int, td: int, side: str) -> np.ndarray:
    """The removal keys a sampled metric uses for ``side``; pass them back in
    via ``keys=`` to avoid regenerating them across many evaluations."""
    return stream_keys(seed, n, T, td, tag=_SIDE_TAG[side])


def _sampled_metric(model: Predictor, data: Dataset, scores: np.ndarray, side: str, alpha: float,
                    beta: float, rho: float, T: int, seed: int, truncate: bool, prob: bool,
                    keys: np.ndarray | None) -> MetricValue:
    n, td = len(data), data.td
    s = count_for(rho, td)
    pool = s if side == MORF else td - s
    if pool == 0 or alpha == 0.0:
        zeros = np.zeros((n, T))
        return MetricValue(0.0, zeros.mean(axis=1), 0.0, zeros)
    plan = make_plan(side, alpha, beta, td, s, truncate=truncate)
    if keys is None:
        keys = side_keys(seed, n, T, td, side)
    elif keys.shape != (n, T, td):
        raise ValueError(f"keys must have shape {(n, T, td)}, got {keys.shape}")
    base = _outcome(model, data.inputs, data.labels, prob)
    draws = np.empty((n, T))
    chunk = max(1, _CHUNK_CELLS // (T * td))
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        removed = removal_masks(scores[lo:hi], plan, keys[lo:hi])
        X = data.inputs[lo:hi, None] * ~removed
        y = np.repeat(data.labels[lo:hi, None], T, axis=1)
        draws[lo:hi] = base[lo:hi, None] - _outcome(model, X, y, prob)
    per = draws.mean(axis=1)
    std = float(draws.mean(axis=0).std(ddof=1)) if T > 1 else 0.0
    return MetricValue(float(per.mean()), per, std, draws)


def rfid(model: Predictor, data: Dataset, explainer, cfg: MetricConfig, side: str,
         explained_model: Predictor | None = None, prob: bool = False,
         keys: np.ndarray | None = None) -> MetricValue:
    """R-Fidelity: remove ``floor(alpha * pool)`` uniformly sampled cells, no cap.

    The MoRF pool is the top ``s`` cells, the LeRF pool the other ``td - s``.
    """
    side = side.lower()
    scores = resolve_scores(explainer, data, explained_model or model)
    return _sampled_metric(model, data, scores, side, cfg.alpha(side), 1.0, cfg.rho, cfg.T,
                           cfg.seed, truncate=False, prob=prob, keys=keys)


def ffid(model_r: Predictor, data: Dataset, explainer, cfg: MetricConfig, side: str,
         explained_model: Predictor | None = None, prob: bool = False,
         keys: np.ndarray | None = None) -> MetricValue:
    """F-Fidelity: R-Fidelity on a fine-tuned model with removals capped at
    ``floor(beta * td)``.

    Score maps should come from the original model (``explained_model``).
    A model that records a fine-tuning beta different from ``cfg.beta`` is
    rejected.
    """
    side = side.lower()
    ft_beta = getattr(model_r, "finetune_beta", None)
    if ft_beta is not None and not math.isclose(ft_beta, cfg.beta, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"model was fine-tuned with beta={ft_beta} but the metric uses beta={cfg.beta}")
    scores = resolve_scores(explainer, data, explained_model or model_r)
    return _sampled_metric(model_r, data, scores, side, cfg.alpha(side), cfg.beta, cfg.rho, cfg.T,
                           cfg.seed, truncate=True, prob=prob, keys=keys)
