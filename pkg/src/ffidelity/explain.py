"""Score-map explainers and the controlled degradation operator.

All explainers take a model and either one ``t x d`` input or a batch
``(n, t, d)`` and return non-negative scores of the same shape, computed
for the class the model predicts on the unmodified input.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .core import RngStream, as_scores, count_for
from .model import Predictor, gradient_wrt_input

__all__ = [
    "Explainer",
    "NoiseLadder",
    "SHAPLEY_MAX_CELLS",
    "degrade",
    "get_explainer",
    "input_x_gradient",
    "integrated_gradients",
    "occlusion",
    "random_scores",
    "saliency",
    "save_scoremap",
    "shapley_exact",
    "shapley_signed",
]

SHAPLEY_MAX_CELLS = 12


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected (t, d) or (n, t, d) input, got shape {x.shape}")


def _unbatch(a: np.ndarray, single: bool) -> np.ndarray:
    return a[0] if single else a


def _predicted(model: Predictor, X: np.ndarray) -> np.ndarray:
    return np.asarray(model.predict_label(X)).reshape(-1)


def saliency(model: Predictor, x) -> np.ndarray:
    """Absolute input gradient of the predicted class log-probability."""
    X, single = _batch(x)
    g = gradient_wrt_input(model, X, _predicted(model, X))
    return _unbatch(np.abs(g), single)


def input_x_gradient(model: Predictor, x) -> np.ndarray:
    X, single = _batch(x)
    g = gradient_wrt_input(model, X, _predicted(model, X))
    return _unbatch(np.abs(X * g), single)


def integrated_gradients(model: Predictor, x, baseline=None, steps: int = 64,
                         target: str = "logprob", signed: bool = False) -> np.ndarray:
    """Path-integrated gradients from ``baseline`` (default all zeros) to ``x``.

    Uses the midpoint rule with ``steps`` evaluations. With ``signed=True``
    the raw attributions are returned instead of their magnitudes.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    X, single = _batch(x)
    B = np.zeros_like(X) if baseline is None else np.broadcast_to(np.asarray(baseline, dtype=float), X.shape)
    cls = _predicted(model, X)
    diff = X - B
    total = np.zeros_like(X)
    for k in range(steps):
        a = (k + 0.5) / steps
        total += gradient_wrt_input(model, B + a * diff, cls, target=target)
    attr = diff * total / steps
    return _unbatch(attr if signed else np.abs(attr), single)


def occlusion(model: Predictor, x, fill: float = 0.0) -> np.ndarray:
    """Drop in predicted-class probability when one cell is set to ``fill``."""
    X, single = _batch(x)
    n, t, d = X.shape
    cls = _predicted(model, X)
    base = model.predict_proba(X)[np.arange(n), cls]
    out = np.empty_like(X)
    eye = np.eye(t * d, dtype=bool).reshape(t * d, t, d)
    for i in range(n):
        occluded = np.where(eye, fill, X[i])
        p = model.predict_proba(occluded)[:, cls[i]]
        out[i] = np.maximum(0.0, base[i] - p).reshape(t, d)
    return _unbatch(out, single)


def random_scores(shape, rng) -> np.ndarray:
    gen = rng.generator() if isinstance(rng, RngStream) else np.random.default_rng(rng)
    return gen.random(shape)


def _shapley_weights(td: int) -> np.ndarray:
    # weight for a coalition of size k not containing the cell
    return np.array([math.factorial(k) * math.factorial(td - k - 1) / math.factorial(td) for k in range(td)])


def shapley_signed(model: Predictor, x) -> np.ndarray:
    """Exact Shapley values of the predicted-class probability, by enumeration.

    The value of a coalition is ``p_c(x * m)``: cells outside the coalition
    are set to 0. Only feasible for ``t * d <= 12``.
    """
    X, single = _batch(x)
    n, t, d = X.shape
    td = t * d
    if td > SHAPLEY_MAX_CELLS:
        raise ValueError(f"exact Shapley needs t*d <= {SHAPLEY_MAX_CELLS}, got {td}")
    codes = np.arange(1 << td)
    members = ((codes[:, None] >> np.arange(td)[None, :]) & 1).astype(bool)
    sizes = members.sum(axis=1)
    w = _shapley_weights(td)
    cls = _predicted(model, X)
    out = np.zeros((n, td))
    for i in range(n):
        masked = X[i].reshape(1, td) * members
        v = model.predict_proba(masked.reshape(-1, t, d))[:, cls[i]]
        for j in range(td):
            without = ~members[:, j]
            with_j = codes[without] | (1 << j)
            out[i, j] = np.sum(w[sizes[without]] * (v[with_j] - v[without]))
    return _unbatch(out.reshape(n, t, d), single)


def shapley_exact(model: Predictor, x) -> np.ndarray:
    """Shapley values clipped at zero (see ``shapley_signed``)."""
    return np.maximum(shapley_signed(model, x), 0.0)


def degrade(scores, p: float, rng) -> np.ndarray:
    """Re-randomise a uniformly chosen ``round(p * t * d)`` subset of cells.

    Replaced cells get independent ``uniform(0, max score)`` draws, so
    ``p = 0`` returns the scores unchanged and ``p = 1`` a random explainer.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    scores = as_scores(scores)
    out = scores.copy()
    k = count_for(p, scores.size)
    if k == 0:
        return out
    gen = rng.generator() if isinstance(rng, RngStream) else np.random.default_rng(rng)
    flat = out.reshape(-1)
    cells = gen.choice(flat.size, size=k, replace=False)
    flat[cells] = gen.uniform(0.0, float(scores.max()), size=k)
    return out


@dataclass(frozen=True)
class NoiseLadder:
    proportions: tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    seed: int = 0

    def __post_init__(self):
        ps = tuple(float(p) for p in self.proportions)
        if not ps or ps[0] != 0.0:
            raise ValueError("a noise ladder must start at p = 0")
        if any(b <= a for a, b in zip(ps, ps[1:])):
            raise ValueError("noise proportions must be strictly increasing")
        if ps[-1] > 1.0:
            raise ValueError("noise proportions must be <= 1")
        object.__setattr__(self, "proportions", ps)

    def apply(self, scores: np.ndarray) -> dict[float, np.ndarray]:
        """Degraded copies of a batch of score maps, one per proportion.

        Sample ``i`` at ladder step ``k`` uses stream ``(seed, i, tag=k)``.
        """
        out = {}
        for k, p in enumerate(self.proportions):
            out[p] = np.stack([degrade(s, p, RngStream(self.seed, i, tag=1000 + k))
                               for i, s in enumerate(scores)])
        return out


@dataclass(frozen=True)
class Explainer:
    """Named wrapper so explainers can be passed around and reported."""

    name: str
    fn: Callable[..., np.ndarray]

    def explain(self, model: Predictor, x) -> np.ndarray:
        return as_scores(self.fn(model, x))

    def __call__(self, model: Predictor, x) -> np.ndarray:
        return self.explain(model, x)


_REGISTRY = {
    "saliency": saliency,
    "input_x_gradient": input_x_gradient,
    "ig": integrated_gradients,
    "occlusion": occlusion,
    "shapley": shapley_exact,
}


def get_explainer(name: str, **kwargs) -> Explainer:
    if name == "random":
        seed = kwargs.get("seed", 0)
        return Explainer("random", lambda model, x: random_scores(np.shape(x), seed))
    try:
        fn = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown explainer {name!r}; choose from {sorted(_REGISTRY) + ['random']}") from None
    if kwargs:
        return Explainer(name, lambda model, x: fn(model, x, **kwargs))
    return Explainer(name, fn)


def save_scoremap(scores, path) -> None:
    """One CSV row per position ``t``, one column per feature ``d``."""
    scores = as_scores(scores)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        for row in scores:
            w.writerow([repr(float(v)) for v in row])


def load_scoremap(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        return as_scores([[float(v) for v in row] for row in csv.reader(fh)])
