"""Classifier interface and a small numpy MLP trained with plain SGD."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Dataset, count_for, floor_count, topk_mask
from .masking import PatchSpec, patch_mask_batch, random_mask_batch

log = logging.getLogger(__name__)

__all__ = [
    "MlpModel",
    "NumericalError",
    "Predictor",
    "TrainConfig",
    "finetune",
    "gradient_wrt_input",
    "load_model",
    "roar_ablate",
    "roar_retrain",
    "save_model",
    "train",
]


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


class Predictor:
    """Anything that maps ``(..., t, d)`` inputs to class probabilities."""

    input_shape: tuple[int, int]
    class_count: int
    # beta the model was fine-tuned with, None for models that were not
    finetune_beta: float | None = None

    def predict_proba(self, x) -> np.ndarray:
        raise NotImplementedError

    def predict_label(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=-1)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class MlpModel(Predictor):
    """Fully connected ReLU network with a softmax output.

    Inputs are flattened row-major, so a ``t x d`` sample feeds ``t*d`` units.
    An optional fixed standardisation ``(x - input_mean) / input_scale`` is
    applied before the first layer.
    """

    def __init__(self, input_shape, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 init_seed: int | None = None, finetune_beta: float | None = None,
                 input_mean=None, input_scale=None):
        self.input_shape = (int(input_shape[0]), int(input_shape[1]))
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        self.init_seed = init_seed
        self.finetune_beta = finetune_beta
        fan_in = self.input_shape[0] * self.input_shape[1]
        if (input_mean is None) != (input_scale is None):
            raise ValueError("input_mean and input_scale go together")
        self.input_mean = None if input_mean is None else np.array(input_mean, dtype=float).reshape(fan_in)
        self.input_scale = None if input_scale is None else np.array(input_scale, dtype=float).reshape(fan_in)
        if self.input_scale is not None and np.any(self.input_scale <= 0):
            raise ValueError("input_scale must be positive")
        for w, b in zip(self.weights, self.biases):
            if w.shape != (fan_in, b.shape[0]):
                raise ValueError(f"layer shape {w.shape} does not follow width {fan_in}")
            fan_in = w.shape[1]
        if not all(np.all(np.isfinite(a)) for a in self.weights + self.biases):
            raise ValueError("non-finite weights")

    @classmethod
    def initialize(cls, input_shape, hidden: Sequence[int], class_count: int, seed: int) -> "MlpModel":
        """He-initialised weights, zero biases."""
        gen = np.random.default_rng(seed)
        widths = [input_shape[0] * input_shape[1], *hidden, class_count]
        weights, biases = [], []
        for a, b in zip(widths[:-1], widths[1:]):
            weights.append(gen.normal(0.0, math.sqrt(2.0 / a), size=(a, b)))
            biases.append(np.zeros(b))
        return cls(input_shape, weights, biases, init_seed=seed)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel(self.input_shape, self.weights, self.biases, self.init_seed, self.finetune_beta,
                        self.input_mean, self.input_scale)

    def fit_standardization(self, inputs: np.ndarray, floor: float = 1e-3) -> None:
        """Set the input standardisation from per-feature statistics of ``inputs``."""
        X, _ = self._flatten(inputs)
        self.input_mean = X.mean(axis=0)
        self.input_scale = np.maximum(X.std(axis=0), floor)

    def _flatten(self, x) -> tuple[np.ndarray, tuple]:
        x = np.asarray(x, dtype=float)
        if x.shape[-2:] != self.input_shape:
            raise ValueError(f"input shape {x.shape} does not end in {self.input_shape}")
        lead = x.shape[:-2]
        return x.reshape(-1, self.weights[0].shape[0]), lead

    def _forward(self, X: np.ndarray) -> list[np.ndarray]:
        if self.input_mean is not None:
            X = (X - self.input_mean) / self.input_scale
        acts = [X]
        h = X
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    def logits(self, x) -> np.ndarray:
        X, lead = self._flatten(x)
        return self._forward(X)[-1].reshape(*lead, self.class_count)

    def predict_proba(self, x) -> np.ndarray:
        return _softmax(self.logits(x))

    def _backward(self, acts: list[np.ndarray], dout: np.ndarray, need_params: bool = True):
        """Propagate ``d loss / d logits`` back; returns (param grads, input grad)."""
        gw, gb = [], []
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            if need_params:
                gw.append(acts[i].T @ delta)
                gb.append(delta.sum(axis=0))
            delta = delta @ self.weights[i].T
            if i > 0:
                delta = delta * (acts[i] > 0)
        return gw[::-1], gb[::-1], delta

    def loss_and_grads(self, X: np.ndarray, y: np.ndarray):
        acts = self._forward(X)
        logp = _log_softmax(acts[-1])
        n = X.shape[0]
        loss = -logp[np.arange(n), y].mean()
        dout = np.exp(logp)
        dout[np.arange(n), y] -= 1.0
        dout /= n
        gw, gb, _ = self._backward(acts, dout)
        return loss, gw, gb

    def input_gradient(self, x, classes, target: str = "logprob") -> np.ndarray:
        """Gradient of the chosen class output with respect to the input.

        ``target`` picks the differentiated quantity: ``"logprob"``,
        ``"prob"`` or ``"logit"``.
        """
        X, lead = self._flatten(x)
        c = np.asarray(classes, dtype=int).reshape(-1)
        if c.size == 1:
            c = np.full(X.shape[0], c[0])
        elif c.size != X.shape[0]:
            raise ValueError("need one class per input")
        acts = self._forward(X)
        n, k = X.shape[0], self.class_count
        onehot = np.zeros((n, k))
        onehot[np.arange(n), c] = 1.0
        if target == "logit":
            dout = onehot
        else:
            p = _softmax(acts[-1])
            dout = onehot - p
            if target == "prob":
                dout = dout * p[np.arange(n), c][:, None]
            elif target != "logprob":
                raise ValueError(f"unknown target {target!r}")
        _, _, dx = self._backward(acts, dout, need_params=False)
        if self.input_scale is not None:
            dx = dx / self.input_scale
        return dx.reshape(*lead, *self.input_shape)

    def weight_hash(self) -> str:
        h = hashlib.sha256()
        extra = [] if self.input_mean is None else [self.input_mean, self.input_scale]
        for a in self.weights + self.biases + extra:
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "format": "ffidelity-mlp/1",
            "input_shape": list(self.input_shape),
            "widths": self.widths,
            "init_seed": self.init_seed,
            "finetune_beta": self.finetune_beta,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "input_mean": None if self.input_mean is None else self.input_mean.tolist(),
            "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MlpModel":
        widths = doc["widths"]
        weights = [np.array(w, dtype=float).reshape(a, b)
                   for w, a, b in zip(doc["weights"], widths[:-1], widths[1:])]
        return cls(doc["input_shape"], weights, doc["biases"], doc.get("init_seed"), doc.get("finetune_beta"),
                   doc.get("input_mean"), doc.get("input_scale"))


def save_model(model: MlpModel, path) -> None:
    # float repr is the shortest string that round-trips, so reload is exact
    Path(path).write_text(json.dumps(model.to_dict()) + "\n")


def load_model(path) -> MlpModel:
    return MlpModel.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    hidden: tuple[int, ...] = (64,)
    # fine-tuning mask generator: "random" (element-wise) or "patch"
    mask_kind: str = "random"
    patch: tuple[int, int] = (2, 2)
    # fit per-feature input standardisation on the training data (train only)
    standardize: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mask_kind not in ("random", "patch"):
            raise ValueError(f"unknown mask_kind {self.mask_kind!r}")


def _sgd(model: MlpModel, data: Dataset, cfg: TrainConfig,
         transform: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
         history: list | None = None) -> MlpModel:
    if data.shape != model.input_shape:
        raise ValueError(f"data shape {data.shape} does not match model input {model.input_shape}")
    gen = np.random.default_rng(cfg.seed)
    n = len(data)
    X_all = data.inputs
    for epoch in range(cfg.epochs):
        order = gen.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = X_all[idx]
            if transform is not None:
                xb = transform(xb, gen)
            X, _ = model._flatten(xb)
            loss, gw, gb = model.loss_and_grads(X, data.labels[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch starting {start}")
            total += loss * len(idx)
            for w, g in zip(model.weights, gw):
                w -= cfg.learning_rate * g
            for b, g in zip(model.biases, gb):
                b -= cfg.learning_rate * g
        if history is not None:
            history.append(total / n)
        log.debug("epoch %d loss %.5f", epoch, total / n)
    return model


def train(model: MlpModel, data: Dataset, cfg: TrainConfig, history: list | None = None) -> MlpModel:
    """Mini-batch SGD on cross-entropy; returns a trained copy."""
    out = model.copy()
    if cfg.standardize:
        out.fit_standardization(data.inputs)
    return _sgd(out, data, cfg, history=history)


def finetune(model: MlpModel, data: Dataset, beta: float, cfg: TrainConfig,
             history: list | None = None) -> MlpModel:
    """Continue training a copy on inputs with a fresh random removal mask per sample.

    Each sample of each batch loses ``floor(beta * t * d)`` cells (set to 0).
    The returned model remembers ``beta``; the source model is untouched.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    t, d = model.input_shape
    if cfg.mask_kind == "patch":
        side = int(round(math.sqrt(t)))
        if side * side != t:
            raise ValueError("patch masks need a square position grid")
        spec = PatchSpec(*cfg.patch)

        def transform(xb, gen):
            return xb * ~patch_mask_batch(len(xb), side, side, d, beta, spec, gen)
    else:
        def transform(xb, gen):
            return xb * ~random_mask_batch(len(xb), t, d, beta, gen)

    if floor_count(beta * t * d) == 0:
        transform = None  # empty masks: plain continued training, same RNG stream as train()
    out = _sgd(model.copy(), data, cfg, transform=transform, history=history)
    out.finetune_beta = float(beta)
    return out


def gradient_wrt_input(model: Predictor, x, c, target: str = "logprob") -> np.ndarray:
    """d(log p_c)/dx by backpropagation; batched inputs take one class per sample."""
    if not hasattr(model, "input_gradient"):
        raise TypeError(f"{type(model).__name__} does not expose input gradients")
    return model.input_gradient(x, c, target=target)


def roar_ablate(inputs: np.ndarray, scores: np.ndarray, rho: float, side: str = "morf") -> np.ndarray:
    """Zero the top ``round(rho * td)`` cells (MoRF) or everything else (LeRF)."""
    n, t, d = inputs.shape
    keep_top = topk_mask(scores, count_for(rho, t * d))
    removed = keep_top if side == "morf" else ~keep_top
    return inputs * ~removed


def roar_retrain(model: MlpModel, data: Dataset, explainer, rho: float, cfg: TrainConfig,
                 side: str = "morf", scores: np.ndarray | None = None) -> MlpModel:
    """Retrain from the original initialisation on explanation-ablated inputs.

    ``explainer(model, inputs)`` must return one score map per input;
    pass ``scores`` to reuse maps that were already computed.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    if model.init_seed is None:
        raise ValueError("model does not record its initialisation seed")
    if scores is None:
        scores = explainer(model, data.inputs)
    ablated = Dataset(roar_ablate(data.inputs, scores, rho, side), data.labels, data.class_count, data.split)
    fresh = MlpModel.initialize(model.input_shape, model.widths[1:-1], model.class_count, model.init_seed)
    if cfg.standardize:
        fresh.fit_standardization(ablated.inputs)
    return _sgd(fresh, ablated, cfg)


def accuracy(model: Predictor, inputs, labels) -> float:
    return float(np.mean(model.predict_label(inputs) == np.asarray(labels)))
