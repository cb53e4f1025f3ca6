"""Fine-tuned fidelity metrics for judging how faithful feature attributions are.

Submodules: ``core`` (samples, masks, datasets), ``masking`` (removal
sampling), ``model`` (numpy MLP, fine-tuning, ROAR retraining),
``explain`` (explainers and the degradation ladder), ``metrics``
(Fid, RFid, FFid), ``theory`` (tiered worlds and hypergeometric
expectations), ``harness`` (benchmarks and synthetic tasks) and ``cli``.
"""

__version__ = "0.1.0"

from .core import Dataset, Mask, RngStream, count_for, topk_mask
from .explain import NoiseLadder, degrade, get_explainer
from .masking import LERF, MORF, make_plan
from .metrics import MetricConfig, MetricValue, ffid, fid_minus, fid_plus, rfid
from .model import MlpModel, TrainConfig, finetune, train

__all__ = [
    "Dataset",
    "LERF",
    "MORF",
    "Mask",
    "MetricConfig",
    "MetricValue",
    "MlpModel",
    "NoiseLadder",
    "RngStream",
    "TrainConfig",
    "count_for",
    "degrade",
    "ffid",
    "fid_minus",
    "fid_plus",
    "finetune",
    "get_explainer",
    "make_plan",
    "rfid",
    "topk_mask",
    "train",
]
