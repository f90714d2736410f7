"""Knowledge-integrated prediction: confidence-weighted logits of three models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn_core
from .adaptation import ModelTriple, energy_score
from .errors import ConfigurationError
from .nn_core import NormMode


@dataclass
class KipOutput:
    weights: np.ndarray  # (B, 3): source, adapting, ema
    logits: np.ndarray  # (B, C)
    predicted: np.ndarray  # (B,)


def kip_weights(max_probs: np.ndarray, gamma: float) -> np.ndarray:
    """c_i = 1/3 + gamma * (m_i - mean_j m_j), row-wise over the three models.

    No clamping: for large gamma a weight can go negative.
    """
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    m = np.asarray(max_probs, dtype=np.float64)
    return 1.0 / 3.0 + gamma * (m - m.sum(axis=1, keepdims=True) / 3.0)


def combine_logits(logits: list[np.ndarray], gamma: float) -> KipOutput:
    """Aggregate ``[z_source, z_adapt, z_ema]`` with per-sample KIP weights."""
    if len(logits) != 3:
        raise ConfigurationError("KIP combines exactly three models")
    z = np.stack([np.asarray(zi, dtype=np.float64) for zi in logits], axis=1)  # (B, 3, C)
    max_probs = np.stack([nn_core.softmax_entropy(zi)[0].max(axis=1) for zi in logits], axis=1)
    c = kip_weights(max_probs, gamma)
    z_kip = (c[:, :, None] * z).sum(axis=1)
    return KipOutput(c, z_kip, z_kip.argmax(axis=1))


def kip_predict(triple: ModelTriple, x_raw: np.ndarray, x_tilde: np.ndarray, gamma: float) -> KipOutput:
    """The source model sees the raw input under running statistics; the
    adapting and EMA models see ``x_tilde`` under batch statistics."""
    if gamma < 0:
        raise ConfigurationError("gamma must be >= 0")
    z_src, _ = nn_core.forward(triple.source, x_raw, NormMode.RUNNING)
    z_adapt, _ = nn_core.forward(triple.adapting, x_tilde, NormMode.BATCH)
    z_ema, _ = nn_core.forward(triple.ema, x_tilde, NormMode.BATCH)
    return combine_logits([z_src, z_adapt, z_ema], gamma)


def open_set_scores_for_eval(triple: ModelTriple, x_raw: np.ndarray) -> np.ndarray:
    """Energy score of the adapting model on the raw batch; KIP plays no part."""
    logits, _ = nn_core.forward(triple.adapting, x_raw, NormMode.BATCH)
    return energy_score(logits)
