"""Per-batch test-time adaptation.

One step on a test batch:

1. draw a single augmented view ``x_tilde`` of the batch,
2. score it with the adapting and EMA models (entropy under batch statistics),
3. turn the entropies into filter decisions and per-sample loss coefficients,
4. take one optimizer step on the adapting model's BatchNorm affine params,
5. predict (optionally with knowledge-integrated prediction) and score open-set-ness,
6. move the EMA model toward the adapting model.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum, IntEnum

import numpy as np

from . import nn_core
from .errors import ConfigurationError, ContractError
from .nn_core import LayerStack, NormMode
from .stream import LabeledBatch, augment


class Method(str, Enum):
    SOURCE = "source"
    TENT = "tent"
    ADAPT_FILTER = "adapt_filter"
    EMA_FILTER = "ema_filter"
    PAF = "paf"


class Action(IntEnum):
    MINIMIZE = 0  # entropy minimization, weighted by w_soft
    EXCLUDED = 1
    MAXIMIZE = 2


FILTER_MODES = ("both", "pr_only", "aux_only")


@dataclass(frozen=True)
class Hyperparams:
    method: Method = Method.PAF
    alpha: float = 2.0
    beta: float = 0.999
    tau_factor: float = 0.4
    tau: float | None = None  # absolute threshold; overrides tau_factor when set
    gamma: float = 0.1
    lr: float = 1e-3
    optimizer: str = "adam"
    aug_std: float = 0.05
    kip_enabled: bool = True
    soft_min: bool = True
    hard_max: bool = True
    filters: str = "both"
    kip_on_augmented: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        # YAML may hand us ints; keep float fields float so hashes are stable
        for name in ("alpha", "beta", "tau_factor", "gamma", "lr", "aug_std"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if self.tau is not None:
            object.__setattr__(self, "tau", float(self.tau))
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigurationError("beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        if self.tau is not None and self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.tau_factor <= 0:
            raise ConfigurationError("tau_factor must be positive")
        if self.filters not in FILTER_MODES:
            raise ConfigurationError(f"filters must be one of {FILTER_MODES}")
        if self.aug_std < 0:
            raise ConfigurationError("aug_std must be >= 0")

    def threshold(self, num_classes: int) -> float:
        return self.tau if self.tau is not None else self.tau_factor * math.log(num_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **kw) -> "Hyperparams":
        return replace(self, **kw)


@dataclass
class ModelTriple:
    source: LayerStack
    adapting: LayerStack
    ema: LayerStack
    optimizer: object = None

    @classmethod
    def from_source(cls, source: LayerStack, hp: Hyperparams) -> "ModelTriple":
        return cls(source.copy(), source.copy(), source.copy(), nn_core.make_optimizer(hp.optimizer, hp.lr))


@dataclass
class FilterDecision:
    """Per-sample filter outputs for one batch (arrays of length B)."""

    h_adapt: np.ndarray
    h_ema: np.ndarray
    f_pr: np.ndarray
    f_aux: np.ndarray
    w_soft: np.ndarray
    action: np.ndarray

    def __len__(self) -> int:
        return len(self.action)


def energy_score(logits: np.ndarray) -> np.ndarray:
    """Open-set score ``-logsumexp(z)``; larger means more open-set-like."""
    return -nn_core.logsumexp(np.asarray(logits, dtype=np.float64))


def _decide(h_adapt: np.ndarray, h_ema: np.ndarray, tau: float, hp: Hyperparams) -> FilterDecision:
    f_pr = h_adapt < tau
    f_aux = h_ema < tau
    w_soft = np.exp(tau - h_ema)
    if hp.filters == "pr_only":
        # no veto: F_aux forced to 1, so F_pr=0 samples are only ever excluded
        f_aux = np.ones_like(f_pr)
    elif hp.filters == "aux_only":
        f_pr = f_aux.copy()
    action = np.where(f_pr, Action.MINIMIZE, np.where(f_aux, Action.EXCLUDED, Action.MAXIMIZE)).astype(np.int8)
    return FilterDecision(h_adapt, h_ema, f_pr, f_aux, w_soft, action)


def decide_filters(triple: ModelTriple, x_tilde: np.ndarray, hp: Hyperparams) -> FilterDecision:
    """Primary filter from the adapting model, auxiliary filter from the EMA model."""
    tau = hp.threshold(triple.adapting.num_classes)
    _, h_adapt = nn_core.softmax_entropy(nn_core.forward(triple.adapting, x_tilde, NormMode.BATCH)[0])
    _, h_ema = nn_core.softmax_entropy(nn_core.forward(triple.ema, x_tilde, NormMode.BATCH)[0])
    return _decide(h_adapt, h_ema, tau, hp)


def paf_loss_coeffs(decisions: FilterDecision, hp: Hyperparams) -> np.ndarray:
    minimize = decisions.w_soft if hp.soft_min else np.ones(len(decisions))
    coeffs = np.where(decisions.action == Action.MINIMIZE, minimize, 0.0)
    maximize = decisions.action == Action.MAXIMIZE
    if not hp.hard_max:
        maximize = maximize | (decisions.action == Action.EXCLUDED)
    return np.where(maximize, -hp.alpha, coeffs)


def baseline_loss_coeffs(method: Method, h_adapt: np.ndarray, h_ema: np.ndarray, tau: float) -> np.ndarray:
    """Coefficients for the reference losses: plain entropy minimization and
    the single-model ±1 filters driven by the adapting or the EMA model."""
    method = Method(method)
    if method is Method.SOURCE:
        return np.zeros(len(h_adapt))
    if method is Method.TENT:
        return np.ones(len(h_adapt))
    if method is Method.ADAPT_FILTER:
        return np.where(h_adapt < tau, 1.0, -1.0)
    if method is Method.EMA_FILTER:
        return np.where(h_ema < tau, 1.0, -1.0)
    raise ConfigurationError(f"no baseline loss for method {method}")


def ema_update(ema: LayerStack, adapting: LayerStack, beta: float) -> LayerStack:
    """In-place ``ema = beta * ema + (1 - beta) * adapting`` over BatchNorm gamma/beta."""
    e_bns, a_bns = ema.bn_layers, adapting.bn_layers
    if len(e_bns) != len(a_bns):
        raise ContractError("EMA and adapting models have different architectures")
    for e, a in zip(e_bns, a_bns):
        if e.gamma.shape != a.gamma.shape:
            raise ContractError("BatchNorm shape mismatch between EMA and adapting models")
        e.gamma[...] = beta * e.gamma + (1.0 - beta) * a.gamma
        e.beta[...] = beta * e.beta + (1.0 - beta) * a.beta
    return ema


@dataclass
class StepResult:
    decisions: FilterDecision
    coeffs: np.ndarray
    energy: np.ndarray
    predicted: np.ndarray
    kip_weights: np.ndarray | None
    loss: dict
    x_tilde: np.ndarray | None = field(default=None, repr=False)
    loss_input: np.ndarray | None = field(default=None, repr=False)
    ema_input: np.ndarray | None = field(default=None, repr=False)


def _source_step(triple: ModelTriple, x: np.ndarray) -> StepResult:
    logits, _ = nn_core.forward(triple.source, x, NormMode.RUNNING)
    _, h = nn_core.softmax_entropy(logits)
    n = len(x)
    decisions = FilterDecision(h, h, np.zeros(n, bool), np.zeros(n, bool), np.ones(n),
                               np.full(n, Action.EXCLUDED, dtype=np.int8))
    loss = {"total": 0.0, "minimize": 0.0, "maximize": 0.0, "n_minimize": 0, "n_excluded": n, "n_maximize": 0}
    return StepResult(decisions, np.zeros(n), energy_score(logits), logits.argmax(axis=1), None, loss)


def adapt_step(triple: ModelTriple, batch: LabeledBatch | np.ndarray, hp: Hyperparams,
               rng: np.random.Generator) -> StepResult:
    """Run one adaptation + inference step, mutating ``triple`` in place.

    The source model is never modified.  Labels in ``batch`` are ignored.
    """
    x = batch.features if isinstance(batch, LabeledBatch) else np.asarray(batch, dtype=np.float64)
    if hp.method is Method.SOURCE:
        return _source_step(triple, x)

    adapting, ema = triple.adapting, triple.ema
    tau = hp.threshold(adapting.num_classes)
    x_tilde = augment(x, rng, hp.aug_std)

    logits_a, cache_a = nn_core.forward(adapting, x_tilde, NormMode.BATCH)
    _, h_adapt = nn_core.softmax_entropy(logits_a)
    logits_e, cache_e = nn_core.forward(ema, x_tilde, NormMode.BATCH)
    _, h_ema = nn_core.softmax_entropy(logits_e)
    decisions = _decide(h_adapt, h_ema, tau, hp)

    if hp.method is Method.PAF:
        coeffs = paf_loss_coeffs(decisions, hp)
    else:
        coeffs = baseline_loss_coeffs(hp.method, h_adapt, h_ema, tau)
        decisions.action = np.where(coeffs > 0, Action.MINIMIZE,
                                    np.where(coeffs < 0, Action.MAXIMIZE, Action.EXCLUDED)).astype(np.int8)

    n = len(x)
    weighted = coeffs * h_adapt
    loss = {
        "total": float(weighted.sum() / n),
        "minimize": float(weighted[coeffs > 0].sum() / n),
        "maximize": float(weighted[coeffs < 0].sum() / n),
        "n_minimize": int((decisions.action == Action.MINIMIZE).sum()),
        "n_excluded": int((decisions.action == Action.EXCLUDED).sum()),
        "n_maximize": int((decisions.action == Action.MAXIMIZE).sum()),
    }

    if np.any(coeffs != 0):
        grads = nn_core.backward_entropy_objective(adapting, cache_a, logits_a, coeffs)
        nn_core.sgd_step_bn(adapting, grads, triple.optimizer)

    # inference uses the updated adapting model and the not-yet-updated EMA model
    logits_raw, _ = nn_core.forward(adapting, x, NormMode.BATCH)
    energy = energy_score(logits_raw)
    weights = None
    if hp.kip_enabled:
        from .kip import kip_predict

        out = kip_predict(triple, x, x_tilde if hp.kip_on_augmented else x, hp.gamma)
        predicted, weights = out.predicted, out.weights
    else:
        predicted = logits_raw.argmax(axis=1)

    ema_update(ema, adapting, hp.beta)
    return StepResult(decisions, coeffs, energy, predicted, weights, loss,
                      x_tilde=x_tilde, loss_input=cache_a.x, ema_input=cache_e.x)
