"""Small batch-normalized MLP with hand-written forward/backward passes.

The network is an ordered list of layers (``Dense``, ``BatchNorm``, ``ReLU``).
Test-time adaptation only ever touches the BatchNorm affine parameters, so the
entropy backward pass returns gradients for ``gamma``/``beta`` alone.  Source
training is the one place where every parameter is updated.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, NumericalError

CHECKPOINT_MAGIC = "PAFTTA-CHECKPOINT"
CHECKPOINT_VERSION = 1


class NormMode(str, Enum):
    BATCH = "batch_stats"
    RUNNING = "running_stats"


@dataclass
class Dense:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    kind: str = field(default="dense", init=False)

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    kind: str = field(default="batchnorm", init=False)

    @classmethod
    def identity(cls, dim: int, eps: float = 1e-5) -> "BatchNorm":
        return cls(np.ones(dim), np.zeros(dim), np.zeros(dim), np.ones(dim), eps)


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)


Layer = Dense | BatchNorm | ReLU


@dataclass(frozen=True)
class ArchSpec:
    in_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (64, 64)
    eps: float = 1e-5

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(int(d["in_dim"]), int(d["num_classes"]), tuple(int(h) for h in d["hidden"]), float(d["eps"]))


@dataclass
class LayerStack:
    layers: list
    arch: ArchSpec
    seed: int | None = None

    @property
    def bn_layers(self) -> list[BatchNorm]:
        return [layer for layer in self.layers if isinstance(layer, BatchNorm)]

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def copy(self) -> "LayerStack":
        return copy.deepcopy(self)

    def validate(self) -> None:
        dim = self.arch.in_dim
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if layer.weight.shape[0] != dim or layer.bias.shape != (layer.weight.shape[1],):
                    raise ConfigurationError(f"layer {i}: dense shape mismatch")
                dim = layer.weight.shape[1]
            elif isinstance(layer, BatchNorm):
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    if getattr(layer, name).shape != (dim,):
                        raise ConfigurationError(f"layer {i}: batchnorm {name} does not match width {dim}")
                if np.any(layer.running_var <= 0):
                    raise ConfigurationError(f"layer {i}: running_var must be positive")
        if dim != self.arch.num_classes:
            raise ConfigurationError(f"final width {dim} != num_classes {self.arch.num_classes}")


@dataclass
class ForwardCache:
    """Everything backward needs, one entry per layer."""

    mode: NormMode
    stack_id: int
    x: np.ndarray
    entries: list


@dataclass
class BNGrad:
    d_gamma: np.ndarray
    d_beta: np.ndarray


GradientSet = list  # list[BNGrad], one per BatchNorm layer in stack order


def init_stack(arch: ArchSpec, seed: int) -> LayerStack:
    """He-initialized Dense->BN->ReLU blocks followed by a logits layer."""
    rng = np.random.default_rng(seed)
    layers: list = []
    dim = arch.in_dim
    for width in arch.hidden:
        w = rng.normal(0.0, np.sqrt(2.0 / dim), size=(dim, width))
        layers += [Dense(w, np.zeros(width)), BatchNorm.identity(width, arch.eps), ReLU()]
        dim = width
    w = rng.normal(0.0, np.sqrt(1.0 / dim), size=(dim, arch.num_classes))
    layers.append(Dense(w, np.zeros(arch.num_classes)))
    stack = LayerStack(layers, arch, seed)
    stack.validate()
    return stack


def _check_finite(a: np.ndarray, i: int, layer) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values after layer {i} ({layer.kind})")


def forward(stack: LayerStack, x: np.ndarray, mode: NormMode = NormMode.BATCH):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stack.arch.in_dim:
        raise ConfigurationError(f"expected input of shape (B, {stack.arch.in_dim}), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite input")
    mode = NormMode(mode)
    if mode is NormMode.BATCH and x.shape[0] < 2:
        raise ConfigurationError("batch statistics need at least 2 samples")

    entries = []
    h = x
    for i, layer in enumerate(stack.layers):
        if isinstance(layer, Dense):
            entries.append(h)
            h = h @ layer.weight + layer.bias
        elif isinstance(layer, BatchNorm):
            if mode is NormMode.BATCH:
                mu = h.mean(axis=0)
                var = h.var(axis=0)
            else:
                mu, var = layer.running_mean, layer.running_var
            inv_std = 1.0 / np.sqrt(var + layer.eps)
            x_hat = (h - mu) * inv_std
            entries.append((x_hat, inv_std, mu, var))
            h = layer.gamma * x_hat + layer.beta
        else:
            mask = h > 0
            entries.append(mask)
            h = h * mask
        _check_finite(h, i, layer)
    return h, ForwardCache(mode, id(stack), x, entries)


def logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def softmax_entropy(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise softmax probabilities and natural-log entropy."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalError("non-finite logits")
    log_p = z - logsumexp(z)[:, None]
    p = np.exp(log_p)
    ent = -(p * log_p).sum(axis=1)
    return p, np.maximum(ent, 0.0)


def entropy_grad_logits(logits: np.ndarray) -> np.ndarray:
    """dH/dz for each row: -p * (log p + H)."""
    z = np.asarray(logits, dtype=np.float64)
    log_p = z - logsumexp(z)[:, None]
    p = np.exp(log_p)
    ent = -(p * log_p).sum(axis=1, keepdims=True)
    return -p * (log_p + ent)


def _backward(stack: LayerStack, cache: ForwardCache, d_out: np.ndarray, full: bool):
    """Backpropagate ``d_out`` (dL/dlogits). Returns per-layer grads (None for ReLU)."""
    if cache.stack_id != id(stack) or len(cache.entries) != len(stack.layers):
        raise ContractError("forward cache was produced by a different stack")
    grads: list = [None] * len(stack.layers)
    g = d_out
    for i in range(len(stack.layers) - 1, -1, -1):
        layer, entry = stack.layers[i], cache.entries[i]
        if isinstance(layer, Dense):
            if full:
                grads[i] = (entry.T @ g, g.sum(axis=0))
            if i > 0:
                g = g @ layer.weight.T
        elif isinstance(layer, BatchNorm):
            x_hat, inv_std, _, _ = entry
            grads[i] = BNGrad((g * x_hat).sum(axis=0), g.sum(axis=0))
            d_xhat = g * layer.gamma
            if cache.mode is NormMode.BATCH:
                g = inv_std * (d_xhat - d_xhat.mean(axis=0) - x_hat * (d_xhat * x_hat).mean(axis=0))
            else:
                g = d_xhat * inv_std
        else:
            g = g * entry
    return grads


def backward_entropy_objective(stack: LayerStack, cache: ForwardCache, logits: np.ndarray,
                               coeffs: np.ndarray) -> GradientSet:
    """Gradient of ``mean_i(coeffs_i * H_i)`` w.r.t. every BatchNorm gamma/beta.

    ``cache`` must come from a BatchStats forward of ``stack``; ``logits`` are
    the logits that forward returned.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if cache.mode is not NormMode.BATCH:
        raise ContractError("entropy backward requires a batch-statistics forward cache")
    if coeffs.shape != (logits.shape[0],):
        raise ContractError(f"coeffs must have length {logits.shape[0]}")
    d_logits = entropy_grad_logits(logits) * (coeffs / logits.shape[0])[:, None]
    grads = _backward(stack, cache, d_logits, full=False)
    out = [g for g, layer in zip(grads, stack.layers) if isinstance(layer, BatchNorm)]
    for g in out:
        if not (np.all(np.isfinite(g.d_gamma)) and np.all(np.isfinite(g.d_beta))):
            raise NumericalError("non-finite BatchNorm gradient")
    return out


class SGD:
    def __init__(self, lr: float):
        if lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.lr = lr

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigurationError("learning rate must be positive")
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def update(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ConfigurationError(f"unknown optimizer {name!r}")


def sgd_step_bn(stack: LayerStack, grads: GradientSet, optimizer) -> LayerStack:
    """Apply one optimizer step to the BatchNorm affine parameters, in place."""
    bns = stack.bn_layers
    if len(grads) != len(bns):
        raise ContractError("gradient set does not match the stack's BatchNorm layers")
    params, flat = [], []
    for bn, g in zip(bns, grads):
        if g.d_gamma.shape != bn.gamma.shape or g.d_beta.shape != bn.beta.shape:
            raise ContractError("gradient shape mismatch")
        params += [bn.gamma, bn.beta]
        flat += [g.d_gamma, g.d_beta]
    optimizer.update(params, flat)
    return stack


def _cross_entropy_grad(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    log_p = logits - logsumexp(logits)[:, None]
    n = len(y)
    loss = -log_p[np.arange(n), y].mean()
    d = np.exp(log_p)
    d[np.arange(n), y] -= 1.0
    return float(loss), d / n


def train_source(x: np.ndarray, y: np.ndarray, arch: ArchSpec, epochs: int = 30, lr: float = 1e-3,
                 seed: int = 0, batch_size: int = 128, bn_momentum: float = 0.1) -> LayerStack:
    """Supervised full-parameter training with Adam and cross-entropy.

    BatchNorm running statistics are tracked with ``bn_momentum`` per
    mini-batch.  ``epochs=0`` returns the seeded initialization untouched.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ConfigurationError("empty training set")
    if len(x) != len(y):
        raise ConfigurationError("features and labels differ in length")
    if y.min() < 0 or y.max() >= arch.num_classes:
        raise ConfigurationError("label out of range")

    stack = init_stack(arch, seed)
    rng = np.random.default_rng([seed, 1])
    opt = Adam(lr)
    params = []
    for layer in stack.layers:
        if isinstance(layer, Dense):
            params += [layer.weight, layer.bias]
        elif isinstance(layer, BatchNorm):
            params += [layer.gamma, layer.beta]

    n = len(x)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            logits, cache = forward(stack, x[idx], NormMode.BATCH)
            _, d = _cross_entropy_grad(logits, y[idx])
            grads = _backward(stack, cache, d, full=True)
            flat = []
            for layer, g in zip(stack.layers, grads):
                if isinstance(layer, Dense):
                    flat += [g[0], g[1]]
                elif isinstance(layer, BatchNorm):
                    flat += [g.d_gamma, g.d_beta]
            opt.update(params, flat)
            for layer, entry in zip(stack.layers, cache.entries):
                if isinstance(layer, BatchNorm):
                    _, _, mu, var = entry
                    m = len(idx)
                    layer.running_mean = (1 - bn_momentum) * layer.running_mean + bn_momentum * mu
                    # unbiased batch variance for the running estimate
                    layer.running_var = (1 - bn_momentum) * layer.running_var + bn_momentum * var * m / (m - 1)
    return stack


def predict(stack: LayerStack, x: np.ndarray, mode: NormMode = NormMode.RUNNING) -> np.ndarray:
    logits, _ = forward(stack, x, mode)
    return logits.argmax(axis=1)


# -- checkpoints -------------------------------------------------------------

def _layer_to_dict(layer) -> dict:
    if isinstance(layer, Dense):
        return {"kind": "dense", "weight": layer.weight.tolist(), "bias": layer.bias.tolist()}
    if isinstance(layer, BatchNorm):
        return {"kind": "batchnorm", "gamma": layer.gamma.tolist(), "beta": layer.beta.tolist(),
                "running_mean": layer.running_mean.tolist(), "running_var": layer.running_var.tolist(),
                "eps": layer.eps}
    return {"kind": "relu"}


def _layer_from_dict(d: dict):
    kind = d["kind"]
    if kind == "dense":
        return Dense(np.array(d["weight"], dtype=np.float64), np.array(d["bias"], dtype=np.float64))
    if kind == "batchnorm":
        return BatchNorm(*(np.array(d[k], dtype=np.float64) for k in ("gamma", "beta", "running_mean", "running_var")),
                         eps=float(d["eps"]))
    if kind == "relu":
        return ReLU()
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def save_checkpoint(stack: LayerStack, path: str | Path, extra: dict | None = None) -> None:
    doc = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "arch": stack.arch.to_dict(),
        "seed": stack.seed,
        "layers": [_layer_to_dict(layer) for layer in stack.layers],
        "extra": extra or {},
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_checkpoint(path: str | Path) -> tuple[LayerStack, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("magic") != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    stack = LayerStack([_layer_from_dict(d) for d in doc["layers"]], ArchSpec.from_dict(doc["arch"]), doc["seed"])
    stack.validate()
    return stack, doc.get("extra", {})
