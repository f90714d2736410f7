"""Synthetic continual open-set stream.

Closed-set classes are isotropic Gaussian blobs; open-set classes are blobs in
the same region that the source model never sees.  Each test domain applies one
``DomainTransform`` (rotation, per-feature scale, shift, additive noise) to
every point in its batches, open-set points included.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .errors import ConfigurationError, StreamExhausted


@dataclass(frozen=True)
class StreamConfig:
    num_domains: int = 15
    batches_per_domain: int = 100
    batch_size: int = 200
    open_ratio: float = 1.0
    dim: int = 16
    num_classes: int = 8
    num_open_classes: int = 4
    seed: int = 0
    # task geometry
    class_std: float = 1.0
    mean_box: float = 2.0
    min_separation: float = 4.5
    open_min_separation: float = 5.0
    source_per_class: int = 500
    holdout_per_class: int = 200
    # shift severity
    intensity_range: tuple[float, float] = (0.5, 1.0)
    rotation_strength: float = 0.6
    scale_strength: float = 0.3
    shift_strength: float = 1.0
    noise_range: tuple[float, float] = (0.1, 0.6)
    first_domain_identity: bool = False

    def __post_init__(self):
        for f in self.__dataclass_fields__.values():
            if f.type == "float":
                object.__setattr__(self, f.name, float(getattr(self, f.name)))
        for name in ("intensity_range", "noise_range"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.open_ratio < 0:
            raise ConfigurationError("open_ratio must be >= 0")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.num_classes < 2 or self.dim < 1:
            raise ConfigurationError("need at least 2 classes and 1 feature")
        if self.num_domains < 1 or self.batches_per_domain < 1:
            raise ConfigurationError("stream must contain at least one batch")
        if self.num_open_classes == 0 and self.n_open > 0:
            raise ConfigurationError("open_ratio > 0 needs at least one open-set class")

    @property
    def n_open(self) -> int:
        # small epsilon keeps e.g. 200*0.25/1.25 from flooring to 39
        return int(math.floor(self.batch_size * self.open_ratio / (1.0 + self.open_ratio) + 1e-9))

    @property
    def n_closed(self) -> int:
        return self.batch_size - self.n_open

    @property
    def total_batches(self) -> int:
        return self.num_domains * self.batches_per_domain

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity_range"] = list(self.intensity_range)
        d["noise_range"] = list(self.noise_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StreamConfig":
        d = dict(d)
        for key in ("intensity_range", "noise_range"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown stream fields: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ClassSpec:
    mean: np.ndarray
    std: float
    label: int
    is_open: bool

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal((n, len(self.mean)))


@dataclass(frozen=True)
class DomainTransform:
    rotation: np.ndarray
    scale: np.ndarray
    shift: np.ndarray
    noise_std: float

    @classmethod
    def identity(cls, dim: int) -> "DomainTransform":
        return cls(np.eye(dim), np.ones(dim), np.zeros(dim), 0.0)

    def apply(self, x: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        out = (x @ self.rotation.T) * self.scale + self.shift
        if self.noise_std > 0:
            if rng is None:
                raise ValueError("a generator is needed to draw transform noise")
            out = out + self.noise_std * rng.standard_normal(x.shape)
        return out

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "scale": self.scale.tolist(),
                "shift": self.shift.tolist(), "noise_std": self.noise_std}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainTransform":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["scale"], dtype=np.float64),
                   np.array(d["shift"], dtype=np.float64), float(d["noise_std"]))


@dataclass
class Task:
    config: StreamConfig
    closed_specs: list[ClassSpec]
    open_specs: list[ClassSpec]
    domains: list[DomainTransform]
    source_x: np.ndarray
    source_y: np.ndarray
    holdout_x: np.ndarray
    holdout_y: np.ndarray

    def to_dict(self) -> dict:
        def spec(s: ClassSpec) -> dict:
            return {"mean": s.mean.tolist(), "std": s.std, "label": s.label, "is_open": s.is_open}

        return {
            "config": self.config.to_dict(),
            "closed_specs": [spec(s) for s in self.closed_specs],
            "open_specs": [spec(s) for s in self.open_specs],
            "domains": [t.to_dict() for t in self.domains],
            "source_x": self.source_x.tolist(),
            "source_y": self.source_y.tolist(),
            "holdout_x": self.holdout_x.tolist(),
            "holdout_y": self.holdout_y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        def spec(s: dict) -> ClassSpec:
            return ClassSpec(np.array(s["mean"], dtype=np.float64), float(s["std"]), int(s["label"]), bool(s["is_open"]))

        cfg = StreamConfig.from_dict(d["config"])
        return cls(
            cfg,
            [spec(s) for s in d["closed_specs"]],
            [spec(s) for s in d["open_specs"]],
            [DomainTransform.from_dict(t) for t in d["domains"]],
            np.array(d["source_x"], dtype=np.float64).reshape(-1, cfg.dim),
            np.array(d["source_y"], dtype=np.int64),
            np.array(d["holdout_x"], dtype=np.float64).reshape(-1, cfg.dim),
            np.array(d["holdout_y"], dtype=np.int64),
        )


def random_rotation(dim: int, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix exp(strength * A) for a random skew-symmetric A.

    ``strength=0`` gives the identity; larger values rotate further away.
    """
    a = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    skew = (a - a.T) / 2.0
    r = expm(strength * skew)
    # one polar re-orthogonalization removes expm round-off
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def _place_means(n: int, dim: int, box: float, min_dist: float, rng: np.random.Generator,
                 avoid: np.ndarray | None = None, avoid_dist: float = 0.0, what: str = "class") -> np.ndarray:
    means: list[np.ndarray] = []
    for _ in range(2000 * max(n, 1)):
        if len(means) == n:
            break
        cand = rng.uniform(-box, box, size=dim)
        if any(np.linalg.norm(cand - m) < min_dist for m in means):
            continue
        if avoid is not None and len(avoid) and np.min(np.linalg.norm(avoid - cand, axis=1)) < avoid_dist:
            continue
        means.append(cand)
    if len(means) < n:
        raise ConfigurationError(f"cannot place {n} separated {what} means in dimension {dim}; "
                                 "increase dim or mean_box, or lower the separation")
    return np.array(means).reshape(n, dim)


def make_task(config: StreamConfig) -> Task:
    """Build class geometry, the clean source dataset and the domain sequence.

    Deterministic in ``config.seed``.
    """
    ss = np.random.SeedSequence(config.seed)
    geo_rng, src_rng, dom_rng = (np.random.default_rng(s) for s in ss.spawn(3))
    c, d, std = config.num_classes, config.dim, config.class_std

    closed_means = _place_means(c, d, config.mean_box * std, config.min_separation * std, geo_rng)
    open_means = _place_means(config.num_open_classes, d, config.mean_box * std, config.min_separation * std,
                              geo_rng, avoid=closed_means, avoid_dist=config.open_min_separation * std,
                              what="open-set class")
    closed = [ClassSpec(m, std, k, False) for k, m in enumerate(closed_means)]
    opened = [ClassSpec(m, std, c + k, True) for k, m in enumerate(open_means)]

    def draw(per_class: int):
        xs = np.concatenate([s.sample(per_class, src_rng) for s in closed])
        ys = np.repeat(np.arange(c), per_class)
        return xs, ys

    src_x, src_y = draw(config.source_per_class)
    hold_x, hold_y = draw(config.holdout_per_class)

    domains = []
    lo, hi = config.intensity_range
    n_lo, n_hi = config.noise_range
    for k in range(config.num_domains):
        if k == 0 and config.first_domain_identity:
            domains.append(DomainTransform.identity(d))
            continue
        inten = dom_rng.uniform(lo, hi)
        rot = random_rotation(d, config.rotation_strength * inten, dom_rng)
        scale = np.exp(config.scale_strength * inten * dom_rng.standard_normal(d))
        shift = config.shift_strength * inten * std * dom_rng.standard_normal(d)
        noise = dom_rng.uniform(n_lo, n_hi) * std
        domains.append(DomainTransform(rot, scale, shift, noise))

    return Task(config, closed, opened, domains, src_x, src_y, hold_x, hold_y)


@dataclass
class LabeledBatch:
    features: np.ndarray
    true_labels: np.ndarray
    open_flags: np.ndarray
    domain_index: int
    index: int


@dataclass
class Stream:
    """Sequential iterator over the test stream of a task.

    Two streams built from the same task and seed yield bit-identical batches.
    """

    task: Task
    seed: int
    position: int = 0
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2,)))

    def __iter__(self):
        return self

    def __next__(self) -> LabeledBatch:
        return next_batch(self)

    def __len__(self) -> int:
        return self.task.config.total_batches


def next_batch(stream: Stream) -> LabeledBatch:
    cfg = stream.task.config
    if stream.position >= cfg.total_batches:
        raise StreamExhausted("stream exhausted")
    rng = stream.rng
    domain_index = stream.position // cfg.batches_per_domain
    n_open, n_closed = cfg.n_open, cfg.n_closed

    closed_labels = rng.integers(0, cfg.num_classes, size=n_closed)
    open_labels = (rng.integers(0, cfg.num_open_classes, size=n_open) + cfg.num_classes
                   if n_open else np.zeros(0, dtype=np.int64))
    labels = np.concatenate([closed_labels, open_labels]).astype(np.int64)
    labels = labels[rng.permutation(len(labels))]

    means = np.array([s.mean for s in stream.task.closed_specs + stream.task.open_specs])
    x = means[labels] + cfg.class_std * rng.standard_normal((len(labels), cfg.dim))
    x = stream.task.domains[domain_index].apply(x, rng)

    batch = LabeledBatch(x, labels, labels >= cfg.num_classes, domain_index, stream.position)
    stream.position += 1
    return batch


def augment(x: np.ndarray, rng: np.random.Generator, aug_std: float = 0.05, flip_prob: float = 0.0) -> np.ndarray:
    """Mean-preserving Gaussian jitter scaled by the per-feature batch std.

    With ``flip_prob > 0`` each sample additionally has a random pair of
    features negated with that probability (not mean-preserving).
    """
    x = np.asarray(x, dtype=np.float64)
    if aug_std == 0 and flip_prob == 0:
        return x.copy()
    noise = rng.standard_normal(x.shape)
    out = x + aug_std * x.std(axis=0) * noise
    if flip_prob > 0 and x.shape[1] >= 2:
        hit = rng.random(len(x)) < flip_prob
        for i in np.flatnonzero(hit):
            j, k = rng.choice(x.shape[1], size=2, replace=False)
            out[i, [j, k]] *= -1.0
    return out


def dump_stream_csv(task: Task, seed: int, path: str | Path) -> None:
    """Write the whole stream as rows of (domain_index, label, open_flag, f0..f{d-1})."""
    cfg = task.config
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain_index", "label", "open_flag"] + [f"f{i}" for i in range(cfg.dim)])
        for batch in Stream(task, seed):
            for row, label, flag in zip(batch.features, batch.true_labels, batch.open_flags):
                w.writerow([batch.domain_index, int(label), int(flag)] + [repr(float(v)) for v in row])
