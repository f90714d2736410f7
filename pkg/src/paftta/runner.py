"""Stream a task through one adaptation variant and collect metric records."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO

import numpy as np

from .adaptation import Hyperparams, ModelTriple, StepResult, adapt_step
from .errors import PafttaError
from .metrics import MetricRecord
from .nn_core import LayerStack
from .stream import Stream, Task

# spawn-key components for seed derivation
STREAM_KEY = 2
AUGMENT_KEY = 3


def component_rng(seed: int, component: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(component,)))


@dataclass
class RunResult:
    records: list[MetricRecord]
    actions: list[np.ndarray] = field(repr=False)
    open_flags: list[np.ndarray] = field(repr=False)
    triple: ModelTriple = field(repr=False)


def step_log_row(step: int, batch, res: StepResult, samples: bool = True) -> dict:
    d = res.decisions
    row = {"step": step, "domain_index": batch.domain_index, "loss": res.loss}
    if not samples:
        return row
    row["samples"] = {
        "label": batch.true_labels.tolist(),
        "is_open": batch.open_flags.tolist(),
        "h_adapt": d.h_adapt.tolist(),
        "h_ema": d.h_ema.tolist(),
        "f_pr": d.f_pr.astype(int).tolist(),
        "f_aux": d.f_aux.astype(int).tolist(),
        "w_soft": d.w_soft.tolist(),
        "action": d.action.tolist(),
        "coeff": res.coeffs.tolist(),
        "energy_score": res.energy.tolist(),
        "predicted_label": res.predicted.tolist(),
    }
    if res.kip_weights is not None:
        row["samples"]["c_source"] = res.kip_weights[:, 0].tolist()
        row["samples"]["c_adapt"] = res.kip_weights[:, 1].tolist()
        row["samples"]["c_ema"] = res.kip_weights[:, 2].tolist()
    return row


def run_stream(task: Task, source: LayerStack, hp: Hyperparams, seed: int, log: IO[str] | None = None,
               max_batches: int | None = None, on_step=None, log_samples: bool = True) -> RunResult:
    """Adapt continually over the whole stream; no resets between domains.

    ``log`` receives one JSON line per batch.  ``on_step(step, batch, result,
    triple)`` is an optional observer hook.
    """
    triple = ModelTriple.from_source(source, hp)
    aug_rng = component_rng(seed, AUGMENT_KEY)
    records, actions, flags = [], [], []
    for step, batch in enumerate(Stream(task, seed)):
        if max_batches is not None and step >= max_batches:
            break
        try:
            res = adapt_step(triple, batch, hp, aug_rng)
        except PafttaError as exc:
            raise type(exc)(f"batch {step}: {exc}") from exc
        records.append(MetricRecord.from_step(step, batch.domain_index, res.predicted, batch.true_labels,
                                              batch.open_flags, res.decisions.action, res.energy))
        actions.append(res.decisions.action)
        flags.append(batch.open_flags)
        if log is not None:
            log.write(json.dumps(step_log_row(step, batch, res, log_samples), separators=(",", ":")) + "\n")
        if on_step is not None:
            on_step(step, batch, res, triple)
    return RunResult(records, actions, flags, triple)
