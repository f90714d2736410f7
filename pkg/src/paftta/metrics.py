"""Closed-set accuracy, open-set AUROC, H-score and filtering diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .adaptation import Action
from .errors import UndefinedMetricError


@dataclass
class MetricRecord:
    step: int
    domain_index: int
    n_closed: int
    n_open: int
    n_correct_closed: int
    wrongly_filtered_closed: int
    scores: np.ndarray = field(repr=False)
    open_flags: np.ndarray = field(repr=False)

    @classmethod
    def from_step(cls, step: int, domain_index: int, predicted, labels, open_flags, actions, scores) -> "MetricRecord":
        open_flags = np.asarray(open_flags, dtype=bool)
        closed = ~open_flags
        predicted = np.asarray(predicted)
        labels = np.asarray(labels)
        actions = np.asarray(actions)
        return cls(
            step=step,
            domain_index=domain_index,
            n_closed=int(closed.sum()),
            n_open=int(open_flags.sum()),
            n_correct_closed=int((predicted[closed] == labels[closed]).sum()),
            wrongly_filtered_closed=int((actions[closed] == Action.MAXIMIZE).sum()),
            scores=np.asarray(scores, dtype=np.float64),
            open_flags=open_flags,
        )


def accuracy(records: Iterable[MetricRecord]) -> float:
    records = list(records)
    n = sum(r.n_closed for r in records)
    if n == 0:
        raise UndefinedMetricError("accuracy is undefined without closed-set samples")
    return sum(r.n_correct_closed for r in records) / n


def auroc(scores: Sequence[float], is_open: Sequence[bool]) -> float:
    """Mann-Whitney AUROC with open samples as positives; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(is_open, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one open and one closed sample")
    ranks = rankdata(s, method="average")
    # twice the U statistic is an exact integer in float64 for any realistic n
    u2 = 2.0 * ranks[pos].sum() - n_pos * (n_pos + 1)
    return u2 / (2.0 * n_pos * n_neg)


def h_score(acc: float, aur: float) -> float:
    if acc + aur == 0:
        return 0.0
    return 2.0 * acc * aur / (acc + aur)


def wrongly_filtered_rate(actions: Sequence[np.ndarray], open_flags: Sequence[np.ndarray],
                          window: int = 1) -> list[float]:
    """Fraction of closed-set samples sent to entropy maximization, per window of batches.

    Windows with no closed-set sample yield ``nan``.
    """
    if window < 1:
        raise ValueError("window must be >= 1 batch")
    out = []
    for start in range(0, len(actions), window):
        hit = tot = 0
        for a, f in zip(actions[start:start + window], open_flags[start:start + window]):
            closed = ~np.asarray(f, dtype=bool)
            tot += int(closed.sum())
            hit += int((np.asarray(a)[closed] == Action.MAXIMIZE).sum())
        out.append(hit / tot if tot else float("nan"))
    return out


def record_wrongly_filtered(records: Sequence[MetricRecord]) -> float:
    tot = sum(r.n_closed for r in records)
    return sum(r.wrongly_filtered_closed for r in records) / tot if tot else float("nan")


@dataclass
class SummaryRow:
    domain: str
    acc: float
    aur: float
    hs: float

    def as_list(self) -> list:
        return [self.domain, self.acc, self.aur, self.hs]


def per_domain_summary(records: Sequence[MetricRecord], pooling: str = "domain") -> list[SummaryRow]:
    """One row per domain plus an ``overall`` row.

    The overall ACC/AUR are means of the per-domain values; its H-score is
    computed from those means.  With ``pooling="global"`` the overall AUROC
    pools every score in the run instead.
    """
    if not records:
        raise UndefinedMetricError("no records")
    by_domain: dict[int, list[MetricRecord]] = {}
    for r in records:
        by_domain.setdefault(r.domain_index, []).append(r)
    rows = []
    for dom in sorted(by_domain):
        recs = by_domain[dom]
        acc = accuracy(recs)
        aur = auroc(np.concatenate([r.scores for r in recs]), np.concatenate([r.open_flags for r in recs]))
        rows.append(SummaryRow(str(dom), acc, aur, h_score(acc, aur)))
    acc = float(np.mean([r.acc for r in rows]))
    if pooling == "global":
        aur = auroc(np.concatenate([r.scores for r in records]), np.concatenate([r.open_flags for r in records]))
    elif pooling == "domain":
        aur = float(np.mean([r.aur for r in rows]))
    else:
        raise ValueError(f"unknown pooling {pooling!r}")
    rows.append(SummaryRow("overall", acc, aur, h_score(acc, aur)))
    return rows


def per_batch_hscore(records: Sequence[MetricRecord]) -> list[float]:
    out = []
    for r in records:
        try:
            out.append(h_score(r.n_correct_closed / r.n_closed, auroc(r.scores, r.open_flags)))
        except (UndefinedMetricError, ZeroDivisionError):
            out.append(float("nan"))
    return out


def write_summary_csv(rows: Sequence[SummaryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "acc", "aur", "hs"])
        for r in rows:
            w.writerow([r.domain, repr(float(r.acc)), repr(float(r.aur)), repr(float(r.hs))])


def read_summary_csv(path: str | Path) -> list[SummaryRow]:
    with open(path, newline="") as fh:
        return [SummaryRow(d["domain"], float(d["acc"]), float(d["aur"]), float(d["hs"])) for d in csv.DictReader(fh)]


def format_table(header: Sequence[str], rows: Sequence[Sequence], floatfmt: str = "{:.4f}") -> str:
    cells = [[str(h) for h in header]] + [
        [floatfmt.format(v) if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_curve_csv(values: Sequence[float], path: str | Path, name: str = "value") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_index", name])
        for i, v in enumerate(values):
            w.writerow([i, repr(float(v))])
