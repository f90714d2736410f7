import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paftta import metrics
from paftta.adaptation import Action, Hyperparams
from paftta.errors import UndefinedMetricError
from paftta.metrics import MetricRecord, auroc, h_score, per_domain_summary, wrongly_filtered_rate
from paftta.runner import run_stream


def brute_auroc(scores, is_open) -> Fraction:
    pos = [s for s, o in zip(scores, is_open) if o]
    neg = [s for s, o in zip(scores, is_open) if not o]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@st.composite
def scored_labels(draw):
    n = draw(st.integers(2, 60))
    flags = draw(st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda f: 0 < sum(f) < len(f)))
    tied = draw(st.booleans())
    elem = st.integers(0, 4).map(float) if tied else st.floats(-5, 5)
    scores = draw(st.lists(elem, min_size=n, max_size=n))
    return scores, flags


@given(scored_labels())
def test_auroc_matches_pair_counting(case):
    scores, flags = case
    assert auroc(scores, flags) == pytest.approx(float(brute_auroc(scores, flags)), abs=1e-12)


@given(scored_labels())
def test_auroc_symmetry(case):
    scores, flags = case
    flipped = auroc([-s for s in scores], flags)
    assert auroc(scores, flags) + flipped == pytest.approx(1.0, abs=1e-12)


def test_auroc_hand_cases():
    assert auroc([0.1, 0.2, 0.9, 0.8], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]) == 0.0
    assert auroc([1.0, 1.0, 1.0, 1.0], [0, 1, 0, 1]) == 0.5
    assert auroc([1.0, 2.0, 2.0], [0, 0, 1]) == 0.75


def test_auroc_undefined():
    with pytest.raises(UndefinedMetricError):
        auroc([1.0, 2.0], [0, 0])
    with pytest.raises(UndefinedMetricError):
        auroc([1.0, 2.0], [1, 1])


def test_h_score():
    assert h_score(1.0, 1.0) == 1.0
    assert h_score(0.0, 0.9) == 0.0
    assert h_score(0.0, 0.0) == 0.0
    assert h_score(0.5, 1.0) == pytest.approx(2 / 3)


@given(st.floats(0, 1), st.floats(0, 1))
def test_h_score_between_min_and_mean(a, b):
    h = h_score(a, b)
    assert min(a, b) - 1e-12 <= h <= (a + b) / 2 + 1e-12


def rec(step, dom, predicted, labels, flags, actions, scores):
    return MetricRecord.from_step(step, dom, np.array(predicted), np.array(labels), np.array(flags, bool),
                                  np.array(actions), np.array(scores, float))


def test_accuracy_counts_closed_samples_only():
    r = rec(0, 0, [1, 2, 0, 5], [1, 3, 9, 9], [0, 0, 1, 1], [0, 0, 0, 0], [0, 0, 1, 1])
    assert metrics.accuracy([r]) == 0.5
    with pytest.raises(UndefinedMetricError):
        metrics.accuracy([rec(0, 0, [0], [9], [1], [0], [0.0])])


def test_wrongly_filtered_rate_windows():
    m, x, e = Action.MINIMIZE, Action.EXCLUDED, Action.MAXIMIZE
    actions = [np.array([e, m, e]), np.array([m, m, e]), np.array([e, e, e])]
    flags = [np.array([0, 0, 1], bool), np.array([0, 0, 0], bool), np.array([1, 1, 1], bool)]
    per_batch = wrongly_filtered_rate(actions, flags)
    assert per_batch[:2] == [0.5, pytest.approx(1 / 3)] and np.isnan(per_batch[2])
    windowed = wrongly_filtered_rate(actions, flags, window=2)
    assert windowed[0] == pytest.approx(2 / 5) and np.isnan(windowed[1])
    # open-set samples sent to maximization are not "wrongly" filtered
    assert wrongly_filtered_rate([np.array([e, x])], [np.array([1, 0], bool)]) == [0.0]


def test_per_domain_summary_macro_average():
    recs = [
        rec(0, 0, [1, 0], [1, 9], [0, 1], [0, 0], [0.0, 1.0]),
        rec(1, 0, [2, 0, 0], [1, 9, 9], [0, 1, 1], [0, 0, 0], [2.0, 1.0, 3.0]),
        rec(2, 1, [0, 0, 0, 0], [0, 0, 0, 9], [0, 0, 0, 1], [0, 0, 0, 0], [0.0, 0.0, 0.0, 0.0]),
    ]
    rows = per_domain_summary(recs)
    assert [r.domain for r in rows] == ["0", "1", "overall"]
    assert rows[0].acc == 0.5 and rows[1].acc == 1.0
    # domain 0 scores: closed {0, 2}, open {1, 1, 3}: wins 1 + 0 + 1 + 0 + 1 + 1 = 4 of 6
    assert rows[0].aur == pytest.approx(4 / 6)
    assert rows[1].aur == 0.5
    assert rows[2].acc == pytest.approx(0.75)
    assert rows[2].aur == pytest.approx((4 / 6 + 0.5) / 2)
    assert rows[2].hs == pytest.approx(h_score(0.75, (4 / 6 + 0.5) / 2))
    glob = per_domain_summary(recs, pooling="global")
    assert glob[-1].aur == pytest.approx(float(brute_auroc([0.0, 1.0, 2.0, 1.0, 3.0, 0, 0, 0, 0],
                                                            [0, 1, 0, 1, 1, 0, 0, 0, 1])))


def test_summary_matches_log_replay(tmp_path, small_task, small_source):
    """Recompute the summary from the JSONL log alone and compare."""
    log = tmp_path / "steps.jsonl"
    with open(log, "w") as fh:
        result = run_stream(small_task, small_source, Hyperparams(), seed=2, log=fh)
    rows = per_domain_summary(result.records)

    by_dom: dict = {}
    for line in log.read_text().splitlines():
        row = json.loads(line)
        by_dom.setdefault(row["domain_index"], []).append(row["samples"])
    accs, aurs = [], []
    for dom in sorted(by_dom):
        correct = closed = 0
        scores, flags = [], []
        for s in by_dom[dom]:
            for lab, is_open, pred, en in zip(s["label"], s["is_open"], s["predicted_label"], s["energy_score"]):
                scores.append(en)
                flags.append(is_open)
                if not is_open:
                    closed += 1
                    correct += int(pred == lab)
        accs.append(correct / closed)
        aurs.append(float(brute_auroc(scores, flags)))
    assert [r.acc for r in rows[:-1]] == pytest.approx(accs, abs=1e-12)
    assert [r.aur for r in rows[:-1]] == pytest.approx(aurs, abs=1e-12)
    assert rows[-1].hs == pytest.approx(h_score(np.mean(accs), np.mean(aurs)), abs=1e-12)


def test_summary_csv_round_trip(tmp_path):
    rows = [metrics.SummaryRow("0", 0.1, 0.2, 0.3), metrics.SummaryRow("overall", 1 / 3, 2 / 3, 0.5)]
    metrics.write_summary_csv(rows, tmp_path / "s.csv")
    assert metrics.read_summary_csv(tmp_path / "s.csv") == rows


def test_format_table_aligns():
    text = metrics.format_table(["a", "bb"], [["x", 1.0], ["yyy", 0.25]])
    lines = text.splitlines()
    assert len({len(l) for l in lines}) == 1
    assert "1.0000" in text and "0.2500" in text
