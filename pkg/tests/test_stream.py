import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from paftta.errors import ConfigurationError, StreamExhausted
from paftta.stream import (DomainTransform, Stream, StreamConfig, Task, augment, dump_stream_csv, make_task,
                           next_batch, random_rotation)

from conftest import small_stream


@pytest.mark.parametrize("ratio, n_open", [(1.0, 100), (0.0, 0), (0.25, 40), (0.5, 66), (2.0, 133)])
def test_open_count_rounding(ratio, n_open):
    cfg = StreamConfig(open_ratio=ratio)
    assert cfg.n_open == n_open
    assert cfg.n_closed == 200 - n_open


def test_reference_defaults():
    cfg = StreamConfig()
    assert (cfg.dim, cfg.num_classes, cfg.num_open_classes) == (16, 8, 4)
    assert (cfg.num_domains, cfg.batches_per_domain, cfg.batch_size, cfg.open_ratio) == (15, 100, 200, 1.0)
    assert cfg.total_batches == 1500


def test_config_validation():
    with pytest.raises(ConfigurationError):
        StreamConfig(open_ratio=-0.1)
    with pytest.raises(ConfigurationError):
        StreamConfig(batch_size=1)
    with pytest.raises(ConfigurationError):
        StreamConfig(num_open_classes=0)
    StreamConfig(num_open_classes=0, open_ratio=0.0)


def test_impossible_geometry_is_reported():
    with pytest.raises(ConfigurationError, match="cannot place"):
        make_task(StreamConfig(dim=2, num_classes=8, mean_box=1.0, min_separation=4.0))


def test_stream_is_deterministic(small_task):
    a = [b.features for b in Stream(small_task, 3)]
    b = [b.features for b in Stream(small_task, 3)]
    c = [b.features for b in Stream(small_task, 4)]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not np.array_equal(a[0], c[0])


def test_batches_have_fixed_composition_and_domain_order(small_task):
    cfg = small_task.config
    seen = []
    for batch in Stream(small_task, 0):
        assert batch.features.shape == (cfg.batch_size, cfg.dim)
        assert batch.open_flags.sum() == cfg.n_open
        np.testing.assert_array_equal(batch.open_flags, batch.true_labels >= cfg.num_classes)
        seen.append(batch.domain_index)
    assert seen == [i // cfg.batches_per_domain for i in range(cfg.total_batches)]


def test_exhaustion(small_task):
    s = Stream(small_task, 0)
    for _ in range(small_task.config.total_batches):
        next_batch(s)
    with pytest.raises(StreamExhausted):
        next_batch(s)


def test_zero_open_ratio_has_no_open_samples():
    task = make_task(small_stream(open_ratio=0.0))
    assert all(not b.open_flags.any() for b in Stream(task, 0))


def test_identity_first_domain_gives_clean_data():
    task = make_task(small_stream(first_domain_identity=True))
    t = task.domains[0]
    np.testing.assert_array_equal(t.rotation, np.eye(task.config.dim))
    assert t.noise_std == 0.0


def test_shift_applies_to_open_samples_too():
    t = DomainTransform(np.eye(2), np.array([2.0, 1.0]), np.array([1.0, -1.0]), 0.0)
    x = np.array([[1.0, 1.0], [0.0, 3.0]])
    np.testing.assert_array_equal(t.apply(x), [[3.0, 0.0], [1.0, 2.0]])


@given(st.integers(2, 12), st.floats(0.0, 2.0), st.integers(0, 1000))
def test_random_rotation_is_orthogonal(dim, strength, seed):
    r = random_rotation(dim, strength, np.random.default_rng(seed))
    np.testing.assert_allclose(r @ r.T, np.eye(dim), atol=1e-12)
    assert np.linalg.det(r) > 0


def test_augment_zero_std_is_exact_copy(rng):
    x = rng.normal(size=(10, 3))
    y = augment(x, rng, 0.0)
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_augment_noise_scale_matches_batch_std():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20000, 2)) * np.array([1.0, 5.0])
    diff = augment(x, rng, 0.1) - x
    np.testing.assert_allclose(diff.std(axis=0), 0.1 * x.std(axis=0), rtol=0.03)
    np.testing.assert_allclose(diff.mean(axis=0), 0.0, atol=0.02)


def test_task_round_trip(small_task):
    back = Task.from_dict(small_task.to_dict())
    assert back.config == small_task.config
    np.testing.assert_array_equal(back.source_x, small_task.source_x)
    for a, b in zip(back.domains, small_task.domains):
        np.testing.assert_array_equal(a.rotation, b.rotation)
    a = next(Stream(back, 1)).features
    np.testing.assert_array_equal(a, next(Stream(small_task, 1)).features)


def test_stream_csv_dump(tmp_path, small_task):
    path = tmp_path / "stream.csv"
    dump_stream_csv(small_task, 0, path)
    rows = path.read_text().splitlines()
    cfg = small_task.config
    assert rows[0].split(",")[:4] == ["domain_index", "label", "open_flag", "f0"]
    assert len(rows) == 1 + cfg.total_batches * cfg.batch_size
    first = next(Stream(small_task, 0))
    values = [float(v) for v in rows[1].split(",")[3:]]
    np.testing.assert_array_equal(values, first.features[0])
