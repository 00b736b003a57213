import csv
import json
import math
import struct

import numpy as np
import pytest

from dynfuse.data import (
    EASY,
    HARD,
    DatasetFormatError,
    NoiseSpec,
    SyntheticSpec,
    export_csv,
    generate,
    inject_noise,
    load_dataset,
    save_dataset,
)

PROBE_SEEDS = range(5)


def _probe_accuracy(train, test, modalities):
    """Least-squares linear probe on +-1 targets; independent of the package."""

    def design(ds):
        x = np.concatenate([ds.features[m] for m in modalities], axis=1)
        return np.hstack([x, np.ones((len(ds), 1))])

    target = 2.0 * train.labels - 1.0
    w, *_ = np.linalg.lstsq(design(train), target, rcond=None)
    pred = (design(test) @ w > 0).astype(np.int64)
    return float(np.mean(pred == test.labels))


def _spec(p_hard, seed, **kw):
    return SyntheticSpec(p_hard=p_hard, n_train=2000, n_test=2000, seed=seed, **kw)


@pytest.mark.parametrize("seed", PROBE_SEEDS)
def test_all_easy_is_solvable_from_modality1(seed):
    train, test = generate(_spec(0.0, seed))
    assert _probe_accuracy(train, test, [0]) >= 0.95


@pytest.mark.parametrize("seed", PROBE_SEEDS)
def test_all_hard_needs_both_modalities(seed):
    train, test = generate(_spec(1.0, seed))
    assert _probe_accuracy(train, test, [0]) <= 0.6
    assert _probe_accuracy(train, test, [0, 1]) >= 0.95


def test_difficulty_fraction_and_shapes():
    train, test = generate(SyntheticSpec(p_hard=0.2, n_train=4000, n_test=2000))
    assert train.dims == (32, 32) and len(train) == 4000 and len(test) == 2000
    frac = float(np.mean(train.difficulty == HARD))
    assert abs(frac - 0.2) < 4 * math.sqrt(0.2 * 0.8 / 4000)
    assert set(np.unique(train.difficulty)) <= {EASY, HARD}
    assert set(np.unique(train.labels)) == {0, 1}


def test_other_tasks_generate():
    mc, _ = generate(SyntheticSpec(task="multiclass", n_classes=4, n_train=50, n_test=10))
    assert mc.n_classes == 4 and mc.labels.max() < 4
    reg, _ = generate(SyntheticSpec(task="regression", n_train=50, n_test=10))
    assert reg.labels.dtype == np.float64 and not reg.is_classification
    three, _ = generate(SyntheticSpec(M=3, dims=(8, 8, 8), n_train=20, n_test=5))
    assert three.dims == (8, 8, 8)


def test_spec_validation():
    for bad in (dict(p_hard=1.5), dict(p_hard=-0.1), dict(dims=(32, 0)), dict(M=2, dims=(32,)),
                dict(task="ranking"), dict(M=1, dims=(32,))):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad)
    with pytest.raises(ValueError):
        NoiseSpec(sigma=-1.0)
    with pytest.raises(ValueError):
        NoiseSpec(prob=2.0)
    with pytest.raises(ValueError):
        NoiseSpec(target="modality_3")


def test_same_seed_same_bytes(tmp_path):
    for i in range(2):
        train, _ = generate(SyntheticSpec(n_train=100, n_test=10, seed=7))
        save_dataset(train, tmp_path / f"{i}.dmmd")
    assert (tmp_path / "0.dmmd").read_bytes() == (tmp_path / "1.dmmd").read_bytes()
    other, _ = generate(SyntheticSpec(n_train=100, n_test=10, seed=8))
    assert not other.equals(train)


@pytest.fixture
def small():
    return generate(SyntheticSpec(n_train=9000, n_test=10, seed=1))[0]


def test_noise_trivial_cases(small):
    rng = np.random.default_rng(0)
    assert inject_noise(small, NoiseSpec(sigma=0.0), rng).equals(small)
    assert inject_noise(small, NoiseSpec(sigma=3.0, prob=0.0), rng).equals(small)


def test_noise_count_binomial_bound(small):
    noisy = inject_noise(small, NoiseSpec("modality_2", sigma=1.0, prob=1 / 3), np.random.default_rng(0))
    hit = np.any(noisy.features[1] != small.features[1], axis=1)
    # Mean n/3 = 3000, binomial sd ~ 45; 200 is well beyond 3 sd.
    assert abs(hit.sum() - 3000) <= 200
    np.testing.assert_array_equal(noisy.features[0], small.features[0])
    np.testing.assert_array_equal(noisy.labels, small.labels)
    np.testing.assert_array_equal(noisy.difficulty, small.difficulty)


def test_noise_targets_both(small):
    noisy = inject_noise(small, NoiseSpec("both", sigma=1.0, prob=1.0), np.random.default_rng(0))
    assert all(np.all(a != b) for a, b in zip(noisy.features, small.features))


def test_noise_variances_compose(small):
    a, b = 1.5, 2.0
    rng = np.random.default_rng(3)
    twice = inject_noise(inject_noise(small, NoiseSpec(sigma=a, prob=1.0), rng), NoiseSpec(sigma=b, prob=1.0), rng)
    once = inject_noise(small, NoiseSpec(sigma=math.hypot(a, b), prob=1.0), rng)
    v2 = np.var(twice.features[1] - small.features[1])
    v1 = np.var(once.features[1] - small.features[1])
    assert abs(v2 / v1 - 1) < 0.05
    assert abs(v2 / (a * a + b * b) - 1) < 0.05


def test_round_trip_is_bitwise(tmp_path):
    for task in ("binary_class", "regression"):
        ds, _ = generate(SyntheticSpec(task=task, n_train=57, n_test=3, seed=2))
        path = tmp_path / f"{task}.dmmd"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert back.equals(ds)
        assert all(a.tobytes() == b.tobytes() for a, b in zip(back.features, ds.features))
        assert back.meta == json.loads(json.dumps(ds.meta))


def _saved(tmp_path, n=10):
    ds, _ = generate(SyntheticSpec(n_train=n, n_test=1))
    path = tmp_path / "d.dmmd"
    save_dataset(ds, path)
    return path, path.read_bytes()


def test_truncated_file_errors(tmp_path):
    path, raw = _saved(tmp_path)
    path.write_bytes(raw[:-100])
    with pytest.raises(DatasetFormatError, match="truncated") as info:
        load_dataset(path)
    assert info.value.offset > 0
    path.write_bytes(raw[:5])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(DatasetFormatError, match="trailing"):
        load_dataset(path)


def test_bad_magic_and_header_mismatch(tmp_path):
    path, raw = _saved(tmp_path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DatasetFormatError) as info:
        load_dataset(path)
    assert info.value.offset == 0
    _, _, hlen = struct.unpack_from("<4sHI", raw)
    header = raw[10:10 + hlen].replace(b'"M": 2', b'"M": 3')
    path.write_bytes(raw[:10] + header + raw[10 + hlen:])
    with pytest.raises(DatasetFormatError, match="modalities"):
        load_dataset(path)
    path.write_bytes(raw[:10] + b"{" * hlen + raw[10 + hlen:])
    with pytest.raises(DatasetFormatError, match="malformed"):
        load_dataset(path)


def test_csv_export(tmp_path):
    ds, _ = generate(SyntheticSpec(dims=(3, 4), n_train=5, n_test=1))
    path = tmp_path / "d.csv"
    export_csv(ds, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["difficulty", "label", "m1_0", "m1_1", "m1_2", "m2_0", "m2_1", "m2_2", "m2_3"]
    assert len(rows) == 6
    assert float(rows[1][2]) == ds.features[0][0, 0]
    assert int(rows[3][1]) == ds.labels[2]
