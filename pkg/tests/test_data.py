import numpy as np
import pytest

from sageselect import data
from sageselect.data import (
    HEADER,
    BlobDataset,
    LogRegModel,
    make_blobs,
    per_example_gradients,
    read_gradients,
    read_header,
    synth_lowrank,
    train_logreg,
    write_gradients,
)
from sageselect.errors import BudgetError, ConfigError, DataError, FormatError
from sageselect.verify import gram_spectrum, tail_energy


# -- gradient files --------------------------------------------------------------


def test_roundtrip_float64_is_bit_identical(tmp_path, rng):
    g = rng.standard_normal((10, 4))
    path = tmp_path / "g.sagegrdm"
    write_gradients(path, g)
    back, labels = read_gradients(path)
    assert labels is None
    assert back.tobytes() == g.tobytes()


def test_roundtrip_with_labels(tmp_path, rng):
    g = rng.standard_normal((7, 3))
    path = tmp_path / "g.sagegrdm"
    write_gradients(path, g, labels=[0, 2, 1, 1, 0, 4_000_000_000, 3])
    back, labels = read_gradients(path)
    assert labels.tolist() == [0, 2, 1, 1, 0, 4_000_000_000, 3]
    assert np.array_equal(back, g)


def test_float32_roundtrip(tmp_path, rng):
    g = rng.standard_normal((6, 5))
    path = tmp_path / "g32.sagegrdm"
    write_gradients(path, g, dtype="float32")
    back, _ = read_gradients(path)
    assert back.dtype == np.float64
    assert np.array_equal(back, g.astype(np.float32).astype(np.float64))
    assert path.stat().st_size == HEADER.size + 6 * 5 * 4


def test_header_layout_is_little_endian(tmp_path):
    path = tmp_path / "g.sagegrdm"
    write_gradients(path, np.ones((2, 3)), labels=[5, 6], sketch=True)
    raw = path.read_bytes()
    assert raw[:8] == b"SAGEGRDM"
    assert raw[8:12] == (1).to_bytes(4, "little")
    assert raw[12:20] == (2).to_bytes(8, "little")
    assert raw[20:28] == (3).to_bytes(8, "little")
    assert raw[28] == 1 and raw[29] == 3
    assert raw[30:34] == (5).to_bytes(4, "little")
    hdr = read_header(path)
    assert hdr.has_labels and hdr.is_sketch


def test_truncated_file(tmp_path, rng):
    path = tmp_path / "g.sagegrdm"
    write_gradients(path, rng.standard_normal((10, 4)))
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="byte offset"):
        read_gradients(path)
    path.write_bytes(raw[:12])
    with pytest.raises(FormatError, match="truncated header"):
        read_gradients(path)


@pytest.mark.parametrize(
    "pos, value, match",
    [(0, b"X", "magic"), (8, b"\x09", "version"), (28, b"\x07", "dtype"), (29, b"\x80", "flag")],
)
def test_corrupt_header_fields(tmp_path, pos, value, match):
    path = tmp_path / "g.sagegrdm"
    write_gradients(path, np.ones((2, 2)))
    raw = bytearray(path.read_bytes())
    raw[pos : pos + 1] = value
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=match) as err:
        read_gradients(path)
    assert err.value.offset == pos


def test_nan_rejected_on_write_and_read(tmp_path):
    g = np.ones((4, 3))
    g[2, 1] = np.nan
    with pytest.raises(DataError, match="row 2"):
        write_gradients(tmp_path / "x.sagegrdm", g)
    path = tmp_path / "ok.sagegrdm"
    write_gradients(path, np.ones((4, 3)))
    raw = bytearray(path.read_bytes())
    offset = HEADER.size + (3 * 3 + 0) * 8
    raw[offset : offset + 8] = np.array([np.inf]).tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="row 3"):
        read_gradients(path)


def test_write_rejects_bad_dtype(tmp_path):
    with pytest.raises(ConfigError):
        write_gradients(tmp_path / "x", np.ones((1, 1)), dtype="int8")


# -- synthetic gradients ---------------------------------------------------------


def test_lowrank_exact_has_no_tail():
    g = synth_lowrank(200, 30, 2, 0.0, seed=4)
    assert tail_energy(g, 2) <= 1e-9 * np.sum(g * g)


def test_lowrank_full_rank_is_generic():
    g = synth_lowrank(60, 20, 20, 0.1, seed=5)
    eigs = gram_spectrum(g)
    assert eigs.min() > 1e-6 * eigs.max()


def test_lowrank_noise_leaves_positive_tail():
    g = synth_lowrank(300, 25, 3, 0.2, seed=6)
    tail = tail_energy(g, 3)
    assert 0.0 < tail <= np.sum(g * g)


def test_lowrank_deterministic():
    assert np.array_equal(synth_lowrank(50, 8, 3, 0.1, 9), synth_lowrank(50, 8, 3, 0.1, 9))


def test_lowrank_rank_check():
    with pytest.raises(ConfigError):
        synth_lowrank(5, 4, 6, 0.0, 1)


# -- blobs -----------------------------------------------------------------------


def test_blob_balance_and_determinism():
    a = make_blobs(1001, 4, 3, 1.0, seed=3)
    b = make_blobs(1001, 4, 3, 1.0, seed=3)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    sizes = list(a.class_sizes().values())
    assert max(sizes) - min(sizes) <= 1
    assert set(np.unique(a.labels)) == {0, 1, 2}


def test_blob_imbalance_geometric():
    blobs = make_blobs(1500, 5, 4, 1.0, seed=8, imbalance=0.5)
    assert blobs.class_sizes() == {0: 800, 1: 400, 2: 200, 3: 100}
    uneven = make_blobs(1000, 5, 4, 1.0, seed=8, imbalance=0.5)
    for c, size in uneven.class_sizes().items():
        assert abs(size - 1000 * 8 / 15 / 2**c) <= 1


def test_blob_center_separation():
    blobs = make_blobs(2000, 6, 4, 2.0, seed=12)
    centers = np.array([blobs.features[blobs.labels == c].mean(axis=0) for c in range(4)])
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=2)[np.triu_indices(4, 1)]
    # Empirical centers wander by ~sigma/sqrt(500); leave room for that.
    assert gaps.min() >= 4 * 2.0 - 0.5


def test_blob_separable_limit():
    blobs = make_blobs(300, 4, 3, 1e-6, seed=2)
    model = LogRegModel.zeros(3, 4)
    data.sgd(model, blobs, 50, 0.5, np.random.default_rng(0))
    assert data.accuracy(model, blobs) == 1.0


def test_blob_config_errors():
    with pytest.raises(ConfigError):
        make_blobs(10, 2, 1, 1.0, 0)
    with pytest.raises(ConfigError):
        make_blobs(2, 2, 3, 1.0, 0)
    with pytest.raises(ConfigError):
        make_blobs(10, 2, 2, 1.0, 0, imbalance=1.5)


def test_blob_csv(tmp_path):
    blobs = make_blobs(5, 2, 2, 1.0, seed=1)
    path = tmp_path / "d.csv"
    blobs.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "f0,f1,label"
    assert len(lines) == 6
    first = lines[1].split(",")
    assert float(first[0]) == blobs.features[0, 0] and int(first[2]) == blobs.labels[0]


def test_default_three_class_blob_accuracy():
    blobs = make_blobs(1000, 10, 3, 1.0, seed=29)
    _, acc = train_logreg(blobs, seed=29)
    assert acc >= 0.9


# -- model and gradients ---------------------------------------------------------


def _fd_gradient(model, x, y, step=1e-5):
    theta = model.flat()
    out = np.empty_like(theta)
    for j in range(theta.size):
        hi, lo = theta.copy(), theta.copy()
        hi[j] += step
        lo[j] -= step
        f_hi = LogRegModel.from_flat(hi, *model.weights.shape).losses(x[None], [y])[0]
        f_lo = LogRegModel.from_flat(lo, *model.weights.shape).losses(x[None], [y])[0]
        out[j] = (f_hi - f_lo) / (2 * step)
    return out


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(41)
    worst = 0.0
    for _ in range(20):
        c, d = int(rng.integers(2, 5)), int(rng.integers(1, 6))
        model = LogRegModel(rng.standard_normal((c, d)), rng.standard_normal(c))
        x = rng.standard_normal(d)
        y = int(rng.integers(c))
        analytic = per_example_gradients(model, x[None], [y])[0]
        numeric = _fd_gradient(model, x, y)
        assert analytic.shape == (c * (d + 1),)
        worst = max(worst, np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic))
    assert worst <= 1e-6


def test_gradient_two_class_hand_case():
    model = LogRegModel(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.0, 0.5]))
    x = np.array([2.0, -1.0])
    # logits (2, -0.5); p0 = 1 / (1 + e^-2.5)
    p0 = 1.0 / (1.0 + np.exp(-2.5))
    resid = np.array([p0, 1 - p0]) - np.array([0.0, 1.0])
    expected = np.concatenate([np.outer(resid, x).ravel(), resid])
    got = per_example_gradients(model, x[None], [1])[0]
    assert np.allclose(got, expected, rtol=1e-14, atol=0)
    assert np.allclose(got, _fd_gradient(model, x, 1), rtol=1e-6)


def test_gradient_vanishes_for_confident_correct():
    model = LogRegModel(np.array([[50.0], [-50.0]]), np.zeros(2))
    g = per_example_gradients(model, np.array([[1.0]]), [0])
    assert np.linalg.norm(g) < 1e-40


def test_duplicate_examples_give_identical_rows(rng):
    model = LogRegModel(rng.standard_normal((3, 4)), rng.standard_normal(3))
    x = rng.standard_normal((1, 4))
    g = per_example_gradients(model, np.vstack([x, x]), [2, 2])
    assert np.array_equal(g[0], g[1])


def test_flat_roundtrip(rng):
    model = LogRegModel(rng.standard_normal((3, 2)), rng.standard_normal(3))
    back = LogRegModel.from_flat(model.flat(), 3, 2)
    assert np.array_equal(back.weights, model.weights) and np.array_equal(back.bias, model.bias)
    assert model.param_count == 9


# -- training --------------------------------------------------------------------


@pytest.fixture(scope="module")
def separable():
    return make_blobs(600, 5, 3, 0.2, seed=5)


def test_train_full_separable(separable):
    _, acc = train_logreg(separable, seed=1)
    assert acc >= 0.95


def test_train_deterministic(separable):
    m1, a1 = train_logreg(separable, subset=np.arange(0, 480, 3), seed=4)
    m2, a2 = train_logreg(separable, subset=np.arange(0, 480, 3), seed=4)
    assert a1 == a2
    assert np.array_equal(m1.flat(), m2.flat())


def test_train_single_example(separable):
    _, a1 = train_logreg(separable, subset=[7], seed=2)
    _, a2 = train_logreg(separable, subset=[7], seed=2)
    assert a1 == a2


def test_train_subset_errors(separable):
    with pytest.raises(BudgetError):
        train_logreg(separable, subset=[], seed=2)
    with pytest.raises(BudgetError):
        train_logreg(separable, subset=[480], seed=2)


def test_split_is_eighty_twenty():
    train, test = data.train_test_indices(1000, 3)
    assert len(train) == 800 and len(test) == 200
    assert not set(train) & set(test)


def test_training_gradients_shape(separable):
    grads, labels = data.training_gradients(separable, seed=1)
    assert grads.shape == (480, 3 * 6)
    assert labels.shape == (480,)
    again, _ = data.training_gradients(separable, seed=1)
    assert np.array_equal(grads, again)


def test_subset_keeps_class_count():
    blobs = BlobDataset(np.zeros((3, 1)), np.array([0, 1, 2]), 3, 0)
    assert blobs.subset([0]).class_count == 3
