import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import metrics_direct
from hsiwin.augment import AugmentPolicy, augment_set
from hsiwin.datacube import LabelMap
from hsiwin.network import build_model, load_model_config
from hsiwin.sampling import TEST, TRAIN, audit_partition, extract_windows, leakage_free_sample
from hsiwin.tensor import Tensor
from hsiwin.train_eval import (
    AdamWState,
    TrainConfig,
    adamw_step,
    confusion,
    metrics,
    predict,
    stack_windows,
    train,
)


def param(v):
    return Tensor(np.array(v, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------------------
# optimiser


def test_adamw_zero_grad_no_decay():
    p = {"w": param([1.0, -2.0])}
    p["w"].grad = np.zeros(2)
    adamw_step(p, AdamWState(), 1, TrainConfig(learning_rate=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])


def test_adamw_zero_grad_pure_shrink():
    p = {"w": param([1.0, -2.0]), "a.norm.g": param([3.0])}
    for t in p.values():
        t.grad = np.zeros(t.shape)
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01)
    adamw_step(p, AdamWState(), 1, cfg)
    np.testing.assert_allclose(p["w"].data, np.array([1.0, -2.0]) * (1 - 0.1 * 0.01), rtol=1e-15)
    assert p["a.norm.g"].data[0] == 3.0  # norm parameters are not decayed


def reference_adamw(theta, grad_fn, steps, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        theta = theta - lr * (mh / (np.sqrt(vh) + eps) + wd * theta)
    return theta


def test_adamw_quadratic_converges():
    p = {"w": param([1.0])}
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0)
    st_ = AdamWState()
    for t in range(1, 201):
        p["w"].grad = p["w"].data.copy()  # d(theta^2/2)
        adamw_step(p, st_, t, cfg)
    assert abs(p["w"].data[0]) < 0.01
    ref = reference_adamw(1.0, lambda th: th, 200, 0.1, 0.0)
    assert p["w"].data[0] == pytest.approx(ref, rel=1e-12, abs=1e-15)


def test_adamw_matches_reference_with_decay():
    p = {"w": param([0.5])}
    cfg = TrainConfig(learning_rate=0.05, weight_decay=0.1)
    st_ = AdamWState()
    for t in range(1, 51):
        p["w"].grad = 3 * p["w"].data**2 - 1
        adamw_step(p, st_, t, cfg)
    ref = reference_adamw(0.5, lambda th: 3 * th**2 - 1, 50, 0.05, 0.1)
    assert p["w"].data[0] == pytest.approx(ref, rel=1e-12)


def test_adamw_rejects_nonfinite():
    p = {"layer.w": param([1.0])}
    p["layer.w"].grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="layer.w"):
        adamw_step(p, AdamWState(), 1, TrainConfig())


@pytest.mark.parametrize("kw", [{"epochs": 0}, {"learning_rate": 0.0}, {"batch_size": 0}, {"betas": (1.0, 0.9)}])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# ---------------------------------------------------------------------------
# training


@pytest.fixture(scope="module")
def toy_windows(toy_scene):
    cube, labels = toy_scene
    part = leakage_free_sample(cube, labels, 8, 0.3, 1)
    wins = augment_set(extract_windows(cube, labels, part, TRAIN), AugmentPolicy(copies=1, seed=1))
    return part, wins


def test_stack_windows_layout(toy_windows):
    _, wins = toy_windows
    x, y = stack_windows(wins[:3])
    assert x.shape == (3, 16, 8, 8) and y.shape == (3, 8, 8)
    np.testing.assert_array_equal(x[1, :, 2, 5], wins[1][0][2, 5])
    with pytest.raises(ValueError):
        stack_windows([])


@pytest.mark.slow
def test_train_reduces_loss(toy_windows):
    _, wins = toy_windows
    model = build_model(load_model_config("hefcn-toy"), seed=0)
    hist = train(model, wins, TrainConfig(learning_rate=1e-3, epochs=30, batch_size=16, seed=0))
    assert len(hist) == 30
    assert hist[-1].mean_loss < hist[0].mean_loss
    assert hist[-1].mean_loss < 0.05
    assert [h.epoch for h in hist] == list(range(1, 31))
    assert all(b.wall_seconds >= a.wall_seconds for a, b in zip(hist, hist[1:]))


def test_train_is_deterministic(toy_windows):
    _, wins = toy_windows
    cfg = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=8, seed=4)
    finals = []
    for _ in range(2):
        model = build_model(load_model_config("hefcn-toy"), seed=0)
        train(model, wins, cfg)
        finals.append(b"".join(t.data.tobytes() for t in model.params.values()))
    assert finals[0] == finals[1]


def test_train_without_labels_fails():
    wins = [(np.zeros((4, 4, 16), dtype=np.float32), np.zeros((4, 4), dtype=np.int32))]
    with pytest.raises(ValueError):
        train(build_model(load_model_config("hefcn-toy")), wins, TrainConfig(epochs=1))


# ---------------------------------------------------------------------------
# inference


def constant_model(cls=1, k=4):
    model = build_model(load_model_config("hefcn-toy", num_classes=k), seed=0)
    model.params["head.w"].data[:] = 0
    model.params["head.b"].data[:] = 0
    model.params["head.b"].data[cls - 1] = 10.0
    return model


def test_predict_constant_head(toy_scene):
    cube, labels = toy_scene
    part = leakage_free_sample(cube, labels, 8, 0.3, 1)
    pred = predict(constant_model(1), cube, part, TEST)
    tagged = part.pixel_tags() == TEST
    assert np.all(pred[tagged] == 1) and np.all(pred[~tagged] == 0)
    assert int((pred > 0).sum()) == len(part.windows(TEST)) * 64


def test_predict_forwards_each_window_once(toy_scene):
    cube, labels = toy_scene
    part = leakage_free_sample(cube, labels, 8, 0.3, 1)
    model = constant_model(2)
    trace = []
    predict(model, cube, part, TEST, batch_size=7, trace=trace)
    assert model.windows_forwarded == len(part.windows(TEST))
    assert sorted(trace) == sorted(part.windows(TEST)) and len(set(trace)) == len(trace)


def test_predict_band_mismatch(toy_scene):
    cube, labels = toy_scene
    part = leakage_free_sample(cube, labels, 8, 0.3, 1)
    model = build_model(load_model_config("hefcn-toy", input_bands=15))
    with pytest.raises(ValueError):
        predict(model, cube, part)


# ---------------------------------------------------------------------------
# confusion and metrics


def one_window_partition(grid):
    from hsiwin.sampling import WindowPartition

    h, w = grid.shape
    return WindowPartition(max(h, w), (h, w), np.array([[TEST]], dtype=np.int8),
                           np.ones((1, 1), dtype=np.int32), 0, (0.5, 0.5))


def test_confusion_hand_tally():
    truth = LabelMap(np.array([[1, 1, 2, 2]], dtype=np.int32), 2)
    pred = np.array([[1, 2, 2, 2]] + [[0] * 4] * 3, dtype=np.int32)
    part = one_window_partition(truth.labels)
    cm = confusion(pred, truth, part, TEST)
    np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])


def test_confusion_identity_is_diagonal(toy_scene):
    cube, labels = toy_scene
    part = leakage_free_sample(cube, labels, 8, 0.3, 1)
    pred = np.zeros(part.padded_dims, dtype=np.int32)
    pred[: labels.height, : labels.width] = np.where(labels.labels > 0, labels.labels, 1)
    cm = confusion(pred, labels, part, TEST)
    assert np.count_nonzero(cm.counts - np.diag(np.diag(cm.counts))) == 0


def test_confusion_total_matches_audit_on_unpadded_scene(toy_scene):
    # 64 is divisible by 8, so the audit counts no mirrored pixels
    cube, labels = toy_scene
    part = leakage_free_sample(cube, labels, 8, 0.3, 1)
    pred = predict(constant_model(1), cube, part, TEST)
    rep = audit_partition(part, labels)
    assert confusion(pred, labels, part).total == sum(rep.test_pixels.values())


def test_confusion_excludes_mirrored_pixels():
    grid = np.array([[1, 2, 1]], dtype=np.int32)
    labels = LabelMap(grid, 2)
    part = one_window_partition(grid)  # one 3x3 window, rows 1-2 are mirrored
    pred = np.ones(part.padded_dims, dtype=np.int32)
    assert confusion(pred, labels, part).total == 3


def test_confusion_rejects_unpredicted_pixels():
    truth = LabelMap(np.array([[1, 2]], dtype=np.int32), 2)
    pred = np.zeros((2, 2), dtype=np.int32)
    with pytest.raises(ValueError):
        confusion(pred, truth, one_window_partition(truth.labels))


def test_metrics_examples():
    r = metrics(np.array([[50, 0], [0, 50]]))
    assert r.per_class_pa == [1.0, 1.0] and r.oa == 1.0 and r.aa == 1.0 and r.kappa == 1.0
    r = metrics(np.array([[25, 25], [25, 25]]))
    assert r.oa == 0.5 and r.kappa == 0.0
    cm = [[30, 2, 1], [4, 25, 6], [0, 3, 29]]
    r = metrics(np.array(cm))
    pa, oa, aa, kappa = metrics_direct(cm)
    assert r.per_class_pa == pytest.approx(pa, abs=1e-12)
    assert (r.oa, r.aa, r.kappa) == pytest.approx((oa, aa, kappa), abs=1e-12)
    assert r.n_test_pixels == 100


def test_metrics_row_convention():
    cm = np.array([[8, 2], [1, 9]])
    r = metrics(cm, pa_convention="row")
    assert r.per_class_pa == pytest.approx([0.8, 0.9])
    c = metrics(cm)
    assert c.per_class_pa == pytest.approx([8 / 9, 9 / 11])
    with pytest.raises(ValueError):
        metrics(cm, pa_convention="diagonal")


def test_constant_prediction_average_accuracy():
    # every pixel predicted as class 1
    k = 4
    cm = np.zeros((k, k), dtype=np.int64)
    cm[:, 0] = [10, 20, 30, 40]
    assert metrics(cm, pa_convention="row").aa == pytest.approx(1 / k)
    assert metrics(cm).aa == pytest.approx((10 / 100) / k)


def test_metrics_single_cell_kappa():
    cm = np.zeros((3, 3))
    cm[1, 1] = 7
    assert metrics(cm).kappa == 1.0
    with pytest.raises(ValueError):
        metrics(np.zeros((2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_metrics_oracle_and_invariances(k, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    cm = rng.integers(0, 50, size=(k, k))
    cm[0, 0] += 1
    r = metrics(cm)
    pa, oa, aa, kappa = metrics_direct(cm.tolist())
    assert np.allclose(r.per_class_pa, pa, rtol=0, atol=1e-12)
    assert abs(r.oa - oa) < 1e-12 and abs(r.aa - aa) < 1e-12 and abs(r.kappa - kappa) < 1e-12
    perm = rng.permutation(k)
    rp = metrics(cm[np.ix_(perm, perm)])
    assert rp.oa == r.oa
    assert rp.per_class_pa == [r.per_class_pa[i] for i in perm]
    rs = metrics(cm * 8)  # power-of-two scale keeps the arithmetic exact
    assert (rs.oa, rs.aa, rs.kappa, rs.per_class_pa) == (r.oa, r.aa, r.kappa, r.per_class_pa)
