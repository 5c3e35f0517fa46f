import numpy as np
import pytest

import oracles
from occfields.field import (
    FitConfig, FitDivergence, OcclusionField, PositionalEncoding, bce_loss, fit, softplus,
    softplus_sigmoid, transient_features,
)
from occfields.occlusion import OcclusionSampleSet
from occfields.scene import HiddenCube

CUBE = HiddenCube(0.5, 0.1)


def random_points(n, seed=0):
    return np.random.default_rng(seed).uniform(CUBE.lo, CUBE.hi, (n, 3))


def perturbed(field, seed=0, scale=0.3):
    """float64 copy with a random nonzero output layer so every gradient is live."""
    f = field.astype(np.float64)
    rng = np.random.default_rng(seed)
    n = len(f.hidden)
    f.params[f"w{n}"] = rng.normal(0, scale, f.params[f"w{n}"].shape)
    f.params[f"b{n}"] = rng.normal(0, scale, 1)
    if "code" in f.params:
        f.params["code"] = rng.normal(0, scale, f.params["code"].shape)
    return f


def check_gradients(f, batches, per_tensor=12, seed=0):
    """Worst relative error of sampled analytic partials against central differences."""
    _, grads = f.loss_and_grad(batches)
    rng = np.random.default_rng(seed)
    worst = {}
    for name, arr in f.params.items():
        g = grads[name].reshape(-1)
        # Always include the largest entry, plus random ones.
        idx = np.unique(np.r_[np.argmax(np.abs(g)), rng.integers(0, arr.size, per_tensor)])
        fd = oracles.partial_derivatives(lambda: f.loss_and_grad(batches)[0], arr, idx, 1e-5)
        scale = max(np.abs(fd).max(), np.abs(g[idx]).max(), 1e-12)
        worst[name] = float(np.abs(fd - g[idx]).max() / scale)
    return worst


def test_encoding_layout():
    enc = PositionalEncoding(6)
    assert enc.dim == 39
    out = enc(np.array([[1.0, 0.0, 0.5]]))[0]
    np.testing.assert_allclose(out[:3], [1.0, 0.0, 0.5])
    np.testing.assert_allclose(out[3:6], np.sin(np.pi * np.array([1.0, 0.0, 0.5])), atol=1e-15)
    np.testing.assert_allclose(out[6:9], [-1.0, 1.0, 0.0], atol=1e-15)
    np.testing.assert_allclose(out[-3:], np.cos(32 * np.pi * np.array([1.0, 0.0, 0.5])), atol=1e-12)
    assert PositionalEncoding(0).dim == 3
    assert PositionalEncoding(2, include_raw=False).dim == 12


def test_default_architecture():
    f = OcclusionField.create(cube=CUBE)
    assert f.params["w0"].shape == (16 + 39, 128)
    assert [f.params[f"w{i}"].shape[1] for i in range(5)] == [128, 128, 128, 128, 1]
    assert f.dtype == np.float32
    c = OcclusionField.create("conditioned", transient_shape=(4, 4, 16), cube=CUBE)
    assert c.params["w0"].shape[0] == 128 + 39
    assert c.params["enc_w0"].shape == (4 * 4 * 4, 128)


def test_initial_prediction_is_half():
    f = OcclusionField.create(cube=CUBE, seed=3)
    assert np.all(f.predict(random_points(100)) == 0.5)


def test_bce_values():
    assert bce_loss(np.full(8, 0.5), np.r_[np.ones(4), np.zeros(4)]) == pytest.approx(np.log(2))
    assert bce_loss([0.0], [1.0]) == pytest.approx(-np.log(1e-7), rel=1e-9)
    assert bce_loss([0.0], [1.0]) == pytest.approx(16.118, abs=1e-3)
    assert bce_loss([1.0, 0.0], [1.0, 0.0]) < 1e-6


def test_softplus_pair_is_stable():
    z = np.array([-800.0, -30.0, -1.0, 0.0, 1.0, 30.0, 800.0])
    sp, sg = softplus_sigmoid(z)
    np.testing.assert_allclose(sp, np.logaddexp(0.0, z), rtol=1e-12)
    with np.errstate(over="ignore"):
        np.testing.assert_allclose(sg, 1.0 / (1.0 + np.exp(-z)), rtol=1e-12)
    assert softplus(np.float32(50.0)).dtype == np.float32


def test_gradient_single_mode():
    f = perturbed(OcclusionField.create(cube=CUBE, seed=1))
    pts = random_points(48, seed=2)
    y = (pts[:, 2] > 0.35).astype(float)
    worst = check_gradients(f, [(None, pts, y)])
    assert set(worst) == set(f.params)
    assert max(worst.values()) < 1e-4, worst


def test_gradient_conditioned_mode():
    shape = (4, 4, 16)
    f = perturbed(OcclusionField.create("conditioned", transient_shape=shape, encoder_hidden=32,
                                        cube=CUBE, seed=1))
    rng = np.random.default_rng(5)
    batches = []
    for s in range(2):
        pts = random_points(24, seed=10 + s)
        batches.append((rng.random(shape), pts, rng.integers(0, 2, 24).astype(float)))
    worst = check_gradients(f, batches, per_tensor=8)
    assert max(worst.values()) < 1e-4, worst


def test_duplicated_batch_same_gradient():
    f = perturbed(OcclusionField.create(cube=CUBE, seed=4))
    pts = random_points(32, seed=6)
    y = (pts[:, 0] > 0).astype(float)
    l1, g1 = f.loss_and_grad([(None, pts, y)])
    l2, g2 = f.loss_and_grad([(None, np.r_[pts, pts], np.r_[y, y])])
    assert l1 == pytest.approx(l2, rel=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-9, atol=1e-15)


def test_save_load_bit_exact(tmp_path):
    f = perturbed(OcclusionField.create(cube=CUBE, seed=8)).astype(np.float32)
    f.save(tmp_path / "w.bin")
    g = OcclusionField.load(tmp_path / "w.bin")
    assert list(g.params) == list(f.params)
    for k in f.params:
        assert np.array_equal(f.params[k], g.params[k])
    pts = random_points(500)
    assert np.array_equal(f.predict(pts), g.predict(pts))
    assert g.cube == CUBE


def test_bad_weight_file(tmp_path):
    (tmp_path / "w.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        OcclusionField.load(tmp_path / "w.bin")


def test_mode_argument_checks():
    with pytest.raises(ValueError):
        OcclusionField.create("other")
    with pytest.raises(ValueError):
        OcclusionField.create("conditioned")
    f = OcclusionField.create(cube=CUBE)
    with pytest.raises(ValueError):
        f.predict(random_points(2), np.zeros((2, 2, 8)))


def test_transient_features():
    m = np.arange(2 * 2 * 8, dtype=float).reshape(2, 2, 8)
    x = transient_features(m, pool=4)
    assert x.shape == (2 * 2 * 2,)
    expected = np.log1p(m / m.max()).reshape(2, 2, 2, 4).mean(-1).ravel()
    np.testing.assert_allclose(x, expected)


def sample_set(points, labels):
    bits = np.repeat(np.asarray(labels, bool)[:, None], 25, axis=1)
    return OcclusionSampleSet(points, bits, np.asarray(labels, np.uint8))


def test_fit_all_zero_labels():
    pts = random_points(4000)
    f = OcclusionField.create(cube=CUBE, seed=0)
    rep = fit(f, sample_set(pts, np.zeros(len(pts))), FitConfig(steps=60, batch=512, eval_every=20))
    assert rep.best_val_loss < rep.initial_loss == pytest.approx(np.log(2))
    assert np.all(f.predict(random_points(500, seed=9)) < 0.5)
    assert rep.val_iou == 1.0
    assert rep.loss_csv().splitlines()[0] == "step,train_bce,val_bce"


def test_fit_halfspace():
    pts = random_points(20_000)
    y = (pts[:, 2] > 0.4).astype(np.uint8)
    f = OcclusionField.create(cube=CUBE, seed=0)
    rep = fit(f, sample_set(pts, y), FitConfig(steps=300, batch=1024, eval_every=50))
    assert rep.val_iou > 0.95
    assert rep.train_loss[-1] < 0.2


def test_fit_divergence_reported():
    pts = random_points(1000)
    f = OcclusionField.create(cube=CUBE, seed=0)
    f.params["b0"][:] = np.nan
    with pytest.raises(FitDivergence):
        fit(f, sample_set(pts, np.zeros(len(pts))), FitConfig(steps=5, batch=64))
