import math

import numpy as np
import pytest

from pals.loss import LossSpec, final_batch_loss, smooth_labels
from pals.model import (Cache, OptState, ShapeError, backward, forward, init_model,
                        load_model, save_model, sgd_step, softmax, zero_model)
from pals.trainer import RunConfig, baseline_supervised, evaluate
from pals.data import GenSpec, make_benchmark

from .gradcheck import max_relative_error, numeric_grads

SIZES = (6, 10, 7, 4)


@pytest.fixture
def model():
    return init_model(SIZES, np.random.default_rng(0))


def test_zero_model_predicts_uniform():
    _, p = forward(zero_model(SIZES), np.random.default_rng(1).normal(size=(5, 6)))
    np.testing.assert_array_equal(p, np.full((5, 4), 0.25))


def test_probabilities_normalised(model):
    _, p = forward(model, np.random.default_rng(2).normal(size=(50, 6)) * 30)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.isfinite(p))


def test_softmax_shift_invariance():
    logits = np.random.default_rng(3).normal(size=(4, 5))
    np.testing.assert_allclose(softmax(logits), softmax(logits + 123.0), atol=1e-15)


def test_width_mismatch(model):
    with pytest.raises(ShapeError):
        forward(model, np.zeros((2, 5)))


def test_feature_width_and_relu(model):
    z, _ = forward(model, np.random.default_rng(4).normal(size=(3, 6)))
    assert z.shape == (3, 7) and np.all(z >= 0)


def test_init_is_seeded_he_normal():
    a = init_model((400, 300, 2), np.random.default_rng(5))
    b = init_model((400, 300, 2), np.random.default_rng(5))
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    assert a.weights[0].std() == pytest.approx(math.sqrt(2 / 400), rel=0.02)
    assert not a.biases[0].any()


def _ce_loss(model, x, t):
    return final_batch_loss(model, x, t, LossSpec(mixup=False, cr=False), np.random.default_rng(0))


def test_gradients_match_finite_differences(model):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(8, 6))
    t = smooth_labels(rng.integers(0, 4, 8), 0.5, 4)
    _, grads = _ce_loss(model, x, t)
    num = numeric_grads(model, lambda m: _ce_loss(m, x, t)[0])
    assert max_relative_error(grads, num) < 1e-5


def test_zero_upstream_gradient(model):
    cache = Cache()
    forward(model, np.ones((3, 6)), cache)
    grads = backward(model, cache, np.zeros((3, 4)))
    assert all(not g.any() for g in grads)


def test_duplicate_sample_doubles_contribution(model):
    x = np.random.default_rng(7).normal(size=(1, 6))
    up = np.array([[0.3, -0.1, 0.5, -0.7]])
    c1, c2 = Cache(), Cache()
    forward(model, x, c1)
    forward(model, np.vstack([x, x]), c2)
    g1 = backward(model, c1, up)
    g2 = backward(model, c2, np.vstack([up, up]))
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(b, 2 * a, atol=1e-14)


class TestSgd:
    def test_plain_gradient_descent(self, model):
        before = [p.copy() for p in model.params()]
        grads = [np.ones_like(p) for p in before]
        sgd_step(model, grads, OptState(lr=0.1, momentum=0.0, weight_decay=0.0, t_max=0))
        for b, p in zip(before, model.params()):
            np.testing.assert_allclose(p, b - 0.1, atol=1e-15)

    def test_cosine_endpoints(self):
        opt = OptState(lr=0.05, t_max=150)
        assert opt.lr_at(0) == 0.05
        assert opt.lr_at(150) == pytest.approx(0.0, abs=1e-18)
        assert opt.lr_at(75) == pytest.approx(0.025)

    def test_momentum_two_steps(self, model):
        before = [p.copy() for p in model.params()]
        g = [np.full_like(p, 0.2) for p in before]
        opt = OptState(lr=0.1, momentum=0.9, weight_decay=0.0, t_max=0)
        sgd_step(model, g, opt)
        sgd_step(model, g, opt)
        for b, p in zip(before, model.params()):
            np.testing.assert_allclose(b - p, 0.1 * (1.0 + 1.9) * 0.2, atol=1e-14)

    def test_weight_decay_skips_biases(self, model):
        model.biases[0][:] = 1.0
        before = [p.copy() for p in model.params()]
        zeros = [np.zeros_like(p) for p in before]
        sgd_step(model, zeros, OptState(lr=0.1, momentum=0.0, weight_decay=0.5, t_max=0))
        np.testing.assert_allclose(model.weights[0], before[0] * 0.95)
        np.testing.assert_array_equal(model.biases[0], before[1])

    def test_shape_mismatch(self, model):
        with pytest.raises(ShapeError):
            sgd_step(model, [np.zeros(1)] * 6, OptState(lr=0.1))


def test_checkpoint_round_trip(model, tmp_path):
    save_model(model, tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text().startswith("pals-model v1 sizes=6,10,7,4\n")
    back = load_model(tmp_path / "m.txt")
    assert back.sizes == model.sizes
    assert all(a.tobytes() == b.tobytes() for a, b in zip(back.params(), model.params()))


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "m.txt").write_text("not a model\n")
    with pytest.raises(ValueError):
        load_model(tmp_path / "m.txt")


def test_supervised_training_fits_separable_data():
    spec = GenSpec(num_classes=5, samples_per_class=100, feature_dim=10, class_mean_scale=5.0,
                   seed=2)
    train, _ = make_benchmark(spec)
    res = baseline_supervised(RunConfig(epochs=100, seed=2), train, None)
    assert evaluate(res.model, train) >= 0.99
