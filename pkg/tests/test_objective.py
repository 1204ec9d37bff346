import math

import mpmath
import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings, strategies as st

from fsmeta.model import Model, compute_centroids, log_posteriors
from fsmeta.numerics import Tensor, backward
from fsmeta.objective import LossConfig, balance_loss, fit_loss, generalization_loss


def test_fit_loss_perfect_prediction_is_zero():
    logits = Tensor(np.array([[1000.0, 0.0, 0.0], [0.0, 0.0, 1000.0]]))
    assert fit_loss(logits, [0, 2]).item() == 0.0


@pytest.mark.parametrize("k", [2, 3, 7, 64])
def test_fit_loss_uniform_is_log_k(k):
    logits = Tensor(np.full((5, k), 0.3))
    assert abs(fit_loss(logits, np.arange(5) % k).item() - math.log(k)) < 1e-12


def test_fit_loss_matches_per_sample_recomputation(rng):
    mpmath.mp.dps = 30
    logits = rng.standard_normal((6, 4)) * 3
    labels = rng.integers(0, 4, 6)
    want = 0.0
    for row, y in zip(logits, labels):
        z = [mpmath.mpf(float(v)) for v in row]
        want += -(z[y] - mpmath.log(sum(mpmath.exp(v) for v in z)))
    want = float(want / len(labels))
    assert abs(fit_loss(Tensor(logits), labels).item() - want) < 1e-6


def test_fit_loss_binary_form(rng):
    logits = rng.standard_normal((8, 2))
    labels = rng.integers(0, 2, 8)
    p1 = 1.0 / (1.0 + np.exp(-(logits[:, 1] - logits[:, 0])))
    bce = -np.mean(labels * np.log(p1) + (1 - labels) * np.log(1 - p1))
    assert fit_loss(Tensor(logits), labels).item() == pytest.approx(bce, abs=1e-12)


def test_losses_reject_bad_labels():
    with pytest.raises(ValueError):
        fit_loss(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        generalization_loss(Tensor(np.zeros((2, 3))), [-1, 0])


def test_generalization_loss_examples():
    certain = Tensor(np.array([[0.0, -np.inf], [-np.inf, 0.0]]))
    assert generalization_loss(certain, [0, 1]).item() == 0.0
    uniform = log_posteriors(Tensor(np.zeros((15, 5))))
    assert abs(generalization_loss(uniform, np.arange(15) % 5).item() - math.log(5)) < 1e-12


def test_generalization_loss_matches_recomputation(rng):
    scores = rng.standard_normal((10, 5))
    labels = rng.integers(0, 5, 10)
    logp = log_posteriors(Tensor(scores))
    p = np.exp(-scores) / np.exp(-scores).sum(axis=1, keepdims=True)
    want = -np.mean(np.log(p[np.arange(10), labels]))
    assert abs(generalization_loss(logp, labels).item() - want) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-50, 50))
def test_generalization_loss_shift_invariant_and_nonnegative(seed, shift):
    r = np.random.default_rng(seed)
    scores = r.standard_normal((6, 4))
    labels = r.integers(0, 4, 6)
    a = generalization_loss(log_posteriors(Tensor(scores)), labels).item()
    b = generalization_loss(log_posteriors(Tensor(scores + shift)), labels).item()
    assert a >= 0.0
    assert abs(a - b) < 1e-9


def test_balance_loss_examples():
    lg, lce = Tensor(np.array(1.0)), Tensor(np.array(2.0))
    assert balance_loss(lg, lce, LossConfig(0.1)).item() == pytest.approx(1.2, abs=1e-15)
    assert balance_loss(lg, lce, LossConfig(1.0)).item() == 3.0


def test_balance_loss_lambda_zero_bit_exact(rng):
    for _ in range(20):
        lg = Tensor(np.array(rng.random() * 5))
        lce = Tensor(np.array(rng.random() * 5))
        out = balance_loss(lg, lce, LossConfig(0.0))
        assert out.data.tobytes() == lg.data.tobytes()


def test_loss_config_range():
    LossConfig(0.0), LossConfig(1.0)
    for bad in (-0.1, 1.5, float("nan")):
        with pytest.raises(ValueError):
            LossConfig(bad)


def _episode_losses(m, rng):
    support = rng.random((4, 3, 16, 16))
    query = rng.random((6, 3, 16, 16))
    fs = m.embed(support, training=True, update_stats=False)
    fq = m.embed(query, training=True, update_stats=False)
    logp = log_posteriors(m.metric.scores(fq, compute_centroids(fs, [0, 1, 0, 1])))
    return generalization_loss(logp, [0, 1, 0, 1, 0, 1]), fit_loss(m.aux(fs), [2, 0, 2, 0])


def _grads(m, which, lam, seed):
    m.zero_grad()
    lg, lce = _episode_losses(m, np.random.default_rng(seed))
    loss = {"g": lg, "ce": lce, "bal": balance_loss(lg, lce, LossConfig(lam)) if lam is not None else None}[which]
    backward(loss)
    return {p.name: p.grad.copy() for p in m.parameters()}


@pytest.mark.parametrize("lam", [0.1, 0.5, 1.0])
def test_balance_gradient_is_linear_combination(lam):
    m = Model(3, (16, 16), seed=1, width=4, hidden=6, dtype=np.float64)
    m.metric.out_w.data[:] = np.random.default_rng(0).standard_normal(m.metric.out_w.shape)
    gg = _grads(m, "g", None, 7)
    gc = _grads(m, "ce", None, 7)
    gb = _grads(m, "bal", lam, 7)
    for name in gb:
        npt.assert_allclose(gb[name], gg[name] + lam * gc[name], rtol=0, atol=1e-10, err_msg=name)
    assert any(np.any(g != 0) for n, g in gc.items() if n.startswith("aux"))


def test_lambda_zero_leaves_aux_head_without_gradient():
    m = Model(3, (16, 16), seed=1, width=4, hidden=6, dtype=np.float64)
    g = _grads(m, "bal", 0.0, 3)
    assert np.all(g["aux.weight"] == 0) and np.all(g["aux.bias"] == 0)
