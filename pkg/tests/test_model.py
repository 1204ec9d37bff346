import io
import math

import mpmath
import numpy as np
import numpy.testing as npt
import pytest

from fsmeta.model import (
    CheckpointError,
    MetricHead,
    Model,
    centroid_coefficient,
    class_posterior,
    compute_centroids,
    fixed_distance,
    log_posteriors,
    metric_score,
    pairwise_distance,
    read_checkpoint,
    save_checkpoint,
    load_checkpoint,
    write_checkpoint,
)
from fsmeta.numerics import Tensor, backward, functional as F, no_grad
from fsmeta.numerics.gradcheck import numeric_grad, relative_error
from fsmeta.objective import LossConfig, balance_loss, fit_loss, generalization_loss

from _helpers import gradcheck


def tiny_model(num_seen=3, hw=(8, 8), seed=0, blocks=3, width=4, hidden=5):
    return Model(num_seen, hw, seed=seed, blocks=blocks, width=width, hidden=hidden, dtype=np.float64)


# ------------------------------------------------------------------ embedding


def test_embedding_dim_32x32():
    m = Model(7, (32, 32), seed=0)
    assert m.dim == 256
    out = m.embed(np.zeros((2, 3, 32, 32), np.float32), training=False)
    assert out.shape == (2, 256)


def test_embedding_rejects_bad_shapes():
    m = Model(7, (32, 32), seed=0)
    with pytest.raises(ValueError):
        m.embed(np.zeros((2, 3, 24, 24), np.float32), training=False)
    with pytest.raises(ValueError):
        m.embed(np.zeros((2, 1, 32, 32), np.float32), training=False)


def test_identical_images_identical_eval_embeddings(rng):
    m = Model(7, (32, 32), seed=1)
    img = rng.random((1, 3, 32, 32)).astype(np.float32)
    out = m.embed(np.concatenate([img, img]), training=False).data
    npt.assert_array_equal(out[0], out[1])


def test_eval_embedding_is_pure(rng):
    m = Model(7, (32, 32), seed=1)
    x = rng.random((3, 3, 32, 32)).astype(np.float32)
    a = m.embed(x, training=False).data
    b = m.embed(x, training=False).data
    npt.assert_array_equal(a, b)


def test_parameter_shapes_follow_architecture():
    m = Model(7, (32, 32), seed=0)
    state = m.state_dict()
    assert state["embed.block1.conv.weight"].shape == (64, 3, 3, 3)
    for b in (2, 3, 4):
        assert state[f"embed.block{b}.conv.weight"].shape == (64, 64, 3, 3)
    assert state["metric.hidden.weight"].shape == (64, 3 * 256)
    assert state["metric.out.weight"].shape == (1, 64)
    assert state["aux.weight"].shape == (7, 256)
    assert np.all(state["embed.block1.bn.gamma"] == 1) and np.all(state["embed.block1.bn.beta"] == 0)


def test_init_is_seeded():
    a, b, c = Model(3, (16, 16), seed=5), Model(3, (16, 16), seed=5), Model(3, (16, 16), seed=6)
    for k, v in a.state_dict().items():
        npt.assert_array_equal(v, b.state_dict()[k])
    assert not np.array_equal(a.state_dict()["embed.block1.conv.weight"], c.state_dict()["embed.block1.conv.weight"])


def embed_params(m):
    return [p for p in m.parameters() if p.name.startswith("embed")]


def assert_grads_match(f, params, analytic, tol=1e-4, zero=()):
    """Relative error per parameter.

    Parameters whose names end with a suffix in ``zero`` have an identically
    zero gradient (a bias ahead of train-mode batch norm, or a common shift
    of every softmax score), where a relative error is meaningless; for
    those both sides must vanish instead.
    """
    for p, g in zip(params, analytic):
        n = numeric_grad(f, p.data)
        if p.name.endswith(tuple(zero)):
            assert np.max(np.abs(g)) < 1e-9 and np.max(np.abs(n)) < 1e-7, p.name
        else:
            err = relative_error(g, n)
            assert err < tol, (p.name, err)


@pytest.mark.parametrize("training", [True, False])
def test_embedding_gradient_fd(rng, training):
    """d(sum of embedding)/d(every embedding parameter) against central differences."""
    m = tiny_model()
    for st in m.embed.bn_states:
        st.running_mean[:] = rng.standard_normal(st.running_mean.shape) * 0.1
        st.running_var[:] = rng.uniform(0.5, 2.0, st.running_var.shape)
    x = rng.random((4, 3, 8, 8))
    params = embed_params(m)
    m.zero_grad()
    backward(F.sum(m.embed(x, training=training, update_stats=False)))
    analytic = [p.grad.copy() for p in params]

    def f():
        return float(np.sum(m.embed(x, training=training, update_stats=False).data))

    assert_grads_match(f, params, analytic, zero=("conv.bias",) if training else ())


# ------------------------------------------------------------------ centroids


def test_centroid_coefficient_is_inverse_shots():
    for C in range(1, 11):
        for S in range(1, 21):
            assert centroid_coefficient(C, C * S) == 1.0 / S


def test_centroid_examples():
    feats = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    npt.assert_array_equal(compute_centroids(feats, [0, 0]).data, [[0.5, 0.5]])
    single = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]]))
    npt.assert_array_equal(compute_centroids(single, [0, 1]).data, single.data)


def test_centroids_match_bruteforce_means(rng):
    for _ in range(100):
        C, S, D = rng.integers(2, 8), rng.integers(1, 6), rng.integers(1, 20)
        labels = rng.permutation(np.repeat(np.arange(C), S))
        feats = rng.standard_normal((C * S, D))
        got = compute_centroids(Tensor(feats), labels).data
        want = np.stack([feats[labels == k].mean(axis=0) for k in range(C)])
        assert np.max(np.abs(got - want)) <= 1e-12


def test_centroids_reject_unbalanced():
    with pytest.raises(ValueError, match="unbalanced"):
        compute_centroids(Tensor(np.zeros((3, 2))), [0, 0, 1])


def test_centroid_gradient_fd(rng):
    labels = np.array([0, 1, 0, 1])
    gradcheck(lambda f: compute_centroids(f, labels), [rng.standard_normal((4, 3))], rng, 1e-6)


# ------------------------------------------------------------------ metric head


def test_metric_zero_weights_constant_score(rng):
    head = MetricHead(rng, 6, hidden=4, dtype=np.float64)
    head.hidden_w.data[:] = 0
    head.out_w.data[:] = 0
    head.out_b.data[:] = 0.7
    s = head.scores(Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((4, 6)))).data
    npt.assert_array_equal(s, 0.7)


def test_untrained_head_gives_uniform_posteriors(rng):
    m = Model(4, (16, 16), seed=2, dtype=np.float64)
    q = Tensor(rng.standard_normal((6, m.dim)))
    o = Tensor(rng.standard_normal((5, m.dim)))
    p = np.exp(log_posteriors(m.metric.scores(q, o)).data)
    npt.assert_allclose(p, 0.2, rtol=0, atol=1e-15)


def test_pair_features_squared_block_zero_on_self(rng):
    head = MetricHead(rng, 5, dtype=np.float64)
    v = Tensor(rng.standard_normal((1, 5)))
    feats = head.pair_features(v, v).data
    npt.assert_array_equal(feats[0, 10:], 0.0)
    npt.assert_array_equal(feats[0, :5], feats[0, 5:10])


def test_metric_score_matches_formula(rng):
    head = MetricHead(rng, 4, hidden=3, dtype=np.float64)
    head.out_w.data[:] = rng.standard_normal(head.out_w.shape)
    q, o = rng.standard_normal(4), rng.standard_normal(4)
    z = np.concatenate([q, o, (q - o) ** 2])
    want = head.out_w.data[0] @ np.maximum(head.hidden_w.data @ z + head.hidden_b.data, 0) + head.out_b.data[0]
    got = metric_score(head, Tensor(q), Tensor(o)).item()
    assert got == pytest.approx(want, abs=1e-12)


def test_metric_gradients_fd(rng):
    head = MetricHead(rng, 4, hidden=3, dtype=np.float64)
    head.out_w.data[:] = rng.standard_normal(head.out_w.shape)
    head.hidden_b.data[:] = rng.standard_normal(3)

    def build(q, o, wh, bh, wo, bo):
        head.hidden_w, head.hidden_b, head.out_w, head.out_b = wh, bh, wo, bo
        return head.scores(q, o)

    arrays = [rng.standard_normal((3, 4)), rng.standard_normal((2, 4))] + [p.data.copy() for p in head.params]
    gradcheck(build, arrays, rng, 1e-4)


def test_metric_dimension_mismatch(rng):
    head = MetricHead(rng, 4)
    with pytest.raises(ValueError):
        head.scores(Tensor(np.zeros((1, 4), np.float32)), Tensor(np.zeros((1, 5), np.float32)))


def test_posterior_examples(rng):
    head = MetricHead(rng, 2, hidden=1, dtype=np.float64)
    head.hidden_w.data[:] = 0
    head.out_w.data[:] = 0
    npt.assert_allclose(class_posterior(head, Tensor(np.ones(2)), Tensor(np.eye(2))), [0.5, 0.5], atol=1e-15)
    npt.assert_array_equal(class_posterior(head, Tensor(np.ones(2)), Tensor(np.ones((1, 2)))), [1.0])
    p = np.exp(log_posteriors(Tensor(np.array([[0.0, math.log(3.0)]]))).data[0])
    npt.assert_allclose(p, [0.75, 0.25], rtol=0, atol=1e-15)


def test_posteriors_sum_to_one(rng):
    for _ in range(50):
        scores = rng.standard_normal((7, rng.integers(1, 10))) * rng.choice([1e-3, 1.0, 50.0])
        p = np.exp(log_posteriors(Tensor(scores)).data)
        assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-9


def test_posterior_permutation_equivariance(rng):
    m = Model(3, (16, 16), seed=4, dtype=np.float64)
    m.metric.out_w.data[:] = rng.standard_normal(m.metric.out_w.shape)
    q = Tensor(rng.standard_normal((4, m.dim)))
    o = rng.standard_normal((5, m.dim))
    perm = rng.permutation(5)
    a = log_posteriors(m.metric.scores(q, Tensor(o))).data
    b = log_posteriors(m.metric.scores(q, Tensor(o[perm]))).data
    npt.assert_allclose(b, a[:, perm], rtol=0, atol=1e-12)
    npt.assert_array_equal(perm[np.argmax(b, axis=1)], np.argmax(a, axis=1))


# ------------------------------------------------------------------ fixed distances


def test_fixed_distance_examples():
    q = np.array([1.0, 0.0])
    assert fixed_distance("euclidean", q, q) == 0.0
    assert fixed_distance("cosine", q, q) == pytest.approx(0.0, abs=1e-15)
    assert fixed_distance("euclidean", q, np.array([0.0, 1.0])) == 2.0
    assert fixed_distance("cosine", q, np.array([0.0, 1.0])) == 1.0
    with pytest.raises(ValueError):
        fixed_distance("cosine", q, np.zeros(2))
    with pytest.raises(ValueError):
        fixed_distance("manhattan", q, q)


def test_fixed_distance_matches_high_precision(rng):
    mpmath.mp.dps = 40
    for _ in range(20):
        q, o = rng.standard_normal(8), rng.standard_normal(8)
        mq, mo = [mpmath.mpf(float(v)) for v in q], [mpmath.mpf(float(v)) for v in o]
        eu = sum((a - b) ** 2 for a, b in zip(mq, mo))
        cos = 1 - sum(a * b for a, b in zip(mq, mo)) / (mpmath.sqrt(sum(a * a for a in mq)) * mpmath.sqrt(sum(b * b for b in mo)))
        assert abs(fixed_distance("euclidean", q, o) - float(eu)) < 1e-6
        assert abs(fixed_distance("cosine", q, o) - float(cos)) < 1e-6


def test_pairwise_distance_matrix(rng):
    q, o = rng.standard_normal((4, 3)), rng.standard_normal((2, 3))
    d = pairwise_distance("euclidean", q, o)
    for i in range(4):
        for j in range(2):
            assert d[i, j] == pytest.approx(fixed_distance("euclidean", q[i], o[j]), abs=1e-12)


# ------------------------------------------------------------------ full model


def test_full_model_gradient_fd(rng):
    """End-to-end balance loss on a C=2 episode: every parameter against central differences."""
    m = tiny_model()
    m.metric.out_w.data[:] = rng.standard_normal(m.metric.out_w.shape)
    support = rng.random((4, 3, 8, 8))
    query = rng.random((4, 3, 8, 8))
    s_lab, q_lab, aux_lab = np.array([0, 1, 0, 1]), np.array([0, 0, 1, 1]), np.array([2, 0, 2, 0])
    cfg = LossConfig(0.5)

    def loss():
        fs = m.embed(support, training=True, update_stats=False)
        fq = m.embed(query, training=True, update_stats=False)
        logp = log_posteriors(m.metric.scores(fq, compute_centroids(fs, s_lab)))
        return balance_loss(generalization_loss(logp, q_lab), fit_loss(m.aux(fs), aux_lab), cfg)

    m.zero_grad()
    backward(loss())
    params = m.parameters()
    analytic = [p.grad.copy() for p in params]

    def f():
        with no_grad():
            return loss().item()

    assert_grads_match(f, params, analytic, zero=("conv.bias", "metric.out.bias"))


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    m = Model(5, (16, 16), seed=3)
    m.embed.bn_states[0].running_mean[:] = rng.standard_normal(64)
    path = tmp_path / "m.mmck"
    save_checkpoint(path, m)
    state = load_checkpoint(path)
    assert list(state) == list(m.state_dict())
    for k, v in m.state_dict().items():
        assert state[k].dtype == v.dtype
        npt.assert_array_equal(state[k], v)
    m2 = Model.from_state(state, (16, 16))
    for k, v in m.state_dict().items():
        npt.assert_array_equal(m2.state_dict()[k], v)


def test_checkpoint_truncated_rejected():
    buf = io.BytesIO()
    write_checkpoint(buf, Model(5, (16, 16), seed=3).state_dict())
    data = buf.getvalue()
    for cut in (0, 3, 10, len(data) // 2, len(data) - 1):
        with pytest.raises(CheckpointError):
            read_checkpoint(io.BytesIO(data[:cut]))


def test_checkpoint_bad_magic_and_trailing_bytes():
    buf = io.BytesIO()
    write_checkpoint(buf, Model(2, (16, 16), seed=3).state_dict())
    data = buf.getvalue()
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(b"XXXX" + data[4:]))
    with pytest.raises(CheckpointError):
        read_checkpoint(io.BytesIO(data + b"\0"))


def test_checkpoint_aux_shape_mismatch_names_tensor():
    state = Model(21, (16, 16), seed=0).state_dict()
    target = Model(30, (16, 16), seed=0)
    before = target.state_dict()
    with pytest.raises(CheckpointError, match="aux.weight"):
        target.load_state_dict(state)
    for k, v in before.items():
        npt.assert_array_equal(target.state_dict()[k], v)  # nothing partially loaded


def test_checkpoint_missing_and_unknown_names():
    state = Model(3, (16, 16), seed=0).state_dict()
    m = Model(3, (16, 16), seed=0)
    missing = dict(state)
    del missing["metric.out.bias"]
    with pytest.raises(CheckpointError, match="metric.out.bias"):
        m.load_state_dict(missing)
    extra = dict(state, bogus=np.zeros(1, np.float32))
    with pytest.raises(CheckpointError, match="bogus"):
        m.load_state_dict(extra)
