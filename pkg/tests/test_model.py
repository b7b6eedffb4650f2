import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from normprop.graph import Graph, canonical_edges, propagation_upper_bound, renormalized_adjacency
from normprop.model import (
    Hyper,
    ModelParams,
    backward,
    forward,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from normprop.prototypes import PrototypeSet, solve_prototypes
from normprop.tensor import make_rng


def random_graph(seed, n, d=4, p=0.3):
    rng = make_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    hit = rng.random(len(iu)) < p
    return Graph(n, np.stack([iu[hit], ju[hit]], axis=1), rng.standard_normal((n, d)),
                 rng.integers(0, 3, n), num_classes=3)


def dense_pipeline(params, x, edges, n, K):
    """Independent dense re-implementation: explicit matrix power, no CSR."""
    a = np.eye(n)
    for u, v in edges:
        a[u, v] = a[v, u] = 1.0
    deg = a.sum(axis=1)
    p = np.diag(deg ** -0.5) @ a @ np.diag(deg ** -0.5)
    h = np.maximum(x @ params.W1 + params.b1, 0.0) @ params.W2 + params.b2
    z0 = np.array([row / np.linalg.norm(row) for row in h])
    return np.linalg.matrix_power(p, K) @ z0


# -- forward ----------------------------------------------------------------------

def test_k0_is_normalized_encoder_output():
    g = random_graph(0, 8)
    hyper = Hyper(K=0, hidden=6, dim=3, dropout=0.0)
    params = init_params(hyper, 4, make_rng(1))
    cache = forward(params, g, renormalized_adjacency(g), hyper)
    np.testing.assert_array_equal(cache.ZK, cache.Z0)
    np.testing.assert_allclose(np.linalg.norm(cache.ZK, axis=1), 1.0, atol=1e-9)


@pytest.mark.parametrize("K", [0, 1, 2, 3])
def test_identical_features_reach_the_bound(K):
    rng = make_rng(K)
    n = 10
    iu, ju = np.triu_indices(n, 1)
    hit = rng.random(len(iu)) < 0.3
    g = Graph(n, np.stack([iu[hit], ju[hit]], axis=1), np.tile(rng.standard_normal(4), (n, 1)), np.zeros(n, int))
    hyper = Hyper(K=K, hidden=8, dim=5, dropout=0.0)
    params = init_params(hyper, 4, rng)
    p = renormalized_adjacency(g)
    zk = forward(params, g, p, hyper).ZK
    direction = zk / np.linalg.norm(zk, axis=1, keepdims=True)
    np.testing.assert_allclose(direction, np.tile(direction[0], (n, 1)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(zk, axis=1), propagation_upper_bound(p, K), atol=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_forward_matches_dense_oracle(seed):
    n = 5 + 7 * seed
    g = random_graph(seed, n, p=0.2)
    hyper = Hyper(K=seed % 4, hidden=7, dim=4, dropout=0.3)
    params = init_params(hyper, 4, make_rng(seed + 100))
    params.b1 += 0.1
    params.b2 += make_rng(seed + 200).standard_normal(4)  # no all-zero encoder rows
    got = forward(params, g, renormalized_adjacency(g), hyper, training=False).ZK
    want = dense_pipeline(params, g.features, g.edges, n, hyper.K)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 40), K=st.integers(0, 3), p=st.floats(0.0, 0.6))
def test_norm_never_exceeds_bound(seed, n, K, p):
    g = random_graph(seed, n, p=p)
    hyper = Hyper(K=K, hidden=8, dim=4, dropout=0.0)
    params = init_params(hyper, 4, make_rng(seed))
    prop = renormalized_adjacency(g)
    cache = forward(params, g, prop, hyper)
    live = cache.norms > 1e-12
    np.testing.assert_allclose(np.linalg.norm(cache.Z0[live], axis=1), 1.0, atol=1e-9)
    assert np.all(np.linalg.norm(cache.ZK, axis=1) <= propagation_upper_bound(prop, K) + 1e-9)


def test_permutation_equivariance():
    g = random_graph(3, 15)
    perm = make_rng(4).permutation(15)
    inv = np.argsort(perm)
    g2 = Graph(15, canonical_edges(inv[g.edges], 15), g.features[perm], g.labels[perm], num_classes=3)
    hyper = Hyper(K=2, hidden=6, dim=3, dropout=0.0)
    params = init_params(hyper, 4, make_rng(5))
    z1 = forward(params, g, renormalized_adjacency(g), hyper).ZK
    z2 = forward(params, g2, renormalized_adjacency(g2), hyper).ZK
    np.testing.assert_allclose(z2, z1[perm], atol=1e-13)


def test_dropout_only_in_training():
    g = random_graph(1, 10)
    hyper = Hyper(K=1, hidden=6, dim=3, dropout=0.5)
    params = init_params(hyper, 4, make_rng(0))
    p = renormalized_adjacency(g)
    a = forward(params, g, p, hyper, training=False).ZK
    b = forward(params, g, p, hyper, make_rng(1), training=False).ZK
    c = forward(params, g, p, hyper, make_rng(1), training=True).ZK
    np.testing.assert_array_equal(a, b)
    assert not np.allclose(a, c)


def test_forward_shape_mismatch():
    g = random_graph(1, 5, d=4)
    hyper = Hyper(K=1, hidden=3, dim=2, dropout=0.0)
    params = init_params(hyper, 6, make_rng(0))
    with pytest.raises(ValueError):
        forward(params, g, renormalized_adjacency(g), hyper)


def test_zero_embedding_rows_stay_finite():
    g = random_graph(2, 6)
    hyper = Hyper(K=2, hidden=3, dim=2, dropout=0.0)
    params = ModelParams(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 2)), np.zeros(2))
    cache = forward(params, g, renormalized_adjacency(g), hyper)
    assert np.all(cache.ZK == 0.0)
    labels, flags = predict(cache.ZK, solve_prototypes(3, 2, iters=10), return_flags=True)
    assert np.all(labels == 0) and np.all(flags)


# -- backward ---------------------------------------------------------------------

def loss_and_grad_fixture(seed, K):
    g = random_graph(seed, 6, d=3, p=0.5)
    hyper = Hyper(K=K, hidden=5, dim=3, dropout=0.0)
    params = init_params(hyper, 3, make_rng(seed))
    params.b1 += 0.05  # keep ReLU kinks away from zero
    weights = make_rng(seed + 7).standard_normal((6, 3))
    return g, hyper, params, renormalized_adjacency(g), weights


def scalar_loss(params, g, p, hyper, weights):
    # any smooth scalar of ZK exercises the full chain
    zk = forward(params, g, p, hyper).ZK
    return np.sum(weights * zk) + 0.5 * np.sum(zk ** 2)


@pytest.mark.parametrize("seed, K", [(0, 0), (1, 1), (2, 2), (3, 3)])
def test_backward_matches_finite_differences(seed, K):
    g, hyper, params, p, weights = loss_and_grad_fixture(seed, K)
    cache = forward(params, g, p, hyper)
    grads = backward(cache, params, p, weights + cache.ZK, hyper)
    flat = params.flatten()
    h = 1e-5
    numeric = np.zeros_like(flat)
    for i in range(len(flat)):
        e = np.zeros_like(flat)
        e[i] = h
        numeric[i] = (scalar_loss(params.unflatten(flat + e), g, p, hyper, weights)
                      - scalar_loss(params.unflatten(flat - e), g, p, hyper, weights)) / (2 * h)
    analytic = grads.flatten()
    for t_num, t_ana in zip(params.unflatten(numeric).tensors(), params.unflatten(analytic).tensors()):
        denom = max(np.linalg.norm(t_num), 1e-12)
        assert np.linalg.norm(t_ana - t_num) / denom <= 1e-4


def test_backward_zero_upstream():
    g, hyper, params, p, _ = loss_and_grad_fixture(0, 2)
    cache = forward(params, g, p, hyper)
    grads = backward(cache, params, p, np.zeros_like(cache.ZK), hyper)
    assert all(not t.any() for t in grads.tensors())


def test_backward_collapses_to_normalize_backward():
    # single node, K=0, identity second layer: dL/db2 is the normalize adjoint itself
    from normprop.tensor import row_l2_normalize_backward

    g = Graph(1, np.empty((0, 2)), np.array([[1.0, 2.0]]), [0])
    hyper = Hyper(K=0, hidden=2, dim=2, dropout=0.0)
    params = ModelParams(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
    p = renormalized_adjacency(g)
    cache = forward(params, g, p, hyper)
    up = np.array([[0.3, -0.7]])
    grads = backward(cache, params, p, up, hyper)
    np.testing.assert_allclose(grads.b2, row_l2_normalize_backward(up, cache.H, cache.norms)[0])


def test_backward_with_dropout_masks_matches_fd():
    # dropout masks are fixed inside the cache, so the map is still differentiable
    g, _, params, p, weights = loss_and_grad_fixture(4, 2)
    hyper = Hyper(K=2, hidden=5, dim=3, dropout=0.3)
    cache = forward(params, g, p, hyper, make_rng(0), training=True)
    grads = backward(cache, params, p, weights, hyper).flatten()

    def f(flat):
        q = params.unflatten(flat)
        pre1 = cache.x_in @ q.W1 + q.b1
        hid = np.maximum(pre1, 0.0) * cache.mask2
        h = hid @ q.W2 + q.b2
        z0 = h / np.linalg.norm(h, axis=1, keepdims=True)
        zk = p.todense() @ p.todense() @ z0
        return np.sum(weights * zk)

    flat = params.flatten()
    num = np.array([(f(flat + e) - f(flat - e)) / 2e-5 for e in np.eye(len(flat)) * 1e-5])
    assert np.linalg.norm(grads - num) / np.linalg.norm(num) <= 1e-4


def test_backward_cache_mismatch():
    g, hyper, params, p, _ = loss_and_grad_fixture(0, 1)
    cache = forward(params, g, p, hyper)
    with pytest.raises(ValueError):
        backward(cache, params, p, np.zeros((6, 5)), hyper)


# -- predict -----------------------------------------------------------------------

def test_predict_exact_and_scaled_prototypes():
    protos = solve_prototypes(4, 3, iters=500)
    np.testing.assert_array_equal(predict(protos.rows, protos), [0, 1, 2, 3])
    np.testing.assert_array_equal(predict(3.0 * protos.rows, protos), [0, 1, 2, 3])


def test_predict_tie_goes_to_lowest_index():
    protos = PrototypeSet([[1.0, 0.0], [0.0, 1.0]])
    assert predict(np.array([[1.0, 1.0]]), protos)[0] == 0


@pytest.mark.parametrize("seed", range(3))
def test_predict_matches_brute_force(seed):
    rng = make_rng(seed)
    protos = solve_prototypes(5, 4, iters=300, rng=seed)
    z = rng.standard_normal((50, 4))
    expected = []
    for row in z:
        best, best_c = -np.inf, 0
        for c, proto in enumerate(protos.rows):
            cos = row @ proto / (np.linalg.norm(row) * np.linalg.norm(proto))
            if cos > best:
                best, best_c = cos, c
        expected.append(best_c)
    np.testing.assert_array_equal(predict(z, protos), expected)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_predict_invariant_to_row_scaling(seed):
    rng = make_rng(seed)
    protos = solve_prototypes(3, 4, iters=100)
    z = rng.standard_normal((20, 4))
    scale = rng.uniform(0.01, 100.0, size=(20, 1))
    np.testing.assert_array_equal(predict(z * scale, protos), predict(z, protos))


# -- init / checkpoint -----------------------------------------------------------------

def test_init_deterministic_and_bounded():
    hyper = Hyper(K=2, hidden=64, dim=32, dropout=0.3)
    a = init_params(hyper, 50, make_rng(3))
    b = init_params(hyper, 50, make_rng(3))
    for x, y in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(x, y)
    assert np.all(np.abs(a.W1) <= np.sqrt(6 / 50))
    assert np.all(np.abs(a.W2) <= np.sqrt(6 / 64))
    assert not a.b1.any() and not a.b2.any()


def test_init_mean_near_zero():
    d, hidden = 200, 256
    w = init_params(Hyper(hidden=hidden), d, make_rng(0)).W1
    sigma = np.sqrt(6 / d) / np.sqrt(3)  # std of U(-a, a) is a / sqrt(3)
    assert abs(w.mean()) <= 3 * sigma / np.sqrt(w.size)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    hyper = Hyper(K=3, hidden=9, dim=4, dropout=0.1)
    params = init_params(hyper, 5, make_rng(8))
    params.b1 += make_rng(9).standard_normal(9) * 1e-300
    save_checkpoint(params, hyper, tmp_path / "ck.json")
    loaded, hyper2 = load_checkpoint(tmp_path / "ck.json")
    assert hyper2 == hyper
    for x, y in zip(params.tensors(), loaded.tensors()):
        assert x.tobytes() == y.tobytes()


def test_hyper_validation():
    with pytest.raises(ValueError):
        Hyper(K=-1)
    with pytest.raises(ValueError):
        Hyper(dim=1)
    with pytest.raises(ValueError):
        Hyper(dropout=1.0)
