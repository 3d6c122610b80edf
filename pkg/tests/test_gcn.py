import numpy as np
import pytest

from conftest import grid_patches, random_patient_graph
from oracles import central_difference
from wsigraph.errors import NumericError, ValidationError
from wsigraph.gcn import (ModelParams, backward, backward_batch, forward, forward_batch,
                          gcn_layer_forward, init_params, mean_pool)
from wsigraph.graph import (PatientGraph, block_diagonal, build_wsi_graph, merge_patient_graph,
                            normalize_adjacency)
from wsigraph.survival import CohortRisks, cox_loss, cox_loss_grad

SINGLE = normalize_adjacency(PatientGraph("P", 1, ()))
PAIR = normalize_adjacency(PatientGraph("P", 2, ((0, 1),)))


def test_init_is_deterministic_and_shaped():
    a, b = init_params([8, 4, 4, 4, 4], seed=3), init_params([8, 4, 4, 4, 4], seed=3)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)
    assert [w.shape for w in a.weights] == [(8, 4), (4, 4), (4, 4), (4, 4)]
    assert a.head_weight.shape == (4,)
    assert all(not b.any() for b in a.biases) and a.head_bias == 0.0
    limit = np.sqrt(6 / 12)
    assert np.abs(a.weights[0]).max() <= limit
    assert not np.array_equal(a.weights[0], init_params([8, 4, 4, 4, 4], seed=4).weights[0])


@pytest.mark.parametrize("dims", [[8, 0, 4, 4, 4], [0, 4, 4, 4, 4], [8, 4, 4, 4]])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValidationError):
        init_params(dims, seed=0)


def test_layer_identity_on_single_node():
    h = np.array([[0.5, 2.0, 0.0]])
    out = gcn_layer_forward(SINGLE, h, np.eye(3), np.zeros(3))
    assert np.array_equal(out, h)


def test_layer_two_node_hand_case():
    out = gcn_layer_forward(PAIR, np.array([[2.0, 0.0], [0.0, 2.0]]), np.eye(2), np.zeros(2))
    assert np.array_equal(out, [[1.0, 1.0], [1.0, 1.0]])


def test_layer_relu_clamps_column(rng):
    adj = normalize_adjacency(merge_patient_graph([build_wsi_graph(grid_patches(3, 3))], "P"))
    h = rng.normal(size=(9, 4))
    w = rng.normal(size=(4, 3))
    b = np.array([0.0, -1e6, 0.0])
    out = gcn_layer_forward(adj, h, w, b)
    assert not out[:, 1].any()


def test_layer_shape_mismatch():
    with pytest.raises(ValidationError):
        gcn_layer_forward(SINGLE, np.ones((1, 3)), np.eye(2), np.zeros(2))


def test_mean_pool():
    assert np.array_equal(mean_pool(np.array([[1.0, 3.0]])), [1.0, 3.0])
    assert np.array_equal(mean_pool(np.array([[1.0, 3.0], [3.0, 1.0]])), [2.0, 2.0])
    assert np.array_equal(mean_pool(np.tile([0.25, -4.0], (100, 1))), [0.25, -4.0])
    with pytest.raises(ValidationError):
        mean_pool(np.zeros((0, 2)))


def test_zero_network_returns_head_bias():
    p = init_params([3, 4, 4, 4, 4], 0)
    p = ModelParams(p.layer_dims, [np.zeros_like(w) for w in p.weights], p.biases,
                    np.zeros(4), -1.25)
    adj = normalize_adjacency(merge_patient_graph([build_wsi_graph(grid_patches(2, 2))], "P"))
    risk, _ = forward(adj, np.ones((4, 3)), p)
    assert risk == -1.25


def _hand_params():
    dims = [2, 1, 1, 1, 1]
    weights = [np.array([[0.5], [-1.0]]), np.array([[2.0]]), np.array([[-0.5]]), np.array([[3.0]])]
    biases = [np.array([0.25]), np.array([-0.1]), np.array([1.0]), np.array([0.0])]
    return ModelParams(dims, weights, biases, np.array([1.5]), 0.2)


def test_forward_single_node_by_hand():
    x = np.array([[2.0, 0.5]])
    # 0.5*2 - 1*0.5 + 0.25 = 0.75 ; 2*0.75 - 0.1 = 1.4 ; -0.5*1.4 + 1 = 0.3 ; 3*0.3 = 0.9
    risk, cache = forward(SINGLE, x, _hand_params())
    assert risk == pytest.approx(1.5 * 0.9 + 0.2, abs=1e-15)
    assert [float(a[0, 0]) for a in cache.activations[1:]] == pytest.approx([0.75, 1.4, 0.3, 0.9])


def test_backward_single_node_chain_rule():
    p = _hand_params()
    x = np.array([[2.0, 0.5]])
    _, cache = forward(SINGLE, x, p)
    g = backward(cache, SINGLE, x, p, 1.0)
    # all pre-activations positive: d risk / d h4 = 1.5, then multiply back through W
    assert g.head_weight[0] == pytest.approx(0.9)
    assert g.head_bias == 1.0
    assert g.biases[3][0] == pytest.approx(1.5)
    assert g.weights[3][0, 0] == pytest.approx(1.5 * 0.3)
    assert g.biases[2][0] == pytest.approx(1.5 * 3.0)
    assert g.weights[2][0, 0] == pytest.approx(1.5 * 3.0 * 1.4)
    assert g.biases[1][0] == pytest.approx(1.5 * 3.0 * -0.5)
    assert g.weights[1][0, 0] == pytest.approx(1.5 * 3.0 * -0.5 * 0.75)
    assert g.biases[0][0] == pytest.approx(1.5 * 3.0 * -0.5 * 2.0)
    np.testing.assert_allclose(g.weights[0][:, 0], 1.5 * 3.0 * -0.5 * 2.0 * x[0])


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    g_ = random_patient_graph(rng)
    adj = normalize_adjacency(g_)
    p = init_params([6, 5, 4, 3, 2], 1)
    x = rng.normal(size=(g_.n_nodes, 6))
    _, cache = forward(adj, x, p)
    assert all(not np.any(a) for a in backward(cache, adj, x, p, 0.0).arrays())


def test_permutation_invariance(rng):
    g = merge_patient_graph([build_wsi_graph(grid_patches(4, 3))], "P")
    p = init_params([5, 8, 8, 8, 8], 2)
    x = rng.normal(size=(12, 5))
    perm = rng.permutation(12)
    inv = np.argsort(perm)
    relabeled = PatientGraph("P", 12, tuple(tuple(sorted((int(inv[u]), int(inv[v]))))
                                            for u, v in g.edges))
    r1, _ = forward(normalize_adjacency(g), x, p)
    r2, _ = forward(normalize_adjacency(relabeled), x[perm], p)
    assert r2 == pytest.approx(r1, rel=1e-12, abs=1e-12)


def test_sparse_forward_matches_dense_oracle(rng):
    for _ in range(20):
        g = random_patient_graph(rng, max_nodes=64, span=10)
        adj = normalize_adjacency(g)
        dense = adj.to_dense()
        h = rng.normal(size=(g.n_nodes, 7))
        w, b = rng.normal(size=(7, 5)), rng.normal(size=5)
        np.testing.assert_allclose(gcn_layer_forward(adj, h, w, b),
                                   np.maximum(dense @ h @ w + b, 0), rtol=0, atol=1e-10)


def test_forward_rejects_mismatched_features():
    p = init_params([3, 2, 2, 2, 2], 0)
    with pytest.raises(ValidationError):
        forward(PAIR, np.ones((3, 3)), p)
    with pytest.raises(ValidationError):
        forward(PAIR, np.ones((2, 4)), p)


def test_forward_reports_overflow_layer():
    p = init_params([2, 2, 2, 2, 2], 0)
    p.weights[0] = np.ones((2, 2))
    p.weights[1] = np.full((2, 2), 1e300)
    p.weights[2] = np.full((2, 2), 1e300)
    with pytest.raises(NumericError, match="layer"):
        forward(SINGLE, np.ones((1, 2)), p)


def _cohort_instance(rng, n_patients=6, dims=(6, 5, 4, 3, 2)):
    graphs = [random_patient_graph(rng, max_nodes=12, span=4, patient_id=f"P{i}")
              for i in range(n_patients)]
    adjs = [normalize_adjacency(g) for g in graphs]
    adj, offsets = block_diagonal(adjs)
    x = rng.normal(size=(adj.n_nodes, dims[0]))
    params = init_params(list(dims), int(rng.integers(1 << 31)))
    # nonzero biases keep the ReLUs away from their kink
    for b in params.biases:
        b[:] = rng.normal(0, 0.3, size=b.shape)
    time = rng.exponential(10, n_patients)
    event = np.ones(n_patients, dtype=int)
    event[rng.random(n_patients) < 0.3] = 0
    event[0] = 1
    return adjs, adj, offsets, x, params, time, event


def full_loss(adj, offsets, x, params, time, event):
    risks, _ = forward_batch(adj, offsets, x, params)
    return cox_loss(CohortRisks(risks, time, event))


def analytic_grads(adj, offsets, x, params, time, event):
    risks, cache = forward_batch(adj, offsets, x, params)
    d = cox_loss_grad(CohortRisks(risks, time, event))
    return backward_batch(cache, adj, params, d).arrays()


# Relative errors are taken against max(|analytic|, |numeric|, GRAD_FLOOR): some
# gradients are structurally zero (Cox gradients sum to 0 over the cohort), and
# there central differences return only ~1e-10 of roundoff.
GRAD_FLOOR = 1e-4


def max_relative_error(adj, offsets, x, params, time, event, eps=1e-5):
    analytic = analytic_grads(adj, offsets, x, params, time, event)
    worst = 0.0
    for arr, ana in zip(params.arrays()[:-1], analytic[:-1]):
        num = central_difference(lambda: full_loss(adj, offsets, x, params, time, event), arr, eps)
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), GRAD_FLOOR)
        worst = max(worst, float(err.max()))
    # head bias lives in a float attribute; perturb it directly
    base = params.head_bias

    def with_bias(v):
        params.head_bias = v
        return full_loss(adj, offsets, x, params, time, event)

    num = (with_bias(base + eps) - with_bias(base - eps)) / (2 * eps)
    params.head_bias = base
    worst = max(worst, abs(float(analytic[-1]) - num) / max(abs(num), abs(float(analytic[-1])), GRAD_FLOOR))
    return worst


def test_gradient_check_cox_composed_with_gcn(rng):
    for _ in range(10):
        _, adj, offsets, x, params, time, event = _cohort_instance(rng)
        assert max_relative_error(adj, offsets, x, params, time, event) < 1e-4


def test_batched_backward_equals_per_patient_sum(rng):
    adjs, adj, offsets, x, params, time, event = _cohort_instance(rng)
    risks, cache = forward_batch(adj, offsets, x, params)
    d = cox_loss_grad(CohortRisks(risks, time, event))
    batched = backward_batch(cache, adj, params, d).arrays()
    total = [np.zeros_like(a, dtype=float) for a in params.arrays()]
    for k, a in enumerate(adjs):
        xk = x[offsets[k]:offsets[k + 1]]
        rk, ck = forward(a, xk, params)
        assert rk == pytest.approx(risks[k], abs=1e-12)
        for t, g in zip(total, backward(ck, a, xk, params, d[k]).arrays()):
            t += g
    for a, b in zip(batched, total):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
