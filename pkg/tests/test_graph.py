import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from dgm import tensor as T
from dgm.graph import (
    ConfigError,
    DegreeClampWarning,
    EdgeProbabilityMatrix,
    SampledGraph,
    dgm_forward,
    edge_probabilities,
    gumbel_top_k,
    knn_baseline,
    make_rng,
    read_edge_list,
    uniform_open,
)
from dgm.tensor import Tensor


def matrix_from_probs(probs):
    probs = np.asarray(probs, dtype=float)
    return EdgeProbabilityMatrix(Tensor(probs), Tensor(1.0), Tensor(np.log(probs)))


def pick_frequencies(P, node, k, draws, seed):
    rng = make_rng(seed)
    counts = np.zeros(P.num_nodes)
    for _ in range(draws):
        g = gumbel_top_k(P, k, rng)
        counts[g.sources[g.targets == node]] += 1
    return counts / draws


@st.composite
def point_sets(draw):
    n = draw(st.integers(2, 9))
    d = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**16))
    return np.random.default_rng(seed).uniform(-2, 2, (n, d))


# ---------------------------------------------------- edge probabilities


def test_edge_probability_examples():
    P = edge_probabilities([[0.0, 0.0], [0.0, 0.0]], 3.0)
    assert P.probs.values[0, 1] == 1.0
    P = edge_probabilities([[0.0], [math.sqrt(math.log(2))]], 1.0)
    assert P.probs.values[0, 1] == pytest.approx(0.5, rel=1e-12)
    P = edge_probabilities([[0.0, 0.0], [1.0, 1.0]], 2.0)
    assert P.probs.values[0, 1] == pytest.approx(math.exp(-4.0), rel=1e-12)
    assert P.probs.values[0, 1] == pytest.approx(0.018316, abs=1e-6)


@given(point_sets(), st.floats(0.1, 5.0))
def test_edge_probability_invariants(x, t):
    p = edge_probabilities(x, t).probs.values
    assert np.all(np.diag(p) == 1.0)
    np.testing.assert_array_equal(p, p.T)
    assert np.all((p > 0) | (p == 0)) and np.all(p <= 1.0)
    ref = np.exp(-t * ((x[:, None] - x[None]) ** 2).sum(-1))
    np.testing.assert_allclose(p, ref, rtol=1e-12, atol=1e-300)


@given(point_sets(), st.sampled_from([0.25, 0.5, 2.0, 4.0]), st.floats(0.1, 4.0))
def test_scale_property_bit_identical(x, s, t):
    # scaling coordinates by s multiplies squared distances by c = s^2; powers
    # of two keep every intermediate exact
    c = s * s
    scaled = x * s
    a = edge_probabilities(x, t).probs.values
    b = edge_probabilities(scaled, t / c).probs.values
    assert a.tobytes() == b.tobytes()


def test_edge_probabilities_differentiable():
    x = Tensor(np.array([[0.0, 1.0], [1.0, 0.5], [2.0, -1.0]]), requires_grad=True)
    logt = Tensor(np.array(0.2), requires_grad=True)
    w = np.arange(9.0).reshape(3, 3)
    report = T.check_gradient(lambda: T.sum(T.mul(edge_probabilities(x, T.exp(logt)).probs, w)), [x, logt])
    assert report.max_rel_error < 1e-4


# --------------------------------------------------------------- sampler


@given(point_sets(), st.integers(1, 8), st.integers(0, 1000))
def test_sampled_graph_invariants(x, k, seed):
    n = len(x)
    P = edge_probabilities(x, 1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegreeClampWarning)
        g = gumbel_top_k(P, k, make_rng(seed))
    kk = min(k, n - 1)
    assert g.k == kk
    np.testing.assert_array_equal(g.in_degree(), np.full(n, kk))
    assert not np.any(g.targets == g.sources)
    assert len({tuple(e) for e in g.edges.tolist()}) == len(g.edges)
    np.testing.assert_array_equal(g.edge_prob, P.probs.values[g.targets, g.sources])
    order = np.lexsort((g.sources, g.targets))
    np.testing.assert_array_equal(order, np.arange(len(order)))


def test_k_equals_n_minus_one_takes_everything():
    P = edge_probabilities(np.random.default_rng(0).standard_normal((5, 2)), 1.0)
    g = gumbel_top_k(P, 4, make_rng(3))
    expected = [(i, j) for i in range(5) for j in range(5) if i != j]
    assert [tuple(e) for e in g.edges.tolist()] == expected


def test_k_too_large_is_clamped_with_warning():
    P = edge_probabilities(np.zeros((3, 1)), 1.0)
    with pytest.warns(DegreeClampWarning):
        g = gumbel_top_k(P, 5, make_rng(0))
    assert g.k == 2
    with pytest.warns(DegreeClampWarning):
        knn_baseline(P, 3)


def test_sampler_input_errors():
    P = edge_probabilities(np.zeros((3, 1)), 1.0)
    with pytest.raises(ValueError):
        gumbel_top_k(P, 0, make_rng(0))
    with pytest.raises(ValueError):
        gumbel_top_k(P, 1)
    with pytest.raises(T.ShapeError):
        gumbel_top_k(P, 1, q=np.full((3, 3), 0.5))
    with pytest.raises(ValueError):
        gumbel_top_k(edge_probabilities(np.zeros((1, 1)), 1.0), 1, make_rng(0))


@given(point_sets(), st.integers(1, 8), st.floats(0.01, 0.99))
def test_constant_noise_is_knn(x, k, q):
    n = len(x)
    k = min(k, n - 1)
    P = edge_probabilities(x, 1.0)
    a = gumbel_top_k(P, k, q=np.full((n, n - 1), q))
    b = knn_baseline(P, k)
    np.testing.assert_array_equal(a.edges, b.edges)


def test_knn_examples():
    g = knn_baseline(edge_probabilities([[0.0], [1.0], [3.0]], 1.0), 1)
    assert g.sources[g.targets == 2].tolist() == [1]
    # duplicate points: node 0 sees 1 and 2 at distance zero; lower index wins
    g = knn_baseline(edge_probabilities([[0.0], [0.0], [0.0], [5.0]], 1.0), 1)
    assert g.sources.tolist()[:3] == [1, 0, 0]


def test_knn_distinguishes_underflowed_probabilities():
    # exp(-t d^2) is 0 for all three candidates; ranking must still follow distance
    x = np.array([[0.0], [40.0], [50.0], [45.0]])
    P = edge_probabilities(x, 1.0)
    assert np.all(P.probs.values[0, 1:] == 0.0)
    g = knn_baseline(P, 1)
    assert g.sources[0] == 1


def test_sampler_is_stop_gradient():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 2)), requires_grad=True)
    P = edge_probabilities(x, 1.0)
    g = gumbel_top_k(P, 2, make_rng(0))
    # the selected edges carry gradient only through the gathered probabilities
    T.sum(g.edge_p).backward()
    assert x.grad is not None
    assert isinstance(g.edges, np.ndarray) and g.edges.dtype.kind == "i"


def test_uniform_open_interval():
    class Extremes:
        def random(self, shape):
            out = np.zeros(shape)
            out.flat[1::2] = np.nextafter(1.0, 0.0)
            return out
    q = uniform_open(Extremes(), (4,))
    assert np.all(q > 0) and np.all(q < 1)
    assert np.all(np.isfinite(-np.log(-np.log(q))))


def test_chi_square_marginals_at_n4():
    p_row = np.array([0.6, 0.3, 0.15])
    probs = np.full((4, 4), 0.5)
    probs[0, 1:] = p_row
    freq = pick_frequencies(matrix_from_probs(probs), 0, 1, 100_000, seed=11)
    observed = freq[1:] * 100_000
    expected = p_row / p_row.sum() * 100_000
    assert stats.chisquare(observed, expected).pvalue > 0.001


def test_monotone_inclusion():
    base = np.full((5, 5), 0.5)
    base[0, 1:] = [0.4, 0.3, 0.2, 0.1]
    raised = base.copy()
    raised[0, 3] = 0.35
    low = pick_frequencies(matrix_from_probs(base), 0, 2, 100_000, seed=5)[3]
    high = pick_frequencies(matrix_from_probs(raised), 0, 2, 100_000, seed=6)[3]
    assert high >= low - 0.01
    assert high > low


def test_separated_clusters_stay_inside():
    x = np.concatenate([np.random.default_rng(0).uniform(-0.3, 0.3, (3, 2)),
                        np.random.default_rng(1).uniform(-0.3, 0.3, (3, 2)) + [5.0, 0.0]])
    P = edge_probabilities(x, 1.0)
    inter = P.probs.values[:3, 3:]
    assert inter.max() < 1e-8
    cluster = np.array([0, 0, 0, 1, 1, 1])
    inside = 0
    for seed in range(200):
        g = gumbel_top_k(P, 2, make_rng(seed))
        inside += np.all(cluster[g.targets] == cluster[g.sources])
    assert inside / 200 >= 0.99


# ----------------------------------------------------------- dgm_forward


def test_dgm_forward_identity_bit_exact():
    x = np.random.default_rng(2).standard_normal((5, 3))
    x_hat, g, P = dgm_forward(x, None, None, Tensor(1.0), 2, make_rng(0))
    assert x_hat.values.tobytes() == x.tobytes()
    assert g.k == 2


def test_dgm_forward_two_nodes_forced():
    for mode, f in (("identity", None), ("mlp", lambda v: T.mul(v, 2.0))):
        _, g, _ = dgm_forward(np.array([[0.0], [1.0]]), None, f, Tensor(1.0), 1, make_rng(0), mode)
        assert g.edges.tolist() == [[0, 1], [1, 0]]


def test_dgm_forward_edge_conv_needs_graph():
    with pytest.raises(ConfigError):
        dgm_forward(np.zeros((3, 2)), None, lambda x, g: x, Tensor(1.0), 1, make_rng(0), "edge_conv")
    with pytest.raises(ConfigError):
        dgm_forward(np.zeros((3, 2)), None, None, Tensor(1.0), 1, make_rng(0), "pairwise")
    with pytest.raises(ConfigError):
        dgm_forward(np.zeros((3, 2)), None, None, Tensor(1.0), 1, make_rng(0), sampler="threshold")


def test_dgm_forward_knn_sampler_deterministic():
    x = np.random.default_rng(4).standard_normal((6, 2))
    a = dgm_forward(x, None, None, Tensor(1.0), 2, make_rng(0), sampler="knn")[1]
    b = dgm_forward(x, None, None, Tensor(1.0), 2, make_rng(99), sampler="knn")[1]
    np.testing.assert_array_equal(a.edges, b.edges)


def test_rng_reproducible_and_seeded():
    a = make_rng(5).random(4)
    b = make_rng(5).random(4)
    c = make_rng([5, 1]).random(4)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, c)


# ---------------------------------------------------------------- export


def test_edge_list_export_round_trip(tmp_path):
    P = edge_probabilities(np.random.default_rng(0).standard_normal((4, 2)), 1.0)
    g = gumbel_top_k(P, 2, make_rng(0))
    path = tmp_path / "g.txt"
    g.write(path)
    rows = read_edge_list(path)
    assert [(i, j) for i, j, _ in rows] == [tuple(e) for e in g.edges.tolist()]
    np.testing.assert_array_equal([p for _, _, p in rows], g.edge_prob)
    dot = g.to_dot()
    assert dot.startswith("digraph") and dot.count("->") == len(g.edges)
    with pytest.raises(ValueError):
        g.write(tmp_path / "g.x", fmt="png")


def test_from_edges_records_log_probs():
    g = SampledGraph.from_edges(np.array([[0, 1], [1, 0]]), Tensor([0.5, 0.25]), 2)
    np.testing.assert_allclose(g.edge_log_p.values, np.log([0.5, 0.25]))
