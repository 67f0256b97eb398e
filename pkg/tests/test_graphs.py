import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gspnn.graphs import (
    DENSE_CACHE_LIMIT,
    Graph,
    GraphError,
    GraphSignal,
    ShiftKind,
    ShiftOperator,
    build_shift,
    eigendecompose,
    gft,
    igft,
    load_graph,
    permute_shift,
    random_graph,
    save_graph,
    shift,
    symmetric_eigh,
)

from conftest import make_random_graph


# ---------------------------------------------------------------------------
# Graph and signal containers
# ---------------------------------------------------------------------------

def test_graph_rejects_self_loop():
    with pytest.raises(GraphError):
        Graph(3, ((0, 0, 1.0),))


def test_graph_rejects_duplicate_edge():
    with pytest.raises(GraphError):
        Graph(3, ((0, 1, 1.0), (1, 0, 2.0)))


def test_graph_rejects_bad_weight():
    with pytest.raises(GraphError):
        Graph(3, ((0, 1, -1.0),))
    with pytest.raises(GraphError):
        Graph(3, ((0, 1, np.inf),))


def test_graph_rejects_out_of_range_index():
    with pytest.raises(GraphError):
        Graph(2, ((0, 2, 1.0),))


def test_signal_promotes_1d():
    x = GraphSignal(np.array([1.0, 2.0]))
    assert x.values.shape == (2, 1)
    assert x.n_nodes == 2 and x.n_features == 1


def test_signal_rejects_nan():
    with pytest.raises(GraphError):
        GraphSignal(np.array([1.0, np.nan]))


# ---------------------------------------------------------------------------
# build_shift
# ---------------------------------------------------------------------------

def two_node_graph():
    return Graph(2, ((0, 1, 1.0),))


def triangle_graph():
    return Graph(3, ((0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)))


def path3_graph():
    return Graph(3, ((0, 1, 1.0), (1, 2, 1.0)))


def test_adjacency_two_nodes():
    s = build_shift(two_node_graph(), ShiftKind.ADJACENCY)
    assert np.array_equal(s.dense(), [[0.0, 1.0], [1.0, 0.0]])


def test_laplacian_two_nodes():
    s = build_shift(two_node_graph(), ShiftKind.LAPLACIAN)
    assert np.array_equal(s.dense(), [[1.0, -1.0], [-1.0, 1.0]])


def test_degree_normalized_triangle():
    # D = 2I, so every off-diagonal entry is 1/2.
    s = build_shift(triangle_graph(), ShiftKind.DEGREE_NORMALIZED_ADJACENCY)
    expected = (np.ones((3, 3)) - np.eye(3)) / 2.0
    assert np.allclose(s.dense(), expected, atol=1e-15)


def test_normalized_adjacency_spectrum_in_unit_interval():
    g, _ = make_random_graph(7, n=12)
    s = eigendecompose(build_shift(g, ShiftKind.NORMALIZED_ADJACENCY))
    assert np.max(np.abs(s.eigenvalues)) <= 1.0 + 1e-12


def test_normalized_laplacian_matches_definition():
    g, _ = make_random_graph(8, n=9)
    a = g.adjacency()
    d = g.degrees()
    expected = np.eye(9) - a / np.sqrt(np.outer(d, d))
    s = build_shift(g, ShiftKind.NORMALIZED_LAPLACIAN)
    assert np.allclose(s.dense(), expected, atol=1e-12)


def test_zero_degree_node_rejected_for_degree_scaling():
    g = Graph(3, ((0, 1, 1.0),))  # node 2 isolated
    with pytest.raises(GraphError, match="zero-degree"):
        build_shift(g, ShiftKind.DEGREE_NORMALIZED_ADJACENCY)
    s = build_shift(g, ShiftKind.DEGREE_NORMALIZED_ADJACENCY, allow_isolated=True)
    assert np.all(s.dense()[2] == 0.0)


def test_custom_shift_requires_symmetry():
    with pytest.raises(GraphError, match="symmetric"):
        ShiftOperator.from_dense(np.array([[0.0, 1.0], [0.0, 0.0]]))


def test_shift_sparsity_validated_against_graph():
    m = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    with pytest.raises(GraphError, match="disconnected"):
        ShiftOperator.from_dense(m, graph=path3_graph())


# ---------------------------------------------------------------------------
# shift operation
# ---------------------------------------------------------------------------

def test_shift_swaps_on_single_edge():
    s = build_shift(two_node_graph(), ShiftKind.ADJACENCY)
    y = shift(s, GraphSignal(np.array([1.0, 0.0])))
    assert np.array_equal(y.values[:, 0], [0.0, 1.0])


def test_shift_of_zero_is_zero():
    g, _ = make_random_graph(3)
    s = build_shift(g, ShiftKind.ADJACENCY)
    y = shift(s, GraphSignal(np.zeros(g.n_nodes)))
    assert np.all(y.values == 0.0)


def test_shift_path3_impulse():
    s = build_shift(path3_graph(), ShiftKind.ADJACENCY)
    x = np.array([1.0, 0.0, 0.0])
    y = shift(s, GraphSignal(x))
    # dense matrix-vector oracle
    assert np.allclose(y.values[:, 0], s.dense() @ x, atol=1e-15)
    assert np.array_equal(y.values[:, 0], [0.0, 1.0, 0.0])


def test_shift_dimension_mismatch():
    s = build_shift(path3_graph(), ShiftKind.ADJACENCY)
    with pytest.raises(GraphError):
        shift(s, GraphSignal(np.zeros(4)))


@given(st.integers(0, 200))
def test_sparse_traversal_matches_dense(seed):
    g, r = make_random_graph(seed)
    s = build_shift(g, ShiftKind.ADJACENCY)
    x = r.normal(size=(g.n_nodes, 3))
    assert np.allclose(s.apply_coo(x), s.dense() @ x, atol=1e-12)


@given(st.integers(0, 100))
def test_shift_locality(seed):
    # Perturbing a non-neighbor never changes a node's shifted value.
    g, r = make_random_graph(seed)
    s = build_shift(g, ShiftKind.ADJACENCY)
    n = g.n_nodes
    x = r.normal(size=n)
    y0 = s.apply(x)
    neighbors = {i: set() for i in range(n)}
    for i, j, _ in g.edges:
        neighbors[i].add(j)
        neighbors[j].add(i)
    for node in range(n):
        for other in range(n):
            if other in neighbors[node] or other == node:
                continue
            x2 = x.copy()
            x2[other] += 1.0
            assert s.apply(x2)[node] == y0[node]


def test_coo_path_used_above_dense_limit():
    n = DENSE_CACHE_LIMIT + 10
    r = np.random.default_rng(5)
    edges = tuple((i, (i + 1) % n, 1.0) for i in range(n - 1))
    g = Graph(n, edges)
    s = build_shift(g, ShiftKind.ADJACENCY)
    assert s._dense is None
    x = r.normal(size=n)
    dense = np.zeros((n, n))
    for i, j, w in edges:
        dense[i, j] = dense[j, i] = w
    assert np.allclose(s.apply(x), dense @ x, atol=1e-12)


# ---------------------------------------------------------------------------
# Eigendecomposition and GFT
# ---------------------------------------------------------------------------

def test_eigendecompose_two_node():
    s = eigendecompose(build_shift(two_node_graph(), ShiftKind.ADJACENCY))
    assert np.allclose(s.eigenvalues, [-1.0, 1.0], atol=1e-12)
    r2 = 1.0 / np.sqrt(2.0)
    assert np.allclose(np.abs(s.eigenvectors), r2, atol=1e-12)
    # sign convention: first column [1, -1]/sqrt(2), second [1, 1]/sqrt(2)
    assert np.allclose(s.eigenvectors[:, 0], [r2, -r2], atol=1e-12)
    assert np.allclose(s.eigenvectors[:, 1], [r2, r2], atol=1e-12)


def test_eigendecompose_diagonal():
    s = ShiftOperator.from_dense(np.diag([3.0, 1.0, 2.0]))
    s = eigendecompose(s)
    assert np.allclose(s.eigenvalues, [1.0, 2.0, 3.0], atol=1e-12)
    perm_abs = np.abs(s.eigenvectors)
    assert np.allclose(perm_abs @ perm_abs.T, np.eye(3), atol=1e-12)
    assert set(np.argmax(perm_abs, axis=0).tolist()) == {0, 1, 2}


def test_laplacian_nullspace_is_constant_vector():
    g, _ = make_random_graph(11, n=8)
    s = eigendecompose(build_shift(g, ShiftKind.LAPLACIAN))
    assert abs(s.eigenvalues[0]) < 1e-9
    v1 = s.eigenvectors[:, 0]
    assert np.allclose(v1, v1[0], atol=1e-9)


def test_eigendecompose_rejects_nonsymmetric():
    with pytest.raises(GraphError):
        symmetric_eigh(np.array([[0.0, 1.0], [2.0, 0.0]]))


@given(st.integers(0, 100))
def test_eigh_matches_numpy_oracle(seed):
    g, _ = make_random_graph(seed)
    s = eigendecompose(build_shift(g, ShiftKind.ADJACENCY))
    lam_np = np.linalg.eigvalsh(s.dense())
    assert np.allclose(s.eigenvalues, lam_np, atol=1e-9)
    v = s.eigenvectors
    assert np.linalg.norm(v.T @ v - np.eye(g.n_nodes)) <= 1e-8
    recon = (v * s.eigenvalues) @ v.T
    assert np.linalg.norm(recon - s.dense()) <= 1e-8 * max(np.linalg.norm(s.dense()), 1.0)


@given(st.integers(0, 100))
def test_permuted_shift_has_same_eigenvalues(seed):
    g, r = make_random_graph(seed)
    s = eigendecompose(build_shift(g, ShiftKind.ADJACENCY))
    perm = r.permutation(g.n_nodes)
    sp = eigendecompose(permute_shift(s, perm))
    assert np.allclose(np.sort(s.eigenvalues), np.sort(sp.eigenvalues), atol=1e-9)


def test_gft_two_node_constant_signal():
    s = eigendecompose(build_shift(two_node_graph(), ShiftKind.ADJACENCY))
    xh = gft(s, GraphSignal(np.array([1.0, 1.0])))
    assert np.allclose(xh.values[:, 0], [0.0, np.sqrt(2.0)], atol=1e-12)


def test_gft_of_eigenvector_is_basis_vector():
    g, _ = make_random_graph(21, n=6)
    s = eigendecompose(build_shift(g, ShiftKind.ADJACENCY))
    for i in range(g.n_nodes):
        xh = gft(s, GraphSignal(s.eigenvectors[:, i]))
        expected = np.zeros(g.n_nodes)
        expected[i] = 1.0
        assert np.allclose(xh.values[:, 0], expected, atol=1e-10)


@given(st.integers(0, 100))
def test_gft_roundtrip_and_parseval(seed):
    g, r = make_random_graph(seed, n=int(np.random.default_rng(seed).integers(2, 64)))
    s = eigendecompose(build_shift(g, ShiftKind.ADJACENCY))
    x = GraphSignal(r.normal(size=(g.n_nodes, 2)))
    xh = gft(s, x)
    back = igft(s, xh)
    assert np.allclose(back.values, x.values, atol=1e-10)
    assert abs(np.linalg.norm(xh.values) - np.linalg.norm(x.values)) <= 1e-10


def test_gft_requires_eig():
    s = build_shift(two_node_graph(), ShiftKind.ADJACENCY)
    with pytest.raises(GraphError, match="eigendecomposed"):
        gft(s, GraphSignal(np.zeros(2)))


# ---------------------------------------------------------------------------
# Edge-list files
# ---------------------------------------------------------------------------

def test_graph_file_roundtrip(tmp_path):
    g, _ = make_random_graph(3, n=7)
    path = tmp_path / "g.edges"
    save_graph(g, path)
    g2 = load_graph(path)
    assert g2.n_nodes == g.n_nodes
    assert sorted(g2.edges) == sorted(g.edges)


def test_graph_file_comments_and_errors(tmp_path):
    path = tmp_path / "g.edges"
    path.write_text("# a comment\nnodes 3\n0 1 2.0  # inline\n1 2 0.5\n")
    g = load_graph(path)
    assert g.n_nodes == 3 and g.n_edges == 2
    bad = tmp_path / "bad.edges"
    bad.write_text("0 1 2.0\n")
    with pytest.raises(GraphError, match="header"):
        load_graph(bad)


def test_random_graph_connected():
    g = random_graph(10, 0.3, np.random.default_rng(0))
    s = build_shift(g, ShiftKind.LAPLACIAN)
    lam = np.linalg.eigvalsh(s.dense())
    assert lam[1] > 1e-9  # algebraic connectivity positive
