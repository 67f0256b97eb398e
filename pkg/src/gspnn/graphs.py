"""Graphs, shift operators, graph signals, and the graph Fourier transform.

A graph is an undirected weighted edge list. A shift operator is a symmetric
N x N matrix whose sparsity pattern matches the graph: multiplying a signal
by it mixes each node's value with its neighbors' values. Diagonalizing the
shift operator gives the graph frequency basis; projecting signals onto it
is the graph Fourier transform.

All containers are immutable after construction and all operations are pure
functions, so everything here is safe to share across threads.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# Dense matvec is faster than the coordinate-list path up to a few hundred
# nodes, so cache a dense copy below this size. (Storage stays coordinate
# based either way.)
DENSE_CACHE_LIMIT = 256

SYMMETRY_RTOL = 1e-12
EIG_RECON_RTOL = 1e-8


class GraphError(ValueError):
    """Invalid graph, shift operator, or signal."""


class ShiftKind(enum.Enum):
    ADJACENCY = "adjacency"
    LAPLACIAN = "laplacian"
    NORMALIZED_ADJACENCY = "normalized_adjacency"
    NORMALIZED_LAPLACIAN = "normalized_laplacian"
    DEGREE_NORMALIZED_ADJACENCY = "degree_normalized_adjacency"
    CUSTOM = "custom"


@dataclass(frozen=True)
class Graph:
    """Undirected weighted graph. Each edge is stored once as (i, j, w), w > 0."""

    n_nodes: int
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        if self.n_nodes <= 0:
            raise GraphError("graph needs at least one node")
        seen = set()
        for i, j, w in self.edges:
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise GraphError(f"edge ({i},{j}) out of range for {self.n_nodes} nodes")
            if i == j:
                raise GraphError(f"self-loop on node {i} not allowed in the edge list")
            if not (w > 0 and np.isfinite(w)):
                raise GraphError(f"edge ({i},{j}) needs a positive finite weight, got {w}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise GraphError(f"duplicate edge ({i},{j})")
            seen.add(key)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for i, j, w in self.edges:
            a[i, j] = w
            a[j, i] = w
        return a

    def degrees(self) -> np.ndarray:
        d = np.zeros(self.n_nodes)
        for i, j, w in self.edges:
            d[i] += w
            d[j] += w
        return d


@dataclass(frozen=True)
class GraphSignal:
    """N x F real signal: F feature values per node. 1-d input becomes N x 1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise GraphError(f"signal must be 1-d or 2-d, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise GraphError("signal has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ShiftOperator:
    """Symmetric shift matrix in sorted coordinate-list form.

    ``rows``/``cols``/``vals`` store every nonzero entry (both directions of
    each edge, plus any diagonal mass), sorted by (row, col). ``eigenvalues``
    ascending and ``eigenvectors`` orthonormal-by-column are populated by
    :func:`eigendecompose`; the sign of each eigenvector is fixed so its
    largest-magnitude entry is positive (lowest index on ties).
    """

    n_nodes: int
    kind: ShiftKind
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    eigenvalues: np.ndarray | None = None
    eigenvectors: np.ndarray | None = None
    _dense: np.ndarray | None = field(default=None, repr=False)

    @staticmethod
    def from_dense(matrix: np.ndarray, kind: ShiftKind | str = ShiftKind.CUSTOM,
                   graph: Graph | None = None, validate: bool = True,
                   eigenvalues: np.ndarray | None = None,
                   eigenvectors: np.ndarray | None = None) -> "ShiftOperator":
        kind = ShiftKind(kind)
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise GraphError(f"shift matrix must be square, got {m.shape}")
        n = m.shape[0]
        if validate:
            _check_symmetric(m)
            if graph is not None:
                _check_sparsity(m, graph)
        rows, cols = np.nonzero(m)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        vals = m[rows, cols]
        dense = m if n <= DENSE_CACHE_LIMIT else None
        return ShiftOperator(n, kind, rows, cols, vals,
                             eigenvalues=eigenvalues, eigenvectors=eigenvectors,
                             _dense=dense)

    def dense(self) -> np.ndarray:
        if self._dense is not None:
            return self._dense
        m = np.zeros((self.n_nodes, self.n_nodes))
        m[self.rows, self.cols] = self.vals
        return m

    def diagonal(self) -> np.ndarray:
        d = np.zeros(self.n_nodes)
        on_diag = self.rows == self.cols
        d[self.rows[on_diag]] = self.vals[on_diag]
        return d

    @property
    def has_eig(self) -> bool:
        return self.eigenvalues is not None and self.eigenvectors is not None

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Matrix-vector/matrix product S @ x; x is (N,) or (N, F)."""
        if x.shape[0] != self.n_nodes:
            raise GraphError(f"shift is {self.n_nodes} nodes, signal has {x.shape[0]}")
        if self._dense is not None:
            return self._dense @ x
        return self.apply_coo(x)

    def apply_coo(self, x: np.ndarray) -> np.ndarray:
        """Product via sparse coordinate traversal (no dense materialization)."""
        if x.ndim == 1:
            contrib = self.vals * x[self.cols]
            return np.bincount(self.rows, weights=contrib, minlength=self.n_nodes)
        contrib = self.vals[:, None] * x[self.cols]
        out = np.empty((self.n_nodes, x.shape[1]))
        for f in range(x.shape[1]):
            out[:, f] = np.bincount(self.rows, weights=contrib[:, f],
                                    minlength=self.n_nodes)
        return out

    def operator_norm(self) -> float:
        """Spectral norm max |lambda_i| (symmetric matrix)."""
        if self.has_eig:
            return float(np.max(np.abs(self.eigenvalues)))
        lam = symmetric_eigenvalues(self.dense())
        return float(np.max(np.abs(lam)))


def _check_symmetric(m: np.ndarray) -> None:
    scale = np.max(np.abs(m)) if m.size else 0.0
    if scale == 0.0:
        return
    if np.max(np.abs(m - m.T)) > SYMMETRY_RTOL * max(scale, 1.0):
        raise GraphError("shift operator is not symmetric")


def _check_sparsity(m: np.ndarray, graph: Graph) -> None:
    if m.shape[0] != graph.n_nodes:
        raise GraphError("shift operator size does not match graph")
    allowed = np.eye(graph.n_nodes, dtype=bool)
    for i, j, _ in graph.edges:
        allowed[i, j] = allowed[j, i] = True
    bad = np.nonzero(~allowed & (m != 0.0))
    if bad[0].size:
        i, j = int(bad[0][0]), int(bad[1][0])
        raise GraphError(f"nonzero entry ({i},{j}) between disconnected nodes")


# ---------------------------------------------------------------------------
# Shift construction
# ---------------------------------------------------------------------------

def build_shift(graph: Graph, kind: ShiftKind | str,
                allow_isolated: bool = False) -> ShiftOperator:
    """Build the requested shift matrix for ``graph``.

    ``allow_isolated`` relaxes the zero-degree check for the degree-scaled
    kinds by giving isolated nodes all-zero rows (used for communication
    graphs whose agents may drift out of range).
    """
    kind = ShiftKind(kind)
    a = graph.adjacency()
    d = graph.degrees()
    if kind is ShiftKind.ADJACENCY:
        m = a
    elif kind is ShiftKind.LAPLACIAN:
        m = np.diag(d) - a
    elif kind is ShiftKind.NORMALIZED_ADJACENCY:
        lam_max = np.max(np.abs(symmetric_eigenvalues(a)))
        if lam_max == 0.0:
            raise GraphError("normalized_adjacency undefined: graph has no edges")
        m = a / lam_max
    elif kind in (ShiftKind.DEGREE_NORMALIZED_ADJACENCY, ShiftKind.NORMALIZED_LAPLACIAN):
        zero = d == 0.0
        if np.any(zero) and not allow_isolated:
            raise GraphError(f"zero-degree node {int(np.nonzero(zero)[0][0])}: "
                             f"cannot build {kind.value}")
        inv_sqrt = np.zeros_like(d)
        inv_sqrt[~zero] = 1.0 / np.sqrt(d[~zero])
        m = inv_sqrt[:, None] * a * inv_sqrt[None, :]
        if kind is ShiftKind.NORMALIZED_LAPLACIAN:
            m = np.diag((~zero).astype(float)) - m
    else:
        raise GraphError("custom shifts are built with ShiftOperator.from_dense")
    return ShiftOperator.from_dense(m, kind, graph=None, validate=True)


def shift(s: ShiftOperator, x: GraphSignal) -> GraphSignal:
    """One graph shift: column f of the output is S @ x[:, f]."""
    if x.n_nodes != s.n_nodes:
        raise GraphError(f"shift is {s.n_nodes} nodes, signal has {x.n_nodes}")
    return GraphSignal(s.apply(x.values))


def permute_shift(s: ShiftOperator, perm: np.ndarray) -> ShiftOperator:
    """Relabel nodes: node i of the result is node perm[i] of ``s``.

    Cached spectral data is dropped (the eigenvector sign convention is not
    stable under relabeling); call :func:`eigendecompose` again if needed.
    """
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(s.n_nodes)):
        raise GraphError("perm is not a permutation of the node indices")
    m = s.dense()[np.ix_(perm, perm)]
    return ShiftOperator.from_dense(m, s.kind, validate=False)


# ---------------------------------------------------------------------------
# Symmetric eigendecomposition: Householder tridiagonalization followed by
# implicit-shift QL sweeps. Self-contained; adequate up to a few thousand
# nodes.
# ---------------------------------------------------------------------------

MAX_QL_SWEEPS = 100


def _householder_tridiagonalize(a: np.ndarray):
    """Reduce symmetric ``a`` to tridiagonal form; returns (q, diag, offdiag)
    with q @ T @ q.T == a."""
    n = a.shape[0]
    t = a.copy()
    q = np.eye(n)
    for k in range(n - 2):
        x = t[k + 1:, k].copy()
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        v = x.copy()
        v[0] -= alpha
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            continue
        v /= vnorm
        # Apply P = I - 2 v v^T on both sides of the trailing block.
        sub = t[k + 1:, k + 1:]
        w = sub @ v
        tau = v @ w
        w -= tau * v
        sub -= 2.0 * np.outer(v, w) + 2.0 * np.outer(w, v)
        t[k + 1:, k] = 0.0
        t[k, k + 1:] = 0.0
        t[k + 1, k] = alpha
        t[k, k + 1] = alpha
        qsub = q[:, k + 1:]
        qsub -= 2.0 * np.outer(qsub @ v, v)
    return q, np.diag(t).copy(), np.concatenate([np.diag(t, -1), [0.0]])


def _ql_implicit(d: np.ndarray, e: np.ndarray, v: np.ndarray, tol: float):
    """Implicit-shift QL on tridiagonal (d, e), rotations accumulated into v."""
    n = d.size
    eps = np.finfo(float).eps
    for l in range(n):
        for sweep in range(MAX_QL_SWEEPS + 1):
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= max(tol, eps * dd):
                    break
                m += 1
            if m == l:
                break
            if sweep == MAX_QL_SWEEPS:
                raise GraphError("eigendecomposition failed to converge")
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0 else -r))
            s, c = 1.0, 1.0
            p = 0.0
            for i in range(m - 1, l - 1, -1):
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                f_col = v[:, i + 1].copy()
                v[:, i + 1] = s * v[:, i] + c * f_col
                v[:, i] = c * v[:, i] - s * f_col
            else:
                d[l] -= p
                e[l] = g
                e[m] = 0.0
    return d, v


def _fix_eigenvector_signs(v: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(v), axis=0)  # argmax takes the lowest index on ties
    flip = v[idx, np.arange(v.shape[1])] < 0.0
    v = v.copy()
    v[:, flip] *= -1.0
    return v


def symmetric_eigh(a: np.ndarray):
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, eigenvector matrix with orthonormal
    columns, sign-fixed so each column's largest-magnitude entry is positive).
    """
    a = np.asarray(a, dtype=float)
    _check_symmetric(a)
    n = a.shape[0]
    if n == 1:
        return a[0, :1].copy(), np.ones((1, 1))
    tol = 1e-12 * np.linalg.norm(a)
    q, d, e = _householder_tridiagonalize(a)
    d, v = _ql_implicit(d, e, q, tol)
    order = np.argsort(d, kind="stable")
    return d[order], _fix_eigenvector_signs(v[:, order])


def symmetric_eigenvalues(a: np.ndarray) -> np.ndarray:
    return symmetric_eigh(a)[0]


def eigendecompose(s: ShiftOperator) -> ShiftOperator:
    """Return ``s`` with eigenvalues (ascending) and eigenvectors populated."""
    if s.has_eig:
        return s
    lam, v = symmetric_eigh(s.dense())
    recon = (v * lam) @ v.T
    scale = max(np.linalg.norm(s.dense()), 1e-300)
    if np.linalg.norm(recon - s.dense()) > EIG_RECON_RTOL * scale:
        raise GraphError("eigendecomposition reconstruction check failed")
    return ShiftOperator(s.n_nodes, s.kind, s.rows, s.cols, s.vals,
                         eigenvalues=lam, eigenvectors=v, _dense=s._dense)


def gft(s: ShiftOperator, x: GraphSignal) -> GraphSignal:
    """Graph Fourier transform V^T x. Requires an eigendecomposed shift."""
    if not s.has_eig:
        raise GraphError("gft needs an eigendecomposed shift (call eigendecompose)")
    if x.n_nodes != s.n_nodes:
        raise GraphError("signal size does not match shift")
    return GraphSignal(s.eigenvectors.T @ x.values)


def igft(s: ShiftOperator, x_hat: GraphSignal) -> GraphSignal:
    """Inverse graph Fourier transform V x_hat."""
    if not s.has_eig:
        raise GraphError("igft needs an eigendecomposed shift (call eigendecompose)")
    if x_hat.n_nodes != s.n_nodes:
        raise GraphError("spectrum size does not match shift")
    return GraphSignal(s.eigenvectors @ x_hat.values)


# ---------------------------------------------------------------------------
# Plain-text edge-list files: header line `nodes N`, then `i j weight`
# triples, 0-indexed, `#` comments.
# ---------------------------------------------------------------------------

def save_graph(graph: Graph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"nodes {graph.n_nodes}\n")
        for i, j, w in graph.edges:
            fh.write(f"{i} {j} {w!r}\n")


def load_graph(path) -> Graph:
    n_nodes = None
    edges = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "nodes":
                if n_nodes is not None:
                    raise GraphError(f"{path}:{lineno}: duplicate nodes header")
                n_nodes = int(parts[1])
                continue
            if n_nodes is None:
                raise GraphError(f"{path}:{lineno}: missing `nodes N` header")
            if len(parts) != 3:
                raise GraphError(f"{path}:{lineno}: expected `i j weight`")
            edges.append((int(parts[0]), int(parts[1]), float(parts[2])))
    if n_nodes is None:
        raise GraphError(f"{path}: missing `nodes N` header")
    return Graph(n_nodes, tuple(edges))


def random_graph(n_nodes: int, edge_prob: float, rng: np.random.Generator,
                 weighted: bool = False, ensure_connected: bool = True) -> Graph:
    """Erdos-Renyi style test graph; re-samples until connected if asked."""
    for _ in range(200):
        edges = []
        for i in range(n_nodes):
            for j in range(i + 1, n_nodes):
                if rng.random() < edge_prob:
                    w = float(rng.uniform(0.5, 1.5)) if weighted else 1.0
                    edges.append((i, j, w))
        g = Graph(n_nodes, tuple(edges))
        if not ensure_connected or _connected(g):
            return g
    raise GraphError("could not sample a connected graph; raise edge_prob")


def _connected(g: Graph) -> bool:
    if g.n_nodes == 1:
        return True
    adj = [[] for _ in range(g.n_nodes)]
    for i, j, _ in g.edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    stack = [0]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == g.n_nodes
