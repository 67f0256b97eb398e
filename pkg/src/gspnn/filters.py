"""Graph filter families: polynomial (FIR), rational (ARMA), and edge-varying.

A FIR graph filter is a polynomial in the shift operator applied by repeated
one-hop shifts. An ARMA filter adds single-pole terms beta / (lambda - gamma)
to the response; it is evaluated either exactly (dense solve, the reference
path) or by unrolled Jacobi iterations (the trainable, distributable path).
An edge-varying filter gives every stored coordinate of I + S its own weight
at every step, generalizing both.

Matrix powers of the shift are never materialized; every family is applied
through repeated sparse shifts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graphs import GraphError, GraphSignal, ShiftOperator, symmetric_eigh


class FilterError(ValueError):
    """Invalid filter parameters or application."""


# ---------------------------------------------------------------------------
# FIR filters
# ---------------------------------------------------------------------------

FIR_VARIANTS = ("plain", "gcn", "sgc", "gin")


@dataclass(frozen=True)
class FirTaps:
    """Polynomial filter taps h = [h0, ..., hK].

    ``mask`` marks trainable positions; masked-off taps keep their fixed
    values. ``variant='gin'`` additionally ties h0 = (1 + epsilon) * h1.
    """

    taps: np.ndarray
    mask: np.ndarray | None = None
    variant: str = "plain"
    epsilon: float | None = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.taps, dtype=float))
        if t.ndim != 1 or t.size == 0:
            raise FilterError("taps must be a non-empty vector")
        if not np.all(np.isfinite(t)):
            raise FilterError("taps must be finite")
        object.__setattr__(self, "taps", t)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != t.shape:
                raise FilterError("mask length must match taps")
            object.__setattr__(self, "mask", m)
        if self.variant not in FIR_VARIANTS:
            raise FilterError(f"unknown FIR variant {self.variant!r}")

    @property
    def order(self) -> int:
        return self.taps.size - 1


def fir_mask(variant: str, order: int, epsilon: float = 0.0) -> FirTaps:
    """Tap template for the constrained FIR variants.

    gcn:   order forced to 1, h0 fixed at 0, h1 trainable.
    sgc:   only the top tap hK trainable, the rest fixed at 0.
    gin:   order forced to 1, h0 tied to (1 + epsilon) * h1.
    plain: every tap trainable.
    """
    if variant not in FIR_VARIANTS:
        raise FilterError(f"unknown FIR variant {variant!r}")
    if order < 1 and variant in ("gcn", "sgc", "gin"):
        raise FilterError(f"{variant} needs order >= 1")
    if variant in ("gcn", "gin") and order != 1:
        raise FilterError(f"{variant} is defined for order 1, got {order}")
    taps = np.zeros(order + 1)
    if variant == "gcn":
        mask = np.array([False, True])
    elif variant == "sgc":
        mask = np.zeros(order + 1, dtype=bool)
        mask[order] = True
    elif variant == "gin":
        mask = np.array([False, True])
        return FirTaps(taps, mask, variant="gin", epsilon=float(epsilon))
    else:
        mask = np.ones(order + 1, dtype=bool)
    return FirTaps(taps, mask, variant=variant)


def fir_shifted_stack(s: ShiftOperator, x: np.ndarray, order: int) -> np.ndarray:
    """Stack [x, Sx, S^2 x, ..., S^K x] computed by iterated shifts."""
    zs = np.empty((order + 1,) + x.shape)
    zs[0] = x
    for k in range(1, order + 1):
        zs[k] = s.apply(zs[k - 1])
    return zs


def fir_apply(h: FirTaps, s: ShiftOperator, x: GraphSignal) -> GraphSignal:
    """Apply sum_k h_k S^k x by iterated shifts.

    Accumulates in ascending k so the result matches the neural layer kernel
    bit for bit in the single-feature case.
    """
    if x.n_nodes != s.n_nodes:
        raise GraphError(f"shift is {s.n_nodes} nodes, signal has {x.n_nodes}")
    zs = fir_shifted_stack(s, x.values, h.order)
    out = h.taps[0] * zs[0]
    for k in range(1, h.taps.size):
        out += h.taps[k] * zs[k]
    return GraphSignal(out)


@dataclass(frozen=True)
class FrequencySample:
    lam: float
    response: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and np.isfinite(self.response)):
            raise FilterError("non-finite frequency sample")


def fir_response(h: FirTaps, lambdas) -> list[FrequencySample]:
    """Pointwise polynomial response h(lambda) = sum_k h_k lambda^k."""
    out = []
    for lam in np.atleast_1d(np.asarray(lambdas, dtype=float)):
        val = 0.0
        for coef in h.taps[::-1]:
            val = val * lam + coef
        out.append(FrequencySample(float(lam), float(val)))
    return out


# ---------------------------------------------------------------------------
# ARMA filters: partial-fraction form with poles gamma, residues beta, and
# direct polynomial taps alpha.
# ---------------------------------------------------------------------------

def pole_margin(s: ShiftOperator) -> float:
    """Minimum allowed distance between a pole and any diagonal entry of S."""
    return 1e-3 * (1.0 + s.operator_norm())


@dataclass(frozen=True)
class ArmaParams:
    """Rational filter parameters: response sum_p beta_p / (lambda - gamma_p)
    + sum_k alpha_k lambda^k, approximated by ``jacobi_iters`` unrolled Jacobi
    steps when applied iteratively."""

    poles: np.ndarray
    residues: np.ndarray
    direct_taps: np.ndarray
    jacobi_iters: int = 1

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.poles, dtype=float))
        b = np.atleast_1d(np.asarray(self.residues, dtype=float))
        a = np.atleast_1d(np.asarray(self.direct_taps, dtype=float))
        if g.size == 0:
            g = g.reshape(0)
        if b.size == 0:
            b = b.reshape(0)
        if g.shape != b.shape:
            raise FilterError("poles and residues must have equal length")
        if a.size == 0:
            raise FilterError("need at least one direct tap (use [0])")
        for arr in (g, b, a):
            if not np.all(np.isfinite(arr)):
                raise FilterError("ARMA parameters must be finite")
        if self.jacobi_iters < 1:
            raise FilterError("jacobi_iters must be >= 1")
        object.__setattr__(self, "poles", g)
        object.__setattr__(self, "residues", b)
        object.__setattr__(self, "direct_taps", a)

    @property
    def n_poles(self) -> int:
        return self.poles.size


def arma_response(p: ArmaParams, lambdas) -> list[FrequencySample]:
    """Exact rational response of the partial-fraction form."""
    out = []
    direct = FirTaps(p.direct_taps)
    for lam in np.atleast_1d(np.asarray(lambdas, dtype=float)):
        denom = lam - p.poles
        if np.any(np.abs(denom) < 1e-12):
            raise FilterError(f"response pole hit at lambda={lam}")
        val = float(np.sum(p.residues / denom)) + fir_response(direct, [lam])[0].response
        out.append(FrequencySample(float(lam), val))
    return out


def arma_apply_direct(p: ArmaParams, s: ShiftOperator, x: GraphSignal) -> GraphSignal:
    """Exact ARMA output via dense solves: the reference for the Jacobi path."""
    if x.n_nodes != s.n_nodes:
        raise GraphError("signal size does not match shift")
    dense = s.dense()
    eye = np.eye(s.n_nodes)
    out = np.zeros_like(x.values)
    for gamma, beta in zip(p.poles, p.residues):
        try:
            out += beta * np.linalg.solve(dense - gamma * eye, x.values)
        except np.linalg.LinAlgError as exc:
            raise FilterError(f"S - {gamma} I is singular") from exc
    out += fir_apply(FirTaps(p.direct_taps), s, x).values
    return GraphSignal(out)


def jacobi_shift(s: ShiftOperator, gamma: float) -> np.ndarray:
    """Pole-parameterized shift R(gamma) = -(D - gamma I)^{-1} (S - D).

    Shares the off-diagonal sparsity of S; equals S / gamma for hollow S.
    """
    d = s.diagonal()
    margin = pole_margin(s)
    if np.min(np.abs(d - gamma)) < margin:
        raise FilterError(f"pole {gamma} within {margin:.3g} of a diagonal entry")
    c = 1.0 / (d - gamma)
    m = s.dense()
    off = m - np.diag(np.diag(m))
    return -c[:, None] * off


def _jacobi_scale(s: ShiftOperator, gamma: float) -> np.ndarray:
    d = s.diagonal()
    margin = pole_margin(s)
    if np.min(np.abs(d - gamma)) < margin:
        raise FilterError(f"pole {gamma} within {margin:.3g} of a diagonal entry")
    return 1.0 / (d - gamma)


def jacobi_shift_apply(s: ShiftOperator, gamma: float, v: np.ndarray,
                       c: np.ndarray | None = None) -> np.ndarray:
    """R(gamma) @ v without materializing R: c * (d * v - S v)."""
    if c is None:
        c = _jacobi_scale(s, gamma)
    d = s.diagonal()
    cc = c[:, None] if v.ndim > 1 else c
    dd = d[:, None] if v.ndim > 1 else d
    return cc * (dd * v - s.apply(v))


def jacobi_single_pole(s: ShiftOperator, gamma: float, beta: float, iters: int,
                       x: GraphSignal) -> GraphSignal:
    """Truncated Jacobi solve of (S - gamma I) u = beta x, started at u = x.

    Iterates u <- (D - gamma I)^{-1} [beta x - (S - D) u]; for a convergent
    recursion (spectral radius of R(gamma) below one) this approaches the
    exact single-pole output beta (S - gamma I)^{-1} x.
    """
    if iters < 1:
        raise FilterError("need at least one Jacobi iteration")
    if x.n_nodes != s.n_nodes:
        raise GraphError("signal size does not match shift")
    c = _jacobi_scale(s, gamma)
    b = beta * c[:, None] * x.values
    u = x.values
    for _ in range(iters):
        u = b + jacobi_shift_apply(s, gamma, u, c=c)
    return GraphSignal(u)


def arma_apply_jacobi(p: ArmaParams, s: ShiftOperator, x: GraphSignal) -> GraphSignal:
    """Jacobi-approximated ARMA output: pole terms unrolled to ``jacobi_iters``
    steps plus the exact direct polynomial part."""
    out = fir_apply(FirTaps(p.direct_taps), s, x)
    acc = out.values
    for gamma, beta in zip(p.poles, p.residues):
        acc = acc + jacobi_single_pole(s, gamma, beta, p.jacobi_iters, x).values
    return GraphSignal(acc)


def jacobi_spectral_radius(s: ShiftOperator, gamma: float) -> float:
    """Spectral radius of R(gamma); reported per pole by the analysis tools.

    When the diagonal scaling (d_i - gamma)^{-1} has one sign, R is similar
    to a symmetric matrix and the radius is exact; otherwise falls back to a
    dense nonsymmetric eigenvalue solve.
    """
    c = _jacobi_scale(s, gamma)
    m = s.dense()
    off = np.diag(np.diag(m)) - m  # D - S
    if np.all(c > 0) or np.all(c < 0):
        sq = np.sqrt(np.abs(c))
        sym = sq[:, None] * off * sq[None, :]
        lam, _ = symmetric_eigh(sym)
        return float(np.max(np.abs(lam)))
    return float(np.max(np.abs(np.linalg.eigvals(c[:, None] * off))))


# ---------------------------------------------------------------------------
# Edge-varying filters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeVaryingSupport:
    """Sorted coordinate list of I + S: where edge-varying weights may live."""

    n_nodes: int
    rows: np.ndarray
    cols: np.ndarray

    @staticmethod
    def from_shift(s: ShiftOperator) -> "EdgeVaryingSupport":
        n = s.n_nodes
        rows = np.concatenate([s.rows, np.arange(n)])
        cols = np.concatenate([s.cols, np.arange(n)])
        coords = sorted(set(zip(rows.tolist(), cols.tolist())))
        r = np.array([ij[0] for ij in coords], dtype=int)
        c = np.array([ij[1] for ij in coords], dtype=int)
        return EdgeVaryingSupport(n, r, c)

    @property
    def nnz(self) -> int:
        return self.rows.size

    def matvec(self, vals: np.ndarray, v: np.ndarray) -> np.ndarray:
        contrib = vals * v[self.cols]
        return np.bincount(self.rows, weights=contrib, minlength=self.n_nodes)

    def rmatvec(self, vals: np.ndarray, v: np.ndarray) -> np.ndarray:
        contrib = vals * v[self.rows]
        return np.bincount(self.cols, weights=contrib, minlength=self.n_nodes)

    def dense(self, vals: np.ndarray) -> np.ndarray:
        m = np.zeros((self.n_nodes, self.n_nodes))
        m[self.rows, self.cols] = vals
        return m

    def values_from_dense(self, m: np.ndarray, check: bool = True) -> np.ndarray:
        if check:
            mask = np.ones_like(m, dtype=bool)
            mask[self.rows, self.cols] = False
            bad = np.nonzero(mask & (m != 0.0))
            if bad[0].size:
                i, j = int(bad[0][0]), int(bad[1][0])
                raise FilterError(f"entry ({i},{j}) outside the I+S support")
        return m[self.rows, self.cols].copy()


@dataclass(frozen=True)
class EdgeVaryingParams:
    """Weights for an order-K edge-varying filter on a fixed support.

    ``diag`` (N,) holds the step-0 diagonal weights; ``values`` (K, nnz)
    holds one weight per stored coordinate of I + S for steps 1..K.
    """

    support: EdgeVaryingSupport
    diag: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        dg = np.asarray(self.diag, dtype=float)
        vv = np.asarray(self.values, dtype=float)
        if vv.ndim == 1:
            vv = vv[None, :]
        if dg.shape != (self.support.n_nodes,):
            raise FilterError("diag must have one weight per node")
        if vv.ndim != 2 or (vv.size and vv.shape[1] != self.support.nnz):
            raise FilterError("values must be (order, nnz) on the support")
        if not (np.all(np.isfinite(dg)) and np.all(np.isfinite(vv))):
            raise FilterError("edge-varying weights must be finite")
        object.__setattr__(self, "diag", dg)
        object.__setattr__(self, "values", vv)

    @property
    def order(self) -> int:
        return self.values.shape[0]

    @staticmethod
    def from_matrices(support: EdgeVaryingSupport, phi: list[np.ndarray]) -> "EdgeVaryingParams":
        """Build from explicit matrices [Phi0 (diagonal), Phi1, ..., PhiK]."""
        if not phi:
            raise FilterError("need at least the step-0 matrix")
        phi0 = np.asarray(phi[0], dtype=float)
        if np.any(phi0 - np.diag(np.diag(phi0)) != 0.0):
            raise FilterError("step-0 matrix must be diagonal")
        vals = np.array([support.values_from_dense(np.asarray(m, dtype=float))
                         for m in phi[1:]])
        if vals.size == 0:
            vals = np.zeros((0, support.nnz))
        return EdgeVaryingParams(support, np.diag(phi0).copy(), vals)


def edge_varying_apply(e: EdgeVaryingParams, x: GraphSignal) -> GraphSignal:
    """Apply sum_k Phi^(k) ... Phi^(0) x via the step recursion."""
    if x.n_nodes != e.support.n_nodes:
        raise GraphError("signal size does not match the bound support")
    acc = np.zeros_like(x.values)
    for f in range(x.n_features):
        z = e.diag * x.values[:, f]
        total = z.copy()
        for k in range(e.order):
            z = e.support.matvec(e.values[k], z)
            total += z
        acc[:, f] = total
    return GraphSignal(acc)


def edge_varying_from_fir(s: ShiftOperator, h: FirTaps) -> EdgeVaryingParams:
    """Nested weights reproducing the FIR filter sum_k h_k S^k.

    Step 0 carries h0 on the diagonal and step k carries (h_k / h_{k-1}) S,
    so every chain product equals h_k S^k. The chain factorization needs
    nonzero taps throughout.
    """
    taps = h.taps
    if np.any(taps == 0.0):
        raise FilterError("nested FIR reduction needs nonzero taps throughout")
    support = EdgeVaryingSupport.from_shift(s)
    diag = np.full(s.n_nodes, taps[0])
    s_dense = s.dense()
    mats = [(taps[k] / taps[k - 1]) * s_dense for k in range(1, taps.size)]
    vals = np.array([support.values_from_dense(m, check=False) for m in mats]) \
        if mats else np.zeros((0, support.nnz))
    return EdgeVaryingParams(support, diag, vals)


# ---------------------------------------------------------------------------
# Delayed FIR filters for time-varying graphs
# ---------------------------------------------------------------------------

def delayed_fir_apply(h: FirTaps, shift_history: list[ShiftOperator],
                      signal_history: list[GraphSignal]) -> GraphSignal:
    """Time-varying convolution sum_k h_k S(t) ... S(t-k+1) x(t-k).

    ``shift_history`` is [S(t), S(t-1), ...] (K entries reach order K) and
    ``signal_history`` is [x(t), x(t-1), ...]; histories shorter than the
    filter order are zero-padded (terms needing missing entries drop out).
    """
    order = h.order
    n = signal_history[0].n_nodes if signal_history else 0
    for item in signal_history:
        if item.n_nodes != n:
            raise GraphError("node counts differ across the signal history")
    for sop in shift_history:
        if sop.n_nodes != n:
            raise GraphError("node counts differ across the shift history")
    if not signal_history:
        raise GraphError("signal history is empty")
    out = h.taps[0] * signal_history[0].values
    for k in range(1, order + 1):
        if h.taps[k] == 0.0:
            continue
        if k >= len(signal_history) or k > len(shift_history):
            continue  # zero-padded history
        w = signal_history[k].values
        for j in range(k - 1, -1, -1):
            w = shift_history[j].apply(w)
        out = out + h.taps[k] * w
    return GraphSignal(out)
