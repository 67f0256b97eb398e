"""Graph perceptrons and multi-feature graph neural network layers.

A layer applies a bank of graph filters (one per input/output feature pair),
sums over input features, and passes the result through an entrywise
nonlinearity. Models are a cascade of such layers plus an optional per-node
affine readout shared across nodes.

The reverse-mode gradients for every trainable parameter are implemented by
hand against a recorded tape; only this fixed layer grammar is
differentiable. Internally everything is batched: signals travel as
(batch, nodes, features) arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .filters import EdgeVaryingSupport, FilterError, fir_mask
from .graphs import GraphError, GraphSignal, ShiftOperator

FAMILIES = ("fir", "arma", "edge_varying")
NONLINEARITIES = ("relu", "tanh", "identity")

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Invalid model specification, parameters, or tape."""


@dataclass(frozen=True)
class LayerSpec:
    """One filter-bank layer: family, feature sizes, orders, nonlinearity."""

    family: str
    in_features: int
    out_features: int
    order: int
    n_poles: int = 0
    jacobi_iters: int = 1
    nonlinearity: str = "relu"
    fir_variant: str = "plain"
    gin_epsilon: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown filter family {self.family!r}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ModelError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.in_features < 1 or self.out_features < 1:
            raise ModelError("feature counts must be positive")
        if self.order < 0:
            raise ModelError("filter order must be >= 0")
        if self.family == "arma":
            if self.n_poles < 0 or self.jacobi_iters < 1:
                raise ModelError("arma needs n_poles >= 0 and jacobi_iters >= 1")
        if self.family == "fir" and self.fir_variant != "plain":
            fir_mask(self.fir_variant, self.order, self.gin_epsilon)  # validates


@dataclass(frozen=True)
class ReadoutSpec:
    kind: str = "none"  # none | per_node_linear
    out_dim: int = 0

    def __post_init__(self):
        if self.kind not in ("none", "per_node_linear"):
            raise ModelError(f"unknown readout {self.kind!r}")
        if self.kind == "per_node_linear" and self.out_dim < 1:
            raise ModelError("per_node_linear readout needs out_dim >= 1")


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    readout: ReadoutSpec = ReadoutSpec()
    shift_mode: str = "static"  # static | time_varying

    def __post_init__(self):
        if not self.layers:
            raise ModelError("model needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_features != nxt.in_features:
                raise ModelError("adjacent layer feature counts do not chain")
        if self.shift_mode not in ("static", "time_varying"):
            raise ModelError(f"unknown shift mode {self.shift_mode!r}")
        if self.shift_mode == "time_varying":
            if len(self.layers) != 1 or self.layers[0].family != "fir":
                raise ModelError("time-varying models use a single FIR layer "
                                 "followed by the readout")

    @property
    def in_features(self) -> int:
        return self.layers[0].in_features

    @property
    def out_features(self) -> int:
        if self.readout.kind == "per_node_linear":
            return self.readout.out_dim
        return self.layers[-1].out_features


# ---------------------------------------------------------------------------
# Parameter containers (one per family) and the model state
# ---------------------------------------------------------------------------

@dataclass
class FirLayerParams:
    taps: np.ndarray  # (F_out, F_in, K+1)


@dataclass
class ArmaLayerParams:
    alpha: np.ndarray  # (F_out, F_in, K+1) direct taps
    beta: np.ndarray   # (F_out, F_in, P) residues
    gamma: np.ndarray  # (F_out, F_in, P) poles


@dataclass
class EdgeLayerParams:
    support: EdgeVaryingSupport
    diag: np.ndarray    # (F_out, F_in, N) step-0 diagonal weights
    values: np.ndarray  # (F_out, F_in, K, nnz) step 1..K weights


@dataclass
class ModelState:
    layers: list
    readout_weight: np.ndarray | None = None  # (F_L, out_dim)
    readout_bias: np.ndarray | None = None    # (out_dim,)
    version: int = 0

    def bump_version(self) -> None:
        self.version += 1


def iter_params(state: ModelState):
    """Yield (path, array) for every trainable tensor, in a fixed order."""
    for i, layer in enumerate(state.layers):
        if isinstance(layer, FirLayerParams):
            yield f"layers[{i}].taps", layer.taps
        elif isinstance(layer, ArmaLayerParams):
            yield f"layers[{i}].alpha", layer.alpha
            yield f"layers[{i}].beta", layer.beta
            yield f"layers[{i}].gamma", layer.gamma
        elif isinstance(layer, EdgeLayerParams):
            yield f"layers[{i}].diag", layer.diag
            yield f"layers[{i}].values", layer.values
        else:
            raise ModelError(f"unknown layer parameter type {type(layer)!r}")
    if state.readout_weight is not None:
        yield "readout.weight", state.readout_weight
        yield "readout.bias", state.readout_bias


def init_state(spec: ModelSpec, rng: np.random.Generator,
               shift: ShiftOperator | None = None,
               lambda_max: float | None = None) -> ModelState:
    """Draw initial parameters.

    FIR taps and readout weights are uniform in +-1/sqrt(F_in*(K+1)). ARMA
    poles start in the Jacobi-convergent band [1.5, 3] * lambda_max with
    alternating signs; residues and direct taps are zero-mean uniform scaled
    by 1/sqrt(K+P+1). Edge-varying weights shrink additionally with the mean
    row occupancy of the support so a chain of steps preserves magnitude.
    """
    needs_spectrum = any(l.family == "arma" for l in spec.layers)
    if needs_spectrum and lambda_max is None:
        if shift is None:
            raise ModelError("arma layers need `shift` or `lambda_max` to init poles")
        lambda_max = shift.operator_norm()
    layers = []
    for l in spec.layers:
        if l.family == "fir":
            a = 1.0 / np.sqrt(l.in_features * (l.order + 1))
            taps = rng.uniform(-a, a, size=(l.out_features, l.in_features, l.order + 1))
            apply_tap_constraints(l, taps)
            layers.append(FirLayerParams(taps))
        elif l.family == "arma":
            b = 1.0 / np.sqrt(l.order + l.n_poles + 1)
            alpha = rng.uniform(-b, b, size=(l.out_features, l.in_features, l.order + 1))
            beta = rng.uniform(-b, b, size=(l.out_features, l.in_features, l.n_poles))
            mag = rng.uniform(1.5 * lambda_max, 3.0 * lambda_max,
                              size=(l.out_features, l.in_features, l.n_poles))
            signs = np.ones(l.n_poles)
            signs[1::2] = -1.0
            gamma = mag * signs[None, None, :]
            layers.append(ArmaLayerParams(alpha, beta, gamma))
        else:
            if shift is None:
                raise ModelError("edge_varying layers need `shift` to bind a support")
            support = EdgeVaryingSupport.from_shift(shift)
            row_occ = max(support.nnz / support.n_nodes, 1.0)
            a = 1.0 / np.sqrt(l.in_features * (l.order + 1) * row_occ)
            diag = rng.uniform(-a, a, size=(l.out_features, l.in_features,
                                            support.n_nodes))
            values = rng.uniform(-a, a, size=(l.out_features, l.in_features,
                                              l.order, support.nnz))
            layers.append(EdgeLayerParams(support, diag, values))
    state = ModelState(layers)
    if spec.readout.kind == "per_node_linear":
        f_last = spec.layers[-1].out_features
        c = 1.0 / np.sqrt(f_last)
        state.readout_weight = rng.uniform(-c, c, size=(f_last, spec.readout.out_dim))
        state.readout_bias = np.zeros(spec.readout.out_dim)
    return state


def apply_tap_constraints(layer: LayerSpec, taps: np.ndarray) -> None:
    """Re-impose fixed/tied tap values in place (after init or an update)."""
    if layer.family != "fir" or layer.fir_variant == "plain":
        return
    if layer.fir_variant == "gcn":
        taps[..., 0] = 0.0
    elif layer.fir_variant == "sgc":
        taps[..., :layer.order] = 0.0
    elif layer.fir_variant == "gin":
        taps[..., 0] = (1.0 + layer.gin_epsilon) * taps[..., 1]


def fold_tap_gradients(layer: LayerSpec, gtaps: np.ndarray) -> None:
    """Fold gradient contributions of fixed/tied taps onto trainable ones."""
    if layer.family != "fir" or layer.fir_variant == "plain":
        return
    if layer.fir_variant == "gcn":
        gtaps[..., 0] = 0.0
    elif layer.fir_variant == "sgc":
        gtaps[..., :layer.order] = 0.0
    elif layer.fir_variant == "gin":
        gtaps[..., 1] += (1.0 + layer.gin_epsilon) * gtaps[..., 0]
        gtaps[..., 0] = 0.0


# ---------------------------------------------------------------------------
# Batched shift application helpers.  Signals are (B, N, G).
# ---------------------------------------------------------------------------

def _shift_batched(s: ShiftOperator, arr: np.ndarray) -> np.ndarray:
    b, n, g = arr.shape
    flat = arr.transpose(1, 0, 2).reshape(n, b * g)
    out = s.apply(flat)
    return out.reshape(n, b, g).transpose(1, 0, 2)


def _shift_nd(s: ShiftOperator, arr: np.ndarray) -> np.ndarray:
    """Apply S along the last axis of an (..., N) array."""
    lead = arr.shape[:-1]
    n = arr.shape[-1]
    flat = arr.reshape(-1, n).T
    out = s.apply(flat)
    return out.T.reshape(lead + (n,))


# ---------------------------------------------------------------------------
# Layer forward/backward
# ---------------------------------------------------------------------------

@dataclass
class _FirTape:
    zs: np.ndarray  # (K+1, B, N, G) shifted inputs


@dataclass
class _ArmaTape:
    zs: np.ndarray          # direct part shifted inputs
    c: np.ndarray           # (F, G, P, N) diagonal pole scaling
    d: np.ndarray           # (N,) shift diagonal
    b0: np.ndarray          # (B, F, G, P, N) beta * c * x
    bs: np.ndarray | None   # (T, B, F, G, P, N) powers R^m b, m = 0..T-1
    rs: np.ndarray | None   # (T+1, B, F, G, P, N) powers R^m x, m = 0..T
    shift: ShiftOperator


@dataclass
class _EdgeTape:
    x: np.ndarray        # (B, N, G) layer input
    zs: list             # K+1 arrays (F, G, N, B): chain states z^(0)..z^(K)
    phi_dense: np.ndarray | None  # (K, F*G, N, N) densified step matrices


@dataclass
class Tape:
    """Recorded intermediates from one forward pass."""

    spec: ModelSpec
    state_version: int
    shift: ShiftOperator | None  # None in time-varying mode
    inputs: list                 # per-layer input (B, N, G)
    layer_tapes: list
    preacts: list                # per-layer pre-nonlinearity (B, N, F)
    outputs: list                # per-layer post-nonlinearity (B, N, F)
    readout_input: np.ndarray | None
    batch_shape: tuple


def _nonlin_forward(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(u, 0.0)
    if kind == "tanh":
        return np.tanh(u)
    return u


def _nonlin_backward(kind: str, u: np.ndarray, out: np.ndarray,
                     dout: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return dout * (u > 0.0)
    if kind == "tanh":
        return dout * (1.0 - out * out)
    return dout


def _fir_bank_contract(zs: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """sum_k zs[k] @ taps[:, :, k].T accumulated in ascending k order."""
    out = zs[0] @ taps[:, :, 0].T
    for k in range(1, taps.shape[2]):
        out += zs[k] @ taps[:, :, k].T
    return out


def _fir_forward(layer: LayerSpec, params: FirLayerParams, s: ShiftOperator,
                 x: np.ndarray, zs: np.ndarray | None = None):
    if zs is None:
        k1 = layer.order + 1
        zs = np.empty((k1,) + x.shape)
        zs[0] = x
        for k in range(1, k1):
            zs[k] = _shift_batched(s, zs[k - 1])
    u = _fir_bank_contract(zs, params.taps)
    return u, _FirTape(zs)


def _fir_backward(layer: LayerSpec, params: FirLayerParams, tape: _FirTape,
                  s: ShiftOperator | None, du: np.ndarray, need_dx: bool):
    zs = tape.zs
    gtaps = np.einsum("bnf,kbng->fgk", du, zs, optimize=True)
    fold_tap_gradients(layer, gtaps)
    dx = None
    if need_dx:
        if s is None:
            raise ModelError("input gradient through a delayed layer is not supported")
        k = layer.order
        dx = du @ params.taps[:, :, k]
        for kk in range(k - 1, -1, -1):
            dx = _shift_batched(s, dx) + du @ params.taps[:, :, kk]
    return FirLayerParams(gtaps), dx


def _arma_forward(layer: LayerSpec, params: ArmaLayerParams, s: ShiftOperator,
                  x: np.ndarray):
    # Direct polynomial part reuses the FIR path.
    k1 = layer.order + 1
    zs = np.empty((k1,) + x.shape)
    zs[0] = x
    for k in range(1, k1):
        zs[k] = _shift_batched(s, zs[k - 1])
    u = _fir_bank_contract(zs, params.alpha)

    p = layer.n_poles
    if p == 0:
        return u, _ArmaTape(zs, None, None, None, None, None, s)

    d = s.diagonal()
    denom = d[None, None, None, :] - params.gamma[..., None]  # (F,G,P,N)
    c = 1.0 / denom
    t = layer.jacobi_iters
    bdim = x.shape[0]
    # xb[b,f,g,p,n] = x[b,n,g]
    xb = np.broadcast_to(x.transpose(0, 2, 1)[:, None, :, None, :],
                         (bdim,) + c.shape)
    b0 = params.beta[None, ..., None] * c[None] * xb
    bs = np.empty((t,) + b0.shape)
    bs[0] = b0
    for m in range(1, t):
        bs[m] = _jacobi_r_apply(s, c, d, bs[m - 1])
    rs = np.empty((t + 1,) + b0.shape)
    rs[0] = xb
    for m in range(1, t + 1):
        rs[m] = _jacobi_r_apply(s, c, d, rs[m - 1])
    pole_out = bs.sum(axis=0) + rs[t]          # (B,F,G,P,N)
    u += pole_out.sum(axis=(2, 3)).transpose(0, 2, 1)
    return u, _ArmaTape(zs, c, d, b0, bs, rs, s)


def _jacobi_r_apply(s: ShiftOperator, c: np.ndarray, d: np.ndarray,
                    v: np.ndarray) -> np.ndarray:
    """R v = c * (d * v - S v) along the trailing node axis."""
    return c[None] * (d * v - _shift_nd(s, v))


def _jacobi_rt_apply(s: ShiftOperator, c: np.ndarray, d: np.ndarray,
                     v: np.ndarray) -> np.ndarray:
    """R^T v = d * (c * v) - S (c * v)."""
    cv = c[None] * v
    return d * cv - _shift_nd(s, cv)


def _arma_backward(layer: LayerSpec, params: ArmaLayerParams, tape: _ArmaTape,
                   du: np.ndarray, need_dx: bool):
    galpha = np.einsum("bnf,kbng->fgk", du, tape.zs, optimize=True)
    dx = None
    if need_dx:
        k = layer.order
        dx = du @ params.alpha[:, :, k]
        for kk in range(k - 1, -1, -1):
            dx = _shift_batched(tape.shift, dx) + du @ params.alpha[:, :, kk]

    p = layer.n_poles
    if p == 0:
        grads = ArmaLayerParams(galpha, np.zeros_like(params.beta),
                                np.zeros_like(params.gamma))
        return grads, dx

    s, c, d = tape.shift, tape.c, tape.d
    t = layer.jacobi_iters
    # delta[b,f,g,p,n] = du[b,n,f]
    delta = np.broadcast_to(du.transpose(0, 2, 1)[:, :, None, None, :],
                            tape.b0.shape)
    a_pow = np.empty((t + 1,) + tape.b0.shape)
    a_pow[0] = delta
    for j in range(1, t + 1):
        a_pow[j] = _jacobi_rt_apply(s, c, d, a_pow[j - 1])

    cx = c[None] * tape.rs[0]  # c * x
    a_head = a_pow[:t].sum(axis=0)
    gbeta = np.einsum("bfgpn,bfgpn->fgp", a_head, cx, optimize=True)

    # d/dgamma of sum_m R^m b: chain through R powers plus b's own dependence.
    ggamma = np.zeros_like(params.gamma)
    for tau in range(t):
        for j in range(tau):
            ggamma += np.einsum("bfgpn,bfgpn->fgp", a_pow[j],
                                c[None] * tape.bs[tau - j], optimize=True)
        ggamma += np.einsum("bfgpn,bfgpn->fgp", a_pow[tau],
                            c[None] * tape.bs[0], optimize=True)
    for j in range(t):
        ggamma += np.einsum("bfgpn,bfgpn->fgp", a_pow[j],
                            c[None] * tape.rs[t - j], optimize=True)

    if need_dx:
        pole_dx = params.beta[None, ..., None] * c[None] * a_head + a_pow[t]
        dx += pole_dx.sum(axis=(1, 3)).transpose(0, 2, 1)
    return ArmaLayerParams(galpha, gbeta, ggamma), dx


def _edge_densify(params: EdgeLayerParams) -> np.ndarray:
    sup = params.support
    f, g, k, _ = params.values.shape
    buf = np.zeros((k, f * g, sup.n_nodes, sup.n_nodes))
    vals = params.values.reshape(f * g, k, -1).transpose(1, 0, 2)
    buf[:, :, sup.rows, sup.cols] = vals
    return buf


def _edge_forward(layer: LayerSpec, params: EdgeLayerParams, x: np.ndarray,
                  phi_dense: np.ndarray | None = None):
    sup = params.support
    f, g = layer.out_features, layer.in_features
    bdim, n = x.shape[0], x.shape[1]
    if n != sup.n_nodes:
        raise ModelError(f"edge-varying layer is bound to {sup.n_nodes} nodes, "
                         f"signal has {n}")
    if phi_dense is None:
        phi_dense = _edge_densify(params)
    xt = x.transpose(2, 1, 0)  # (G, N, B)
    z = params.diag[..., None] * xt[None]          # (F, G, N, B)
    zs = [z]
    total = z.copy()
    zflat = z.reshape(f * g, n, bdim)
    for k in range(layer.order):
        zflat = np.matmul(phi_dense[k], zflat)
        z = zflat.reshape(f, g, n, bdim)
        zs.append(z)
        total = total + z
    u = total.sum(axis=1).transpose(2, 1, 0)       # (B, N, F)
    return u, _EdgeTape(x, zs, phi_dense)


def _edge_backward(layer: LayerSpec, params: EdgeLayerParams, tape: _EdgeTape,
                   du: np.ndarray, need_dx: bool):
    sup = params.support
    f, g = layer.out_features, layer.in_features
    bdim, n = tape.x.shape[0], tape.x.shape[1]
    k_ord = layer.order
    # delta[f,g,n,b] = du[b,n,f], shared by every chain state's direct path
    delta = np.broadcast_to(du.transpose(2, 1, 0)[:, None, :, :], (f, g, n, bdim))
    gvals = np.zeros_like(params.values)
    sens = np.array(delta, copy=True)  # sensitivity at z^(K)
    for k in range(k_ord, 0, -1):
        gvals[:, :, k - 1, :] = np.einsum(
            "fgeb,fgeb->fge",
            sens[:, :, sup.rows, :], tape.zs[k - 1][:, :, sup.cols, :],
            optimize=True)
        sens_flat = np.matmul(tape.phi_dense[k - 1].transpose(0, 2, 1),
                              sens.reshape(f * g, n, bdim))
        sens = sens_flat.reshape(f, g, n, bdim) + delta
    xt = tape.x.transpose(2, 1, 0)  # (G, N, B)
    gdiag = np.einsum("fgnb,gnb->fgn", sens, xt, optimize=True)
    dx = None
    if need_dx:
        dx = np.einsum("fgn,fgnb->bng", params.diag, sens, optimize=True)
    return EdgeLayerParams(sup, gdiag, gvals), dx


# ---------------------------------------------------------------------------
# Model forward/backward
# ---------------------------------------------------------------------------

def forward_batch(spec: ModelSpec, state: ModelState, s: ShiftOperator | None,
                  x: np.ndarray, first_layer_zs: np.ndarray | None = None):
    """Batched forward pass on a (batch, nodes, features) array."""
    return _forward_batch(spec, state, s, x, first_layer_zs=first_layer_zs)


def _forward_batch(spec: ModelSpec, state: ModelState, s: ShiftOperator | None,
                   x: np.ndarray, first_layer_zs: np.ndarray | None = None):
    inputs, layer_tapes, preacts, outputs = [], [], [], []
    cur = x
    for i, (layer, params) in enumerate(zip(spec.layers, state.layers)):
        if cur.shape[2] != layer.in_features:
            raise ModelError(f"layer {i} expects {layer.in_features} features, "
                             f"got {cur.shape[2]}")
        inputs.append(cur)
        if layer.family == "fir":
            zs = first_layer_zs if i == 0 and first_layer_zs is not None else None
            u, tape = _fir_forward(layer, params, s, cur, zs=zs)
        elif layer.family == "arma":
            u, tape = _arma_forward(layer, params, s, cur)
        else:
            u, tape = _edge_forward(layer, params, cur)
        out = _nonlin_forward(layer.nonlinearity, u)
        layer_tapes.append(tape)
        preacts.append(u)
        outputs.append(out)
        cur = out
    readout_input = None
    if spec.readout.kind == "per_node_linear":
        readout_input = cur
        cur = cur @ state.readout_weight + state.readout_bias
    tape = Tape(spec, state.version, s, inputs, layer_tapes, preacts, outputs,
                readout_input, x.shape)
    return cur, tape


def model_forward(spec: ModelSpec, state: ModelState, s: ShiftOperator,
                  x: GraphSignal):
    """Run the model on one signal; returns (output signal, tape)."""
    if spec.shift_mode != "static":
        raise ModelError("use model_forward_delayed for time-varying models")
    out, tape = _forward_batch(spec, state, s, x.values[None])
    return GraphSignal(out[0]), tape


def delayed_input_stack(shift_history: list[ShiftOperator],
                        signal_history: list[np.ndarray], order: int) -> np.ndarray:
    """Chained-shift stack for a delayed FIR layer at one time step.

    Entry k is S(t) S(t-1) ... S(t-k+1) x(t-k); missing history entries are
    zero-padded. Arrays are (N, G); the result is (K+1, 1, N, G).
    """
    n, g = signal_history[0].shape
    zs = np.zeros((order + 1, 1, n, g))
    zs[0, 0] = signal_history[0]
    for k in range(1, order + 1):
        if k >= len(signal_history) or k > len(shift_history):
            continue
        w = signal_history[k]
        for j in range(k - 1, -1, -1):
            w = shift_history[j].apply(w)
        zs[k, 0] = w
    return zs


def model_forward_delayed(spec: ModelSpec, state: ModelState,
                          shift_history: list[ShiftOperator],
                          signal_history: list[GraphSignal]):
    """Time-varying forward: the single FIR layer consumes delayed shifts."""
    if spec.shift_mode != "time_varying":
        raise ModelError("model is not in time-varying mode")
    order = spec.layers[0].order
    zs = delayed_input_stack(shift_history,
                             [sig.values for sig in signal_history], order)
    out, tape = _forward_batch(spec, state, None, zs[0], first_layer_zs=zs)
    return GraphSignal(out[0]), tape


def model_backward(tape: Tape, spec: ModelSpec, state: ModelState,
                   loss_grad: np.ndarray | GraphSignal):
    """Gradients of a scalar loss for every trainable parameter.

    ``loss_grad`` is dJ/d(output) with the output's shape (a GraphSignal or a
    batched array matching the tape). Returns a ModelState-shaped container
    of gradient arrays.
    """
    if tape.state_version != state.version:
        raise ModelError("stale tape: parameters changed since the forward pass")
    if isinstance(loss_grad, GraphSignal):
        dcur = loss_grad.values[None]
    else:
        dcur = loss_grad
        if dcur.ndim == 2:
            dcur = dcur[None]
    grad_readout_w = grad_readout_b = None
    if spec.readout.kind == "per_node_linear":
        grad_readout_w = np.einsum("bnf,bno->fo", tape.readout_input, dcur,
                                   optimize=True)
        grad_readout_b = dcur.sum(axis=(0, 1))
        dcur = dcur @ state.readout_weight.T
    layer_grads: list = [None] * len(spec.layers)
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        params = state.layers[i]
        du = _nonlin_backward(layer.nonlinearity, tape.preacts[i],
                              tape.outputs[i], dcur)
        need_dx = i > 0
        if layer.family == "fir":
            g, dcur = _fir_backward(layer, params, tape.layer_tapes[i],
                                    tape.shift, du, need_dx)
        elif layer.family == "arma":
            g, dcur = _arma_backward(layer, params, tape.layer_tapes[i], du,
                                     need_dx)
        else:
            g, dcur = _edge_backward(layer, params, tape.layer_tapes[i], du,
                                     need_dx)
        layer_grads[i] = g
    grads = ModelState(layer_grads, grad_readout_w, grad_readout_b)
    return grads


# ---------------------------------------------------------------------------
# Equivariance check
# ---------------------------------------------------------------------------

def equivariant_forward_check(spec: ModelSpec, state: ModelState,
                              s: ShiftOperator, x: GraphSignal,
                              perm: np.ndarray) -> dict:
    """Relative gap between running on relabeled inputs and relabeling the
    output. Zero (to rounding) for convolutional families; generically
    positive for edge-varying parameters, which are tied to node identities.
    """
    from .graphs import permute_shift

    perm = np.asarray(perm)
    base, _ = _forward_batch(spec, state, s, x.values[None])
    s_perm = permute_shift(s, perm)
    state_perm = _rebind_state(spec, state, s_perm)
    permuted, _ = _forward_batch(spec, state_perm, s_perm, x.values[perm][None])
    num = np.linalg.norm(permuted[0] - base[0][perm])
    den = max(np.linalg.norm(base[0]), 1e-300)
    family_equivariant = all(l.family in ("fir", "arma") for l in spec.layers)
    return {
        "relative_error": float(num / den),
        "family_expected_equivariant": family_equivariant,
    }


def _rebind_state(spec: ModelSpec, state: ModelState,
                  s_new: ShiftOperator) -> ModelState:
    """Bind the same parameter values to a new graph's support.

    Convolutional parameters transfer unchanged. Edge-varying value lists are
    reattached to the new support's sorted coordinate list positionally,
    which is what makes them node-identity bound.
    """
    layers = []
    for layer_spec, params in zip(spec.layers, state.layers):
        if isinstance(params, EdgeLayerParams):
            support = EdgeVaryingSupport.from_shift(s_new)
            if support.nnz != params.support.nnz:
                raise ModelError("support sizes differ; cannot rebind")
            layers.append(EdgeLayerParams(support, params.diag, params.values))
        else:
            layers.append(params)
    return ModelState(layers, state.readout_weight, state.readout_bias,
                      version=state.version)


# ---------------------------------------------------------------------------
# Checkpoints: JSON documents with explicit shapes
# ---------------------------------------------------------------------------

def _array_doc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _array_from_doc(doc: dict) -> np.ndarray:
    return np.array(doc["data"], dtype=float).reshape(doc["shape"])


def save_checkpoint(path, spec: ModelSpec, state: ModelState,
                    metadata: dict | None = None) -> None:
    layers_doc = []
    for layer_spec, params in zip(spec.layers, state.layers):
        doc = {
            "family": layer_spec.family,
            "in_features": layer_spec.in_features,
            "out_features": layer_spec.out_features,
            "order": layer_spec.order,
            "n_poles": layer_spec.n_poles,
            "jacobi_iters": layer_spec.jacobi_iters,
            "nonlinearity": layer_spec.nonlinearity,
            "fir_variant": layer_spec.fir_variant,
            "gin_epsilon": layer_spec.gin_epsilon,
        }
        if isinstance(params, FirLayerParams):
            doc["taps"] = _array_doc(params.taps)
        elif isinstance(params, ArmaLayerParams):
            doc["alpha"] = _array_doc(params.alpha)
            doc["beta"] = _array_doc(params.beta)
            doc["gamma"] = _array_doc(params.gamma)
        else:
            doc["support"] = {
                "n_nodes": params.support.n_nodes,
                "rows": params.support.rows.tolist(),
                "cols": params.support.cols.tolist(),
            }
            doc["diag"] = _array_doc(params.diag)
            doc["values"] = _array_doc(params.values)
        layers_doc.append(doc)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model": {
            "layers": layers_doc,
            "readout": {"kind": spec.readout.kind, "out_dim": spec.readout.out_dim},
            "shift_mode": spec.shift_mode,
        },
        "metadata": metadata or {},
    }
    if state.readout_weight is not None:
        doc["model"]["readout_weight"] = _array_doc(state.readout_weight)
        doc["model"]["readout_bias"] = _array_doc(state.readout_bias)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {doc.get('format_version')}")
    mdoc = doc["model"]
    layer_specs, layer_params = [], []
    for ldoc in mdoc["layers"]:
        spec = LayerSpec(
            family=ldoc["family"], in_features=ldoc["in_features"],
            out_features=ldoc["out_features"], order=ldoc["order"],
            n_poles=ldoc["n_poles"], jacobi_iters=ldoc["jacobi_iters"],
            nonlinearity=ldoc["nonlinearity"], fir_variant=ldoc["fir_variant"],
            gin_epsilon=ldoc["gin_epsilon"])
        layer_specs.append(spec)
        if spec.family == "fir":
            layer_params.append(FirLayerParams(_array_from_doc(ldoc["taps"])))
        elif spec.family == "arma":
            layer_params.append(ArmaLayerParams(
                _array_from_doc(ldoc["alpha"]), _array_from_doc(ldoc["beta"]),
                _array_from_doc(ldoc["gamma"])))
        else:
            sdoc = ldoc["support"]
            support = EdgeVaryingSupport(
                sdoc["n_nodes"], np.array(sdoc["rows"], dtype=int),
                np.array(sdoc["cols"], dtype=int))
            layer_params.append(EdgeLayerParams(
                support, _array_from_doc(ldoc["diag"]),
                _array_from_doc(ldoc["values"])))
    rdoc = mdoc["readout"]
    spec = ModelSpec(tuple(layer_specs),
                     ReadoutSpec(rdoc["kind"], rdoc["out_dim"]),
                     mdoc["shift_mode"])
    state = ModelState(layer_params)
    if "readout_weight" in mdoc:
        state.readout_weight = _array_from_doc(mdoc["readout_weight"])
        state.readout_bias = _array_from_doc(mdoc["readout_bias"])
    return spec, state, doc.get("metadata", {})
