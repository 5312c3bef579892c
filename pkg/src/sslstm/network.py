"""Two-layer sample-wise stateful LSTM with a softmax head.

Gate rows are packed ``(f, i, c~, o)``: rows ``[0:H]`` of every gate matrix
belong to the forget gate, ``[H:2H]`` to the input gate, ``[2H:3H]`` to the
candidate cell and ``[3H:4H]`` to the output gate. The packing order is
part of the checkpoint format.

Windows are arrays shaped ``(B, L, D)``: ``B`` parallel lanes of ``L``
consecutive samples. State is carried between windows by value only;
gradients are truncated at the window boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numba
import numpy as np

from . import numcore
from .errors import ShapeError
from .numcore import Matrix, RngStream


@dataclass(frozen=True)
class NetworkDims:
    n_inputs: int
    n_hidden: int
    n_classes: int
    n_layers: int = 2

    def __post_init__(self):
        if self.n_inputs < 1 or self.n_hidden < 1 or self.n_layers < 1:
            raise ValueError(f"invalid network dims {self}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")


@dataclass
class LstmLayerParams:
    w_x: Matrix  # (4H, D_in)
    w_h: Matrix  # (4H, H)
    bias: Matrix  # (4H, 1)

    @property
    def n_hidden(self) -> int:
        return self.w_h.shape[1]

    @property
    def n_inputs(self) -> int:
        return self.w_x.shape[1]

    def check(self) -> None:
        h = self.n_hidden
        if self.w_h.shape != (4 * h, h):
            raise ShapeError(f"w_h must be (4H, H), got {self.w_h.shape}")
        if self.w_x.shape[0] != 4 * h:
            raise ShapeError(f"w_x must have 4H={4 * h} rows, got {self.w_x.shape}")
        if self.bias.shape != (4 * h, 1):
            raise ShapeError(f"bias must be (4H, 1), got {self.bias.shape}")


@dataclass
class OutputParams:
    w_hc: Matrix  # (C, H)
    bias_c: Matrix  # (C, 1)


@dataclass
class NetworkParams:
    layers: list[LstmLayerParams]
    output: OutputParams

    @property
    def dims(self) -> NetworkDims:
        return NetworkDims(
            n_inputs=self.layers[0].n_inputs,
            n_hidden=self.layers[0].n_hidden,
            n_classes=self.output.w_hc.shape[0],
            n_layers=len(self.layers),
        )

    def arrays(self) -> list[Matrix]:
        """All parameter matrices in checkpoint order."""
        out = []
        for layer in self.layers:
            out += [layer.w_x, layer.w_h, layer.bias]
        out += [self.output.w_hc, self.output.bias_c]
        return out

    @classmethod
    def from_arrays(cls, arrays: Sequence[Matrix]) -> "NetworkParams":
        arrays = list(arrays)
        if len(arrays) < 5 or (len(arrays) - 2) % 3:
            raise ShapeError(f"cannot build params from {len(arrays)} arrays")
        layers = [
            LstmLayerParams(*(np.ascontiguousarray(a, dtype=np.float64) for a in arrays[i : i + 3]))
            for i in range(0, len(arrays) - 2, 3)
        ]
        out = OutputParams(*(np.ascontiguousarray(a, dtype=np.float64) for a in arrays[-2:]))
        net = cls(layers, out)
        net.check()
        return net

    def check(self) -> None:
        h = self.layers[0].n_hidden
        for k, layer in enumerate(self.layers):
            layer.check()
            if layer.n_hidden != h:
                raise ShapeError("all layers must share the hidden size")
            if k > 0 and layer.n_inputs != h:
                raise ShapeError(f"layer {k + 1} input dim {layer.n_inputs} != H={h}")
        c = self.output.w_hc.shape[0]
        if self.output.w_hc.shape != (c, h) or self.output.bias_c.shape != (c, 1):
            raise ShapeError("output head shapes inconsistent with hidden size")

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_arrays([a.copy() for a in self.arrays()])

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams.from_arrays([np.zeros_like(a) for a in self.arrays()])

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def equals(self, other: "NetworkParams") -> bool:
        a, b = self.arrays(), other.arrays()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
        )


@dataclass
class LayerState:
    h: Matrix  # (B, H)
    c: Matrix  # (B, H)

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "LayerState":
        return cls(np.zeros((batch, hidden)), np.zeros((batch, hidden)))

    def reset(self, lanes) -> None:
        """Zero the state of the selected lanes in place."""
        self.h[lanes] = 0.0
        self.c[lanes] = 0.0


def zero_state(net: NetworkParams, batch: int) -> list[LayerState]:
    return [LayerState.zeros(batch, layer.n_hidden) for layer in net.layers]


@dataclass
class GateRecord:
    """Gate activations of one timestep, each (B, H)."""

    f: Matrix
    i: Matrix
    g: Matrix
    o: Matrix


def init_params(dims: NetworkDims, seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases except forget-gate bias 1.0."""
    rng = RngStream(seed, "init")
    h = dims.n_hidden

    def glorot(rows: int, cols: int) -> Matrix:
        limit = math.sqrt(6.0 / (rows + cols))
        return rng.uniform_array(-limit, limit, rows * cols).reshape(rows, cols)

    layers = []
    d_in = dims.n_inputs
    for _ in range(dims.n_layers):
        bias = np.zeros((4 * h, 1))
        bias[:h] = 1.0
        layers.append(LstmLayerParams(glorot(4 * h, d_in), glorot(4 * h, h), bias))
        d_in = h
    out = OutputParams(glorot(dims.n_classes, h), np.zeros((dims.n_classes, 1)))
    return NetworkParams(layers, out)


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _sigmoid(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@numba.njit(cache=True)
def _layer_forward(x, wx_t, wh_t, bias, h0, c0):
    n_lanes, n_steps, d_in = x.shape
    h4 = wx_t.shape[1]
    h = h4 // 4
    hs = np.empty((n_lanes, n_steps, h))
    cs = np.empty((n_lanes, n_steps, h))
    gates = np.empty((n_lanes, n_steps, h4))
    zx = np.empty(h4)
    zh = np.empty(h4)
    for b in range(n_lanes):
        h_prev = h0[b].copy()
        c_prev = c0[b].copy()
        for t in range(n_steps):
            zx[:] = 0.0
            for k in range(d_in):
                xk = x[b, t, k]
                for r in range(h4):
                    zx[r] += xk * wx_t[k, r]
            zh[:] = 0.0
            for k in range(h):
                hk = h_prev[k]
                for r in range(h4):
                    zh[r] += hk * wh_t[k, r]
            for j in range(h):
                f = _sigmoid(zx[j] + zh[j] + bias[j])
                i = _sigmoid(zx[h + j] + zh[h + j] + bias[h + j])
                g = math.tanh(zx[2 * h + j] + zh[2 * h + j] + bias[2 * h + j])
                o = _sigmoid(zx[3 * h + j] + zh[3 * h + j] + bias[3 * h + j])
                c = f * c_prev[j] + i * g
                gates[b, t, j] = f
                gates[b, t, h + j] = i
                gates[b, t, 2 * h + j] = g
                gates[b, t, 3 * h + j] = o
                cs[b, t, j] = c
                hs[b, t, j] = o * math.tanh(c)
            for j in range(h):
                h_prev[j] = hs[b, t, j]
                c_prev[j] = cs[b, t, j]
    return hs, cs, gates


@numba.njit(cache=True)
def _layer_backward(x, w_x, w_h, h0, c0, hs, cs, gates, dhs):
    n_lanes, n_steps, d_in = x.shape
    h4 = w_x.shape[0]
    h = h4 // 4
    dwx = np.zeros((h4, d_in))
    dwh = np.zeros((h4, h))
    db = np.zeros(h4)
    dx = np.zeros((n_lanes, n_steps, d_in))
    dz = np.empty(h4)
    dh_next = np.empty(h)
    dc_next = np.empty(h)
    for b in range(n_lanes):
        dh_next[:] = 0.0
        dc_next[:] = 0.0
        for t in range(n_steps - 1, -1, -1):
            for j in range(h):
                f = gates[b, t, j]
                i = gates[b, t, h + j]
                g = gates[b, t, 2 * h + j]
                o = gates[b, t, 3 * h + j]
                c = cs[b, t, j]
                c_prev = cs[b, t - 1, j] if t > 0 else c0[b, j]
                tc = math.tanh(c)
                dh = dhs[b, t, j] + dh_next[j]
                dc = dh * o * (1.0 - tc * tc) + dc_next[j]
                dz[j] = dc * c_prev * f * (1.0 - f)
                dz[h + j] = dc * g * i * (1.0 - i)
                dz[2 * h + j] = dc * i * (1.0 - g * g)
                dz[3 * h + j] = dh * tc * o * (1.0 - o)
                dc_next[j] = dc * f
            for r in range(h4):
                dzr = dz[r]
                db[r] += dzr
                for k in range(d_in):
                    dwx[r, k] += dzr * x[b, t, k]
                if t > 0:
                    for k in range(h):
                        dwh[r, k] += dzr * hs[b, t - 1, k]
                else:
                    for k in range(h):
                        dwh[r, k] += dzr * h0[b, k]
            for k in range(d_in):
                acc = 0.0
                for r in range(h4):
                    acc += dz[r] * w_x[r, k]
                dx[b, t, k] = acc
            for k in range(h):
                acc = 0.0
                for r in range(h4):
                    acc += dz[r] * w_h[r, k]
                dh_next[k] = acc
    return dwx, dwh, db, dx


def _run_layer(layer: LstmLayerParams, x: np.ndarray, state: LayerState):
    return _layer_forward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(layer.w_x.T),
        np.ascontiguousarray(layer.w_h.T),
        np.ascontiguousarray(layer.bias[:, 0]),
        np.ascontiguousarray(state.h),
        np.ascontiguousarray(state.c),
    )


def lstm_step(layer: LstmLayerParams, x_t: Matrix, state: LayerState) -> tuple[LayerState, GateRecord]:
    """Advance one LSTM layer by a single timestep for every lane."""
    x_t = np.asarray(x_t, dtype=np.float64)
    h = layer.n_hidden
    if x_t.ndim != 2 or x_t.shape[1] != layer.n_inputs:
        raise ShapeError(f"x_t shape {x_t.shape} does not match layer input {layer.n_inputs}")
    if state.h.shape != (x_t.shape[0], h) or state.c.shape != state.h.shape:
        raise ShapeError(f"state shape {state.h.shape} does not match ({x_t.shape[0]}, {h})")
    hs, cs, gates = _run_layer(layer, x_t[:, None, :], state)
    g = gates[:, 0]
    record = GateRecord(g[:, :h].copy(), g[:, h : 2 * h].copy(), g[:, 2 * h : 3 * h].copy(), g[:, 3 * h :].copy())
    return LayerState(hs[:, 0].copy(), cs[:, 0].copy()), record


# ---------------------------------------------------------------------------
# window forward / backward


@dataclass
class ForwardCache:
    dims: NetworkDims
    inputs: list[np.ndarray]  # per layer, (B, L, D_in) as fed to the layer
    state0: list[LayerState]
    hs: list[np.ndarray]
    cs: list[np.ndarray]
    gates: list[np.ndarray]
    keep: list[np.ndarray | None]  # per layer (B, H) inverted-dropout multipliers
    head_input: np.ndarray  # (B*L, H)
    logits: np.ndarray  # (B*L, C)
    probs: np.ndarray  # (B, L, C)
    mode: str = "infer"


def dropout_masks(rng: RngStream, n_layers: int, batch: int, hidden: int, p: float) -> list[np.ndarray]:
    """One inverted-dropout multiplier per (layer, lane, unit), shared across the window."""
    scale = 1.0 / (1.0 - p)
    return [
        np.where(rng.uniform_array(0.0, 1.0, batch * hidden) >= p, scale, 0.0).reshape(batch, hidden)
        for _ in range(n_layers)
    ]


def forward_window(
    net: NetworkParams,
    X: np.ndarray,
    state0: list[LayerState] | None = None,
    mode: str = "infer",
    dropout_p: float = 0.0,
    rng: RngStream | None = None,
    keep_masks: list[np.ndarray] | None = None,
) -> tuple[np.ndarray, list[LayerState], ForwardCache]:
    """Run a window through the network.

    Returns ``(probs, final_states, cache)`` with ``probs`` shaped (B, L, C).
    In train mode with ``dropout_p > 0`` each layer's output is multiplied by
    a per-lane mask drawn from ``rng`` (or supplied via ``keep_masks``).
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must lie in [0, 1), got {dropout_p}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    dims = net.dims
    if X.ndim != 3 or X.shape[2] != dims.n_inputs:
        raise ShapeError(f"window shape {X.shape} does not match (B, L, {dims.n_inputs})")
    n_lanes, n_steps, _ = X.shape
    if state0 is None:
        state0 = zero_state(net, n_lanes)
    if len(state0) != dims.n_layers:
        raise ShapeError(f"{len(state0)} states for {dims.n_layers} layers")
    for s in state0:
        if s.h.shape != (n_lanes, dims.n_hidden):
            raise ShapeError(f"state shape {s.h.shape} != ({n_lanes}, {dims.n_hidden})")

    keep: list[np.ndarray | None] = [None] * dims.n_layers
    if mode == "train":
        if keep_masks is not None:
            keep = list(keep_masks)
        elif dropout_p > 0.0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = dropout_masks(rng, dims.n_layers, n_lanes, dims.n_hidden, dropout_p)

    inputs, hss, css, gatess, final = [], [], [], [], []
    x = X
    for layer, s0, mask in zip(net.layers, state0, keep):
        hs, cs, gates = _run_layer(layer, x, s0)
        inputs.append(x)
        hss.append(hs)
        css.append(cs)
        gatess.append(gates)
        final.append(LayerState(hs[:, -1].copy(), cs[:, -1].copy()))
        x = hs if mask is None else hs * mask[:, None, :]

    head_input = x.reshape(n_lanes * n_steps, dims.n_hidden)
    logits = numcore.matmul(head_input, net.output.w_hc.T) + net.output.bias_c.T
    probs = numcore.softmax_rows(logits).reshape(n_lanes, n_steps, dims.n_classes)
    cache = ForwardCache(dims, inputs, state0, hss, css, gatess, keep, head_input, logits, probs, mode)
    return probs, final, cache


def _masked_targets(targets, loss_mask, shape):
    targets = np.asarray(targets)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != shape or loss_mask.shape != shape:
        raise ShapeError(f"targets {targets.shape} / mask {loss_mask.shape} must be {shape}")
    return targets.reshape(-1).astype(np.int64), loss_mask.reshape(-1)


def window_loss(cache: ForwardCache, targets, loss_mask) -> float:
    """Mean cross-entropy over unmasked (lane, step) pairs; 0 when all are masked."""
    n_lanes, n_steps, _ = cache.probs.shape
    y, m = _masked_targets(targets, loss_mask, (n_lanes, n_steps))
    n = int(m.sum())
    if n == 0:
        return 0.0
    logp = numcore.log_softmax_rows(cache.logits)
    rows = np.flatnonzero(m)
    return float(-np.sum(logp[rows, y[rows]]) / n)


def backward_window(
    net: NetworkParams, cache: ForwardCache, targets, loss_mask
) -> tuple[NetworkParams, float]:
    """Truncated BPTT through one window; returns ``(grads, mean loss)``."""
    if net.dims != cache.dims:
        raise ShapeError(f"cache built for {cache.dims}, network is {net.dims}")
    dims = cache.dims
    n_lanes, n_steps, n_classes = cache.probs.shape
    y, m = _masked_targets(targets, loss_mask, (n_lanes, n_steps))
    n = int(m.sum())
    grads = net.zeros_like()
    if n == 0:
        return grads, 0.0
    loss = window_loss(cache, targets, loss_mask)

    dlogits = cache.probs.reshape(-1, n_classes).copy()
    rows = np.flatnonzero(m)
    dlogits[rows, y[rows]] -= 1.0
    dlogits[~m] = 0.0
    dlogits /= n

    grads.output.w_hc = numcore.matmul(dlogits.T, cache.head_input)
    grads.output.bias_c = numcore.matmul(dlogits.T, np.ones((dlogits.shape[0], 1)))
    dh = numcore.matmul(dlogits, net.output.w_hc).reshape(n_lanes, n_steps, dims.n_hidden)

    for k in range(dims.n_layers - 1, -1, -1):
        if cache.keep[k] is not None:
            dh = dh * cache.keep[k][:, None, :]
        layer = net.layers[k]
        s0 = cache.state0[k]
        dwx, dwh, db, dx = _layer_backward(
            np.ascontiguousarray(cache.inputs[k]),
            np.ascontiguousarray(layer.w_x),
            np.ascontiguousarray(layer.w_h),
            np.ascontiguousarray(s0.h),
            np.ascontiguousarray(s0.c),
            cache.hs[k],
            cache.cs[k],
            cache.gates[k],
            np.ascontiguousarray(dh),
        )
        g = grads.layers[k]
        g.w_x, g.w_h, g.bias = dwx, dwh, db.reshape(-1, 1)
        dh = dx
    return grads, loss


# ---------------------------------------------------------------------------
# gradient check


def _reference_loss(arrays, X, targets, loss_mask, state0, keep) -> np.longdouble:
    """Window loss evaluated independently in extended precision."""
    ld = np.longdouble
    arrays = [np.asarray(a, dtype=ld) for a in arrays]
    n_layers = (len(arrays) - 2) // 3
    x = np.asarray(X, dtype=ld)
    n_lanes, n_steps, _ = x.shape
    for k in range(n_layers):
        w_x, w_h, bias = arrays[3 * k : 3 * k + 3]
        hid = w_h.shape[1]
        h = np.asarray(state0[k].h, dtype=ld)
        c = np.asarray(state0[k].c, dtype=ld)
        outs = []
        for t in range(n_steps):
            z = x[:, t] @ w_x.T + h @ w_h.T + bias[:, 0]
            f = 1 / (1 + np.exp(-z[:, :hid]))
            i = 1 / (1 + np.exp(-z[:, hid : 2 * hid]))
            g = np.tanh(z[:, 2 * hid : 3 * hid])
            o = 1 / (1 + np.exp(-z[:, 3 * hid :]))
            c = f * c + i * g
            h = o * np.tanh(c)
            outs.append(h)
        x = np.stack(outs, axis=1)
        if keep[k] is not None:
            x = x * np.asarray(keep[k], dtype=ld)[:, None, :]
    logits = x.reshape(n_lanes * n_steps, -1) @ arrays[-2].T + arrays[-1][:, 0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = np.asarray(targets).reshape(-1)
    m = np.asarray(loss_mask, dtype=bool).reshape(-1)
    rows = np.flatnonzero(m)
    if rows.size == 0:
        return ld(0)
    return -logp[rows, y[rows]].sum() / ld(rows.size)


def gradient_check(
    net: NetworkParams,
    X: np.ndarray,
    targets,
    mask,
    eps: float = 1e-5,
    *,
    state0: list[LayerState] | None = None,
    dropout_p: float = 0.0,
    seed: int = 0,
    grad_transform: Callable[[NetworkParams], None] | None = None,
    refine_above: float = 1e-5,
) -> float:
    """Max relative error between BPTT gradients and central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``. Central
    differences are first taken in float64; entries disagreeing by more than
    ``refine_above`` are re-differenced with the same ``eps`` through an
    extended-precision reference forward pass, which removes float64
    cancellation noise (~1e-11 absolute) on tiny gradients.

    ``grad_transform`` may mutate the analytic gradients before comparison.
    """
    net = net.copy()
    dims = net.dims
    X = np.ascontiguousarray(X, dtype=np.float64)
    n_lanes = X.shape[0]
    state0 = state0 if state0 is not None else zero_state(net, n_lanes)
    keep: list[np.ndarray | None] = [None] * dims.n_layers
    if dropout_p > 0.0:
        keep = dropout_masks(RngStream(seed, "gradcheck-dropout"), dims.n_layers, n_lanes, dims.n_hidden, dropout_p)

    _, _, cache = forward_window(net, X, state0, "train", keep_masks=keep)
    grads, _ = backward_window(net, cache, targets, mask)
    if grad_transform is not None:
        grad_transform(grads)

    def loss_from(start: int) -> float:
        # layers below `start` are untouched, reuse their cached outputs
        x = cache.inputs[start] if start < dims.n_layers else None
        for k in range(start, dims.n_layers):
            hs, _, _ = _run_layer(net.layers[k], x, state0[k])
            x = hs if keep[k] is None else hs * keep[k][:, None, :]
        if x is None:
            x = cache.head_input
        logits = numcore.matmul(x.reshape(-1, dims.n_hidden), net.output.w_hc.T) + net.output.bias_c.T
        logp = numcore.log_softmax_rows(logits)
        y = np.asarray(targets).reshape(-1)
        m = np.asarray(mask, dtype=bool).reshape(-1)
        rows = np.flatnonzero(m)
        return float(-np.sum(logp[rows, y[rows]]) / rows.size) if rows.size else 0.0

    def ref_loss() -> np.longdouble:
        return _reference_loss(net.arrays(), X, targets, mask, state0, keep)

    def rel(a: float, n: float) -> float:
        return float(abs(a - n) / max(abs(a), abs(n), 1e-8))

    worst = 0.0
    for idx, (param, grad) in enumerate(zip(net.arrays(), grads.arrays())):
        start = min(idx // 3, dims.n_layers)
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_from(start)
            flat[j] = orig - eps
            down = loss_from(start)
            numeric = (up - down) / (2.0 * eps)
            err = rel(gflat[j], numeric)
            if err > refine_above:
                flat[j] = orig + eps
                up_ld = ref_loss()
                flat[j] = orig - eps
                down_ld = ref_loss()
                # the perturbation actually applied, in extended precision
                step = np.longdouble(orig + eps) - np.longdouble(orig - eps)
                err = rel(gflat[j], float((up_ld - down_ld) / step))
            flat[j] = orig
            worst = max(worst, err)
    return worst
