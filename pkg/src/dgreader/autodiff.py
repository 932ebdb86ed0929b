"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

All values are float64, row-major. A Tape records every primitive
application in execution order (which is a topological order, since an
op's inputs always exist before the op runs); backward walks that record
once in reverse. Tape construction and backward are single-threaded per
model instance. Forward evaluation of the same graph with the same
inputs is bit-identical across runs.

Gate convention for the GRU primitives, fixed throughout the package:

    z = sigmoid(x Wz + h Uz + bz)          update gate
    r = sigmoid(x Wr + h Ur + br)          reset gate
    c = tanh(x Wc + (r * h) Uc + bc)       candidate
    h' = (1 - z) * h + z * c

Fused parameter layout: w_in is (input, 3*hidden) with column blocks
[z | r | c], w_hid is (hidden, 3*hidden) likewise, bias is (3*hidden,).
"""

from __future__ import annotations

import struct
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractViolation, DimensionError, ParseError

CHECKPOINT_MAGIC = b"DGRD"
CHECKPOINT_VERSION = 1

# Additive mask offset: exp() of anything this far below the row max
# underflows to exactly 0.0 in float64, so masked softmax entries are
# exact zeros.
MASK_OFFSET = 1e30


class Parameter:
    """A named, persistent weight array with a gradient buffer.

    trainable=False parameters keep a zero gradient after every backward
    pass and are never touched by the optimizer.
    """

    __slots__ = ("id", "data", "trainable", "grad")

    def __init__(self, pid: str, data: np.ndarray, trainable: bool = True):
        self.id = pid
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.data.shape}, trainable={self.trainable})"


class Tensor:
    """A node in the computation graph: dense float64 values plus, for op
    outputs, the references backward needs."""

    __slots__ = ("data", "grad", "tape", "op", "parents", "bwd", "needs_grad", "param")

    def __init__(self, data: np.ndarray, tape: "Tape | None" = None):
        self.data = data
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.bwd: Callable[[Tensor], None] | None = None
        self.needs_grad = False
        self.param: Parameter | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, needs_grad={self.needs_grad})"

    # Operator sugar; every tensor carries its tape, so dispatch is direct.
    def __add__(self, other):
        return self.tape.add(self, self.tape.as_tensor(other))

    def __sub__(self, other):
        return self.tape.sub(self, self.tape.as_tensor(other))

    def __mul__(self, other):
        return self.tape.mul(self, self.tape.as_tensor(other))

    def __truediv__(self, other):
        return self.tape.div(self, self.tape.as_tensor(other))

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __neg__(self):
        return self.tape.neg(self)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.needs_grad:
        return
    # Never mutate an existing grad buffer in place: buffers may be
    # aliased when an op passes its output grad straight through.
    t.grad = g if t.grad is None else t.grad + g


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # e = exp(-|x|) never overflows; sigma(x) = 1/(1+e) for x >= 0 and
    # 1 - 1/(1+e) for x < 0
    e = np.exp(-np.abs(x))
    e += 1.0
    np.reciprocal(e, out=e)
    return np.where(x >= 0, e, 1.0 - e)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.watched: dict[int, tuple[Parameter, Tensor]] = {}

    # ---- leaves ----

    def constant(self, value) -> Tensor:
        data = np.asarray(value, dtype=np.float64)
        return Tensor(data, tape=self)

    def as_tensor(self, value) -> Tensor:
        return value if isinstance(value, Tensor) else self.constant(value)

    def zeros(self, shape) -> Tensor:
        return self.constant(np.zeros(shape))

    def watch(self, param: Parameter) -> Tensor:
        """Bring a Parameter onto this tape. Repeated watches of the same
        Parameter return the same leaf, so gradients accumulate."""
        cached = self.watched.get(id(param))
        if cached is not None:
            return cached[1]
        leaf = Tensor(param.data, tape=self)
        leaf.needs_grad = param.trainable
        leaf.param = param
        self.watched[id(param)] = (param, leaf)
        return leaf

    def _node(self, data, parents: tuple[Tensor, ...], bwd, op: str) -> Tensor:
        t = Tensor(data, tape=self)
        t.op = op
        t.parents = parents
        t.bwd = bwd
        t.needs_grad = any(p.needs_grad for p in parents)
        self.nodes.append(t)
        return t

    # ---- elementwise ----

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, _unbroadcast(out.grad, a.data.shape))
            _acc(b, _unbroadcast(out.grad, b.data.shape))

        return self._node(a.data + b.data, (a, b), bwd, "add")

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, _unbroadcast(out.grad, a.data.shape))
            _acc(b, _unbroadcast(-out.grad, b.data.shape))

        return self._node(a.data - b.data, (a, b), bwd, "sub")

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, _unbroadcast(out.grad * b.data, a.data.shape))
            _acc(b, _unbroadcast(out.grad * a.data, b.data.shape))

        return self._node(a.data * b.data, (a, b), bwd, "mul")

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, _unbroadcast(out.grad / b.data, a.data.shape))
            _acc(b, _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

        return self._node(a.data / b.data, (a, b), bwd, "div")

    def neg(self, a: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, -out.grad)

        return self._node(-a.data, (a,), bwd, "neg")

    def sigmoid(self, a: Tensor) -> Tensor:
        y = _stable_sigmoid(a.data)

        def bwd(out):
            _acc(a, out.grad * y * (1.0 - y))

        return self._node(y, (a,), bwd, "sigmoid")

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)

        def bwd(out):
            _acc(a, out.grad * (1.0 - y * y))

        return self._node(y, (a,), bwd, "tanh")

    def log(self, a: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, out.grad / a.data)

        return self._node(np.log(a.data), (a,), bwd, "log")

    # ---- linear algebra / structure ----

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError(
                f"matmul requires rank >= 2 operands, got {a.data.shape} and {b.data.shape}"
            )
        if a.data.shape[-1] != b.data.shape[-2]:
            raise DimensionError(
                f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
            )

        def bwd(out):
            if a.needs_grad:
                ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
                _acc(a, _unbroadcast(ga, a.data.shape))
            if b.needs_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
                _acc(b, _unbroadcast(gb, b.data.shape))

        return self._node(np.matmul(a.data, b.data), (a, b), bwd, "matmul")

    def concat_last(self, parts: Sequence[Tensor]) -> Tensor:
        parts = tuple(parts)
        widths = [p.data.shape[-1] for p in parts]

        def bwd(out):
            lo = 0
            for p, w in zip(parts, widths):
                _acc(p, out.grad[..., lo : lo + w])
                lo += w

        return self._node(np.concatenate([p.data for p in parts], axis=-1), parts, bwd, "concat_last")

    def slice_last(self, a: Tensor, lo: int, hi: int) -> Tensor:
        def bwd(out):
            if a.needs_grad:
                buf = np.zeros_like(a.data)
                buf[..., lo:hi] = out.grad
                _acc(a, buf)

        return self._node(a.data[..., lo:hi], (a,), bwd, "slice_last")

    def reshape(self, a: Tensor, shape) -> Tensor:
        def bwd(out):
            _acc(a, out.grad.reshape(a.data.shape))

        return self._node(a.data.reshape(shape), (a,), bwd, "reshape")

    def transpose_last2(self, a: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, np.swapaxes(out.grad, -1, -2))

        return self._node(np.swapaxes(a.data, -1, -2), (a,), bwd, "transpose_last2")

    def flip(self, a: Tensor, axis: int) -> Tensor:
        def bwd(out):
            _acc(a, np.flip(out.grad, axis=axis))

        return self._node(np.flip(a.data, axis=axis), (a,), bwd, "flip")

    def index_time(self, a: Tensor, t: int) -> Tensor:
        """Select step t along axis 1: (B, T, ...) -> (B, ...)."""

        def bwd(out):
            if a.needs_grad:
                buf = np.zeros_like(a.data)
                buf[:, t] = out.grad
                _acc(a, buf)

        return self._node(np.ascontiguousarray(a.data[:, t]), (a,), bwd, "index_time")

    def take_time(self, a: Tensor, idx: np.ndarray) -> Tensor:
        """Per-row step selection along axis 1: out[b] = a[b, idx[b]]."""
        idx = np.asarray(idx, dtype=np.int64)
        batch = a.data.shape[0]
        if idx.shape != (batch,):
            raise DimensionError(f"take_time index shape {idx.shape} does not match batch {batch}")
        if idx.min() < 0 or idx.max() >= a.data.shape[1]:
            raise ContractViolation(
                f"take_time index out of range [0, {a.data.shape[1]}): {idx}"
            )
        rows = np.arange(batch)

        def bwd(out):
            if a.needs_grad:
                buf = np.zeros_like(a.data)
                buf[rows, idx] = out.grad
                _acc(a, buf)

        return self._node(np.ascontiguousarray(a.data[rows, idx]), (a,), bwd, "take_time")

    # ---- reductions ----

    def sum_all(self, a: Tensor) -> Tensor:
        def bwd(out):
            _acc(a, np.broadcast_to(out.grad, a.data.shape))

        return self._node(a.data.sum(), (a,), bwd, "sum_all")

    def mean_all(self, a: Tensor) -> Tensor:
        size = a.data.size

        def bwd(out):
            _acc(a, np.broadcast_to(out.grad / size, a.data.shape))

        return self._node(a.data.mean(), (a,), bwd, "mean_all")

    def sum_last(self, a: Tensor, keepdims: bool = True) -> Tensor:
        def bwd(out):
            g = out.grad if keepdims else np.expand_dims(out.grad, -1)
            _acc(a, np.broadcast_to(g, a.data.shape))

        return self._node(a.data.sum(axis=-1, keepdims=keepdims), (a,), bwd, "sum_last")

    # ---- attention / regularization ----

    def masked_softmax(self, a: Tensor, mask: np.ndarray) -> Tensor:
        """Softmax over the last axis with a 0/1 mask (broadcastable to a).

        Masked positions get an additive -MASK_OFFSET before
        normalization and come out exactly zero; each output row sums to
        one over the surviving positions. A row with no unmasked entry
        is a contract violation.
        """
        mask = np.asarray(mask, dtype=np.float64)
        bm = np.broadcast_to(mask, a.data.shape)
        if not bm.any(axis=-1).all():
            raise ContractViolation("masked_softmax: a row has no unmasked positions")
        shifted = a.data + (bm - 1.0) * MASK_OFFSET
        shifted = shifted - shifted.max(axis=-1, keepdims=True)
        y = np.exp(shifted) * bm
        y = y / y.sum(axis=-1, keepdims=True)

        def bwd(out):
            if a.needs_grad:
                inner = (out.grad * y).sum(axis=-1, keepdims=True)
                _acc(a, y * (out.grad - inner))

        return self._node(y, (a,), bwd, "masked_softmax")

    def gather_rows(self, table: Tensor, ids: np.ndarray) -> Tensor:
        """Embedding lookup: out[..., :] = table[ids[...], :]."""
        ids = np.asarray(ids, dtype=np.int64)
        vocab = table.data.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= vocab):
            raise ContractViolation(
                f"gather_rows id out of range [0, {vocab}): min={ids.min()}, max={ids.max()}"
            )
        width = table.data.shape[1]

        def bwd(out):
            if table.needs_grad:
                buf = np.zeros_like(table.data)
                np.add.at(buf, ids.reshape(-1), out.grad.reshape(-1, width))
                _acc(table, buf)

        return self._node(table.data[ids], (table,), bwd, "gather_rows")

    def dropout(self, a: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
        """Inverted dropout. In eval mode (train=False) this is exactly the
        identity: the input tensor is returned unchanged."""
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        if not train or rate == 0.0:
            return a
        if rng is None:
            raise ConfigError("dropout in training mode requires an explicit generator")
        keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)

        def bwd(out):
            _acc(a, out.grad * keep)

        return self._node(a.data * keep, (a,), bwd, "dropout")


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse pass over the tape, visiting each node exactly once.

    Fills Parameter.grad for every watched parameter: d loss / d param
    for trainable ones, zeros for frozen ones and for parameters the
    loss does not depend on. Returns {parameter id: gradient}.
    """
    if loss.tape is not tape:
        raise ContractViolation("loss tensor does not belong to the given tape")
    if loss.data.size != 1:
        raise ContractViolation(f"backward requires a scalar loss, got shape {loss.data.shape}")
    for node in tape.nodes:
        node.grad = None
    for _, leaf in tape.watched.values():
        leaf.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.bwd is not None and node.grad is not None and node.needs_grad:
            node.bwd(node)
    grads: dict[str, np.ndarray] = {}
    for param, leaf in tape.watched.values():
        if param.trainable and leaf.grad is not None:
            param.grad = np.array(leaf.grad)
        else:
            param.grad = np.zeros_like(param.data)
        grads[param.id] = param.grad
    return grads


# ---------------------------------------------------------------------------
# GRU primitives
# ---------------------------------------------------------------------------


class GRUParams:
    """Fused weights for one GRU direction; see the module docstring for
    the gate layout."""

    __slots__ = ("w_in", "w_hid", "bias", "hidden")

    def __init__(self, w_in: Parameter, w_hid: Parameter, bias: Parameter):
        self.w_in = w_in
        self.w_hid = w_hid
        self.bias = bias
        self.hidden = w_hid.data.shape[0]
        if w_in.data.shape[1] != 3 * self.hidden or w_hid.data.shape[1] != 3 * self.hidden:
            raise DimensionError(
                f"GRU weights disagree: w_in {w_in.data.shape}, w_hid {w_hid.data.shape}"
            )

    @property
    def input_size(self) -> int:
        return self.w_in.data.shape[0]

    def parameters(self) -> list[Parameter]:
        return [self.w_in, self.w_hid, self.bias]

    @staticmethod
    def create(rng: np.random.Generator, pid: str, input_size: int, hidden: int) -> "GRUParams":
        w_in = Parameter(f"{pid}.w_in", glorot(rng, input_size, 3 * hidden))
        w_hid = Parameter(f"{pid}.w_hid", glorot(rng, hidden, 3 * hidden))
        bias = Parameter(f"{pid}.bias", np.zeros(3 * hidden))
        return GRUParams(w_in, w_hid, bias)


class BiGRUParams:
    __slots__ = ("fwd", "bwd")

    def __init__(self, fwd: GRUParams, bwd: GRUParams):
        self.fwd = fwd
        self.bwd = bwd

    @property
    def hidden(self) -> int:
        return self.fwd.hidden

    def parameters(self) -> list[Parameter]:
        return self.fwd.parameters() + self.bwd.parameters()

    @staticmethod
    def create(rng: np.random.Generator, pid: str, input_size: int, hidden: int) -> "BiGRUParams":
        return BiGRUParams(
            GRUParams.create(rng, f"{pid}.fwd", input_size, hidden),
            GRUParams.create(rng, f"{pid}.bwd", input_size, hidden),
        )


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def gru_cell(x: Tensor, h: Tensor, params: GRUParams) -> Tensor:
    """One GRU step composed from primitive ops. Accepts (in,) / (h,) or
    batched (B, in) / (B, h) operands."""
    tape = x.tape
    n = params.hidden
    squeeze = x.ndim == 1
    if squeeze:
        x = tape.reshape(x, (1, x.data.shape[0]))
        h = tape.reshape(h, (1, h.data.shape[0]))
    if x.data.shape[-1] != params.input_size:
        raise DimensionError(
            f"gru_cell input width {x.data.shape} does not match weights "
            f"{params.w_in.data.shape}"
        )
    if h.data.shape[-1] != n:
        raise DimensionError(
            f"gru_cell state width {h.data.shape} does not match hidden size {n}"
        )
    w_in = tape.watch(params.w_in)
    w_hid = tape.watch(params.w_hid)
    bias = tape.watch(params.bias)
    gx = tape.add(tape.matmul(x, w_in), bias)
    zr = tape.sigmoid(
        tape.add(tape.slice_last(gx, 0, 2 * n), tape.matmul(h, tape.slice_last(w_hid, 0, 2 * n)))
    )
    z = tape.slice_last(zr, 0, n)
    r = tape.slice_last(zr, n, 2 * n)
    cand = tape.tanh(
        tape.add(
            tape.slice_last(gx, 2 * n, 3 * n),
            tape.matmul(tape.mul(r, h), tape.slice_last(w_hid, 2 * n, 3 * n)),
        )
    )
    one = tape.constant(1.0)
    out = tape.add(tape.mul(tape.sub(one, z), h), tape.mul(z, cand))
    if squeeze:
        out = tape.reshape(out, (n,))
    return out


def gru_scan(
    x: Tensor,
    h0: Tensor | None,
    params: GRUParams,
    mask: np.ndarray | None = None,
) -> Tensor:
    """Run a GRU over axis 1 of x (B, T, in) -> states (B, T, hidden).

    Recorded as a single fused tape node with hand-written backward;
    per-step activations are saved for the reverse sweep. mask (B, T)
    freezes the state through padded steps: a masked step carries
    h[t] = h[t-1], so states at and past the last real token all equal
    the state at that token, and padded inputs receive zero gradient.
    """
    tape = x.tape
    if x.ndim != 3:
        raise DimensionError(f"gru_scan expects (B, T, in), got {x.data.shape}")
    batch, steps, width = x.data.shape
    if steps < 1:
        raise ContractViolation("gru_scan requires at least one step")
    if width != params.input_size:
        raise DimensionError(
            f"gru_scan input width {x.data.shape} does not match weights "
            f"{params.w_in.data.shape}"
        )
    n = params.hidden
    if h0 is None:
        h0 = tape.zeros((batch, n))
    if h0.data.shape != (batch, n):
        raise DimensionError(f"gru_scan h0 shape {h0.data.shape}, expected {(batch, n)}")
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (batch, steps):
            raise DimensionError(f"gru_scan mask shape {mask.shape}, expected {(batch, steps)}")

    w_in = tape.watch(params.w_in)
    w_hid = tape.watch(params.w_hid)
    bias = tape.watch(params.bias)

    xp = (x.data.reshape(batch * steps, width) @ w_in.data + bias.data).reshape(batch, steps, 3 * n)
    u_zr = w_hid.data[:, : 2 * n]
    u_c = w_hid.data[:, 2 * n :]

    states = np.empty((steps, batch, n))
    zs = np.empty((steps, batch, n))
    rs = np.empty((steps, batch, n))
    cs = np.empty((steps, batch, n))
    h = h0.data
    for t in range(steps):
        xpt = xp[:, t]
        zr = _stable_sigmoid(xpt[:, : 2 * n] + h @ u_zr)
        z = zr[:, :n]
        r = zr[:, n:]
        c = np.tanh(xpt[:, 2 * n :] + (r * h) @ u_c)
        h_new = h + z * (c - h)
        if mask is not None:
            m = mask[:, t : t + 1]
            h_new = h + m * (h_new - h)
        states[t] = h_new
        zs[t], rs[t], cs[t] = z, r, c
        h = h_new

    out_data = np.ascontiguousarray(states.transpose(1, 0, 2))

    def bwd(out):
        g = out.grad.transpose(1, 0, 2)  # (T, B, n)
        d_xp = np.empty((steps, batch, 3 * n))
        d_whid = np.zeros_like(w_hid.data)
        track_whid = w_hid.needs_grad
        dh = np.zeros((batch, n))
        for t in range(steps - 1, -1, -1):
            h_prev = states[t - 1] if t > 0 else h0.data
            z, r, c = zs[t], rs[t], cs[t]
            dht = g[t] + dh
            if mask is not None:
                m = mask[:, t : t + 1]
                d_new = m * dht
                dh_prev = (1.0 - m) * dht
            else:
                d_new = dht
                dh_prev = np.zeros((batch, n))
            dz = d_new * (c - h_prev)
            dc = d_new * z
            dh_prev = dh_prev + d_new * (1.0 - z)
            dac = dc * (1.0 - c * c)
            d_xp[t, :, 2 * n :] = dac
            drh = dac @ u_c.T
            if track_whid:
                d_whid[:, 2 * n :] += (r * h_prev).T @ dac
            dr = drh * h_prev
            dh_prev = dh_prev + drh * r
            dazr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
            d_xp[t, :, : 2 * n] = dazr
            if track_whid:
                d_whid[:, : 2 * n] += h_prev.T @ dazr
            dh_prev = dh_prev + dazr @ u_zr.T
            dh = dh_prev
        d_xp_flat = np.ascontiguousarray(d_xp.transpose(1, 0, 2)).reshape(batch * steps, 3 * n)
        if w_in.needs_grad:
            _acc(w_in, x.data.reshape(batch * steps, width).T @ d_xp_flat)
        if bias.needs_grad:
            _acc(bias, d_xp_flat.sum(axis=0))
        if track_whid:
            _acc(w_hid, d_whid)
        if x.needs_grad:
            _acc(x, (d_xp_flat @ w_in.data.T).reshape(batch, steps, width))
        _acc(h0, dh)

    return tape._node(out_data, (x, h0, w_in, w_hid, bias), bwd, "gru_scan")


def bigru(
    sequence: Tensor,
    h0_fwd: Tensor | None,
    h0_bwd: Tensor | None,
    params: BiGRUParams,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Bidirectional GRU over a (B, T, in) or single (T, in) sequence.

    Returns per-step outputs (forward and backward halves concatenated,
    width 2*hidden) and the pair of final directional states. The
    backward direction reads the flipped sequence, so with a padded
    batch its final state is the state after the first real token.
    """
    tape = sequence.tape
    squeeze = sequence.ndim == 2
    if squeeze:
        steps, width = sequence.data.shape
        sequence = tape.reshape(sequence, (1, steps, width))
        if h0_fwd is not None:
            h0_fwd = tape.reshape(h0_fwd, (1, h0_fwd.data.shape[-1]))
        if h0_bwd is not None:
            h0_bwd = tape.reshape(h0_bwd, (1, h0_bwd.data.shape[-1]))
        if mask is not None:
            mask = np.asarray(mask, dtype=np.float64).reshape(1, steps)
    steps = sequence.data.shape[1]

    out_f = gru_scan(sequence, h0_fwd, params.fwd, mask)
    final_f = tape.index_time(out_f, steps - 1)

    rev = tape.flip(sequence, axis=1)
    rev_mask = np.ascontiguousarray(np.flip(mask, axis=1)) if mask is not None else None
    out_b_rev = gru_scan(rev, h0_bwd, params.bwd, rev_mask)
    final_b = tape.index_time(out_b_rev, steps - 1)
    out_b = tape.flip(out_b_rev, axis=1)

    outputs = tape.concat_last([out_f, out_b])
    if squeeze:
        outputs = tape.reshape(outputs, (steps, 2 * params.hidden))
        final_f = tape.reshape(final_f, (params.hidden,))
        final_b = tape.reshape(final_b, (params.hidden,))
    return outputs, (final_f, final_b)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: Iterable[Parameter], path) -> None:
    """Write parameters as a flat binary archive.

    Layout: magic, format version, entry count; then per entry a
    length-prefixed UTF-8 id, the rank, the dimensions (int64 LE) and
    the raw float64 LE values. Round-trips bit-exactly.
    """
    entries = list(params)
    seen: set[str] = set()
    for p in entries:
        if p.id in seen:
            raise ContractViolation(f"duplicate parameter id in checkpoint: {p.id!r}")
        seen.add(p.id)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(entries)))
        for p in entries:
            name = p.id.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(np.asarray(p.data.shape, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read an archive written by save_checkpoint: {parameter id: array}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint format version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = tuple(np.frombuffer(blob, dtype="<i8", count=ndim, offset=off))
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = np.array(data)
    if off != len(blob):
        raise ParseError(f"{path}: {len(blob) - off} trailing bytes after last entry")
    return out


def restore_parameters(params: Iterable[Parameter], loaded: dict[str, np.ndarray]) -> None:
    """Copy loaded arrays into matching parameters by id.

    A parameter missing from the archive or a shape mismatch is a
    contract violation; extra archive entries only warn.
    """
    entries = list(params)
    for p in entries:
        if p.id not in loaded:
            raise ContractViolation(f"checkpoint is missing parameter {p.id!r}")
        arr = loaded[p.id]
        if arr.shape != p.data.shape:
            raise ContractViolation(
                f"checkpoint shape mismatch for {p.id!r}: {arr.shape} vs {p.data.shape}"
            )
        p.data[...] = arr
    extra = set(loaded) - {p.id for p in entries}
    if extra:
        warnings.warn(f"checkpoint has {len(extra)} unused entries: {sorted(extra)[:5]}...")
