"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations are recorded on the innermost active :class:`Tape`.  Outside a
tape nothing is recorded, which is how inference runs.  Shapes are always
explicit: there is no implicit broadcasting, and every op checks its inputs.

Frame-axis contractions go through ``np.einsum`` and attention sums are
accumulated sequentially, so row ``t`` of any frame-wise op is bit-identical
whether it is computed inside a long sequence or on its own.  Streaming
inference depends on that.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

# Large negative sentinel standing in for -inf in attention masks.
MASK_VALUE = -1e9

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out.name = self.name
        out._parents = ()
        out._backward = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(mul_scalar(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside it are recorded in
    creation (hence topological) order.  ``backward`` may be called once;
    call :meth:`reset` to reuse the tape.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.used = False

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def reset(self) -> None:
        self.nodes = []
        self.used = False

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if self.used:
            raise RuntimeError("backward already called on this tape; reset() it first")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        self.used = True

        leaves: dict[int, Tensor] = {}
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

        def deliver(t: Tensor, g: np.ndarray) -> None:
            if t.is_leaf:
                t.grad = g.copy() if t.grad is None else t.grad + g
                leaves[id(t)] = t
            else:
                key = id(t)
                pending[key] = g if key not in pending else pending[key] + g

        if loss.is_leaf:
            deliver(loss, pending.pop(id(loss)))
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or parent is None:
                    continue
                deliver(parent, pg.astype(parent.dtype, copy=False))
        return {t: t.grad for t in leaves.values()}


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    tape = tape or active_tape()
    if tape is None:
        raise RuntimeError("no tape recorded the forward pass")
    return tape.backward(loss)


def zero_grad(params) -> None:
    for p in _iter_params(params):
        p.grad = None


def _iter_params(params):
    return params.values() if isinstance(params, dict) else params


def _make(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents frozen at record time stay frozen even if the flag flips later
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data + c, (a,), lambda g: (g,), "add_scalar")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis: ``x[..., j] + b[j]``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    axes = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.3) -> Tensor:
    slope = np.where(x.data > 0, 1.0, alpha).astype(x.dtype)
    return _make(x.data * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def log1p(x: Tensor) -> Tensor:
    if np.any(x.data <= -1):
        raise NonFiniteError("log1p: argument must be > -1")
    return _make(np.log1p(x.data), (x,), lambda g: (g / (1 + x.data),), "log1p")


def _row_softmax(z: np.ndarray) -> np.ndarray:
    # cumsum is a strictly sequential sum, so trailing zeros (masked
    # positions) never change the denominator bits.
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / np.cumsum(e, axis=-1)[..., -1:]


def softmax_last_dim(x: Tensor) -> Tensor:
    y = _row_softmax(x.data)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.array(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.full_like(x.data, g),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.array(x.data.mean(), dtype=x.dtype), (x,),
                 lambda g: (np.full_like(x.data, g / n),), "mean")


def abs_mean(x: Tensor) -> Tensor:
    """Mean absolute value (the L1 loss of a residual)."""
    n = x.size
    sign = np.sign(x.data)
    return _make(np.array(np.abs(x.data).mean(), dtype=x.dtype), (x,),
                 lambda g: (sign * (g / n),), "abs_mean")


def squared_error_mean(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("squared_error_mean", a, b)
    r = a.data - b.data
    n = r.size
    return _make(np.array((r * r).mean(), dtype=a.dtype), (a, b),
                 lambda g: (r * (2 * g / n), r * (-2 * g / n)), "squared_error_mean")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(x: Tensor, shape: tuple) -> Tensor:
    y = x.data.reshape(shape)
    return _make(y, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    y = x.data[..., start:stop].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[..., start:stop] = g
        return (full,)

    return _make(y, (x,), bw, "slice_last")


def concat_last(xs: list[Tensor]) -> Tensor:
    lead = xs[0].shape[:-1]
    for t in xs:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last: shape mismatch {xs[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in xs])
    y = np.concatenate([t.data for t in xs], axis=-1)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make(y, tuple(xs), bw, "concat_last")


def stack_last(xs: list[Tensor]) -> Tensor:
    for t in xs[1:]:
        _same_shape("stack_last", xs[0], t)
    y = np.stack([t.data for t in xs], axis=-1)
    return _make(y, tuple(xs), lambda g: tuple(g[..., i] for i in range(len(xs))), "stack_last")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    y = np.einsum("tk,kn->tn", a.data, b.data)

    def bw(g):
        return np.einsum("tn,kn->tk", g, b.data), a.data.T @ g

    return _make(y, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Frame-wise dense layer; ``w`` is (in_features, out_features)."""
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def masked_attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray) -> np.ndarray:
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    z = np.einsum("td,sd->ts", q, k) * scale + mask
    return _row_softmax(z)


def weighted_rows(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``p @ v`` accumulated one key at a time, in order."""
    out = np.zeros((p.shape[0], v.shape[1]), dtype=v.dtype)
    for s in range(p.shape[1]):
        out += p[:, s:s + 1] * v[s]
    return out


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """``softmax(mask + q k^T / sqrt(d_k)) v`` for one head.

    ``mask`` is a constant (rows x keys) array of zeros and ``MASK_VALUE``.
    """
    if q.data.ndim != 2 or k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ShapeError(f"masked_attention: shape mismatch q{q.shape} k{k.shape} v{v.shape}")
    if mask.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(f"masked_attention: mask {mask.shape} does not match "
                         f"{q.shape[0]} queries x {k.shape[0]} keys")
    p = masked_attention_weights(q.data, k.data, mask.astype(q.dtype, copy=False))
    y = weighted_rows(p, v.data)
    scale = 1.0 / np.sqrt(q.shape[1])

    def bw(g):
        gv = p.T @ g
        gp = g @ v.data.T
        gz = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        return gz @ k.data, gz.T @ q.data, gv

    return _make(y, (q, k, v), bw, "masked_attention")


# ---------------------------------------------------------------------------
# convolutions, normalisation, pooling


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Causal 1-D convolution over frames.

    ``x`` is (T, C_in), ``w`` is (C_out, C_in, K).  The input is left-padded
    with K-1 zeros so output frame t only sees input frames <= t.
    """
    if stride != 1:
        raise ValueError("conv1d_causal: only stride 1 keeps frames aligned")
    if x.data.ndim != 2 or w.data.ndim != 3 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1d_causal: shape mismatch x{x.shape} w{w.shape}")
    c_out, _, ksize = w.shape
    if ksize < 1:
        raise ValueError("conv1d_causal: kernel size must be >= 1")
    T = x.shape[0]
    xp = np.concatenate([np.zeros((ksize - 1, x.shape[1]), dtype=x.dtype), x.data])
    y = causal_conv_rows(xp, w.data, T)
    parents = (x, w)
    if b is not None:
        y = y + b.data
        parents = (x, w, b)

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for j in range(ksize):
            gxp[j:j + T] += g @ w.data[:, :, j]
            gw[:, :, j] = g.T @ xp[j:j + T]
        grads = (gxp[ksize - 1:], gw)
        return grads + (g.sum(axis=0),) if b is not None else grads

    return _make(y, parents, bw, "conv1d_causal")


def causal_conv_rows(xp: np.ndarray, w: np.ndarray, T: int) -> np.ndarray:
    """Forward kernel shared with streaming; ``xp`` already carries the left pad."""
    ksize = w.shape[2]
    y = np.einsum("tc,oc->to", xp[0:T], w[:, :, 0])
    for j in range(1, ksize):
        y = y + np.einsum("tc,oc->to", xp[j:j + T], w[:, :, j])
    return y


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded stride-1 2-D convolution (cross-correlation).

    ``x`` is (H, W, C_in), ``w`` is (C_out, C_in, kh, kw) with odd kh, kw.
    """
    if x.data.ndim != 3 or w.data.ndim != 4 or w.shape[1] != x.shape[2]:
        raise ShapeError(f"conv2d: shape mismatch x{x.shape} w{w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: even kernel size ({kh}, {kw}) not supported")
    H, W = x.shape[:2]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    parents = (x, w) if b is None else (x, w, b)
    # one matmul per kernel tap; cheaper than an im2col buffer at these channel counts
    taps = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # kh, kw, c_in, c_out
    y = np.zeros((H, W, c_out), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            y += xp[i:i + H, j:j + W] @ taps[i, j]
    if b is not None:
        y += b.data

    def backward_fn(g):
        g2 = g.reshape(-1, c_out)
        gtaps = np.empty_like(taps)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gxp is not None:
                    gxp[i:i + H, j:j + W] += g @ taps[i, j].T
                gtaps[i, j] = xp[i:i + H, j:j + W].reshape(-1, c_in).T @ g2
        gx = gxp[ph:ph + H, pw:pw + W] if gxp is not None else np.zeros_like(x.data)
        grads = (gx, gtaps.transpose(3, 2, 0, 1))
        return grads + (g2.sum(axis=0),) if b is not None else grads

    return _make(y, parents, backward_fn, "conv2d")


def layer_norm_channels(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each frame over its channels only; frames never mix."""
    if x.data.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm_channels: shape mismatch x{x.shape} "
                         f"gain{gain.shape} bias{bias.shape}")
    C = x.shape[1]
    if C < 2:
        raise ValueError("layer_norm_channels: needs at least 2 channels")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(y, (x, gain, bias), bw, "layer_norm_channels")


def global_avg_pool2d(x: Tensor) -> Tensor:
    """(H, W, C) -> (C,) channel means."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool2d expects (H, W, C), got {x.shape}")
    H, W, _ = x.shape
    y = x.data.mean(axis=(0, 1))
    return _make(y, (x,), lambda g: (np.broadcast_to(g / (H * W), x.shape).copy(),), "global_avg_pool2d")


# ---------------------------------------------------------------------------
# spectral normalisation


@dataclass
class PowerIterState:
    """Persistent left/right singular-vector estimates for one weight."""

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, shape: tuple, rng: np.random.Generator, dtype=np.float64) -> PowerIterState:
        rows = shape[0]
        cols = int(np.prod(shape[1:]))
        u = rng.standard_normal(rows)
        v = rng.standard_normal(cols)
        return cls((u / np.linalg.norm(u)).astype(dtype), (v / np.linalg.norm(v)).astype(dtype))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def power_iteration(w2d: np.ndarray, state: PowerIterState, n_iter: int = 1) -> float:
    """Refine ``state`` in place and return the top-singular-value estimate."""
    for _ in range(n_iter):
        state.v = _unit(w2d.T @ state.u)
        state.u = _unit(w2d @ state.v)
    return float(state.u @ w2d @ state.v)


def spectral_normalize(w: Tensor, state: PowerIterState, update: bool = True) -> Tensor:
    """Return ``w / sigma`` with sigma estimated by one power iteration.

    The weight is viewed as (out_features, rest).  The singular vectors are
    treated as constants in the backward pass.
    """
    w2d = w.data.reshape(w.shape[0], -1)
    if not np.any(w2d):
        log.warning("spectral_normalize: zero weight matrix, skipping normalisation")
        return _make(w.data, (w,), lambda g: (g,), "spectral_normalize")
    if update:
        sigma = power_iteration(w2d, state)
    else:
        sigma = float(state.u @ w2d @ state.v)
    sig = w.dtype.type(sigma)
    u = state.u.astype(w.dtype)
    v = state.v.astype(w.dtype)

    def bw(g):
        g2 = g.reshape(w2d.shape)
        gw = g2 / sig - (np.sum(g2 * w2d) / (sig * sig)) * np.outer(u, v)
        return (gw.reshape(w.shape),)

    return _make(w.data / sig, (w,), bw, "spectral_normalize")


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray] | None, state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` maps parameter names to gradients; ``None`` means use each
    parameter's ``.grad``.  Parameters without a gradient are left alone.
    """
    todo = []
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {name}")
        todo.append((name, p, g))
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p, g in todo:
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        upd = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= upd.astype(p.dtype, copy=False)


def grad_norm(params) -> float:
    return float(np.sqrt(np.sum([np.sum(p.grad.astype(np.float64) ** 2)
                                 for p in _iter_params(params) if p.grad is not None])))


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = grad_norm(params)
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in _iter_params(params):
            if p.grad is not None:
                p.grad = p.grad * p.dtype.type(scale)
    return total
