"""Minimal N-dimensional tensors with taped reverse-mode differentiation.

Values are numpy arrays (float32 by default, float64 available for numerical
verification). Every forward operation validates finiteness -- NaN/Inf is an
error state, not a value. Contractions (linear, conv2d, conv1d) accumulate
taps in a fixed left-to-right order over the contracted axes so that naive
loop oracles reproduce them bit-for-bit; gradients only need finite-difference
accuracy and may use free-order numpy reductions.

The differentiation graph is taped implicitly through parent links while
``grad_enabled()`` is true and is consumed (freed) by ``backward``.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "grad_enabled",
    "detach",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_const",
    "exp",
    "log",
    "clamp_min",
    "silu",
    "gelu",
    "tanh",
    "softplus",
    "sigmoid",
    "softmax",
    "tsum",
    "tmean",
    "linear",
    "conv2d",
    "conv1d_depthwise",
    "pair_inner",
    "layer_norm",
    "strided_slice",
    "gather_rows",
    "scatter_rows",
    "reshape",
    "transpose",
    "concat",
    "narrow",
    "flip",
    "pad",
    "uniform_init",
    "save_tensor",
    "load_tensor",
]

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


@contextmanager
def no_grad():
    """Disable graph taping within the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def detach(a: "Tensor") -> "Tensor":
    """A leaf view of the same values; gradients stop here."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out._parents = ()
    out._bwd = None
    return out


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by {op}")


class Tensor:
    """An immutable N-d array node of the differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, dtype=np.float32, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self._parents = ()
        self._bwd = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"

    # Operator sugar; the module-level functions carry the semantics.
    def __add__(self, other):
        return add_const(self, other) if isinstance(other, (int, float)) else add(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return add_const(self, -other) if isinstance(other, (int, float)) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if isinstance(other, (int, float)) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
    return out


def _as_const(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=like.data.dtype)


def backward(loss: Tensor, params) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar loss for the requested parameters.

    Parameters not reachable from the loss get zero gradients. The taped
    graph is freed afterwards; a second backward through the same nodes is
    not supported.
    """
    params = list(params)
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")

    # Iterative topological order (graphs can exceed the recursion limit).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.requires_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(topo):
        if node._bwd is None:
            continue  # leaf: keep its accumulated gradient for collection
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._bwd(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
        node._parents = ()
        node._bwd = None

    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over leading axes (bias add)."""
    if a.shape != b.shape:
        if b.ndim > a.ndim or a.shape[a.ndim - b.ndim:] != b.shape:
            raise ValueError(f"add shapes {a.shape} and {b.shape} incompatible")
    lead = a.ndim - b.ndim

    def bwd(g):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return g, gb

    return _result(a.data + b.data, "add", (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub shapes {a.shape} != {b.shape}")
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shapes {a.shape} != {b.shape}")
    return _result(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"div shapes {a.shape} != {b.shape}")
    inv = 1.0 / b.data

    def bwd(g):
        return g * inv, -g * a.data * inv * inv

    return _result(a.data * inv, "div", (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result(a.data + c, "add_const", (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _result(out, "log", (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo
    return _result(np.maximum(a.data, a.data.dtype.type(lo)), "clamp_min", (a,),
                   lambda g: (g * keep,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Branch on sign to keep exp() in the underflow-safe regime.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, "sigmoid", (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(a.data * s, "silu", (a,),
                   lambda g: (g * s * (1.0 + a.data * (1.0 - s)),))


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * np.sqrt(0.5, dtype=x.dtype)))
    cdf = cdf.astype(x.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * x * x) * x.dtype.type(1.0 / np.sqrt(2.0 * np.pi))
        return (g * (cdf + x * pdf),)

    return _result(x * cdf, "gelu", (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    # log1p(exp(x)) overflows for large x; above 30 the identity is exact to f32.
    safe = np.minimum(x, x.dtype.type(30.0))
    out = np.where(x > 30.0, x, np.log1p(np.exp(safe)))
    return _result(out.astype(x.dtype), "softplus", (a,),
                   lambda g: (g * _sigmoid(x),))


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis``; rows sum to one."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return _result(p, "softmax", (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype),)

    return _result(out, "sum", (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# contractions (ordered tap accumulation; loop oracles match bit-for-bit)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Matrix product over the last axis: (..., Cin) x (Cin, Cout)."""
    cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"linear: input width {x.shape[-1]} != {cin}")
    out = np.zeros(x.shape[:-1] + (cout,), dtype=x.data.dtype)
    for i in range(cin):
        out += x.data[..., i, None] * w.data[i, :]

    def bwd(g):
        gx = np.einsum("...o,io->...i", g, w.data)
        gw = np.einsum("li,lo->io", x.data.reshape(-1, cin), g.reshape(-1, cout))
        return gx.astype(x.data.dtype), gw.astype(w.data.dtype)

    y = _result(out, "linear", (x, w), bwd)
    return y if b is None else add(y, b)


def conv2d(x: Tensor, k: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded 2D cross-correlation: (H, W, Cin) x (kh, kw, Cin, Cout).

    Taps accumulate in (kh, kw, Cin) order; the quadruple-loop oracle using
    the same order reproduces the output exactly.
    """
    kh, kw, cin, cout = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d kernel sides must be odd")
    if x.shape[2] != cin:
        raise ValueError(f"conv2d: {x.shape[2]} input channels, kernel expects {cin}")
    h, w_ = x.shape[0], x.shape[1]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((h, w_, cout), dtype=x.data.dtype)
    for di in range(kh):
        for dj in range(kw):
            for ci in range(cin):
                out += xp[di:di + h, dj:dj + w_, ci, None] * k.data[di, dj, ci, :]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[di:di + h, dj:dj + w_, :]
                gk[di, dj] = np.einsum("hwi,hwo->io", patch, g)
                gxp[di:di + h, dj:dj + w_, :] += np.einsum("hwo,io->hwi", g, k.data[di, dj])
        gx = gxp[ph:ph + h, pw:pw + w_, :]
        return gx.astype(x.data.dtype), gk.astype(k.data.dtype)

    y = _result(out, "conv2d", (x, k), bwd)
    return y if b is None else add(y, b)


def conv1d_depthwise(x: Tensor, k: Tensor, mode: str = "causal") -> Tensor:
    """Per-channel 1D convolution along the sequence axis: (N, C) x (w, C).

    ``causal`` pads only on the left so position i never sees positions > i;
    ``same`` pads symmetrically ((w-1)//2 left).
    """
    w_, c = k.shape
    if x.shape[1] != c:
        raise ValueError(f"conv1d: {x.shape[1]} channels, kernel expects {c}")
    if mode == "causal":
        pl = w_ - 1
    elif mode == "same":
        pl = (w_ - 1) // 2
    else:
        raise ValueError(f"unknown conv1d mode {mode!r}")
    pr = w_ - 1 - pl
    n = x.shape[0]
    xp = np.pad(x.data, ((pl, pr), (0, 0)))
    out = np.zeros((n, c), dtype=x.data.dtype)
    for j in range(w_):
        out += xp[j:j + n, :] * k.data[j, :]

    def bwd(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k.data)
        for j in range(w_):
            gk[j] = (xp[j:j + n, :] * g).sum(axis=0)
            gxp[j:j + n, :] += g * k.data[j, :]
        return gxp[pl:pl + n, :].astype(x.data.dtype), gk.astype(k.data.dtype)

    return _result(out, "conv1d_depthwise", (x, k), bwd)


def pair_inner(a: Tensor, b: Tensor) -> Tensor:
    """Batched inner products: (M, T, C) x (M, U, C) -> (M, T, U).

    Channel taps accumulate left-to-right, matching a scalar loop oracle.
    """
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ValueError(f"pair_inner shapes {a.shape} / {b.shape} incompatible")
    m, t, c = a.shape
    u = b.shape[1]
    out = np.zeros((m, t, u), dtype=a.data.dtype)
    for ci in range(c):
        out += a.data[:, :, ci, None] * b.data[:, None, :, ci]

    def bwd(g):
        ga = np.einsum("mtu,muc->mtc", g, b.data)
        gb = np.einsum("mtu,mtc->muc", g, a.data)
        return ga.astype(a.data.dtype), gb.astype(b.data.dtype)

    return _result(out, "pair_inner", (a, b), bwd)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ValueError("layer_norm gain/shift must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv

    def bwd(g):
        gg = g * gain.data
        gx = inv * (gg - gg.mean(axis=-1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return (gx.astype(x.data.dtype),
                (g * xhat).sum(axis=lead).astype(gain.data.dtype),
                g.sum(axis=lead).astype(shift.data.dtype))

    return _result((xhat * gain.data + shift.data).astype(x.data.dtype),
                   "layer_norm", (x, gain, shift), bwd)


# ---------------------------------------------------------------------------
# indexing / shape movement


def strided_slice(x: Tensor, start, step) -> Tensor:
    """Slice ``x[start0::step0, start1::step1, ...]`` differentiably.

    Requires 0 <= start[k] < step[k] <= shape[k] on every axis, so that
    slices with complementary offsets partition the tensor.
    """
    start = tuple(start)
    step = tuple(step)
    if len(start) != x.ndim or len(step) != x.ndim:
        raise ValueError("start/step must give one entry per axis")
    for k, (s0, st, dim) in enumerate(zip(start, step, x.shape)):
        if not (0 <= s0 < st <= dim):
            raise ValueError(
                f"axis {k}: need 0 <= start < step <= {dim}, got start={s0} step={st}")
    key = tuple(slice(s0, None, st) for s0, st in zip(start, step))
    out = x.data[key].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _result(out, "strided_slice", (x,), bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a (N, ...) tensor by integer index; scatter-add backward."""
    idx = np.asarray(idx, dtype=np.intp)
    out = x.data[idx].copy()

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result(out, "gather_rows", (x,), bwd)


def scatter_rows(x: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Place rows of ``x`` at unique positions ``idx`` of an (n_rows, ...) zero tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows requires unique destination indices")
    out = np.zeros((n_rows,) + x.shape[1:], dtype=x.data.dtype)
    out[idx] = x.data
    return _result(out, "scatter_rows", (x,), lambda g: (g[idx].copy(),))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _result(x.data.reshape(shape).copy(), "reshape", (x,),
                   lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), "transpose", (x,),
                   lambda g: (g.transpose(inv),))


def concat(parts: list[Tensor], axis: int) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _result(out, "concat", tuple(parts), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``[start, start+length)`` along one axis."""
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ValueError(f"narrow out of range on axis {axis}")
    key = tuple(slice(None) if a != axis else slice(start, start + length)
                for a in range(x.ndim))

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _result(x.data[key].copy(), "narrow", (x,), bwd)


def flip(x: Tensor, axis: int = 0) -> Tensor:
    return _result(np.flip(x.data, axis=axis).copy(), "flip", (x,),
                   lambda g: (np.flip(g, axis=axis),))


def pad(x: Tensor, pads) -> Tensor:
    """Zero-pad; ``pads`` is a per-axis list of (before, after)."""
    pads = tuple((int(a), int(b)) for a, b in pads)
    key = tuple(slice(a, a + dim) for (a, _), dim in zip(pads, x.shape))
    return _result(np.pad(x.data, pads), "pad", (x,), lambda g: (g[key],))


# ---------------------------------------------------------------------------
# initialization and binary tensor files


def uniform_init(rng: np.random.Generator, shape, fan_in: int,
                 dtype=np.float32) -> np.ndarray:
    """Conventional bounded init: uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


_MAGIC = b"JMT1"


def save_tensor(path, array) -> None:
    """Write the "JMT1" binary format: magic, u32 rank, u32 dims, f32 payload (LE)."""
    arr = array.data if isinstance(array, Tensor) else np.asarray(array)
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a JMT1 tensor file")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > 8:
        raise ValueError(f"{path}: implausible rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    payload = blob[8 + 4 * rank:]
    count = int(np.prod(dims)) if rank else 1
    if len(payload) != 4 * count:
        raise ValueError(f"{path}: payload size mismatch")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
