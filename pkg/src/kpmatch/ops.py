"""Forward operations with hand-written vector-Jacobian products.

Every function takes and returns :class:`~kpmatch.tensor.Tensor` objects.
When any input is attached to a tape the result is recorded there.  There is
no broadcasting: binary elementwise ops need equal shapes, and scalars enter
only through :func:`scale` and :func:`add_scalar`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BatchSizeError, DimensionError, NonFiniteError, ParameterError, StateError
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_SOFTMAX_CUTOFF = -600.0


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise StateError(f"{op}: inputs are recorded on different tapes")
    out = Tensor(data, tape)
    if tape is not None:
        tape.record(op, inputs, out, vjp)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return _emit("mul", x * y, (a, b), lambda g: (g * y, g * x))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2.0 * x * g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # relu'(0) = 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", a.data + float(c), (a,), lambda g: (g,))


def elementwise(op: str, *args):
    """Dispatch by name: ``add``, ``sub``, ``mul``, ``square``, ``relu``, ``scale``."""
    table = {"add": add, "sub": sub, "mul": mul, "square": square, "relu": relu, "scale": scale}
    if op not in table:
        raise ParameterError(f"unknown elementwise op {op!r}")
    return table[op](*args)


# ----------------------------------------------------------------------------
# structural

def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    return _emit("concat", data, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def narrow(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start:stop]`` along one axis."""
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("narrow", a.data[index], (a,), vjp)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), vjp)


# ----------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, or batched over a shared leading axis for 3-D."""
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise DimensionError(f"matmul: need two 2-D or two 3-D tensors, got {a.shape}, {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(y, -1, -2), np.swapaxes(x, -1, -2) @ g

    return _emit("matmul", x @ y, (a, b), vjp)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``C_in×H×W`` (or batched ``N×C_in×H×W``) input."""
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d: bad ranks input {x.shape}, weights {w.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d: weights {w.shape} incompatible with input channels {c}")
    if stride < 1 or pad < 0:
        raise ParameterError("conv2d: stride must be >= 1 and pad >= 0")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: non-positive output extent {ho}x{wo}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
    wm = w.data.reshape(o, ci * k * k)

    if k == 1 and stride == 1 and pad == 0:
        flat = xd.reshape(n, c, h * wd)
        out = np.matmul(wm, flat)
        if bias is not None:
            out = out + bias.data[None, :, None]

        def vjp(g):
            g3 = g.reshape(n, o, h * wd)
            gx = np.matmul(wm.T, g3).reshape(n, c, h, wd)
            gw = np.matmul(g3, flat.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
            grads = [gx if batched else gx[0], gw]
            if bias is not None:
                grads.append(g3.sum(axis=(0, 2)))
            return grads

        out = out.reshape(n, o, h, wd)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        out = cols @ wm.T
        if bias is not None:
            out = out + bias.data
        out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
        padded_shape = xp.shape

        def vjp(g):
            g = g if batched else g[None]
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
            gw = (g2.T @ cols).reshape(w.shape)
            gcols = (g2 @ wm).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(padded_shape)
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += (
                        gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            grads = [gx if batched else gx[0], gw]
            if bias is not None:
                grads.append(g2.sum(axis=0))
            return grads

    out = np.ascontiguousarray(out if batched else out[0])
    inputs = (x, w) if bias is None else (x, w, bias)
    return _emit("conv2d", out, inputs, vjp)


# ----------------------------------------------------------------------------
# normalisation and pooling

def _axes(axis, ndim):
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


def softmax_scaled(z: Tensor, axis=-1, tau: float = 1.0) -> Tensor:
    """Softmax of ``z / tau`` within groups spanning ``axis`` (int or tuple)."""
    if not tau > 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    axes = _axes(axis, z.ndim)
    s = z.data / tau
    s -= s.max(axis=axes, keepdims=True)
    # exp(-600) ~ 1e-261: anything smaller is flushed to an exact zero so that
    # later products never produce (very slow) subnormal numbers
    tiny = s < _SOFTMAX_CUTOFF
    np.exp(s, out=s)
    s[tiny] = 0.0
    s /= s.sum(axis=axes, keepdims=True)
    p = s

    def vjp(g):
        gp = g * p
        gp -= p * gp.sum(axis=axes, keepdims=True)
        gp /= tau
        return (gp,)

    return _emit("softmax_scaled", p, (z,), vjp)


def global_average_pool(t: Tensor) -> Tensor:
    """Per-channel spatial mean: ``C×H×W -> C`` or ``N×C×H×W -> N×C``."""
    if t.ndim not in (3, 4) or t.shape[-1] * t.shape[-2] < 1:
        raise DimensionError(f"global_average_pool: bad shape {t.shape}")
    shape = t.shape
    m = shape[-1] * shape[-2]

    def vjp(g):
        return (np.broadcast_to(g[..., None, None] / m, shape).copy(),)

    return _emit("global_average_pool", t.data.mean(axis=(-2, -1)), (t,), vjp)


def _upsample_matrix(n: int) -> np.ndarray:
    # half-pixel centres: output o samples input coordinate (o + 0.5) / 2 - 0.5
    u = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = min(max((o + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        u[o, i0] += 1.0 - frac
        u[o, i1] += frac
    return u


def bilinear_upsample_x2(t: Tensor) -> Tensor:
    if t.ndim not in (3, 4) or min(t.shape[-2:]) < 1:
        raise DimensionError(f"bilinear_upsample_x2: bad shape {t.shape}")
    uh = _upsample_matrix(t.shape[-2])
    uw = _upsample_matrix(t.shape[-1])
    out = uh @ t.data @ uw.T
    return _emit("bilinear_upsample_x2", out, (t,), lambda g: (uh.T @ g @ uw,))


def batch_norm(
    t: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Batch normalisation over ``N×F`` rows or ``N×C×H×W`` maps.

    In train mode the running statistics arrays are updated in place.
    """
    if t.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif t.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise DimensionError(f"batch_norm: expected 2-D or 4-D input, got {t.shape}")
    f = t.shape[1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise DimensionError(f"batch_norm: gamma/beta must have shape ({f},)")
    x = t.data
    count = x.size // f
    gam = gamma.data.reshape(bshape)

    if train:
        if t.shape[0] < 2:
            raise BatchSizeError("batch_norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean = np.array(running_mean, dtype=np.float64)
        var = np.array(running_var, dtype=np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = (x - mean.reshape(bshape)) * inv_std
    out = gam * xhat + beta.data.reshape(bshape)

    def vjp(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gam
        if train:
            gx = inv_std / count * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv_std
        return gx, gg, gb

    return _emit("batch_norm", out, (t, gamma, beta), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer: ``x @ weight.T + bias`` for ``N×F`` input."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("linear", out, inputs, vjp)


def binary_cross_entropy(logits: Tensor, labels: np.ndarray, clamp: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy of logistic(logits) against 0/1 labels.

    Probabilities are clamped to ``[clamp, 1 - clamp]`` in the value; the
    gradient is the unclamped ``(p - y) / N``.
    """
    y = np.asarray(labels, dtype=np.float64)
    if logits.ndim != 1 or y.shape != logits.shape:
        raise DimensionError(f"binary_cross_entropy: logits {logits.shape} vs labels {y.shape}")
    if logits.size == 0:
        raise BatchSizeError("binary_cross_entropy needs at least one pair")
    z = logits.data
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    pc = np.clip(p, clamp, 1.0 - clamp)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    n = z.size

    def vjp(g):
        return (g * (p - y) / n,)

    return _emit("binary_cross_entropy", np.array(loss), (logits,), vjp)
