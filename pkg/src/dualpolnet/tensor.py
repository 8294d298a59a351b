"""Dense-tensor numerics with tape-based reverse-mode differentiation.

Tensors wrap contiguous numpy arrays (float32 working precision, float64
available for verification). Operations executed while a Tape is active
record a backward rule; ``backward(loss, tape)`` replays the tape in
reverse to accumulate gradients on every ``requires_grad`` leaf.

Layer primitives cover exactly what the classifier needs: conv2d
(stride/padding/dilation), max pooling, batch norm, linear, channel
concat, softmax, cross entropy, and bilinear resizing for preprocessing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

# ---------------------------------------------------------------------------
# precision control
# ---------------------------------------------------------------------------

_DEFAULT_DTYPE = np.float32

_DTYPE_NAMES = {"f32": np.float32, "f64": np.float64}


def set_default_dtype(dtype) -> None:
    """Set the working precision for newly created tensors ("f32"/"f64")."""
    global _DEFAULT_DTYPE
    if isinstance(dtype, str):
        if dtype not in _DTYPE_NAMES:
            raise ValueError(f"unknown precision {dtype!r}, expected 'f32' or 'f64'")
        dtype = _DTYPE_NAMES[dtype]
    if dtype not in (np.float32, np.float64):
        raise ValueError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager that temporarily switches the working precision."""

    def __init__(self, dtype):
        self._dtype = dtype
        self._saved = None

    def __enter__(self):
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        set_default_dtype(self._saved)
        return False


# ---------------------------------------------------------------------------
# tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense numeric array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=dtype or _DEFAULT_DTYPE))
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


@dataclass
class TapeEntry:
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of executed operations.

    Entries are appended at execution time, so the list is topologically
    ordered by construction: an entry's inputs are either leaves or the
    outputs of earlier entries. Usable as a context manager to activate
    recording.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def record(self, inputs: tuple, output: Tensor, backward: Callable) -> None:
        self.entries.append(TapeEntry(inputs, output, backward))

    def __len__(self) -> int:
        return len(self.entries)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()
        return False


_ACTIVE_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _emit(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    """Wrap an op result, recording it when a tape is active."""
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    if track:
        tape.record(inputs, out, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    Replays the tape once, in reverse order. Leaves that appear on the
    tape but receive no gradient flow get an (accumulated) zero gradient.
    Gradients add up across calls until an explicit ``zero_grad``.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    produced = {id(e.output) for e in tape.entries}
    flows: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = flows.pop(id(entry.output), None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None:
                continue
            if not inp.requires_grad and id(inp) not in produced:
                continue
            key = id(inp)
            held = flows.get(key)
            flows[key] = gi if held is None else held + gi
            if inp.requires_grad and key not in produced:
                leaves[key] = inp
    # leaves on the tape that the loss never reached still get zeros
    for entry in tape.entries:
        for inp in entry.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves.setdefault(id(inp), inp)
    for key, leaf in leaves.items():
        g = flows.get(key)
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        if g is not None:
            leaf.grad += g


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit(a.data + b, (a,), lambda g: (g,))
    _check_same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit(a.data - b, (a,), lambda g: (g,))
    _check_same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _emit(a.data * b, (a,), lambda g: (g * b,))
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, (a,), lambda g: (-g,))


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements: a rank-0 tensor."""
    shape = a.data.shape
    return _emit(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return _emit(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, a.data.dtype.type(0)), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.data.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit(y, (a,), bwd)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    n = a.data.shape[0]
    return reshape(a, (n, -1))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim != ad.ndim:
        raise ShapeError(f"matmul: expected equal-rank 2D or 3D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ ({ad.shape[-1]} vs {bd.shape[-2]})")
    if ad.ndim == 3 and ad.shape[0] != bd.shape[0]:
        raise ShapeError(f"matmul: batch extents differ ({ad.shape[0]} vs {bd.shape[0]})")

    def bwd(g):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _emit(ad @ bd, (a, b), bwd)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate rank-4 tensors along the channel axis, in argument order."""
    if not xs:
        raise ShapeError("concat_channels: need at least one input")
    first = xs[0].data
    if first.ndim != 4:
        raise ShapeError(f"concat_channels: expected rank-4 inputs, got rank {first.ndim}")
    for t in xs[1:]:
        d = t.data
        if d.ndim != 4 or d.shape[0] != first.shape[0] or d.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: input shape {d.shape} incompatible with {first.shape} "
                "(batch and spatial extents must match)")
    widths = [t.data.shape[1] for t in xs]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return _emit(np.concatenate([t.data for t in xs], axis=1), tuple(xs), bwd)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def _conv_out_extent(size: int, k: int, stride: int, padding: int, dilation: int, name: str) -> int:
    span = size + 2 * padding - dilation * (k - 1) - 1
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv2d: {name}={size} with kernel {k}, stride {stride}, padding {padding}, "
            f"dilation {dilation} gives no integral output extent")
    out = span // stride + 1
    if out < 1:
        raise ShapeError(f"conv2d: output {name} would be {out}")
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """2D cross-correlation with zero padding.

    x: (N, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,).
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError("conv2d: stride/dilation must be >= 1 and padding >= 0")
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d: expected rank-4 input and kernel, got {xd.shape} and {wd.shape}")
    n, cin, h, wdt = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input channels ({cin}) do not match kernel channels ({cin_w})")
    if b.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.data.shape} does not match output channels ({cout})")
    ho = _conv_out_extent(h, kh, stride, padding, dilation, "H")
    wo = _conv_out_extent(wdt, kw, stride, padding, dilation, "W")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    eff_kh = dilation * (kh - 1) + 1
    eff_kw = dilation * (kw - 1) + 1
    win = sliding_window_view(xp, (eff_kh, eff_kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, ::dilation, ::dilation]  # (N,Cin,Ho,Wo,kh,kw)
    patches = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, cin * kh * kw)
    wmat = wd.reshape(cout, -1)
    out = patches @ wmat.T + b.data
    y = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(n, cout, ho, wo)

    def bwd(g):
        gmat = np.ascontiguousarray(g.reshape(n, cout, ho * wo).transpose(0, 2, 1))
        db = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        dw = None
        if w.requires_grad:
            dw = np.matmul(gmat.transpose(0, 2, 1), patches).sum(axis=0).reshape(wd.shape)
        dx = None
        if x.requires_grad:
            dpat = gmat @ wmat  # (N, Ho*Wo, Cin*kh*kw)
            dwin = dpat.reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i * dilation: i * dilation + ho * stride: stride,
                        j * dilation: j * dilation + wo * stride: stride] += dwin[..., i, j]
            dx = dxp[:, :, padding: padding + h, padding: padding + wdt] if padding else dxp
        return (dx, dw, db)

    return _emit(y, (x, w, b), bwd)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Per-window maximum; gradient routes to the first maximum in row-major order."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d: expected rank-4 input, got {xd.shape}")
    n, c, h, w = xd.shape
    if h % stride or w % stride:
        raise ShapeError(f"maxpool2d: extents {h}x{w} not divisible by stride {stride}")
    ho, wo = h // stride, w // stride

    if k == stride:
        win = xd.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

        def bwd(g):
            dwin = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            return (dx,)

        return _emit(y, (x,), bwd)

    # overlapping windows: slower scatter path (unused by the architecture)
    if (ho - 1) * stride + k > h or (wo - 1) * stride + k > w:
        raise ShapeError(f"maxpool2d: window {k} with stride {stride} overruns {h}x{w}")
    win = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bwd_general(g):
        ni, ci, oi, oj = np.indices((n, c, ho, wo))
        rows = oi * stride + idx // k
        cols = oj * stride + idx % k
        dx = np.zeros_like(xd)
        np.add.at(dx, (ni, ci, rows, cols), g)
        return (dx,)

    return _emit(y, (x,), bwd_general)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BatchNormState:
    """Per-channel running statistics, updated in train mode.

    Fresh state is mean 0 / var 1, so eval mode before any train-mode
    update normalizes against the initial statistics (documented, not an
    error).
    """

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def initial(cls, channels: int, dtype=None) -> "BatchNormState":
        dt = dtype or _DEFAULT_DTYPE
        return cls(np.zeros(channels, dtype=dt), np.ones(channels, dtype=dt))


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                mode: str, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Channel-wise batch normalization with affine transform.

    Train mode normalizes by biased batch statistics over (N, H, W) and
    updates ``state`` in place; eval mode normalizes by ``state``.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batchnorm2d: expected rank-4 input, got {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta must have shape ({c},)")
    if mode not in ("train", "eval"):
        raise ValueError(f"batchnorm2d: mode must be 'train' or 'eval', got {mode!r}")
    gd, bd = gamma.data, beta.data
    expand = (1, c, 1, 1)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d: train mode needs N*H*W >= 2")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))  # biased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu.reshape(expand)) * inv.reshape(expand)
        state.mean[:] = (1.0 - momentum) * state.mean + momentum * mu
        state.var[:] = (1.0 - momentum) * state.var + momentum * var

        def bwd(g):
            dbeta = g.sum(axis=(0, 2, 3))
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dx = None
            if x.requires_grad:
                coeff = (gd * inv).reshape(expand) / m
                dx = coeff * (m * g - dbeta.reshape(expand) - xhat * dgamma.reshape(expand))
            return (dx,
                    dgamma if gamma.requires_grad else None,
                    dbeta if beta.requires_grad else None)

    else:
        inv = 1.0 / np.sqrt(state.var + eps)
        xhat = (xd - state.mean.reshape(expand)) * inv.reshape(expand)

        def bwd(g):
            dx = g * (gd * inv).reshape(expand) if x.requires_grad else None
            return (dx,
                    (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None,
                    g.sum(axis=(0, 2, 3)) if beta.requires_grad else None)

    y = gd.reshape(expand) * xhat + bd.reshape(expand)
    return _emit(y, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# linear layer and loss
# ---------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, D) @ w (D, M) + b (M,)."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ShapeError(f"linear: expected 2D operands, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"linear: input width {xd.shape[1]} does not match weight rows {wd.shape[0]}")
    if b.data.shape != (wd.shape[1],):
        raise ShapeError(f"linear: bias shape {b.data.shape} does not match output width ({wd.shape[1]},)")

    def bwd(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if w.requires_grad else None,
                g.sum(axis=0) if b.requires_grad else None)

    return _emit(xd @ wd + b.data, (x, w, b), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean multi-category cross entropy over the batch.

    labels: integer class indices, one per row of logits.
    """
    ld = logits.data
    if ld.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, K) logits, got {ld.shape}")
    lab = np.asarray(labels)
    n, k = ld.shape
    if lab.shape != (n,):
        raise ShapeError(f"cross_entropy: expected {n} labels, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    z = ld - ld.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), lab].mean()
    p = np.exp(logp)

    def bwd(g):
        d = p.copy()
        d[np.arange(n), lab] -= 1.0
        return (d * (g / n),)

    return _emit(np.asarray(loss, dtype=ld.dtype), (logits,), bwd)


# ---------------------------------------------------------------------------
# bilinear resize (preprocessing; not differentiated)
# ---------------------------------------------------------------------------


def bilinear_resize(img: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resample (C, H, W) to (C, out_h, out_w) with half-pixel sample centers."""
    if out_h < 1 or out_w < 1:
        raise ShapeError("bilinear_resize: target extents must be positive")
    data = img.data
    if data.ndim != 3:
        raise ShapeError(f"bilinear_resize: expected (C, H, W), got {data.shape}")
    return Tensor(resize_plane_stack(data, out_h, out_w), dtype=data.dtype)


def resize_plane_stack(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (C, H, W) array; computed in float64."""
    c, h, w = data.shape
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    d = data.astype(np.float64, copy=False)
    top = d[:, y0][:, :, x0] * (1 - wx) + d[:, y0][:, :, x1] * wx
    bot = d[:, y1][:, :, x0] * (1 - wx) + d[:, y1][:, :, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(data.dtype, copy=False)
