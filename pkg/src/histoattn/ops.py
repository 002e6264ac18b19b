"""Differentiable operations on :class:`~histoattn.tensor.Tensor`.

Binary elementwise ops follow numpy broadcasting (shapes aligned on trailing
dimensions; an extent of 1 stretches). Gradients flowing into a broadcast
operand are summed back down to its shape.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BroadcastError, ConfigError, ShapeError
from .tensor import Tensor, as_tensor


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise BroadcastError(f"cannot broadcast {a} with {b}") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data + b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return Tensor.from_op(a.data - b.data, (a, b),
                          lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor.from_op(ad * bd, (a, b), bw, "mul")


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return Tensor.from_op(a.data * factor, (a,), lambda g: (g * factor,), "scale")


_SIG_LO, _SIG_HI = np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow on either tail;
    # saturated values are held one ulp inside (0, 1) so gates never close fully
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _SIG_LO, _SIG_HI)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return Tensor.from_op(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor.from_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return Tensor.from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return Tensor.from_op(e, (a,), lambda g: (g * e,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    d = a.data
    return Tensor.from_op(np.log(d), (a,), lambda g: (g / d,), "log")


_UNARY = {"sigmoid": sigmoid, "relu": relu, "tanh": tanh}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None, *, factor: float = 1.0) -> Tensor:
    """Dispatch by name: add/sub/mul need ``b``; scale uses ``factor``."""
    if op in _BINARY:
        if b is None:
            raise ConfigError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    if op == "scale":
        return scale(a, factor)
    raise ConfigError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def max(a, axis: int, keepdims: bool = False) -> Tensor:  # noqa: A001
    """Max along one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        full = np.zeros(shape)
        np.put_along_axis(full, np.expand_dims(idx, ax), g, axis=ax)
        return (full,)

    return Tensor.from_op(out if keepdims else out.squeeze(ax), (a,), bw, "max")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor.from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),),
                          "transpose")


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(out, ts, bw, "concat")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dims broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        broadcast_shape(a.shape[:-2], b.shape[:-2])
    except BroadcastError as exc:
        raise ShapeError(str(exc)) from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    if ad.ndim == 2:
        # one product per row: a row's result must not depend on its neighbours
        out = np.matmul(ad[:, None, :], bd)[:, 0, :]
    else:
        out = ad @ bd
    return Tensor.from_op(out, (a, b), bw, "matmul")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of each operand must also occur in
    the other operand or in the output (no operand-private summation)."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for own, other in ((sa, sb), (sb, sa)):
        for ch in own:
            if ch not in other and ch not in out_sub:
                raise ConfigError(f"index {ch!r} summed inside a single operand")
    ad, bd = a.data, b.data
    out = np.einsum(subscripts, ad, bd, optimize=True)

    def bw(g):
        ga = np.einsum(f"{out_sub},{sb}->{sa}", g, bd, optimize=True)
        gb = np.einsum(f"{out_sub},{sa}->{sb}", g, ad, optimize=True)
        return ga, gb

    return Tensor.from_op(out, (a, b), bw, "einsum")


def dense(x, w, bias=None) -> Tensor:
    """``x @ w + bias`` for x of shape (batch, in) and w of shape (in, out)."""
    y = matmul(x, w)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x, w, stride: int = 1, padding: int = 0, groups: int = 1, bias=None) -> Tensor:
    """2-D cross-correlation. ``x``: (B, Cin, H, W); ``w``: (Cout, Cin/groups, kh, kw).

    Ungrouped kernels run as im2col + matmul, depthwise kernels as a loop over
    taps, other groupings as one einsum over a strided window view.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cg, kh, kw = w.shape
    if groups < 1 or C % groups or O % groups:
        raise ShapeError(f"channels ({C} in, {O} out) not divisible by groups={groups}")
    if Cg * groups != C:
        raise ShapeError(f"kernel expects {Cg * groups} input channels, got {C}")
    OH = conv_output_size(H, kh, stride, padding)
    OW = conv_output_size(W, kw, stride, padding)
    if OH < 1 or OW < 1:
        raise ShapeError(f"conv2d output extent non-positive for input {H}x{W}, kernel {kh}x{kw}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    wd = w.data

    def tap(arr, i, j):
        return arr[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride]

    def unpad(gxp):
        return gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp

    if groups == 1:
        # im2col per image, so every image runs through an identical GEMM
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :OH, :OW]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, C * kh * kw, OH * OW)
        w2 = wd.reshape(O, C * kh * kw)
        out = np.matmul(w2, cols).reshape(B, O, OH, OW)

        def bw(g):
            g2 = g.reshape(B, O, OH * OW)
            gw = np.einsum("bop,bkp->ok", g2, cols, optimize=True).reshape(wd.shape)
            gcols = np.matmul(w2.T, g2).reshape(B, C, kh, kw, OH, OW)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    tap(gxp, i, j)[...] += gcols[:, :, i, j]
            return unpad(gxp), gw
    elif Cg == 1 and O == C:
        # depthwise: one filter per channel
        out = np.zeros((B, C, OH, OW))
        for i in range(kh):
            for j in range(kw):
                out += tap(xp, i, j) * wd[None, :, 0, i, j, None, None]

        def bw(g):
            gw = np.empty(wd.shape)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gw[:, 0, i, j] = np.einsum("bcyx,bcyx->c", g, tap(xp, i, j))
                    tap(gxp, i, j)[...] += g * wd[None, :, 0, i, j, None, None]
            return unpad(gxp), gw
    else:
        G, Og = groups, O // groups
        xg = xp.reshape(B, G, Cg, xp.shape[2], xp.shape[3])
        win = sliding_window_view(xg, (kh, kw), axis=(3, 4))[:, :, :, ::stride, ::stride][:, :, :, :OH, :OW]
        wg = wd.reshape(G, Og, Cg, kh, kw)
        out = np.einsum("bgcyxij,gocij->bgoyx", win, wg, optimize=True).reshape(B, O, OH, OW)

        def bw(g):
            gg = g.reshape(B, G, Og, OH, OW)
            gw = np.einsum("bgcyxij,bgoyx->gocij", win, gg, optimize=True).reshape(wd.shape)
            gxg = np.zeros(xg.shape)
            for i in range(kh):
                for j in range(kw):
                    gxg[:, :, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += np.einsum(
                        "bgoyx,goc->bgcyx", gg, wg[:, :, :, i, j], optimize=True)
            return unpad(gxg.reshape(xp.shape)), gw

    y = Tensor.from_op(np.ascontiguousarray(out), (x, w), bw, "conv2d")
    if bias is not None:
        y = add(y, reshape(bias, (1, O, 1, 1)))
    return y


def pool2d(x, kind: str, kh: int, kw: int, stride: Optional[int] = None) -> Tensor:
    """Windowed avg/max pooling without padding; stride defaults to the window."""
    x = as_tensor(x)
    stride = stride or kh
    B, C, H, W = x.shape
    if kh > H or kw > W or kh < 1 or kw < 1:
        raise ShapeError(f"pool window {kh}x{kw} does not fit input {H}x{W}")
    OH = (H - kh) // stride + 1
    OW = (W - kw) // stride + 1
    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :OH, :OW]
    flat = win.reshape(B, C, OH, OW, kh * kw)
    if kind == "avg":
        out = flat.mean(axis=-1)

        def bw(g):
            gx = np.zeros(x.shape)
            share = g / (kh * kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * OH:stride, j:j + stride * OW:stride] += share
            return (gx,)
    elif kind == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def bw(g):
            gx = np.zeros(x.shape)
            di, dj = np.divmod(arg, kw)
            bi, ci, yi, xi = np.indices(arg.shape)
            np.add.at(gx, (bi, ci, yi * stride + di, xi * stride + dj), g)
            return (gx,)
    else:
        raise ConfigError(f"pool kind must be 'avg' or 'max', got {kind!r}")
    return Tensor.from_op(out, (x,), bw, f"{kind}pool2d")


def global_pool(x, kind: str) -> Tensor:
    """Reduce every spatial position per channel: (B, C, H, W) -> (B, C)."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global_pool expects (B, C, H>=1, W>=1), got {x.shape}")
    B, C = x.shape[:2]
    flat = reshape(x, (B, C, -1))
    if kind == "avg":
        return mean(flat, axis=2)
    if kind == "max":
        return max(flat, axis=2)
    raise ConfigError(f"pool kind must be 'avg' or 'max', got {kind!r}")


# ---------------------------------------------------------------------------
# softmax family, dropout
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(s, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), bw, "log_softmax")


def dropout(x, p: float, training: bool, seed: int) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = np.random.default_rng(seed).random(x.shape) >= p
    m = keep / (1.0 - p)
    return Tensor.from_op(x.data * m, (x,), lambda g: (g * m,), "dropout")


# ---------------------------------------------------------------------------
# bilinear sampling for deformable convolution
# ---------------------------------------------------------------------------

def bilinear_sample(f, x: float, y: float, b: int, c: int) -> float:
    """Sample channel ``c`` of image ``b`` at real coordinates (x=column,
    y=row). Neighbours outside the map read as zero."""
    arr = f.data if isinstance(f, Tensor) else np.asarray(f, dtype=np.float64)
    H, W = arr.shape[2:]
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    ax, ay = x - x0, y - y0
    total = 0.0
    for yy, wy in ((y0, 1.0 - ay), (y0 + 1, ay)):
        for xx, wx in ((x0, 1.0 - ax), (x0 + 1, ax)):
            if 0 <= yy < H and 0 <= xx < W:
                total += wy * wx * arr[b, c, yy, xx]
    return total


def deform_gather(f, offsets, kh: int, kw: int, padding: int) -> Tensor:
    """Sample a kh x kw neighbourhood per position at displaced locations.

    ``f``: (B, C, H, W). ``offsets``: (B, 2*kh*kw, H, W), channel ``2k`` is the
    column shift dx and ``2k+1`` the row shift dy of tap ``k = i*kw + j``.
    Tap ``k`` at output (y, x) samples ``f`` at row ``y - padding + i + dy`` and
    column ``x - padding + j + dx`` (stride 1). Returns (B, C, kh*kw, H, W).
    """
    f, offsets = as_tensor(f), as_tensor(offsets)
    B, C, H, W = f.shape
    K = kh * kw
    if offsets.shape != (B, 2 * K, H, W):
        raise ShapeError(f"offsets must have shape {(B, 2 * K, H, W)}, got {offsets.shape}")
    off = offsets.data.reshape(B, K, 2, H, W)
    ti, tj = np.divmod(np.arange(K), kw)
    base_y = np.arange(H)[None, None, :, None] - padding + ti[None, :, None, None]
    base_x = np.arange(W)[None, None, None, :] - padding + tj[None, :, None, None]
    py = base_y + off[:, :, 1]          # (B, K, H, W)
    px = base_x + off[:, :, 0]
    y0 = np.floor(py).astype(np.int64)
    x0 = np.floor(px).astype(np.int64)
    ay = py - y0
    ax = px - x0
    fl = f.data.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    bidx = np.arange(B)[:, None, None, None]

    corners = []
    for dy, wy in ((0, 1.0 - ay), (1, ay)):
        for dx, wx in ((0, 1.0 - ax), (1, ax)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            flat = np.where(valid, (bidx * H + np.clip(yy, 0, H - 1)) * W + np.clip(xx, 0, W - 1), 0)
            vals = fl[flat] * valid[..., None]           # (B, K, H, W, C)
            corners.append((dy, dx, wy, wx, valid, flat, vals))

    out = np.zeros((B, K, H, W, C))
    for _, _, wy, wx, _, _, vals in corners:
        out += (wy * wx)[..., None] * vals
    result = out.transpose(0, 4, 1, 2, 3)

    def bw(g):
        gk = g.transpose(0, 2, 3, 4, 1)                 # (B, K, H, W, C)
        gf = np.zeros((B * H * W, C))
        gpy = np.zeros((B, K, H, W))
        gpx = np.zeros((B, K, H, W))
        for dy, dx, wy, wx, valid, flat, vals in corners:
            w = (wy * wx * valid)[..., None]
            np.add.at(gf, flat.reshape(-1), (gk * w).reshape(-1, C))
            gv = (gk * vals).sum(axis=-1)
            gpy += gv * wx * (1.0 if dy else -1.0)
            gpx += gv * wy * (1.0 if dx else -1.0)
        goff = np.stack([gpx, gpy], axis=2).reshape(B, 2 * K, H, W)
        return gf.reshape(B, H, W, C).transpose(0, 3, 1, 2), goff

    return Tensor.from_op(np.ascontiguousarray(result), (f, offsets), bw, "deform_gather")
