"""Reverse-mode automatic differentiation over dense numpy arrays.

Implements exactly the operation set the two-stream attention classifier
needs: 2-d cross-correlation, max pooling, dense layers, relu / sigmoid /
softmax, combination ops, dropout, and the two cross-entropy losses.

Operations executed while a ``Tape`` is active append adjoint callbacks to
it; ``Tape.backward`` replays them in exact reverse execution order and
accumulates gradients additively into every tensor that requires them.
Without an active tape the same functions are plain forward computations,
which is what evaluation mode uses.

Single precision is the intended training dtype; gradient-check tests run
the identical code in double precision.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError

# probability clamp applied before any logarithm inside the losses
PROB_EPS = 1e-7

_tls = threading.local()
_check_finite = False


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf checking after every forward op (slow; for debugging)."""
    global _check_finite
    _check_finite = bool(enabled)


def active_tape():
    return getattr(_tls, "tape", None)


class Tensor:
    """Dense n-d float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")


class Tape:
    """Ordered record of executed operations for one backward pass.

    Use as a context manager around the forward computation. ``backward``
    walks the record in reverse, assembling adjoints in a scratch map and
    finally adding them into each participating tensor's ``grad`` (so a
    second ``backward`` call accumulates on top of the first).
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        if active_tape() is not None:
            raise UsageError("another tape is already active on this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor) -> None:
        if not isinstance(loss, Tensor):
            raise UsageError("backward expects a Tensor loss")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise UsageError("loss is not connected to any differentiable input")
        adjoints = {id(loss): np.ones_like(loss.data)}
        touched = {id(loss): loss}
        for pull in reversed(self._records):
            pull(adjoints, touched)
        for key, t in touched.items():
            if not t.requires_grad:
                continue
            g = adjoints[key]
            if t.grad is None:
                # adjoints are never mutated in place, so owning arrays can
                # be adopted directly; views get defensively copied
                t.grad = g if g.base is None else g.copy()
            else:
                t.grad = t.grad + g
        if _check_finite:
            for t in touched.values():
                if t.grad is not None and not np.all(np.isfinite(t.grad)):
                    raise NumericError("backward produced non-finite gradients")


def backward(loss: Tensor) -> None:
    """Run backward on the tape currently active on this thread."""
    tape = active_tape()
    if tape is None:
        raise UsageError("backward called with no active tape")
    tape.backward(loss)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(name: str, data: np.ndarray, inputs, grad_fn) -> Tensor:
    """Wrap an op result; register its adjoint callback on the active tape.

    `grad_fn(g)` must return one gradient array (or None) per input, each a
    fresh array safe to keep.
    """
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values")
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        def pull(adjoints, touched):
            g = adjoints.get(id(out))
            if g is None:
                return
            for t, gi in zip(inputs, grad_fn(g)):
                if gi is None:
                    continue
                key = id(t)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gi
                else:
                    adjoints[key] = gi
                    touched[key] = t
        tape._records.append(pull)
    return out


# ---------------------------------------------------------------------------
# layers


def conv2d(x, kernel, bias, padding: str = "same") -> Tensor:
    """Batched 2-d cross-correlation with per-filter bias.

    x: [N,C,H,W], kernel: [F,C,kh,kw] (odd kh/kw), bias: [F].
    'same' zero-pads to preserve H,W; 'valid' shrinks to H-kh+1, W-kw+1.
    """
    x, kernel, bias = _as_tensor(x), _as_tensor(kernel), _as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv2d expects input [N,C,H,W], kernel [F,C,kh,kw], bias [F]; "
            f"got {x.shape}, {kernel.shape}, {bias.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ShapeError(
            f"conv2d channel mismatch: input {tuple(x.shape)} has {c} channels, "
            f"kernel {tuple(kernel.shape)} expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd, got {kh}x{kw}")
    if bias.shape[0] != f:
        raise ShapeError(f"conv2d bias shape {tuple(bias.shape)} does not match {f} filters")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigError(f"conv2d padding must be 'same' or 'valid', got {padding!r}")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"conv2d input {h}x{w} smaller than kernel {kh}x{kw}")

    if kh == 1 and kw == 1:
        return _conv1x1(x, kernel, bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    hp = xp.shape[2] - kh + 1
    wp = xp.shape[3] - kw + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # [N,C,H',W',kh,kw] view
    # contiguous im2col matrix, built once and reused by the backward pass
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * hp * wp, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    out = (col @ wmat.T).reshape(n, hp, wp, f)
    out = np.moveaxis(out, 3, 1) + bias.data[None, :, None, None]

    def grad_fn(g):
        g2d = np.ascontiguousarray(np.moveaxis(g, 1, 3)).reshape(n * hp * wp, f)
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gw = (g2d.T @ col).reshape(f, c, kh, kw) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # dx is the full correlation of g with the flipped kernel
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - ph, kh - 1 - ph),
                            (kw - 1 - pw, kw - 1 - pw)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gcol = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(
                n * h * w, f * kh * kw)
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, f * kh * kw)
            gx = np.moveaxis((gcol @ wflip.T).reshape(n, h, w, c), 3, 1)
        return gx, gw, gb

    return _finish("conv2d", out, (x, kernel, bias), grad_fn)


def _conv1x1(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Pointwise convolution as a per-pixel matmul."""
    n, c, h, w = x.shape
    f = kernel.shape[0]
    flat = np.ascontiguousarray(np.moveaxis(x.data, 1, 3)).reshape(n * h * w, c)
    wmat = kernel.data.reshape(f, c)
    out = (flat @ wmat.T + bias.data).reshape(n, h, w, f)
    out = np.moveaxis(out, 3, 1)

    def grad_fn(g):
        g2d = np.ascontiguousarray(np.moveaxis(g, 1, 3)).reshape(n * h * w, f)
        gb = g2d.sum(axis=0) if bias.requires_grad else None
        gw = (g2d.T @ flat).reshape(f, c, 1, 1) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.moveaxis((g2d @ wmat).reshape(n, h, w, c), 3, 1)
        return gx, gw, gb

    return _finish("conv2d", out, (x, kernel, bias), grad_fn)


def maxpool2d(x, window: int = 2, stride: int = 2, padding: str = "valid") -> Tensor:
    """Per-window max over [N,C,H,W]; gradient routes to each window's argmax
    (first element in row-major tap order on ties)."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects [N,C,H,W], got {tuple(x.shape)}")
    if window < 1 or stride < 1:
        raise ConfigError(f"maxpool2d window/stride must be >= 1, got {window}/{stride}")
    n, c, h, w = x.shape
    if padding == "valid":
        if h < window or w < window or (h - window) % stride or (w - window) % stride:
            raise ShapeError(
                f"maxpool2d: input {h}x{w} not tileable by window {window} stride {stride}")
        ph0 = ph1 = pw0 = pw1 = 0
        oh = (h - window) // stride + 1
        ow = (w - window) // stride + 1
    elif padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        pad_h = max(0, (oh - 1) * stride + window - h)
        pad_w = max(0, (ow - 1) * stride + window - w)
        ph0, ph1 = pad_h // 2, pad_h - pad_h // 2
        pw0, pw1 = pad_w // 2, pad_w - pad_w // 2
    else:
        raise ConfigError(f"maxpool2d padding must be 'same' or 'valid', got {padding!r}")

    if ph0 or ph1 or pw0 or pw1:
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    taps = [(di, dj) for di in range(window) for dj in range(window)]

    def tap_view(arr, di, dj):
        return arr[:, :, di:di + (oh - 1) * stride + 1:stride,
                   dj:dj + (ow - 1) * stride + 1:stride]

    out = tap_view(xp, *taps[0]).copy()
    for di, dj in taps[1:]:
        np.maximum(out, tap_view(xp, di, dj), out=out)

    def grad_fn(g):
        # route each window's gradient to its first maximal element
        # (taps scanned in row-major order, matching the tie rule)
        gxp = np.zeros_like(xp)
        assigned = np.zeros(out.shape, dtype=bool)
        for di, dj in taps:
            m = (tap_view(xp, di, dj) == out) & ~assigned
            tap_view(gxp, di, dj)[...] += g * m
            assigned |= m
        gx = gxp[:, :, ph0:ph0 + h, pw0:pw0 + w] if (ph0 or ph1 or pw0 or pw1) else gxp
        return (gx,)

    return _finish("maxpool2d", out, (x,), grad_fn)


def dense(x, weight, bias) -> Tensor:
    """Affine map: x[N,D] @ weight[D,M] + bias[M]."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(
            f"dense expects x [N,D], weight [D,M], bias [M]; got "
            f"{x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense inner dimensions disagree: x {tuple(x.shape)} vs weight {tuple(weight.shape)}")
    if bias.shape[0] != weight.shape[1]:
        raise ShapeError(
            f"dense bias {tuple(bias.shape)} does not match weight {tuple(weight.shape)}")
    out = x.data @ weight.data + bias.data

    def grad_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _finish("dense", out, (x, weight, bias), grad_fn)


# ---------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def grad_fn(g):
        return (g * (x.data > 0),)

    return _finish("relu", out, (x,), grad_fn)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (x,), grad_fn)


def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max subtraction for stability."""
    x = _as_tensor(x)
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"softmax axis {axis} invalid for shape {tuple(x.shape)}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _finish("softmax", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# combination ops


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = list(tensors[0].shape)
    for t in tensors[1:]:
        s = list(t.shape)
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref))
                                     if i != axis % len(ref)):
            raise ShapeError(
                f"concat off-axis shapes disagree: {tuple(ref)} vs {tuple(t.shape)}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return list(np.split(g, offsets, axis=axis))

    return _finish("concat", out, tensors, grad_fn)


def split(x, sizes, axis: int = 0):
    """Split into consecutive chunks of the given sizes along `axis`.

    Inverse of concat; differentiable (a multi-output op on the tape).
    """
    x = _as_tensor(x)
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(
            f"split sizes {list(sizes)} do not cover axis {axis} of {tuple(x.shape)}")
    offsets = np.cumsum(sizes)[:-1]
    pieces = np.split(x.data, offsets, axis=axis)
    outs = [Tensor(p.copy(), requires_grad=x.requires_grad) for p in pieces]
    tape = active_tape()
    if tape is not None and x.requires_grad:
        def pull(adjoints, touched):
            gs = []
            seen = False
            for o in outs:
                g = adjoints.get(id(o))
                if g is None:
                    gs.append(np.zeros_like(o.data))
                else:
                    gs.append(g)
                    seen = True
            if not seen:
                return
            gx = np.concatenate(gs, axis=axis)
            key = id(x)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gx
            else:
                adjoints[key] = gx
                touched[key] = x
        tape._records.append(pull)
    return outs


def add(*tensors) -> Tensor:
    """Element-wise sum of identically shaped tensors.

    Single-precision inputs accumulate in double precision and round once,
    so the result does not depend on the order of the addends.
    """
    if len(tensors) == 1 and isinstance(tensors[0], (list, tuple)):
        tensors = tuple(tensors[0])
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("add needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise ShapeError(f"add shape mismatch: {tuple(ref)} vs {tuple(t.shape)}")
    if len(tensors) == 1:
        t = tensors[0]
        return _finish("add", t.data.copy(), (t,), lambda g: (g,))
    dtype = np.result_type(*(t.data.dtype for t in tensors))
    acc = tensors[0].data.astype(np.float64, copy=True)
    for t in tensors[1:]:
        acc += t.data
    out = acc.astype(dtype, copy=False)

    def grad_fn(g):
        return [g for _ in tensors]

    return _finish("add", out, tensors, grad_fn)


def mul(a, b) -> Tensor:
    """Element-wise product of two identically shaped tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    out = a.data * b.data

    def grad_fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return _finish("mul", out, (a, b), grad_fn)


def scale(x, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    factor = float(factor)
    out = x.data * factor

    def grad_fn(g):
        return (g * factor,)

    return _finish("scale", out, (x,), grad_fn)


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"flatten expects a batched tensor, got shape {tuple(x.shape)}")
    shape = x.shape
    out = x.data.reshape(shape[0], -1)

    def grad_fn(g):
        return (g.reshape(shape),)

    return _finish("flatten", out, (x,), grad_fn)


def sum_all(x) -> Tensor:
    """Sum of all elements (scalar output)."""
    x = _as_tensor(x)
    out = np.asarray(x.data.sum())

    def grad_fn(g):
        return (np.full(x.shape, float(g), dtype=x.data.dtype),)

    return _finish("sum_all", out, (x,), grad_fn)


def dropout(x, p: float, training: bool, rng=None) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p) during training,
    identity in evaluation mode."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.data.dtype) / (1.0 - p)
    out = x.data * mask

    def grad_fn(g):
        return (g * mask,)

    return _finish("dropout", out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# losses


def binary_cross_entropy(p, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of probabilities against 0/1 targets.

    Probabilities are clamped to [PROB_EPS, 1-PROB_EPS] before the logs.
    `reduction` is 'mean' (batch-size invariant, the default) or 'sum'.
    """
    p = _as_tensor(p)
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=p.data.dtype)
    if y.shape != p.data.shape:
        raise ShapeError(f"bce target shape {y.shape} does not match {tuple(p.shape)}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"bce reduction must be 'mean' or 'sum', got {reduction!r}")
    ph = np.clip(p.data, PROB_EPS, 1.0 - PROB_EPS)
    terms = -(y * np.log(ph) + (1.0 - y) * np.log1p(-ph))
    denom = p.data.size if reduction == "mean" else 1
    out = np.asarray(terms.sum() / denom)

    def grad_fn(g):
        inbounds = (p.data > PROB_EPS) & (p.data < 1.0 - PROB_EPS)
        gp = float(g) * inbounds * (ph - y) / (ph * (1.0 - ph)) / denom
        return (gp.astype(p.data.dtype),)

    return _finish("binary_cross_entropy", out, (p,), grad_fn)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of row softmax against integer class labels."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects logits [N,K], got {tuple(logits.shape)}")
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"reduction must be 'mean' or 'sum', got {reduction!r}")
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"labels shape {y.shape} does not match logits {tuple(logits.shape)}")
    if y.dtype.kind not in "iu":
        if not np.all(y == y.astype(np.int64)):
            raise DataError("class labels must be integers")
        y = y.astype(np.int64)
    n, k = logits.shape
    if y.size and (y.min() < 0 or y.max() >= k):
        raise DataError(f"class label out of range [0, {k}): {int(y.min())}..{int(y.max())}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1)
    per_row = np.log(sez) - z[np.arange(n), y]
    denom = n if reduction == "mean" else 1
    out = np.asarray(per_row.sum() / denom)

    def grad_fn(g):
        soft = ez / sez[:, None]
        soft[np.arange(n), y] -= 1.0
        return (float(g) * soft / denom,)

    return _finish("softmax_cross_entropy", out, (logits,), grad_fn)
