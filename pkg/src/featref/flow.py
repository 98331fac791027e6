"""Motion front-end: apex-frame spotting, TV-L1 optical flow, bilinear
resizing, and standardization of flow components into network inputs.

Gray frames are plain 2-d float arrays with pixel values in [0, 1].
The TV-L1 solver follows the duality-based formulation of Zach et al.
(2007) with the coarse-to-fine warping scheme described by Sanchez
Perez et al. (IPOL 2013).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, DataError
from .ioutil import atomic_write_bytes

FLOW_MAGIC = b"FRFLOW1\x00"
NETWORK_INPUT_SIZE = 28
MIN_FLOW_SIZE = 16

# luma weights for color-to-gray conversion
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class FlowField:
    """Per-pixel motion field: u is horizontal displacement (+x right),
    v is vertical displacement (+y down), both in pixels."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u)
        self.v = np.asarray(self.v)
        if self.u.ndim != 2 or self.u.shape != self.v.shape:
            raise DataError(
                f"flow components must be equal 2-d arrays, got {self.u.shape} and {self.v.shape}")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise DataError("flow components contain non-finite values")

    @property
    def shape(self):
        return self.u.shape


@dataclass(frozen=True)
class TVL1Params:
    """Solver settings. Defaults are the common literature values."""

    data_weight: float = 0.15   # weight of the |I1(x+u) - I0(x)| term
    theta: float = 0.3          # coupling between data and regularity fields
    tau: float = 0.25           # dual ascent step
    levels: int = 5             # pyramid depth cap (auto-reduced on small images)
    scale: float = 0.5          # pyramid downsampling factor
    warps: int = 5              # warp iterations per level
    max_iters: int = 300        # inner iteration ceiling per warp
    tol: float = 0.01           # stop when the mean flow update drops below tol
    median_filter: bool = True  # 3x3 median after each warp

    def validate(self):
        if self.data_weight <= 0 or self.theta <= 0 or self.tau <= 0:
            raise ConfigError("tvl1 weights and steps must be positive")
        if not 0 < self.scale < 1:
            raise ConfigError(f"tvl1 scale must be in (0, 1), got {self.scale}")
        if self.levels < 1 or self.warps < 1 or self.max_iters < 1:
            raise ConfigError("tvl1 iteration counts must be >= 1")


def validate_frame(frame, name: str = "frame") -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"{name} must be a 2-d gray image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite pixels")
    return arr


def spot_apex(frames) -> int:
    """Index of the frame with the largest mean absolute difference from
    frame 0. Ties break to the earliest index; the result is always >= 1."""
    frames = [validate_frame(f, f"frame {i}") for i, f in enumerate(frames)]
    if len(frames) < 2:
        raise DataError(f"apex spotting needs at least 2 frames, got {len(frames)}")
    base = frames[0]
    for i, f in enumerate(frames[1:], 1):
        if f.shape != base.shape:
            raise DataError(
                f"frame {i} shape {f.shape} does not match frame 0 shape {base.shape}")
    diffs = np.array([np.mean(np.abs(f - base)) for f in frames[1:]])
    return int(np.argmax(diffs)) + 1


# ---------------------------------------------------------------------------
# TV-L1 solver


def _gaussian_blur(img: np.ndarray, sigma: float = 0.8) -> np.ndarray:
    radius = max(1, int(3.0 * sigma + 0.5))
    xs = np.arange(-radius, radius + 1)
    k = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()
    padded = np.pad(img, ((radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * padded[i:i + img.shape[0], :]
    padded = np.pad(out, ((0, 0), (radius, radius)), mode="edge")
    out = np.zeros_like(img)
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + img.shape[1]]
    return out


def _resize2d(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of a 2-d array."""
    h, w = a.shape
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.array([(h - 1) / 2.0])
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.array([(w - 1) / 2.0])
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear sample of img at (x + u, y + v), clamped at the borders."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    xs = np.clip(xx + u, 0.0, w - 1.0)
    ys = np.clip(yy + v, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def _forward_grad(a: np.ndarray):
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1] = a[:, 1:] - a[:, :-1]
    gy[:-1, :] = a[1:, :] - a[:-1, :]
    return gx, gy


def _divergence(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    d = np.empty_like(p1)
    d[:, 0] = p1[:, 0]
    d[:, 1:-1] = p1[:, 1:-1] - p1[:, :-2]
    d[:, -1] = -p1[:, -2]
    d[0, :] += p2[0, :]
    d[1:-1, :] += p2[1:-1, :] - p2[:-2, :]
    d[-1, :] += -p2[-2, :]
    return d


def _median3(a: np.ndarray) -> np.ndarray:
    ap = np.pad(a, 1, mode="edge")
    h, w = a.shape
    stack = np.stack([ap[i:i + h, j:j + w] for i in range(3) for j in range(3)], axis=-1)
    return np.partition(stack, 4, axis=-1)[..., 4]


def flow_energy(i0: np.ndarray, i1: np.ndarray, u: np.ndarray, v: np.ndarray,
                data_weight: float) -> float:
    """TV + weighted L1 data energy of a candidate flow (diagnostic)."""
    ux, uy = _forward_grad(u)
    vx, vy = _forward_grad(v)
    tv = np.sqrt(ux ** 2 + uy ** 2).sum() + np.sqrt(vx ** 2 + vy ** 2).sum()
    data = np.abs(_warp(i1, u, v) - i0).sum()
    return float(tv + data_weight * data)


def _solve_level(i0, i1, u, v, p: TVL1Params, record_energy: bool = False):
    l_t = p.data_weight * p.theta
    taut = p.tau / p.theta
    p11 = np.zeros_like(i0)
    p12 = np.zeros_like(i0)
    p21 = np.zeros_like(i0)
    p22 = np.zeros_like(i0)
    i1x, i1y = np.gradient(i1, axis=1), np.gradient(i1, axis=0)
    energies = []
    tol2 = p.tol * p.tol
    for _ in range(p.warps):
        i1w = _warp(i1, u, v)
        i1wx = _warp(i1x, u, v)
        i1wy = _warp(i1y, u, v)
        grad2 = i1wx ** 2 + i1wy ** 2
        live = grad2 > 1e-10
        grad2_safe = np.where(live, grad2, 1.0)
        rho_c = i1w - i1wx * u - i1wy * v - i0
        for _ in range(p.max_iters):
            rho = rho_c + i1wx * u + i1wy * v
            lo = rho < -l_t * grad2
            hi = rho > l_t * grad2
            mid = ~(lo | hi) & live
            d1 = np.where(lo, l_t * i1wx, np.where(hi, -l_t * i1wx, 0.0))
            d2 = np.where(lo, l_t * i1wy, np.where(hi, -l_t * i1wy, 0.0))
            d1 = np.where(mid, -rho * i1wx / grad2_safe, d1)
            d2 = np.where(mid, -rho * i1wy / grad2_safe, d2)
            v1 = u + d1
            v2 = v + d2
            u_new = v1 + p.theta * _divergence(p11, p12)
            v_new = v2 + p.theta * _divergence(p21, p22)
            err = np.mean((u_new - u) ** 2 + (v_new - v) ** 2)
            u, v = u_new, v_new
            ux, uy = _forward_grad(u)
            vx, vy = _forward_grad(v)
            ng1 = 1.0 + taut * np.sqrt(ux ** 2 + uy ** 2)
            ng2 = 1.0 + taut * np.sqrt(vx ** 2 + vy ** 2)
            p11 = (p11 + taut * ux) / ng1
            p12 = (p12 + taut * uy) / ng1
            p21 = (p21 + taut * vx) / ng2
            p22 = (p22 + taut * vy) / ng2
            if err < tol2:
                break
        if p.median_filter:
            u = _median3(u)
            v = _median3(v)
        if record_energy:
            energies.append(flow_energy(i0, i1, u, v, p.data_weight))
    return u, v, energies


def _pyramid(img: np.ndarray, levels: int, scale: float):
    pyr = [img]
    for _ in range(1, levels):
        prev = pyr[-1]
        nh = int(round(prev.shape[0] * scale))
        nw = int(round(prev.shape[1] * scale))
        if min(nh, nw) < MIN_FLOW_SIZE:
            break
        pyr.append(_resize2d(_gaussian_blur(prev), nh, nw))
    return pyr


def tvl1_flow(onset, apex, params: TVL1Params | None = None) -> FlowField:
    """Estimate the motion field carrying the onset frame to the apex frame.

    Coarse-to-fine primal-dual TV-L1 with iterative warping. Deterministic
    for fixed parameters; a fixed iteration budget means non-convergence is
    not an error.
    """
    p = params or TVL1Params()
    p.validate()
    i0 = validate_frame(onset, "onset")
    i1 = validate_frame(apex, "apex")
    if i0.shape != i1.shape:
        raise DataError(f"onset shape {i0.shape} does not match apex shape {i1.shape}")
    if min(i0.shape) < MIN_FLOW_SIZE:
        raise DataError(
            f"flow needs at least {MIN_FLOW_SIZE}x{MIN_FLOW_SIZE} pixels, got {i0.shape}")
    # the data weight is calibrated for [0, 255] intensities; normalize both
    # frames jointly so the threshold step sees the expected scale
    lo = min(i0.min(), i1.min())
    hi = max(i0.max(), i1.max())
    if hi - lo < 1e-12:
        z = np.zeros_like(i0)
        return FlowField(u=z, v=z.copy())
    i0 = (i0 - lo) * (255.0 / (hi - lo))
    i1 = (i1 - lo) * (255.0 / (hi - lo))
    pyr0 = _pyramid(i0, p.levels, p.scale)
    pyr1 = _pyramid(i1, p.levels, p.scale)
    u = np.zeros(pyr0[-1].shape)
    v = np.zeros(pyr0[-1].shape)
    for lvl in range(len(pyr0) - 1, -1, -1):
        a0, a1 = pyr0[lvl], pyr1[lvl]
        if u.shape != a0.shape:
            sy = a0.shape[0] / u.shape[0]
            sx = a0.shape[1] / u.shape[1]
            u = _resize2d(u, *a0.shape) * sx
            v = _resize2d(v, *a0.shape) * sy
        u, v, _ = _solve_level(a0, a1, u, v, p)
    return FlowField(u=u, v=v)


# ---------------------------------------------------------------------------
# resizing and normalization


def resize_bilinear(source, out_h: int = NETWORK_INPUT_SIZE,
                    out_w: int = NETWORK_INPUT_SIZE):
    """Corner-aligned bilinear resize of a gray frame or a FlowField.

    Flow vector *values* are left untouched (this is input conditioning,
    not pyramid rescaling)."""
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    if isinstance(source, FlowField):
        if min(source.shape) < 2:
            raise DataError(f"source {source.shape} too small to resize")
        return FlowField(u=_resize2d(source.u, out_h, out_w),
                         v=_resize2d(source.v, out_h, out_w))
    arr = validate_frame(source, "source")
    if min(arr.shape) < 2:
        raise DataError(f"source {arr.shape} too small to resize")
    return _resize2d(arr, out_h, out_w)


def normalize_flow(fieldg: FlowField):
    """Standardize each component of a 28x28 flow field to zero mean and
    unit variance (variance floor 1e-6) and emit the two network input
    tensors of shape [1, 1, 28, 28]."""
    s = NETWORK_INPUT_SIZE
    if fieldg.shape != (s, s):
        raise DataError(f"normalize_flow expects a {s}x{s} field, got {fieldg.shape}")
    outs = []
    for comp in (fieldg.u, fieldg.v):
        mean = comp.mean()
        std = np.sqrt(max(float(comp.var()), 1e-6))
        z = (comp - mean) / std
        outs.append(Tensor(z.reshape(1, 1, s, s).astype(np.float32)))
    return outs[0], outs[1]


# ---------------------------------------------------------------------------
# cache file format


def write_flow(path, fieldg: FlowField) -> None:
    """Bit-exact cache file: magic, little-endian u32 height and width,
    then u and v as row-major 32-bit floats."""
    h, w = fieldg.shape
    blob = (FLOW_MAGIC + struct.pack("<II", h, w)
            + np.ascontiguousarray(fieldg.u, dtype="<f4").tobytes()
            + np.ascontiguousarray(fieldg.v, dtype="<f4").tobytes())
    atomic_write_bytes(path, blob)


def read_flow(path) -> FlowField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(FLOW_MAGIC):
        raise DataError(f"{path}: not a flow cache file (bad magic)")
    if len(blob) < len(FLOW_MAGIC) + 8:
        raise DataError(f"{path}: truncated flow cache header")
    h, w = struct.unpack_from("<II", blob, len(FLOW_MAGIC))
    expected = len(FLOW_MAGIC) + 8 + 2 * 4 * h * w
    if len(blob) != expected:
        raise DataError(f"{path}: flow cache size {len(blob)} != expected {expected}")
    off = len(FLOW_MAGIC) + 8
    u = np.frombuffer(blob, dtype="<f4", count=h * w, offset=off).reshape(h, w)
    v = np.frombuffer(blob, dtype="<f4", count=h * w, offset=off + 4 * h * w).reshape(h, w)
    return FlowField(u=u.copy(), v=v.copy())
