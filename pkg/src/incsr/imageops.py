"""Image ingestion, color conversion, resampling, degradation and edges.

Images are numpy arrays in HWC order: uint8 for storage/IO, float32 in
[0, 1] for compute.  All randomized operations take an explicit seed or
``numpy.random.Generator``; there is no hidden RNG state.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, ShapeError

# BT.601 full-range RGB <-> YCbCr on the unit scale (Cb/Cr centered at 0.5).
YCBCR_MATRIX = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
], dtype=np.float64)
YCBCR_OFFSET = np.array([0.0, 0.5, 0.5], dtype=np.float64)

OTSU_BINS = 256  # histogram resolution of the adaptive Canny threshold


# ----------------------------------------------------------------------
# PPM / PGM codec


def decode_ppm(raw):
    """Decode binary PPM (P6, RGB) or PGM (P5, gray) bytes to a uint8 HWC array."""
    if not isinstance(raw, (bytes, bytearray)):
        raise FormatError("decode_ppm expects bytes")
    if raw[:2] == b"P3" or raw[:2] == b"P2":
        raise FormatError("ASCII PPM/PGM (P3/P2) is not supported; use binary P6/P5")
    if raw[:2] not in (b"P6", b"P5"):
        raise FormatError(f"unsupported magic {raw[:2]!r}")
    channels = 3 if raw[:2] == b"P6" else 1

    # header: magic, width, height, maxval; '#' comments allowed
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise FormatError("truncated PPM header")
        ch = raw[pos:pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(raw) and raw[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(raw[start:pos]))
        else:
            raise FormatError(f"malformed PPM header near byte {pos}")
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, expected 255")
    n = w * h * channels
    payload = raw[pos:pos + n]
    if len(payload) != n:
        raise FormatError(f"truncated PPM payload: expected {n} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)


def encode_ppm(img):
    """Encode a uint8 HWC array (1 or 3 channels) as binary PGM/PPM bytes."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"expected HxWx1 or HxWx3, got {img.shape}")
    if img.dtype != np.uint8:
        raise FormatError("encode_ppm expects uint8 data")
    h, w, c = img.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + b"\n" + f"{w} {h}\n255\n".encode("ascii")
    return header + img.tobytes()


def to_float(img):
    """uint8 storage -> float32 compute range [0, 1]."""
    return np.asarray(img, dtype=np.float32) / 255.0


def to_uint8(img):
    """float compute range -> uint8 with round-half-away rounding via +0.5."""
    return np.clip(np.asarray(img, dtype=np.float64) * 255.0 + 0.5, 0, 255).astype(np.uint8)


# ----------------------------------------------------------------------
# color space


def rgb_to_ycbcr(img):
    """BT.601 full-range RGB -> YCbCr on unit-scale float input."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"rgb_to_ycbcr expects HxWx3, got {img.shape}")
    out = img.astype(np.float64) @ YCBCR_MATRIX.T + YCBCR_OFFSET
    return out.astype(np.float32)


def ycbcr_to_rgb(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"ycbcr_to_rgb expects HxWx3, got {img.shape}")
    inv = np.linalg.inv(YCBCR_MATRIX)
    out = (img.astype(np.float64) - YCBCR_OFFSET) @ inv.T
    return out.astype(np.float32)


def luminance(img):
    """Y channel of an RGB image (single-channel HxW array)."""
    return rgb_to_ycbcr(img)[:, :, 0]


# ----------------------------------------------------------------------
# bicubic resampling


def _catmull_rom(t):
    """Catmull-Rom cubic kernel (a = -0.5)."""
    a = -0.5
    t = np.abs(t)
    out = np.zeros_like(t)
    m1 = t <= 1
    m2 = (t > 1) & (t < 2)
    out[m1] = (a + 2) * t[m1] ** 3 - (a + 3) * t[m1] ** 2 + 1
    out[m2] = a * t[m2] ** 3 - 5 * a * t[m2] ** 2 + 8 * a * t[m2] - 4 * a
    return out


def _resample_matrix(n_out, n_in):
    """Dense row matrix mapping ``n_in`` samples to ``n_out`` along one axis.

    Uses pixel-center alignment and edge-clamped taps; rows sum to 1 so
    constant signals are preserved exactly.
    """
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.int64)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for tap in range(-1, 3):
        idx = base + tap
        wgt = _catmull_rom(src - idx)
        np.add.at(mat, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wgt)
    mat /= mat.sum(axis=1, keepdims=True)
    return mat


def resize_bicubic(img, new_w, new_h):
    """Separable Catmull-Rom resize with edge-clamped sampling."""
    img = np.asarray(img, dtype=np.float32)
    if new_w < 1 or new_h < 1:
        raise ShapeError(f"target dims must be >= 1, got {new_w}x{new_h}")
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    wh = _resample_matrix(new_h, h)
    ww = _resample_matrix(new_w, w)
    out = np.einsum("oi,iwc->owc", wh, img.astype(np.float64))
    out = np.einsum("oj,hjc->hoc", ww, out)
    out = out.astype(np.float32)
    return out[:, :, 0] if squeeze else out


def degrade(hr, noise_sigma=2 / 255, seed=0):
    """8x bicubic downsample plus additive Gaussian noise, clamped to [0, 1]."""
    hr = np.asarray(hr, dtype=np.float32)
    h, w = hr.shape[:2]
    if h % 8 or w % 8:
        raise ShapeError(f"HR dims must be divisible by 8, got {h}x{w}")
    lr = resize_bicubic(hr, w // 8, h // 8)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        lr = lr + rng.normal(0.0, noise_sigma, size=lr.shape).astype(np.float32)
    return np.clip(lr, 0.0, 1.0)


# ----------------------------------------------------------------------
# Canny edge detection


def _gaussian_kernel_5x5(sigma=1.4):
    ax = np.arange(-2, 3, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _conv2_replicate(img, kernel):
    """2-D correlation with replicate padding (small kernels only)."""
    kh, kw = kernel.shape
    pt, pl = kh // 2, kw // 2
    pad = np.pad(img, ((pt, kh - 1 - pt), (pl, kw - 1 - pl)), mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    h, w = img.shape
    for i in range(kh):
        for j in range(kw):
            out += kernel[i, j] * pad[i:i + h, j:j + w]
    return out


def otsu_threshold(values, bins=OTSU_BINS):
    """Otsu's threshold over a histogram of ``values``.

    Returns the threshold maximizing between-class variance, expressed in
    the units of ``values``.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return hi
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / hist.sum()
    omega = np.cumsum(p)
    centers = (edges[:-1] + edges[1:]) / 2
    mu = np.cumsum(p * centers)
    mu_total = mu[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_total * omega - mu) ** 2 / (omega * (1 - omega))
    between[~np.isfinite(between)] = -1
    return float(centers[int(np.argmax(between))])


def canny_edges(gray):
    """Canny edge detector with Otsu-adaptive double thresholds.

    Pipeline: 5x5 Gaussian blur (sigma 1.4) -> Sobel gradients ->
    non-maximum suppression -> double threshold (high = Otsu over the
    gradient-magnitude histogram, low = 0.5 * high) -> hysteresis.
    Returns a binary {0, 1} float32 map.
    """
    gray = np.asarray(gray, dtype=np.float32)
    if gray.ndim != 2:
        raise ShapeError(f"canny_edges expects a single-channel HxW image, got {gray.shape}")
    h, w = gray.shape
    if h < 5 or w < 5:
        raise ShapeError(f"image must be at least 5x5, got {h}x{w}")

    blurred = _conv2_replicate(gray.astype(np.float64), _gaussian_kernel_5x5())
    sobel_x = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
    gx = _conv2_replicate(blurred, sobel_x)
    gy = _conv2_replicate(blurred, sobel_x.T)
    mag = np.hypot(gx, gy)

    # non-maximum suppression along the quantized gradient direction
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(mag, 1)
    center = padded[1:-1, 1:-1]

    def shifted(dy, dx):
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    d0 = (angle < 22.5) | (angle >= 157.5)          # horizontal gradient
    d45 = (angle >= 22.5) & (angle < 67.5)
    d90 = (angle >= 67.5) & (angle < 112.5)          # vertical gradient
    d135 = (angle >= 112.5) & (angle < 157.5)
    keep = np.zeros((h, w), dtype=bool)
    keep |= d0 & (center >= shifted(0, 1)) & (center >= shifted(0, -1))
    keep |= d45 & (center >= shifted(1, 1)) & (center >= shifted(-1, -1))
    keep |= d90 & (center >= shifted(1, 0)) & (center >= shifted(-1, 0))
    keep |= d135 & (center >= shifted(1, -1)) & (center >= shifted(-1, 1))
    nms = np.where(keep, mag, 0.0)

    high = otsu_threshold(mag)
    if high <= 1e-10:  # flat image: gradient is numerical dust
        return np.zeros((h, w), dtype=np.float32)
    low = 0.5 * high
    strong = nms >= high
    weak = nms >= low

    # hysteresis: grow strong edges through weak pixels (8-connectivity)
    edges = strong.copy()
    while True:
        grown = np.pad(edges, 1)
        neighbor = np.zeros((h, w), dtype=bool)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy or dx:
                    neighbor |= grown[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        new_edges = edges | (weak & neighbor)
        if np.array_equal(new_edges, edges):
            break
        edges = new_edges
    return edges.astype(np.float32)


# ----------------------------------------------------------------------
# augmentation


def augment(img, seed, crop_resize=False):
    """Training-time augmentation of a square HR image.

    Pipeline: optional center-crop-to-178-then-resize-to-128 (only applied
    when the input is at least 178px), horizontal flip with p=0.5, and a
    rotation drawn uniformly from {0, 90, 270} degrees.  Deterministic per
    seed.
    """
    img = np.asarray(img, dtype=np.float32)
    if img.shape[0] != img.shape[1]:
        raise ShapeError(f"augment expects a square image, got {img.shape}")
    rng = np.random.default_rng(seed)
    if crop_resize and img.shape[0] >= 178:
        off = (img.shape[0] - 178) // 2
        img = resize_bicubic(img[off:off + 178, off:off + 178], 128, 128)
    if rng.random() < 0.5:
        img = img[:, ::-1]
    rot = rng.choice([0, 1, 3])  # quarter turns: 0, 90, 270 degrees
    if rot:
        img = np.rot90(img, k=int(rot))
    return np.ascontiguousarray(img)
