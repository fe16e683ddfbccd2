"""Deterministic synthetic two-domain image generators.

Two visually distinct families of 128x128 RGB images stand in for a photo
domain (bright smooth gradients, soft shapes, mild noise) and a cartoon
domain (dark background, flat vivid color regions, dark outlines).  The
tone gap between the domains is deliberate: it makes the two tasks compete
for the generator's capacity, so incremental training can actually exhibit
forgetting.  Every sample carries its degraded
LR counterpart and a Canny edge map of its luminance, so the pairs needed
for training exist by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError
from .imageops import canny_edges, decode_ppm, degrade, encode_ppm, luminance, to_float, to_uint8

HR_SIZE = 128
SOURCE = "source"
TARGET = "target"

MANIFEST_NAME = "manifest.csv"
MANIFEST_HEADER = "id,domain,seed"

# domain-specific per-sample seed streams; keeps matched (seed, i) pairs
# from producing correlated imagery across domains
_SOURCE_STREAM = 0
_TARGET_STREAM = 1


@dataclass
class DomainSample:
    hr: np.ndarray        # [128,128,3] float32 in [0,1]
    lr: np.ndarray        # [16,16,3] float32
    hr_edges: np.ndarray  # [128,128] float32 binary
    domain: str
    id: int
    seed: int             # per-sample seed; lr == degrade(hr, seed=seed)


def _sample_seed(set_seed, index, stream):
    return int((np.uint64(set_seed) * np.uint64(1_000_003)
                + np.uint64(index) * np.uint64(2)
                + np.uint64(stream)) % np.uint64(2 ** 32))


def _finish_sample(hr, domain, sample_id, sample_seed):
    hr = np.clip(hr, 0.0, 1.0).astype(np.float32)
    return DomainSample(
        hr=hr,
        lr=degrade(hr, seed=sample_seed),
        hr_edges=canny_edges(luminance(hr)),
        domain=domain,
        id=sample_id,
        seed=sample_seed,
    )


def _grid():
    ys, xs = np.mgrid[0:HR_SIZE, 0:HR_SIZE].astype(np.float64)
    return ys / (HR_SIZE - 1), xs / (HR_SIZE - 1)


def _source_image(rng):
    """Smooth photo-like image: layered gradients, one soft blob, faint noise."""
    ys, xs = _grid()
    c0 = rng.uniform(0.15, 0.85, 3)
    c1 = rng.uniform(0.15, 0.85, 3)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = (xs * np.cos(theta) + ys * np.sin(theta) + 1) / 2
    img = c0[None, None, :] + (c1 - c0)[None, None, :] * ramp[:, :, None]

    # radial highlight
    cy, cx = rng.uniform(0.2, 0.8, 2)
    r2 = (ys - cy) ** 2 + (xs - cx) ** 2
    glow = np.exp(-r2 / rng.uniform(0.05, 0.3))
    img += rng.uniform(-0.25, 0.25) * glow[:, :, None]

    # soft elliptical foreground blob
    ey, ex = rng.uniform(0.35, 0.65, 2)
    ay, ax_ = rng.uniform(0.12, 0.3, 2)
    d = ((ys - ey) / ay) ** 2 + ((xs - ex) / ax_) ** 2
    softness = rng.uniform(8, 16)
    alpha = 1.0 / (1.0 + np.exp(softness * (d - 1.0)))
    blob_color = rng.uniform(0.2, 0.8, 3)
    img = img * (1 - alpha[:, :, None]) + blob_color[None, None, :] * alpha[:, :, None]

    img += rng.normal(0.0, 0.01, img.shape)
    return img


def _ellipse_mask(ys, xs, rng):
    cy, cx = rng.uniform(0.1, 0.9, 2)
    ay, ax_ = rng.uniform(0.14, 0.3, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = ys - cy, xs - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return (u / ay) ** 2 + (v / ax_) ** 2 <= 1.0


def _box_mask(ys, xs, rng):
    cy, cx = rng.uniform(0.15, 0.85, 2)
    hy, hx = rng.uniform(0.12, 0.28, 2)
    theta = rng.uniform(0, np.pi)
    dy, dx = ys - cy, xs - cx
    u = dy * np.cos(theta) + dx * np.sin(theta)
    v = -dy * np.sin(theta) + dx * np.cos(theta)
    return (np.abs(u) <= hy) & (np.abs(v) <= hx)


def _erode(mask, steps=2):
    out = mask.copy()
    for _ in range(steps):
        padded = np.pad(out, 1, mode="edge")
        h, w = out.shape
        eroded = out.copy()
        for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
            eroded &= padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        out = eroded
    return out


def _target_image(rng):
    """Cartoon-like image: flat regions, hard edges, dark outline strokes."""
    ys, xs = _grid()
    img = np.empty((HR_SIZE, HR_SIZE, 3))
    img[:] = rng.uniform(0.06, 0.2, 3)

    n_regions = int(rng.integers(4, 9))
    outline = np.zeros((HR_SIZE, HR_SIZE), dtype=bool)
    for _ in range(n_regions):
        mask = _ellipse_mask(ys, xs, rng) if rng.random() < 0.5 else _box_mask(ys, xs, rng)
        # vivid ink: one dominant channel, the rest kept low; keep the
        # luminance step against the dark background pronounced
        color = rng.uniform(0.0, 0.25, 3)
        color[rng.integers(3)] = rng.uniform(0.6, 0.95)
        if color @ np.array([0.299, 0.587, 0.114]) < 0.35:
            color[1] = rng.uniform(0.55, 0.9)
        img[mask] = color
        # later shapes may paint over earlier outlines; recompute last
        outline &= ~mask
        outline |= mask & ~_erode(mask)

    img[outline] = rng.uniform(0.0, 0.08, 3)
    return img


def gen_source(seed, n):
    """Generate ``n`` smooth photo-like samples, deterministically."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i in range(n):
        s = _sample_seed(seed, i, _SOURCE_STREAM)
        rng = np.random.default_rng(s)
        samples.append(_finish_sample(_source_image(rng), SOURCE, i, s))
    return samples


def gen_target(seed, n):
    """Generate ``n`` flat-shaded cartoon-like samples, deterministically."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i in range(n):
        s = _sample_seed(seed, i, _TARGET_STREAM)
        rng = np.random.default_rng(s)
        samples.append(_finish_sample(_target_image(rng), TARGET, i, s))
    return samples


def edge_density(sample):
    """Fraction of edge pixels in the sample's HR edge map."""
    return float(sample.hr_edges.mean())


def gradient_magnitude_mean(sample):
    """Mean |grad Y| of the HR image (simple forward differences)."""
    y = luminance(sample.hr).astype(np.float64)
    gy = np.abs(np.diff(y, axis=0)).mean()
    gx = np.abs(np.diff(y, axis=1)).mean()
    return float(gy + gx)


def split(samples, train_frac, seed):
    """Seed-deterministic disjoint train/test split."""
    if not 0 < train_frac < 1:
        raise ValueError(f"train_frac must be in (0, 1), got {train_frac}")
    samples = list(samples)
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(train_frac * len(samples)))
    if n_train == 0 or n_train == len(samples):
        raise ValueError(
            f"split of {len(samples)} at frac {train_frac} leaves a side empty")
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return train, test


# ----------------------------------------------------------------------
# PPM directory export / ingestion


def _sample_filename(sample_id, domain):
    return f"{domain}_{sample_id:05d}.ppm"


def export_samples(samples, directory):
    """Write HR images as binary PPM plus a ``manifest.csv`` index."""
    os.makedirs(directory, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for s in samples:
        name = _sample_filename(s.id, s.domain)
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(encode_ppm(to_uint8(s.hr)))
        lines.append(f"{s.id},{s.domain},{s.seed}")
    with open(os.path.join(directory, MANIFEST_NAME), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def ingest_samples(directory):
    """Load a PPM directory written by export_samples (or hand-built).

    LR images and edge maps are recomputed from the stored HR images and
    recorded seeds, so the DomainSample invariants hold for ingested sets
    exactly as for generated ones.
    """
    manifest = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(manifest, "r", encoding="utf-8") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise FormatError(f"cannot read manifest {manifest}: {exc}") from exc
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"manifest must start with header '{MANIFEST_HEADER}'")
    samples = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 3:
            raise FormatError(f"bad manifest row: {ln!r}")
        sid, domain, s = int(parts[0]), parts[1], int(parts[2])
        if domain not in (SOURCE, TARGET):
            raise FormatError(f"unknown domain {domain!r} in manifest")
        path = os.path.join(directory, _sample_filename(sid, domain))
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise FormatError(f"cannot read {path}: {exc}") from exc
        hr = to_float(decode_ppm(raw))
        if hr.shape != (HR_SIZE, HR_SIZE, 3):
            raise FormatError(
                f"{path}: expected {HR_SIZE}x{HR_SIZE} RGB, got {hr.shape}")
        samples.append(_finish_sample(hr, domain, sid, s))
    return samples
