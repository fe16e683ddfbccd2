"""Quality metrics: PSNR, SSIM, and a Frechet distance over frozen features.

Images are HxWx3 float arrays in [0, 1].  The Frechet distance operates on
feature matrices [N, d]; callers typically feed it the frozen embedder's
pre-softmax features for a set of generated and a set of reference images.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, no_grad
from .errors import ShapeError
from .imageops import luminance

PSNR_CAP_DB = 100.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

FRECHET_RIDGE = 1e-6
EIG_TOLERANCE = -1e-6


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for unit-range images.

    Identical inputs would be infinite; the value is capped at 100 dB.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img, window):
    # valid-mode weighted local means via a sliding view; images are small
    # enough that the materialized view stays cheap
    k = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a, b):
    """Mean structural similarity on the luminance channel.

    Gaussian 11x11 window with sigma 1.5, K1=0.01, K2=0.03, dynamic range 1.
    Only fully valid windows contribute (no padding).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    ya = luminance(a).astype(np.float64) if a.ndim == 3 else a
    yb = luminance(b).astype(np.float64) if b.ndim == 3 else b
    if ya.shape[0] < SSIM_WINDOW or ya.shape[1] < SSIM_WINDOW:
        raise ShapeError(
            f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, "
            f"got {ya.shape}")

    w = _gaussian_window()
    mu_a = _window_means(ya, w)
    mu_b = _window_means(yb, w)
    var_a = _window_means(ya * ya, w) - mu_a ** 2
    var_b = _window_means(yb * yb, w) - mu_b ** 2
    cov = _window_means(ya * yb, w) - mu_a * mu_b

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def _sqrtm_psd(mat):
    """Matrix square root of a symmetric positive semi-definite matrix."""
    w, v = np.linalg.eigh((mat + mat.T) / 2)
    if np.any(w < EIG_TOLERANCE):
        raise ValueError(
            f"matrix is not positive semi-definite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(feats_a, feats_b):
    """Frechet distance between Gaussians fitted to two feature sets.

    ||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2}), with covariances
    using N-1 normalization plus a 1e-6 identity ridge.  The matrix square
    root goes through the symmetric eigendecomposition of
    Sa^{1/2} Sb Sa^{1/2}.
    """
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim != 2 or feats_b.ndim != 2:
        raise ShapeError("frechet_distance expects [N, d] feature matrices")
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ShapeError(
            f"feature dimension mismatch: {feats_a.shape[1]} vs {feats_b.shape[1]}")
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise ValueError("frechet_distance needs at least 2 samples per set")

    d = feats_a.shape[1]
    mu_a = feats_a.mean(axis=0)
    mu_b = feats_b.mean(axis=0)
    ridge = FRECHET_RIDGE * np.eye(d)
    cov_a = np.cov(feats_a, rowvar=False, ddof=1).reshape(d, d) + ridge
    cov_b = np.cov(feats_b, rowvar=False, ddof=1).reshape(d, d) + ridge

    root_a = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    if np.any(w < EIG_TOLERANCE):
        raise ValueError(
            f"cross-covariance product has eigenvalue {w.min():.3g} below tolerance")
    trace_sqrt = float(np.sum(np.sqrt(np.clip(w, 0.0, None))))

    dist = (float(np.sum((mu_a - mu_b) ** 2))
            + float(np.trace(cov_a) + np.trace(cov_b)) - 2.0 * trace_sqrt)
    if dist < EIG_TOLERANCE:
        raise ValueError(f"frechet distance came out negative: {dist:.3g}")
    return max(dist, 0.0)


def _to_nchw(images):
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return Tensor(np.transpose(arr, (0, 3, 1, 2)))


def evaluate(generator, samples, embedder, batch_size=8):
    """Mean PSNR/SSIM over (SR, HR) pairs plus the feature Frechet distance.

    ``samples`` is a sequence of objects with ``lr`` and ``hr`` HxWx3 float
    attributes.  Returns a dict with keys psnr, ssim, fid_proxy, n.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("evaluate requires a nonempty dataset")
    psnrs = []
    ssims = []
    sr_feats = []
    hr_feats = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            lr = _to_nchw([s.lr for s in chunk])
            hr = _to_nchw([s.hr for s in chunk])
            sr = generator.forward(lr).sr
            sr_imgs = np.clip(np.transpose(sr.data, (0, 2, 3, 1)), 0.0, 1.0)
            for img, s in zip(sr_imgs, chunk):
                psnrs.append(psnr(img, s.hr))
                ssims.append(ssim(img, s.hr))
            sr_feats.append(embedder.features(
                Tensor(np.transpose(sr_imgs, (0, 3, 1, 2)).astype(np.float32))).data)
            hr_feats.append(embedder.features(hr).data)
    fid = frechet_distance(np.concatenate(sr_feats), np.concatenate(hr_feats))
    return {
        "psnr": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "fid_proxy": fid,
        "n": len(samples),
    }


REPORT_HEADER = "experiment,test_domain,psnr,ssim,fid_proxy,n"


def write_report_csv(rows, path):
    """Write MetricsReport rows as UTF-8 CSV with LF line endings.

    Each row is a dict with experiment, test_domain, psnr, ssim, fid_proxy,
    and n.  Floats are fixed at 6 decimals so reruns are byte-identical.
    """
    lines = [REPORT_HEADER]
    for r in rows:
        lines.append(
            f"{r['experiment']},{r['test_domain']},{r['psnr']:.6f},"
            f"{r['ssim']:.6f},{r['fid_proxy']:.6f},{r['n']}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
