"""Image-quality metrics computed on magnitude images.

All four metrics take the magnitude first and treat the second argument as
the reference.  Constants follow the dominant CS-MRI conventions and are
overridable per call so reports stay self-describing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

__all__ = [
    "MetricReport",
    "nmse",
    "psnr",
    "ssim",
    "hfen",
    "log_kernel",
    "compute_report",
    "aggregate_reports",
    "PSNR_CAP_DB",
]

PSNR_CAP_DB = 200.0


def _mag(x) -> np.ndarray:
    arr = x if isinstance(x, np.ndarray) else np.asarray(x.data if hasattr(x, "data") else x)
    return np.abs(arr)


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def nmse(x, x_gt) -> float:
    """|| |x| - |gt| ||_2 / || |gt| ||_2 over the whole volume."""
    a, g = _mag(x), _mag(x_gt)
    _check_pair(a, g)
    denom = np.linalg.norm(g)
    if denom == 0:
        raise ValueError("reference has zero norm")
    return float(np.linalg.norm(a - g) / denom)


def psnr(x, x_gt) -> float:
    """Peak signal-to-noise ratio in dB; peak is the reference's max magnitude.

    Identical inputs give +inf; aggregation caps the sentinel at 200 dB.
    """
    a, g = _mag(x), _mag(x_gt)
    _check_pair(a, g)
    peak = g.max()
    if peak == 0:
        raise ValueError("reference has zero norm")
    mse = float(np.mean((a - g) ** 2))
    if mse == 0:
        return math.inf
    return float(10.0 * np.log10(peak**2 / mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(
    x,
    x_gt,
    win_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over frames on magnitude images.

    Gaussian-weighted local statistics over fully contained windows; the
    dynamic range is the reference's max magnitude over the whole volume.
    """
    a, g = _mag(x), _mag(x_gt)
    _check_pair(a, g)
    nx, ny, nt = a.shape
    if nx < win_size or ny < win_size:
        raise ValueError(f"frames {nx}x{ny} smaller than the {win_size}x{win_size} window")
    dyn = g.max()
    if dyn == 0:
        raise ValueError("degenerate reference: zero dynamic range")
    c1 = (k1 * dyn) ** 2
    c2 = (k2 * dyn) ** 2
    w = _gaussian_window(win_size, sigma)
    pad = win_size // 2
    crop = (slice(pad, nx - pad), slice(pad, ny - pad))

    def stats(img):
        return ndimage.correlate(img, w, mode="constant")[crop]

    scores = []
    for t in range(nt):
        fa, fg = a[:, :, t], g[:, :, t]
        mu_a, mu_g = stats(fa), stats(fg)
        var_a = stats(fa * fa) - mu_a**2
        var_g = stats(fg * fg) - mu_g**2
        cov = stats(fa * fg) - mu_a * mu_g
        num = (2 * mu_a * mu_g + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_g**2 + c1) * (var_a + var_g + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def log_kernel(size: int = 15, sigma: float = 1.5) -> np.ndarray:
    """Laplacian-of-Gaussian kernel, shifted to sum exactly to zero."""
    ax = np.arange(size) - (size - 1) / 2.0
    xx, yy = np.meshgrid(ax, ax, indexing="ij")
    r2 = xx**2 + yy**2
    g = np.exp(-r2 / (2 * sigma**2))
    g /= g.sum()
    k = g * (r2 - 2 * sigma**2) / sigma**4
    return k - k.mean()


def hfen(x, x_gt, size: int = 15, sigma: float = 1.5) -> float:
    """High-frequency error norm: relative LoG-response error, frame-averaged.

    The LoG filter uses zero-padded boundaries; the norms are taken over the
    interior where the kernel is fully supported, so a constant offset
    between the images scores exactly zero.
    """
    a, g = _mag(x), _mag(x_gt)
    _check_pair(a, g)
    nx, ny, nt = a.shape
    if nx < size or ny < size:
        raise ValueError(f"frames {nx}x{ny} smaller than the {size}x{size} LoG kernel")
    k = log_kernel(size, sigma)
    pad = size // 2
    crop = (slice(pad, nx - pad), slice(pad, ny - pad))
    ratios = []
    for t in range(nt):
        ra = ndimage.convolve(a[:, :, t], k, mode="constant")[crop]
        rg = ndimage.convolve(g[:, :, t], k, mode="constant")[crop]
        den = np.linalg.norm(rg)
        if den <= 1e-12 * max(np.linalg.norm(g[:, :, t][crop]), 1e-300):
            raise ValueError(f"reference frame {t} has no high-frequency content")
        ratios.append(np.linalg.norm(ra - rg) / den)
    return float(np.mean(ratios))


@dataclass
class MetricReport:
    """Per-sample metric quadruple; aggregate over a set with mean and std."""

    nmse: float
    psnr_db: float
    ssim: float
    hfen: float

    def as_row(self) -> list:
        return [self.nmse, self.psnr_db, self.ssim, self.hfen]


def compute_report(x, x_gt) -> MetricReport:
    return MetricReport(
        nmse=nmse(x, x_gt), psnr_db=psnr(x, x_gt), ssim=ssim(x, x_gt), hfen=hfen(x, x_gt)
    )


def aggregate_reports(reports) -> tuple[MetricReport, MetricReport]:
    """Mean and standard deviation over reports, with the PSNR sentinel capped."""
    if not reports:
        raise ValueError("no reports to aggregate")
    rows = np.array(
        [[r.nmse, min(r.psnr_db, PSNR_CAP_DB), r.ssim, r.hfen] for r in reports]
    )
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    return MetricReport(*(float(v) for v in mean)), MetricReport(*(float(v) for v in std))
