"""k-space undersampling masks, the acquisition operator, and the data-consistency update.

The frame-wise 2D Fourier transform used throughout is orthonormal and
centered: the DC coefficient sits at index (nx // 2, ny // 2).  Because the
transform is unitary, the normal-equation operator of the data-consistency
subproblem is exactly diagonal in k-space, with entry (1 + rho) on sampled
locations and rho elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_model import (
    DynamicImage,
    KSpaceData,
    _load_u8_container,
    _save_u8_container,
)

__all__ = [
    "SamplingMask",
    "fft2c",
    "ifft2c",
    "make_mask_1d_random",
    "make_mask_radial",
    "full_mask",
    "forward_undersample",
    "zero_filled_recon",
    "recon_x_update",
    "save_mask",
    "load_mask",
]

ACCEL_TOLERANCE = 0.10  # net acceleration must land within +/-10% of target
GOLDEN_ANGLE = np.pi / ((1.0 + np.sqrt(5.0)) / 2.0)  # ~111.25 degrees


def fft2c(x: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2D FFT applied to each frame of an (nx, ny, nt) array."""
    shifted = np.fft.ifftshift(x, axes=(0, 1))
    k = np.fft.fft2(shifted, axes=(0, 1), norm="ortho")
    return np.fft.fftshift(k, axes=(0, 1))


def ifft2c(k: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    shifted = np.fft.ifftshift(k, axes=(0, 1))
    x = np.fft.ifft2(shifted, axes=(0, 1), norm="ortho")
    return np.fft.fftshift(x, axes=(0, 1))


@dataclass(frozen=True)
class SamplingMask:
    """Binary per-frame k-space selection of shape (nx, ny, nt).

    ``pattern_kind`` is one of ``"1drandom"``, ``"radial"``, ``"full"``.
    Construction validates that the net acceleration (total grid points over
    sampled points) lies within +/-10% of ``target_accel``.
    """

    mask: np.ndarray
    pattern_kind: str
    target_accel: float

    def __post_init__(self):
        arr = np.asarray(self.mask)
        if arr.ndim != 3:
            raise ValueError(f"mask must be 3D (nx, ny, nt), got shape {arr.shape}")
        arr = arr.astype(np.uint8)
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if self.pattern_kind not in ("1drandom", "radial", "full"):
            raise ValueError(f"unknown pattern kind {self.pattern_kind!r}")
        ones = int(arr.sum())
        if ones == 0:
            raise ValueError("mask selects no samples")
        accel = arr.size / ones
        if abs(accel - self.target_accel) > ACCEL_TOLERANCE * self.target_accel:
            raise ValueError(
                f"net acceleration {accel:.3f} outside +/-10% of target {self.target_accel}"
            )
        arr = np.array(arr, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "mask", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mask.shape

    @property
    def net_accel(self) -> float:
        return self.mask.size / int(self.mask.sum())


def full_mask(nx: int, ny: int, nt: int) -> SamplingMask:
    """All-ones mask (no undersampling)."""
    return SamplingMask(np.ones((nx, ny, nt), dtype=np.uint8), "full", 1.0)


def make_mask_1d_random(
    nx: int,
    ny: int,
    nt: int,
    accel: float,
    center_lines: int = 4,
    seed: int = 0,
) -> SamplingMask:
    """Cartesian mask selecting whole phase-encode lines (constant along x).

    Per frame, the central ``center_lines`` lines are always sampled and the
    remaining budget of ``round(ny / accel)`` lines is drawn uniformly without
    replacement, independently per frame.

    Parameters
    ----------
    accel : float
        Target net acceleration factor, >= 1.
    center_lines : int
        Always-sampled low-frequency line count around the DC line.
    seed : int
        Makes the draw reproducible bit-exactly.
    """
    if accel < 1:
        raise ValueError(f"accel must be >= 1, got {accel}")
    if not 0 <= center_lines < ny / accel:
        raise ValueError(f"center_lines={center_lines} incompatible with accel={accel}, ny={ny}")
    budget = int(round(ny / accel))
    if budget < center_lines:
        raise ValueError(
            f"accel={accel} leaves a per-frame budget of {budget} lines, "
            f"fewer than center_lines={center_lines}"
        )
    rng = np.random.default_rng(seed)
    start = (ny - center_lines) // 2
    center = np.arange(start, start + center_lines)
    outside = np.setdiff1d(np.arange(ny), center)
    mask = np.zeros((nx, ny, nt), dtype=np.uint8)
    for t in range(nt):
        picked = rng.choice(outside, size=budget - center_lines, replace=False)
        mask[:, center, t] = 1
        mask[:, picked, t] = 1
    return SamplingMask(mask, "1drandom", float(accel))


def _rasterize_spokes(nx: int, ny: int, nt: int, n_spokes: int, phi0: float) -> np.ndarray:
    """Nearest-grid-point rasterization of equiangular spokes, golden-angle offset per frame."""
    cx, cy = nx // 2, ny // 2
    r_max = 0.5 * float(np.hypot(nx, ny))
    n_steps = int(np.ceil(4 * r_max)) + 1
    r = np.linspace(-r_max, r_max, n_steps)
    mask = np.zeros((nx, ny, nt), dtype=np.uint8)
    for t in range(nt):
        angles = phi0 + t * GOLDEN_ANGLE + np.arange(n_spokes) * (np.pi / n_spokes)
        ix = np.rint(cx + r[None, :] * np.cos(angles)[:, None]).astype(int)
        iy = np.rint(cy + r[None, :] * np.sin(angles)[:, None]).astype(int)
        keep = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        mask[ix[keep], iy[keep], t] = 1
    return mask


def make_mask_radial(nx: int, ny: int, nt: int, accel: float, seed: int = 0) -> SamplingMask:
    """Golden-angle radial mask rasterized onto the Cartesian grid.

    The spoke count is chosen by bisection on the rasterized sample count so
    that the net acceleration lands within +/-10% of ``accel``.  The k-space
    center is on every spoke, hence sampled in every frame.
    """
    if accel < 1:
        raise ValueError(f"accel must be >= 1, got {accel}")
    rng = np.random.default_rng(seed)
    phi0 = float(rng.uniform(0.0, np.pi))
    target_ones = nx * ny * nt / accel

    def ones_count(s: int) -> int:
        return int(_rasterize_spokes(nx, ny, nt, s, phi0).sum())

    lo, hi = 1, 8
    while ones_count(hi) < target_ones and hi < 16 * max(nx, ny):
        lo, hi = hi, hi * 2
    # smallest spoke count reaching the target, then pick the closer neighbor
    while lo < hi:
        mid = (lo + hi) // 2
        if ones_count(mid) < target_ones:
            lo = mid + 1
        else:
            hi = mid
    candidates = [s for s in (lo - 1, lo) if s >= 1]
    best = min(candidates, key=lambda s: abs(nx * ny * nt / max(ones_count(s), 1) - accel))
    mask = _rasterize_spokes(nx, ny, nt, best, phi0)
    accel_actual = mask.size / mask.sum()
    if abs(accel_actual - accel) > ACCEL_TOLERANCE * accel:
        raise ValueError(
            f"cannot reach accel={accel} within +/-10% on a {nx}x{ny} grid "
            f"(closest achievable: {accel_actual:.3f} with {best} spokes)"
        )
    return SamplingMask(mask, "radial", float(accel))


def _check_shapes(a_shape, b_shape):
    if tuple(a_shape) != tuple(b_shape):
        raise ValueError(f"shape mismatch: {tuple(a_shape)} vs {tuple(b_shape)}")


def forward_undersample(
    x: DynamicImage,
    mask: SamplingMask,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> KSpaceData:
    """Acquire k-space data: y = mask * (F x) + mask * noise.

    The noise is complex Gaussian with per-component standard deviation
    ``noise_sigma``; sigma 0 gives the noiseless model.
    """
    _check_shapes(x.shape, mask.shape)
    y = fft2c(x.data)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        eta = noise_sigma * (
            rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape)
        )
        y = y + eta
    return KSpaceData(y * mask.mask)


def zero_filled_recon(y: KSpaceData, mask: SamplingMask) -> DynamicImage:
    """Inverse transform of the zero-filled spectrum, the aliased baseline."""
    _check_shapes(y.shape, mask.shape)
    if np.any(y.data[mask.mask == 0] != 0):
        raise ValueError("k-space data is nonzero off the mask support")
    return DynamicImage(ifft2c(y.data))


def recon_x_update(
    y: KSpaceData,
    v: DynamicImage,
    beta: DynamicImage,
    rho: float,
    mask: SamplingMask,
) -> DynamicImage:
    """Closed-form minimizer of the data-consistency subproblem.

    Returns x = F^H D^{-1} [y_zf + rho * F(v - beta)] where D is diagonal in
    k-space with entries (1 + rho) on sampled locations and rho elsewhere.
    With v = beta = 0 this is the first-iteration form.
    """
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    _check_shapes(y.shape, mask.shape)
    _check_shapes(v.shape, y.shape)
    _check_shapes(beta.shape, y.shape)
    num = y.data + rho * fft2c(v.data - beta.data)
    den = mask.mask + rho
    return DynamicImage(ifft2c(num / den))


def save_mask(path, mask: SamplingMask) -> None:
    """Write a mask to ``path`` in the ``.cmask`` container format."""
    _save_u8_container(
        path,
        mask.mask,
        {"pattern_kind": mask.pattern_kind, "target_accel": mask.target_accel},
    )


def load_mask(path) -> SamplingMask:
    """Read a ``.cmask`` container written by :func:`save_mask`."""
    arr, header = _load_u8_container(path)
    return SamplingMask(
        arr,
        str(header.get("pattern_kind", "full")),
        float(header.get("target_accel", arr.size / max(int(arr.sum()), 1))),
    )
