"""Learnable analysis filter banks and the learnable piecewise-linear nonlinearity.

Convolutions are circular (periodic wrap) in all three dimensions, with real
kernels acting on the real and imaginary channels independently.  A kernel
tap at index m contributes at spatial offset m - center, center = shape // 2,
so a kernel whose only nonzero is at its center is the identity.  Circular
boundary handling makes :func:`conv_adjoint` the exact algebraic adjoint of
bias-free :func:`conv_apply`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "FilterBank",
    "PiecewiseLinear",
    "PlfEval",
    "init_dct_tv",
    "init_dct_only",
    "init_random_gaussian",
    "identity_plf",
    "conv_apply",
    "conv_adjoint",
    "conv_combine",
    "plf_eval_and_grads",
]


def _kernel_ok(shape: tuple[int, ...]) -> bool:
    kx, ky, kt = shape
    return (kt == 1) or (kx == 1 and ky == 1)


@dataclass(frozen=True)
class FilterBank:
    """L real 3D convolution kernels with one real bias each.

    Kernels are either spatial (kt == 1) or temporal (kx == ky == 1); mixed
    spatiotemporal extents are rejected.
    """

    kernels: tuple
    biases: np.ndarray

    def __post_init__(self):
        kernels = tuple(np.asarray(k, dtype=np.float64) for k in self.kernels)
        if len(kernels) < 1:
            raise ValueError("filter bank needs at least one kernel")
        for k in kernels:
            if k.ndim != 3:
                raise ValueError(f"kernel must be 3D, got shape {k.shape}")
            if not _kernel_ok(k.shape):
                raise ValueError(
                    f"kernel shape {k.shape} is neither spatial (kt=1) nor temporal (kx=ky=1)"
                )
            if not np.all(np.isfinite(k)):
                raise ValueError("kernel contains non-finite entries")
        for k in kernels:
            k.flags.writeable = False
        biases = np.asarray(self.biases, dtype=np.float64).copy()
        if biases.shape != (len(kernels),):
            raise ValueError(f"need {len(kernels)} biases, got shape {biases.shape}")
        biases.flags.writeable = False
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "biases", biases)

    @property
    def L(self) -> int:
        return len(self.kernels)

    def adjoint_bank(self, scale: float = 1.0) -> "FilterBank":
        """Bank whose convolution equals correlation with this bank's kernels.

        Even-extent kernels get their support enlarged to the smallest odd
        extent that can represent the negated tap offsets.
        """
        return FilterBank(
            tuple(scale * _adjoint_kernel(k) for k in self.kernels),
            np.zeros(self.L),
        )


def _adjoint_kernel(k: np.ndarray) -> np.ndarray:
    center = tuple(s // 2 for s in k.shape)
    new_half = tuple(
        max(c, s - 1 - c) for s, c in zip(k.shape, center)
    )
    new_shape = tuple(2 * h + 1 for h in new_half)
    out = np.zeros(new_shape)
    idx = np.argwhere(k != 0) if np.any(k != 0) else np.empty((0, 3), dtype=int)
    for m in idx:
        off = m - np.array(center)
        out[tuple(np.array(new_half) - off)] = k[tuple(m)]
    return out


def _dct_atoms(kx: int, ky: int) -> list[np.ndarray]:
    """2D DCT-II basis atoms in row-major (u, v) order, DC excluded, unit Frobenius norm."""
    ix = np.arange(kx)
    iy = np.arange(ky)
    atoms = []
    for u in range(kx):
        for v in range(ky):
            if u == 0 and v == 0:
                continue
            a = np.outer(
                np.cos(np.pi * (2 * ix + 1) * u / (2 * kx)),
                np.cos(np.pi * (2 * iy + 1) * v / (2 * ky)),
            )
            atoms.append(a / np.linalg.norm(a))
    return atoms


def init_dct_tv(L_spatial: int = 8, kx: int = 3, ky: int = 3) -> FilterBank:
    """Spatial DCT atoms plus a temporal finite-difference kernel, zero biases.

    The defaults give the 3x3x(8+1) bank: eight non-DC DCT atoms of shape
    (3, 3, 1) and one temporal [+1, -1] kernel of shape (1, 1, 2).
    """
    atoms = _dct_atoms(kx, ky)
    if L_spatial > len(atoms):
        raise ValueError(
            f"only {len(atoms)} non-DC atoms exist for a {kx}x{ky} kernel, "
            f"requested {L_spatial}"
        )
    kernels = [a[:, :, None] for a in atoms[:L_spatial]]
    tv = np.zeros((1, 1, 2))
    tv[0, 0, 0] = 1.0
    tv[0, 0, 1] = -1.0
    kernels.append(tv)
    return FilterBank(tuple(kernels), np.zeros(L_spatial + 1))


def init_dct_only(L_spatial: int = 8, kx: int = 3, ky: int = 3) -> FilterBank:
    """Spatial DCT atoms only (no temporal kernel), zero biases."""
    bank = init_dct_tv(L_spatial, kx, ky)
    return FilterBank(bank.kernels[:-1], np.zeros(L_spatial))


def init_random_gaussian(
    L: int, kx: int, ky: int, kt: int, sigma: float, seed: int = 0
) -> FilterBank:
    """L kernels of shape (kx, ky, kt) with i.i.d. N(0, sigma^2) entries, zero biases."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    kernels = tuple(sigma * rng.standard_normal((kx, ky, kt)) for _ in range(L))
    return FilterBank(kernels, np.zeros(L))


# --- circular convolution machinery ---------------------------------------
#
# Kernels in a bank are grouped by shape; each group precomputes its tap
# offsets once and applies all kernels of the group with a single matmul
# over the stack of rolled inputs.


class _TapGroup(NamedTuple):
    indices: list          # kernel positions in the bank
    offsets: np.ndarray    # (T, 3) int offsets
    weights: np.ndarray    # (Lg, T) kernel taps, flattened, complex for BLAS


def _tap_groups(bank: FilterBank) -> list[_TapGroup]:
    by_shape: dict[tuple, list[int]] = {}
    for i, k in enumerate(bank.kernels):
        by_shape.setdefault(k.shape, []).append(i)
    groups = []
    for shape, idx in by_shape.items():
        center = np.array([s // 2 for s in shape])
        grid = np.indices(shape).reshape(3, -1).T  # (T, 3)
        offsets = grid - center
        weights = np.stack([bank.kernels[i].ravel() for i in idx]).astype(np.complex128)
        groups.append(_TapGroup(idx, offsets, weights))
    return groups


def _check_extents(bank: FilterBank, shape: tuple[int, int, int]) -> None:
    for k in bank.kernels:
        if any(ks > vs for ks, vs in zip(k.shape, shape)):
            raise ValueError(f"kernel shape {k.shape} exceeds image shape {shape}")


def _rolled_stack(v: np.ndarray, offsets: np.ndarray, sign: int) -> np.ndarray:
    return np.stack(
        [np.roll(v, tuple(sign * o), axis=(0, 1, 2)) for o in offsets]
    )


def conv_apply(bank: FilterBank, v: np.ndarray) -> np.ndarray:
    """Circular convolution of one volume with every kernel, biases on the real part.

    Returns an (L, nx, ny, nt) feature stack of the same dtype as ``v``.
    """
    v = np.asarray(v)
    _check_extents(bank, v.shape)
    out = np.empty((bank.L,) + v.shape, dtype=v.dtype if np.iscomplexobj(v) else np.complex128)
    for g in _tap_groups(bank):
        rolled = _rolled_stack(v, g.offsets, +1).reshape(len(g.offsets), -1)
        out[g.indices] = (g.weights @ rolled).reshape((-1,) + v.shape)
    out += bank.biases[:, None, None, None]
    return out


def conv_adjoint(bank: FilterBank, features: np.ndarray) -> np.ndarray:
    """Exact adjoint of bias-free :func:`conv_apply`: summed circular correlations."""
    features = np.asarray(features)
    if features.shape[0] != bank.L:
        raise ValueError(f"expected {bank.L} feature maps, got {features.shape[0]}")
    _check_extents(bank, features.shape[1:])
    acc = np.zeros(features.shape[1:], dtype=features.dtype)
    shape = features.shape[1:]
    for g in _tap_groups(bank):
        mixed = (g.weights.T @ features[g.indices].reshape(len(g.indices), -1)).reshape(
            (len(g.offsets),) + shape
        )
        for tap, off in enumerate(g.offsets):
            acc += np.roll(mixed[tap], tuple(-off), axis=(0, 1, 2))
    return acc


def conv_combine(bank: FilterBank, features: np.ndarray) -> np.ndarray:
    """Sum over l of (kernel_l convolved with feature_l) plus biases.

    This is the collapsing convolution that maps an L-stack back to a single
    volume; with an adjoint bank it realizes the analysis-transform transpose.
    """
    features = np.asarray(features)
    if features.shape[0] != bank.L:
        raise ValueError(f"expected {bank.L} feature maps, got {features.shape[0]}")
    _check_extents(bank, features.shape[1:])
    acc = np.zeros(features.shape[1:], dtype=features.dtype)
    shape = features.shape[1:]
    for g in _tap_groups(bank):
        mixed = (g.weights.T @ features[g.indices].reshape(len(g.indices), -1)).reshape(
            (len(g.offsets),) + shape
        )
        for tap, off in enumerate(g.offsets):
            acc += np.roll(mixed[tap], tuple(off), axis=(0, 1, 2))
    return acc + bank.biases.sum()


def _conv_apply_grads(bank: FilterBank, v: np.ndarray, cotangent: np.ndarray):
    """Kernel/bias gradients of conv_apply given the output cotangent stack."""
    d_kernels = []
    flat = {}
    for g in _tap_groups(bank):
        rolled = _rolled_stack(v, g.offsets, +1).reshape(len(g.offsets), -1)
        dw = (np.conj(cotangent[g.indices].reshape(len(g.indices), -1)) @ rolled.T).real
        for row, i in enumerate(g.indices):
            flat[i] = dw[row].reshape(bank.kernels[i].shape)
    for i in range(bank.L):
        d_kernels.append(flat[i])
    d_biases = cotangent.real.sum(axis=(1, 2, 3))
    return d_kernels, d_biases


def _conv_combine_grads(bank: FilterBank, features: np.ndarray, cotangent: np.ndarray):
    """Kernel/bias gradients of conv_combine plus the feature-stack cotangent."""
    d_kernels = [None] * bank.L
    cot_features = np.empty_like(features)
    shape = features.shape[1:]
    for g in _tap_groups(bank):
        shifted = _rolled_stack(cotangent, g.offsets, -1).reshape(len(g.offsets), -1)
        dw = (features[g.indices].reshape(len(g.indices), -1) @ np.conj(shifted).T).real
        for row, i in enumerate(g.indices):
            d_kernels[i] = dw[row].reshape(bank.kernels[i].shape)
        cot_features[g.indices] = (g.weights @ shifted).reshape((-1,) + shape)
    total = cotangent.real.sum()
    d_biases = np.full(bank.L, total)
    return d_kernels, d_biases, cot_features


# --- piecewise-linear nonlinearity -----------------------------------------


@dataclass(frozen=True)
class PiecewiseLinear:
    """Pointwise map interpolating (p_i, q_i) pairs; p fixed, q learned.

    Between knots the value is the linear interpolant; outside [p_0, p_-1]
    the first/last segment slope extrapolates, so the map is continuous and
    piecewise affine on the whole line.
    """

    positions: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.positions, dtype=np.float64).copy()
        q = np.asarray(self.values, dtype=np.float64).copy()
        if p.ndim != 1 or p.shape != q.shape or p.size < 2:
            raise ValueError("positions and values must be equal-length 1D with >= 2 points")
        if not np.all(np.diff(p) > 0):
            raise ValueError("positions must be strictly increasing")
        p.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "values", q)

    @property
    def n_points(self) -> int:
        return self.positions.size


def identity_plf(n_points: int = 101, lo: float = -1.0, hi: float = 1.0) -> PiecewiseLinear:
    """PLF with q == p: the identity map."""
    p = np.linspace(lo, hi, n_points)
    return PiecewiseLinear(p, p.copy())


class PlfEval(NamedTuple):
    """Value, input slope, and interpolation-weight structure of a PLF evaluation.

    Each element touches exactly two control values: q[segment] with weight
    (1 - weight_right) and q[segment + 1] with weight_right.
    """

    value: np.ndarray
    d_input: np.ndarray
    segment: np.ndarray
    weight_right: np.ndarray


def plf_eval_and_grads(plf: PiecewiseLinear, c: np.ndarray) -> PlfEval:
    """Evaluate the PLF elementwise on a real array with all gradients.

    Inputs landing exactly on a knot use the right-hand segment slope;
    inputs beyond the range extrapolate with the boundary segment.
    """
    c = np.asarray(c, dtype=np.float64)
    p, q = plf.positions, plf.values
    seg = np.clip(np.searchsorted(p, c, side="right") - 1, 0, p.size - 2)
    p0 = p[seg]
    span = p[seg + 1] - p0
    w = (c - p0) / span
    slope = (q[seg + 1] - q[seg]) / span
    value = q[seg] + slope * (c - p0)
    return PlfEval(value, slope, seg, w)


def plf_value_grads(plf: PiecewiseLinear, ev: PlfEval, cotangent: np.ndarray) -> np.ndarray:
    """Scatter a real cotangent onto the control values q (sparse two-weight rows)."""
    n = plf.n_points
    cot = np.asarray(cotangent, dtype=np.float64).ravel()
    seg = ev.segment.ravel()
    w = ev.weight_right.ravel()
    dq = np.bincount(seg, weights=cot * (1.0 - w), minlength=n)
    dq += np.bincount(seg + 1, weights=cot * w, minlength=n)
    return dq
