"""Hand-derived reverse-mode gradients for every learnable parameter.

Cotangents are packed complex arrays: the real part is the derivative with
respect to the real channel and the imaginary part the derivative with
respect to the imaginary channel.  Under this convention the pullback of any
complex-linear map A is A^H, so the data-consistency update pulls back
through rho * F^H D^{-1} F, and real-parameter gradients are real parts of
complex inner products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import DynamicImage, KSpaceData
from .network import ForwardTape, LanternParams
from .sampling import SamplingMask, fft2c, ifft2c
from .transforms import (
    _conv_apply_grads,
    _conv_combine_grads,
    conv_adjoint,
    plf_value_grads,
)

__all__ = [
    "SubstageGrads",
    "StageGrads",
    "ParamGrads",
    "loss_and_grad_x",
    "backward",
    "finite_diff_check",
    "FiniteDiffReport",
]


def _data(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x
    return np.asarray(x.data if hasattr(x, "data") else x)


def _rdot(a: np.ndarray, b: np.ndarray) -> float:
    """Real part of the complex inner product <a, b>."""
    return float(np.vdot(a, b).real)


@dataclass
class SubstageGrads:
    d_mu1: float = 0.0
    d_mu2: float = 0.0
    d_conv1_kernels: list = field(default_factory=list)
    d_conv1_biases: np.ndarray | None = None
    d_conv2_kernels: list = field(default_factory=list)
    d_conv2_biases: np.ndarray | None = None
    d_q: np.ndarray | None = None


@dataclass
class StageGrads:
    d_rho: float = 0.0
    d_log_rho: float = 0.0
    d_eta: float = 0.0
    substages: list = field(default_factory=list)


@dataclass
class ParamGrads:
    """Gradient tree congruent with :class:`LanternParams`.

    ``pack`` flattens in the same order as ``LanternParams.pack``; the entry
    for the stored log-rho parameter is ``d_rho * rho``.
    """

    stages: list

    def pack(self) -> np.ndarray:
        chunks = []
        for st in self.stages:
            chunks.append(np.array([st.d_log_rho, st.d_eta]))
            for sub in st.substages:
                chunks.append(np.array([sub.d_mu1, sub.d_mu2]))
                chunks.extend(k.ravel() for k in sub.d_conv1_kernels)
                chunks.append(sub.d_conv1_biases)
                chunks.extend(k.ravel() for k in sub.d_conv2_kernels)
                chunks.append(sub.d_conv2_biases)
                chunks.append(sub.d_q)
        return np.concatenate(chunks)


def _zero_grads(params: LanternParams) -> ParamGrads:
    stages = []
    for st in params.stages:
        sg = StageGrads()
        for sub in st.substages:
            sg.substages.append(
                SubstageGrads(
                    d_conv1_kernels=[np.zeros(k.shape) for k in sub.conv1.kernels],
                    d_conv1_biases=np.zeros(sub.conv1.L),
                    d_conv2_kernels=[np.zeros(k.shape) for k in sub.conv2.kernels],
                    d_conv2_biases=np.zeros(sub.conv2.L),
                    d_q=np.zeros(sub.plf.n_points),
                )
            )
        stages.append(sg)
    return ParamGrads(stages)


def loss_and_grad_x(x_rec, x_gt, stab_rel: float = 1e-12):
    """Normalized root error ||x - gt|| / ||gt|| and its gradient in x.

    The gradient is (x - gt) / (||gt|| ||x - gt||); within ``stab_rel`` of an
    exact match the gradient is defined as zero to avoid the 0/0 singularity.
    """
    xr = _data(x_rec)
    gt = _data(x_gt)
    if xr.shape != gt.shape:
        raise ValueError(f"shape mismatch: {xr.shape} vs {gt.shape}")
    norm_gt = float(np.linalg.norm(gt))
    if norm_gt == 0.0:
        raise ValueError("ground truth has zero norm")
    diff = xr - gt
    norm_diff = float(np.linalg.norm(diff))
    loss = norm_diff / norm_gt
    if norm_diff < stab_rel * norm_gt:
        grad = np.zeros_like(diff)
    else:
        grad = diff / (norm_gt * norm_diff)
    return loss, grad


def _recon_pullback(cot_x, k_rhs, k_fvb, m, rho, d_y=None):
    """Pullback through x = F^H [ (y_zf + rho F(v - beta)) / (m + rho) ].

    Returns (d_rho contribution, cotangent for v, cotangent for beta).
    """
    c_hat = fft2c(cot_x)
    den = m + rho
    d_rho = _rdot(c_hat, -k_rhs / den**2 + k_fvb / den)
    g = rho * ifft2c(c_hat / den)
    if d_y is not None:
        d_y += m * (c_hat / den)
    return d_rho, g


def backward(
    tape: ForwardTape,
    y: KSpaceData,
    mask: SamplingMask,
    params: LanternParams,
    d_x_final,
    compute_d_y: bool = False,
):
    """Accumulate gradients for every learnable given the loss cotangent.

    Walks the tape in reverse layer order; cotangents arriving at shared
    nodes (the v chain, the multiplier, each stage's x) are summed.  Reads
    only tape intermediates; no forward layer is re-evaluated.
    """
    if len(tape.stages) != params.n_stages:
        raise ValueError("tape and params disagree on stage count")
    m = mask.mask.astype(np.float64)
    grads = _zero_grads(params)
    d_y = np.zeros_like(tape.x_rec) if compute_d_y else None

    # output layer: one more data-consistency update on (v_N, beta_N)
    cot = _data(d_x_final).astype(np.complex128, copy=False)
    rho_fin = params.stages[-1].rho
    d_rho, g = _recon_pullback(cot, tape.final_k_rhs, tape.final_k_fvb, m, rho_fin, d_y)
    grads.stages[-1].d_rho += d_rho
    cot_v = g.copy()
    cot_beta = -g

    for n in range(params.n_stages - 1, -1, -1):
        st = params.stages[n]
        sg = grads.stages[n]
        stape = tape.stages[n]

        # multiplier update: beta_n = beta_prev + eta * (x_n - v_n)
        sg.d_eta += _rdot(cot_beta, stape.x_minus_v)
        cot_x = st.eta * cot_beta
        cot_v = cot_v - st.eta * cot_beta
        # the identity term of beta_n w.r.t. beta_prev leaves cot_beta in place

        for k in range(len(st.substages) - 1, -1, -1):
            sub = st.substages[k]
            ssg = sg.substages[k]
            stk = stape.substages[k]
            ssg.d_mu1 += _rdot(cot_v, stk.v_in)
            ssg.d_mu2 += _rdot(cot_v, stape.xpb)
            cot_x = cot_x + sub.mu2 * cot_v
            cot_beta = cot_beta + sub.mu2 * cot_v
            cot_v_in = sub.mu1 * cot_v
            if stk.c1 is not None:
                cot_c2 = -cot_v
                dk2, db2, cot_h = _conv_combine_grads(sub.conv2, stk.h, cot_c2)
                for i, dk in enumerate(dk2):
                    ssg.d_conv2_kernels[i] += dk
                ssg.d_conv2_biases += db2
                ssg.d_q += plf_value_grads(sub.plf, stk.plf_re, cot_h.real)
                ssg.d_q += plf_value_grads(sub.plf, stk.plf_im, cot_h.imag)
                cot_c1 = cot_h.real * stk.plf_re.d_input + 1j * (
                    cot_h.imag * stk.plf_im.d_input
                )
                dk1, db1 = _conv_apply_grads(sub.conv1, stk.v_in, cot_c1)
                for i, dk in enumerate(dk1):
                    ssg.d_conv1_kernels[i] += dk
                ssg.d_conv1_biases += db1
                cot_v_in = cot_v_in + conv_adjoint(sub.conv1, cot_c1)
            cot_v = cot_v_in

        d_rho, g = _recon_pullback(cot_x, stape.k_rhs, stape.k_fvb, m, st.rho, d_y)
        sg.d_rho += d_rho
        cot_v = cot_v + g
        cot_beta = cot_beta - g

    for st, sg in zip(params.stages, grads.stages):
        sg.d_log_rho = sg.d_rho * st.rho
    return grads, d_y


@dataclass
class FiniteDiffReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    entries: list  # (name, flat_index, analytic, numeric, rel_err)
    max_rel_err: float
    mean_rel_err: float
    warnings: list

    def __str__(self):
        lines = [
            f"{name}[{idx}]: analytic={a:+.6e} numeric={num:+.6e} rel={r:.2e}"
            for name, idx, a, num, r in self.entries
        ]
        lines.append(f"max rel err {self.max_rel_err:.3e}, mean {self.mean_rel_err:.3e}")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)


def _rel_err(a: float, b: float, atol: float = 1e-12) -> float:
    scale = max(abs(a), abs(b))
    if scale < atol:
        return 0.0
    return abs(a - b) / scale


def finite_diff_check(
    y: KSpaceData,
    mask: SamplingMask,
    x_gt,
    params: LanternParams,
    selector=None,
    h: float = 1e-5,
) -> FiniteDiffReport:
    """Central-difference verification of :func:`backward` on selected scalars.

    ``selector`` is an iterable of flat-vector indices and/or parameter names
    (a name selects every entry of that tensor); ``None`` checks everything.
    Raises if the loss is non-finite at a perturbed point.
    """
    from .network import forward

    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    flat = params.pack()
    names, total = params.names_and_offsets()
    name_map = {name: (off, int(np.prod(shape)) if shape else 1) for name, off, shape in names}

    indices: list[tuple[str, int]] = []
    if selector is None:
        for name, off, shape in names:
            for j in range(int(np.prod(shape)) if shape else 1):
                indices.append((name, off + j))
    else:
        for sel in selector:
            if isinstance(sel, str):
                off, size = name_map[sel]
                indices.extend((sel, off + j) for j in range(size))
            else:
                idx = int(sel)
                owner = next(
                    name for name, off, shape in reversed(names) if off <= idx
                )
                indices.append((owner, idx))

    x_rec, tape = forward(y, mask, params)
    loss0, d_x = loss_and_grad_x(x_rec, x_gt)
    grads, _ = backward(tape, y, mask, params, d_x)
    analytic = grads.pack()

    warnings = []
    if h < 1e-9:
        warnings.append(
            f"step h={h:g} is likely cancellation-dominated in 64-bit arithmetic"
        )

    entries = []
    for name, idx in indices:
        for sign in (+1.0, -1.0):
            vec = flat.copy()
            vec[idx] += sign * h
            p = params.unpack(vec)
            x_p, _ = forward(y, mask, p)
            e = loss_and_grad_x(x_p, x_gt)[0]
            if not np.isfinite(e):
                raise FloatingPointError(
                    f"non-finite loss at perturbed parameter {name}[{idx}]"
                )
            if sign > 0:
                e_plus = e
            else:
                e_minus = e
        numeric = (e_plus - e_minus) / (2 * h)
        if abs(e_plus - e_minus) < 16 * np.finfo(float).eps * max(abs(loss0), 1e-300):
            warnings.append(f"{name}[{idx}]: difference below rounding floor")
        entries.append((name, idx, float(analytic[idx]), numeric, _rel_err(analytic[idx], numeric)))

    rel = [e[4] for e in entries]
    return FiniteDiffReport(
        entries=entries,
        max_rel_err=max(rel) if rel else 0.0,
        mean_rel_err=float(np.mean(rel)) if rel else 0.0,
        warnings=warnings,
    )
