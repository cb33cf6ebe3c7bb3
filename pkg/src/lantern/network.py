"""The unrolled N-stage reconstruction network: forward pass with full tape.

Each stage runs the closed-form data-consistency update, K prior substages
(filter bank, pointwise nonlinearity, collapsing filter bank, weighted
addition), and a multiplier update.  The chain starts from v = beta = 0, so
the first stage's degenerate layer forms fall out of the general formulas
with zero inputs; the network output is one more data-consistency update
consuming the final v and beta (reusing the last stage's rho).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data_model import DynamicImage, KSpaceData
from .sampling import SamplingMask, fft2c, ifft2c
from .transforms import (
    FilterBank,
    PiecewiseLinear,
    PlfEval,
    conv_apply,
    conv_combine,
    identity_plf,
    init_dct_only,
    init_dct_tv,
    init_random_gaussian,
    plf_eval_and_grads,
)

__all__ = [
    "SubstageParams",
    "StageParams",
    "LanternParams",
    "ForwardTape",
    "forward",
    "default_params",
    "INIT_MODES",
]

INIT_MODES = ("dct_tv", "dct", "gauss")

PAPER_RHO = 0.2
PAPER_ETA = 1.8
PAPER_MU2 = 0.06          # rho * step size 0.3
PAPER_MU1 = 1.0 - PAPER_MU2
PAPER_STAGES = 13
PAPER_SUBSTAGES = 1
CONV2_INIT_SCALE = 0.018  # nominal regularization weight 0.06 times step size 0.3


@dataclass
class SubstageParams:
    """Learnables of one prior substage: addition weights, two banks, the PLF."""

    mu1: float
    mu2: float
    conv1: FilterBank
    conv2: FilterBank
    plf: PiecewiseLinear

    def __post_init__(self):
        if self.conv1.L != self.conv2.L:
            raise ValueError(
                f"conv1 has {self.conv1.L} kernels but conv2 has {self.conv2.L}"
            )


@dataclass
class StageParams:
    """Per-stage learnables: log rho (kept in log form so rho stays positive),
    the multiplier step, and K substages."""

    log_rho: float
    eta: float
    substages: list

    @property
    def rho(self) -> float:
        return float(np.exp(self.log_rho))


@dataclass
class LanternParams:
    """The full learnable parameter set: N stages of K substages each."""

    stages: list

    def __post_init__(self):
        if len(self.stages) < 1:
            raise ValueError("need at least one stage")

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    @property
    def n_substages(self) -> int:
        return len(self.stages[0].substages)

    # -- flat float64 view, used by the optimizer, checkpoints and the
    #    finite-difference harness.  Order: per stage log_rho, eta, then per
    #    substage mu1, mu2, conv1 kernels + biases, conv2 kernels + biases,
    #    plf values q.

    def named_tensors(self):
        for n, st in enumerate(self.stages):
            yield f"stage{n:02d}.log_rho", np.array([st.log_rho])
            yield f"stage{n:02d}.eta", np.array([st.eta])
            for k, sub in enumerate(st.substages):
                pre = f"stage{n:02d}.sub{k:02d}"
                yield f"{pre}.mu1", np.array([sub.mu1])
                yield f"{pre}.mu2", np.array([sub.mu2])
                for i, kern in enumerate(sub.conv1.kernels):
                    yield f"{pre}.conv1.k{i:02d}", kern
                yield f"{pre}.conv1.bias", sub.conv1.biases
                for i, kern in enumerate(sub.conv2.kernels):
                    yield f"{pre}.conv2.k{i:02d}", kern
                yield f"{pre}.conv2.bias", sub.conv2.biases
                yield f"{pre}.plf.q", sub.plf.values

    def pack(self) -> np.ndarray:
        return np.concatenate([t.ravel() for _, t in self.named_tensors()])

    def names_and_offsets(self):
        out = []
        off = 0
        for name, t in self.named_tensors():
            out.append((name, off, t.shape))
            off += t.size
        return out, off

    def unpack(self, vec: np.ndarray) -> "LanternParams":
        vec = np.asarray(vec, dtype=np.float64)
        stages = []
        off = 0

        def take(n):
            nonlocal off
            chunk = vec[off : off + n]
            off += n
            return chunk

        for st in self.stages:
            log_rho = float(take(1)[0])
            eta = float(take(1)[0])
            subs = []
            for sub in st.substages:
                mu1 = float(take(1)[0])
                mu2 = float(take(1)[0])
                k1 = tuple(take(k.size).reshape(k.shape) for k in sub.conv1.kernels)
                b1 = take(sub.conv1.L)
                k2 = tuple(take(k.size).reshape(k.shape) for k in sub.conv2.kernels)
                b2 = take(sub.conv2.L)
                q = take(sub.plf.n_points)
                subs.append(
                    SubstageParams(
                        mu1,
                        mu2,
                        FilterBank(k1, b1),
                        FilterBank(k2, b2),
                        PiecewiseLinear(sub.plf.positions, q),
                    )
                )
            stages.append(StageParams(log_rho, eta, subs))
        if off != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {off}")
        return LanternParams(stages)


def default_params(
    nx: int,
    ny: int,
    nt: int,
    init_mode: str = "dct_tv",
    seed: int = 0,
    n_stages: int = PAPER_STAGES,
    n_substages: int = PAPER_SUBSTAGES,
    plf_points: int = 101,
    gauss_sigma: float = 1.0 / 3.0,
) -> LanternParams:
    """Parameter set at the published initialization values.

    Every stage gets rho = 0.2 and eta = 1.8; every substage gets
    mu1 = 0.94, mu2 = 0.06, an identity PLF, and filter banks chosen by
    ``init_mode``: ``"dct_tv"`` (8 spatial DCT atoms + temporal difference),
    ``"dct"`` (8 spatial atoms only) or ``"gauss"`` (9 random kernels whose
    expected Frobenius norm matches the unit-norm DCT atoms).  The second
    bank starts as the correlation-adjoint of the first, scaled down so the
    initial prior step is gentle.
    """
    if min(nx, ny) < 3 or nt < 1:
        raise ValueError(f"invalid dims ({nx}, {ny}, {nt})")
    if init_mode not in INIT_MODES:
        raise ValueError(f"init_mode must be one of {INIT_MODES}, got {init_mode!r}")
    if init_mode == "dct_tv" and nt < 3:
        raise ValueError("the temporal kernel pair needs nt >= 3")
    stages = []
    for n in range(n_stages):
        subs = []
        for k in range(n_substages):
            if init_mode == "dct_tv":
                conv1 = init_dct_tv(8, 3, 3)
            elif init_mode == "dct":
                conv1 = init_dct_only(8, 3, 3)
            else:
                conv1 = init_random_gaussian(
                    9, 3, 3, 1, gauss_sigma, seed=seed * 10007 + n * 101 + k
                )
            conv2 = conv1.adjoint_bank(scale=CONV2_INIT_SCALE)
            subs.append(
                SubstageParams(
                    PAPER_MU1, PAPER_MU2, conv1, conv2, identity_plf(plf_points)
                )
            )
        stages.append(StageParams(float(np.log(PAPER_RHO)), PAPER_ETA, subs))
    return LanternParams(stages)


# --- forward pass -----------------------------------------------------------


@dataclass
class SubstageTape:
    """Intermediates of one prior substage, complete for the backward pass."""

    v_in: np.ndarray
    v_out: np.ndarray
    c1: np.ndarray | None = None
    h: np.ndarray | None = None
    plf_re: PlfEval | None = None
    plf_im: PlfEval | None = None


@dataclass
class StageTape:
    x: np.ndarray
    k_rhs: np.ndarray      # k-space numerator of the data-consistency update
    k_fvb: np.ndarray      # F(v_prev - beta_prev)
    beta_prev: np.ndarray
    xpb: np.ndarray        # x + beta_prev
    substages: list = field(default_factory=list)
    beta: np.ndarray | None = None
    x_minus_v: np.ndarray | None = None


@dataclass
class ForwardTape:
    """Every intermediate of one forward pass, in execution order."""

    stages: list
    final_k_rhs: np.ndarray
    final_k_fvb: np.ndarray
    x_rec: np.ndarray


def _recon(y: np.ndarray, m: np.ndarray, v: np.ndarray, beta: np.ndarray, rho: float):
    k_fvb = fft2c(v - beta)
    k_rhs = y + rho * k_fvb
    x = ifft2c(k_rhs / (m + rho))
    return x, k_rhs, k_fvb


def forward(
    y: KSpaceData,
    mask: SamplingMask,
    params: LanternParams,
) -> tuple[DynamicImage, ForwardTape]:
    """Run the unrolled network on one undersampled k-space volume.

    Deterministic and pure; returns the reconstruction together with the
    complete tape of intermediates consumed by the backward pass.
    """
    if y.shape != mask.shape:
        raise ValueError(f"k-space shape {y.shape} does not match mask shape {mask.shape}")
    ydat = np.asarray(y.data, dtype=np.complex128)
    if np.any(ydat[mask.mask == 0] != 0):
        raise ValueError("k-space data is nonzero off the mask support")
    m = mask.mask.astype(np.float64)
    zeros = np.zeros_like(ydat)
    v = zeros
    beta = zeros
    stage_tapes = []
    for n, st in enumerate(params.stages):
        rho = st.rho
        x, k_rhs, k_fvb = _recon(ydat, m, v, beta, rho)
        stape = StageTape(x=x, k_rhs=k_rhs, k_fvb=k_fvb, beta_prev=beta, xpb=x + beta)
        for k, sub in enumerate(st.substages):
            v_in = v
            if n == 0 and k == 0:
                c2 = zeros
                stape.substages.append(SubstageTape(v_in=v_in, v_out=None))
            else:
                c1 = conv_apply(sub.conv1, v_in)
                ev_re = plf_eval_and_grads(sub.plf, c1.real)
                ev_im = plf_eval_and_grads(sub.plf, c1.imag)
                h = ev_re.value + 1j * ev_im.value
                c2 = conv_combine(sub.conv2, h)
                stape.substages.append(
                    SubstageTape(v_in=v_in, v_out=None, c1=c1, h=h, plf_re=ev_re, plf_im=ev_im)
                )
            v = sub.mu1 * v_in + sub.mu2 * stape.xpb - c2
            stape.substages[-1].v_out = v
        beta = beta + st.eta * (x - v)
        stape.beta = beta
        stape.x_minus_v = x - v
        stage_tapes.append(stape)
    rho_final = params.stages[-1].rho
    x_rec, k_rhs_f, k_fvb_f = _recon(ydat, m, v, beta, rho_final)
    tape = ForwardTape(
        stages=stage_tapes, final_k_rhs=k_rhs_f, final_k_fvb=k_fvb_f, x_rec=x_rec
    )
    return DynamicImage(x_rec), tape
