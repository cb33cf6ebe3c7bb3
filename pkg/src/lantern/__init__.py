"""Unrolled-ADMM analysis-transform reconstruction for dynamic MRI."""

from .backprop import ParamGrads, backward, finite_diff_check, loss_and_grad_x
from .data_model import Dataset, DynamicImage, KSpaceData, load_volume, save_volume
from .metrics import MetricReport, compute_report, hfen, nmse, psnr, ssim
from .network import LanternParams, StageParams, SubstageParams, default_params, forward
from .phantom import MaskSpec, PhantomConfig, build_dataset, generate_dynamic_phantom
from .sampling import (
    SamplingMask,
    forward_undersample,
    full_mask,
    load_mask,
    make_mask_1d_random,
    make_mask_radial,
    recon_x_update,
    save_mask,
    zero_filled_recon,
)
from .training import TrainConfig, TrainReport, load_checkpoint, save_checkpoint, train
from .transforms import (
    FilterBank,
    PiecewiseLinear,
    conv_adjoint,
    conv_apply,
    conv_combine,
    init_dct_only,
    init_dct_tv,
    init_random_gaussian,
    plf_eval_and_grads,
)

__version__ = "0.1.0"
