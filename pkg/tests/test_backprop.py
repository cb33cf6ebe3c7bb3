import numpy as np
import pytest

import lantern.network as network
from lantern.backprop import (
    backward,
    finite_diff_check,
    loss_and_grad_x,
)
from lantern.data_model import DynamicImage
from lantern.network import (
    LanternParams,
    StageParams,
    SubstageParams,
    default_params,
    forward,
)
from lantern.phantom import PhantomConfig, generate_dynamic_phantom
from lantern.sampling import forward_undersample, full_mask, make_mask_1d_random
from lantern.transforms import FilterBank, PiecewiseLinear, identity_plf


def _small_bank(rng, n_spatial=2, temporal=True, scale=0.3):
    kernels = [scale * rng.standard_normal((3, 3, 1)) for _ in range(n_spatial)]
    if temporal:
        kernels.append(scale * rng.standard_normal((1, 1, 2)))
    return FilterBank(tuple(kernels), 0.05 * rng.standard_normal(len(kernels)))


def _custom_params(rng, n_stages, n_substages, plf_points=5):
    """Randomized parameters with wide segments so test points sit off the knots."""
    stages = []
    for _ in range(n_stages):
        subs = []
        for _ in range(n_substages):
            p = np.linspace(-1.0, 1.0, plf_points)
            q = p + 0.05 * rng.standard_normal(plf_points)
            subs.append(
                SubstageParams(
                    mu1=0.94 + 0.05 * rng.standard_normal(),
                    mu2=0.06 + 0.02 * rng.standard_normal(),
                    conv1=_small_bank(rng),
                    conv2=_small_bank(rng),
                    plf=PiecewiseLinear(p, q),
                )
            )
        stages.append(
            StageParams(
                log_rho=float(np.log(0.2) + 0.1 * rng.standard_normal()),
                eta=1.8 + 0.1 * rng.standard_normal(),
                substages=subs,
            )
        )
    return LanternParams(stages)


def _instance(nx, ny, nt, seed):
    gt = generate_dynamic_phantom(PhantomConfig(nx=nx, ny=ny, nt=nt, n_ellipses=3, seed=seed))
    mask = make_mask_1d_random(nx, ny, nt, 2.0, 2, seed=seed + 1)
    y = forward_undersample(gt, mask)
    return gt, mask, y


# --- loss layer ---------------------------------------------------------------


def test_loss_exact_match():
    gt, _, _ = _instance(8, 8, 2, 1)
    loss, grad = loss_and_grad_x(gt, gt)
    assert loss == 0.0
    assert np.all(grad == 0)


def test_loss_scaling_identity():
    gt, _, _ = _instance(8, 8, 2, 2)
    doubled = DynamicImage(2.0 * gt.data)
    loss, _ = loss_and_grad_x(doubled, gt)
    assert abs(loss - 1.0) < 1e-12


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    gt = rng.standard_normal((6, 6, 2)) + 1j * rng.standard_normal((6, 6, 2))
    x = rng.standard_normal((6, 6, 2)) + 1j * rng.standard_normal((6, 6, 2))
    loss, grad = loss_and_grad_x(x, gt)
    h = 1e-6
    for flat_idx in [0, 13, 37]:
        for channel in (1.0, 1.0j):
            e = np.zeros_like(x)
            e.flat[flat_idx] = channel
            num = (
                loss_and_grad_x(x + h * e, gt)[0] - loss_and_grad_x(x - h * e, gt)[0]
            ) / (2 * h)
            ana = grad.flat[flat_idx].real if channel == 1.0 else grad.flat[flat_idx].imag
            assert abs(num - ana) / max(abs(num), 1e-12) < 1e-6


def test_loss_rejects_zero_reference():
    x = DynamicImage(np.ones((4, 4, 2)))
    zero = np.zeros((4, 4, 2), dtype=complex)
    with pytest.raises(ValueError):
        loss_and_grad_x(x, zero)


# --- backward pass --------------------------------------------------------------


def test_zero_cotangent_gives_zero_grads():
    gt, mask, y = _instance(8, 8, 4, 4)
    p = default_params(8, 8, 4, n_stages=2, plf_points=5)
    _, tape = forward(y, mask, p)
    grads, _ = backward(tape, y, mask, p, np.zeros((8, 8, 4), dtype=complex))
    assert np.all(grads.pack() == 0)


def test_every_parameter_class_on_8x8x2():
    # N=1, K=1 on an 8x8x2 instance: rho, eta, mu1, mu2, kernel taps, biases
    # and PLF values all match central finite differences
    rng = np.random.default_rng(5)
    gt, mask, y = _instance(8, 8, 2, 6)
    p = _custom_params(rng, n_stages=2, n_substages=1)
    report = finite_diff_check(y, mask, gt, p, h=1e-5)
    assert report.max_rel_err < 1e-4
    checked = {name.split(".")[-1] for name, *_ in report.entries}
    assert {"log_rho", "eta", "mu1", "mu2", "bias", "q"} <= checked
    assert any(name.startswith("k") for name in checked)


def test_directional_derivatives_n3_k2():
    rng = np.random.default_rng(7)
    gt, mask, y = _instance(8, 8, 4, 8)
    p = _custom_params(rng, n_stages=3, n_substages=2)
    flat = p.pack()
    x_rec, tape = forward(y, mask, p)
    _, d_x = loss_and_grad_x(x_rec, gt)
    grads, _ = backward(tape, y, mask, p, d_x)
    gv = grads.pack()
    h = 1e-5
    for trial in range(10):
        u = rng.standard_normal(flat.size)
        u /= np.linalg.norm(u)
        e_plus = loss_and_grad_x(forward(y, mask, p.unpack(flat + h * u))[0], gt)[0]
        e_minus = loss_and_grad_x(forward(y, mask, p.unpack(flat - h * u))[0], gt)[0]
        num = (e_plus - e_minus) / (2 * h)
        ana = float(gv @ u)
        assert abs(num - ana) / max(abs(num), abs(ana)) < 1e-4


def test_reverse_pass_is_linear_in_cotangent():
    rng = np.random.default_rng(9)
    gt, mask, y = _instance(8, 8, 4, 10)
    p = _custom_params(rng, n_stages=2, n_substages=1)
    _, tape = forward(y, mask, p)
    g1 = rng.standard_normal((8, 8, 4)) + 1j * rng.standard_normal((8, 8, 4))
    g2 = rng.standard_normal((8, 8, 4)) + 1j * rng.standard_normal((8, 8, 4))
    a, b = 0.7, -1.3
    combo = backward(tape, y, mask, p, a * g1 + b * g2)[0].pack()
    separate = a * backward(tape, y, mask, p, g1)[0].pack() + b * backward(
        tape, y, mask, p, g2
    )[0].pack()
    assert np.max(np.abs(combo - separate)) < 1e-10 * max(1.0, np.max(np.abs(combo)))


def test_backward_reads_only_the_tape(monkeypatch):
    gt, mask, y = _instance(8, 8, 4, 11)
    p = default_params(8, 8, 4, n_stages=2, plf_points=5)
    x_rec, tape = forward(y, mask, p)
    _, d_x = loss_and_grad_x(x_rec, gt)

    def boom(*args, **kwargs):
        raise AssertionError("backward re-ran a forward layer")

    monkeypatch.setattr(network, "conv_apply", boom)
    monkeypatch.setattr(network, "conv_combine", boom)
    monkeypatch.setattr(network, "plf_eval_and_grads", boom)
    monkeypatch.setattr("lantern.sampling.recon_x_update", boom)
    grads, _ = backward(tape, y, mask, p, d_x)
    assert np.isfinite(grads.pack()).all()


def test_gradient_zero_at_ground_truth():
    gt, mask, y = _instance(8, 8, 2, 12)
    _, grad = loss_and_grad_x(gt, gt)
    assert np.all(grad == 0)


def test_unused_first_substage_filters_have_zero_gradient():
    # with K=1 the very first substage never evaluates its banks
    rng = np.random.default_rng(13)
    gt, mask, y = _instance(8, 8, 2, 14)
    p = _custom_params(rng, n_stages=2, n_substages=1)
    x_rec, tape = forward(y, mask, p)
    _, d_x = loss_and_grad_x(x_rec, gt)
    grads, _ = backward(tape, y, mask, p, d_x)
    first = grads.stages[0].substages[0]
    assert all(np.all(k == 0) for k in first.d_conv1_kernels)
    assert np.all(first.d_q == 0)
    assert first.d_mu1 == 0.0  # multiplies the zero initial v
    second = grads.stages[1].substages[0]
    assert any(np.any(k != 0) for k in second.d_conv1_kernels)


# --- finite-difference harness ---------------------------------------------------


def test_finite_diff_exact_for_affine_configuration():
    # mu2 enters affinely and the ground truth is parallel to the response,
    # so the loss is affine in mu2 and central differences are exact
    gt, _, _ = _instance(8, 8, 2, 15)
    fm = full_mask(8, 8, 2)
    y = forward_undersample(gt, fm)
    p = default_params(8, 8, 2, init_mode="dct", n_stages=1, plf_points=5)
    sub = p.stages[0].substages[0]
    zero_bank = FilterBank(
        tuple(np.zeros_like(k) for k in sub.conv2.kernels), np.zeros(sub.conv2.L)
    )
    p.stages[0].substages[0] = SubstageParams(0.0, 0.5, sub.conv1, zero_bank, sub.plf)
    p.stages[0].eta = 0.0
    x1 = forward(y, fm, default_params(8, 8, 2, init_mode="dct", n_stages=1, plf_points=5))[1].stages[0].x
    target = DynamicImage(0.5 * x1)
    report = finite_diff_check(y, fm, target, p, selector=["stage00.sub00.mu2"], h=1e-5)
    assert report.max_rel_err < 1e-10


def test_finite_diff_on_default_13_stage_net():
    gt, mask, y = _instance(16, 16, 4, 16)
    p = default_params(16, 16, 4)
    report = finite_diff_check(y, mask, gt, p, selector=["stage07.log_rho"])
    assert report.max_rel_err < 1e-4


def test_finite_diff_tiny_step_warns():
    gt, mask, y = _instance(8, 8, 2, 17)
    p = default_params(8, 8, 2, init_mode="dct", n_stages=1, plf_points=5)
    report = finite_diff_check(y, mask, gt, p, selector=["stage00.eta"], h=1e-12)
    assert any("cancellation" in w for w in report.warnings)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_raises_on_nonfinite_loss():
    gt, mask, y = _instance(8, 8, 2, 18)
    p = default_params(8, 8, 2, init_mode="dct", n_stages=2, plf_points=5)
    flat = p.pack()
    names = dict((name, off) for name, off, _ in p.names_and_offsets()[0])
    # a huge kernel tap makes the reconstruction overflow the loss
    flat[names["stage01.sub00.conv1.k00"]] = 1e160
    flat[names["stage01.sub00.conv2.k00"]] = 1e160
    bad = p.unpack(flat)
    with pytest.raises((FloatingPointError, ValueError)):
        finite_diff_check(y, mask, gt, bad, selector=["stage01.eta"])


def test_finite_diff_rejects_nonpositive_h():
    gt, mask, y = _instance(8, 8, 2, 19)
    p = default_params(8, 8, 2, init_mode="dct", n_stages=1)
    with pytest.raises(ValueError):
        finite_diff_check(y, mask, gt, p, h=0.0)
