"""The full finite-difference verification suite.

Every differentiable operation in the stack (core ops, the view
synthesis warp, each training loss, and the networks via parameter
probes) is checked against float64 central differences on several random
instances. Shared by the `gradcheck` CLI command and the acceptance
tests.
"""

import numpy as np

from . import diffcore as dc
from . import losses as L
from .diffcore import Tensor, grad_check
from .geometry import Intrinsics, euler6_to_transform, surface_normals, warp_image
from .networks import MultiTaskModel, ModelConfig, inv_depth

_K8 = Intrinsics(7.0, 7.0, 4.0, 4.0, 8, 8)


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape))


def _weighted_sum(rng, shape):
    w = dc.constant(rng.normal(size=shape))
    return lambda t: dc.tsum(t * w)


def _checks(rng):
    """Yield (name, f, x) triples; f is scalar-valued, x float64."""
    sq = (8, 8)
    img = (1, 3, 8, 8)

    # elementwise, away from kinks where the op is only sub-differentiable
    b_pos = dc.constant(rng.uniform(0.5, 2.0, size=sq))
    b_any = dc.constant(rng.normal(size=sq))
    yield "add", lambda t: dc.tsum((t + b_any) * b_pos), _rand(rng, sq)
    yield "sub", lambda t: dc.tsum((t - b_any) * b_pos), _rand(rng, sq)
    yield "mul", lambda t: dc.tsum(t * b_any), _rand(rng, sq)
    yield "div", lambda t: dc.tsum(t / b_pos), _rand(rng, sq)
    yield "div_den", lambda t: dc.tsum(b_any / t), _rand(rng, sq, 0.5, 2.0)
    yield "neg", lambda t: dc.tsum(dc.neg(t) * b_any), _rand(rng, sq)
    yield "abs", lambda t: dc.tsum(dc.absolute(t)), _rand(rng, sq, 0.2, 1.0)
    yield "log", lambda t: dc.tsum(dc.log(t)), _rand(rng, sq, 0.5, 3.0)
    yield "exp", lambda t: dc.tsum(dc.exp(t) * b_any), _rand(rng, sq)
    yield "sqrt", lambda t: dc.tsum(dc.sqrt(t)), _rand(rng, sq, 0.5, 3.0)
    yield "sin", lambda t: dc.tsum(dc.sin(t) * b_any), _rand(rng, sq)
    yield "cos", lambda t: dc.tsum(dc.cos(t) * b_any), _rand(rng, sq)
    yield "sigmoid", lambda t: dc.tsum(dc.sigmoid(t) * b_any), _rand(rng, sq)
    yield "elu", lambda t: dc.tsum(dc.elu(t) * b_any), _rand(rng, sq)
    yield "relu", lambda t: dc.tsum(dc.relu(t) * b_any), _rand(rng, sq, 0.2, 1.5)
    yield "clamp", lambda t: dc.tsum(dc.clamp(t, -0.5, 0.5) * b_any), _rand(rng, sq, -0.4, 0.4)
    yield "minimum", lambda t: dc.tsum(dc.minimum(t, b_any)), _rand(rng, sq)
    yield "maximum", lambda t: dc.tsum(dc.maximum(t, b_any)), _rand(rng, sq)
    w_bcast = dc.constant(rng.normal(size=(8, 8)))
    yield "broadcast", lambda t: dc.tsum(t * w_bcast), _rand(rng, (8, 1))

    # reductions and shape plumbing
    w_row = dc.constant(rng.normal(size=(8,)))
    yield "sum_axis", lambda t: dc.tsum(dc.tsum(t, axis=1) * w_row), _rand(rng, sq)
    yield "mean", lambda t: dc.tmean(t * b_any), _rand(rng, sq)
    yield "min_over_axis", lambda t: dc.tsum(dc.amin(t, axis=0)), _rand(rng, sq)
    w_take = dc.constant(rng.normal(size=(3, 14)))
    yield "reshape_take", lambda t: dc.tsum(dc.reshape(t, (4, 16))[1:, 2:] * w_take), _rand(rng, sq)
    w_stack = dc.constant(rng.normal(size=(2, 16, 8)))
    yield "concat_stack", lambda t: dc.tsum(
        dc.stack([dc.concat([t, t], 0), dc.concat([t, t], 0)], 0) * w_stack
    ), _rand(rng, sq)

    # structured kernels
    wconv = dc.constant(rng.normal(size=(4, 3, 3, 3)))
    bconv = dc.constant(rng.normal(size=(4,)))
    wsum = dc.constant(rng.normal(size=(1, 4, 8, 8)))
    yield "conv2d_input", lambda t: dc.tsum(dc.conv2d(t, wconv, bconv, 1, 1) * wsum), _rand(rng, img)
    ximg = dc.constant(rng.uniform(0, 1, size=img))
    yield "conv2d_weight", lambda t: dc.tsum(dc.conv2d(ximg, t, bconv, 1, 1) * wsum), Tensor(
        rng.normal(size=(4, 3, 3, 3))
    )
    yield "conv2d_bias", lambda t: dc.tsum(dc.conv2d(ximg, wconv, t, 1, 1) * wsum), Tensor(
        rng.normal(size=(4,))
    )
    w12 = dc.constant(rng.normal(size=(1, 3, 12, 12)))
    yield "bilinear_resize_up", lambda t: dc.tsum(dc.bilinear_resize(t, 12, 12) * w12), _rand(rng, img)
    w5 = dc.constant(rng.normal(size=(1, 3, 5, 5)))
    yield "bilinear_resize_down", lambda t: dc.tsum(dc.bilinear_resize(t, 5, 5) * w5), _rand(rng, img)
    wp = dc.constant(rng.normal(size=img))
    yield "avg_pool3x3", lambda t: dc.tsum(dc.avg_pool3x3(t) * wp), _rand(rng, img)

    # grid sample: interior points, away from the integer lattice where the
    # sampler is only sub-differentiable
    base_u, base_v = np.meshgrid(np.arange(8.0), np.arange(8.0))
    jitter = rng.uniform(0.2, 0.8, size=(1, 8, 8, 2))
    grid0 = np.clip(
        np.stack([base_u, base_v], -1)[None] * 0.8 + jitter, 0.25, 6.6
    )
    yield "grid_sample_input", lambda t: dc.tsum(
        dc.grid_sample(t, dc.constant(grid0))[0] * wp
    ), _rand(rng, img, 0.0, 1.0)
    yield "grid_sample_grid", lambda t: dc.tsum(
        dc.grid_sample(ximg, t)[0] * wp
    ), Tensor(grid0.copy())

    labels = rng.integers(0, 3, size=(1, 8, 8))
    labels[0, 0, 0] = 255
    wce = dc.constant(rng.normal(size=(1, 8, 8)))
    yield "softmax_ce_map", lambda t: dc.tsum(
        dc.softmax_cross_entropy_map(t, labels)[0] * wce
    ), Tensor(rng.normal(size=(1, 3, 8, 8)))

    # gradient reversal: with lam=-1 the backward rule equals the true
    # Jacobian (identity), so central differences apply; the sign contract
    # itself is asserted exactly elsewhere.
    yield "gradient_reversal", lambda t: dc.tsum(
        dc.gradient_reversal(t, -1.0) * b_any
    ), _rand(rng, sq)

    # geometry
    depth0 = Tensor(rng.uniform(4.0, 8.0, size=(1, 1, 8, 8)))
    pose_const = [euler6_to_transform([0.05, 0.02, -0.08, 0.01, -0.015, 0.02])]
    refc = dc.constant(rng.uniform(0, 1, size=img))
    wimg = dc.constant(rng.normal(size=img))
    yield "warp_image_depth", lambda t: dc.tsum(
        warp_image(refc, t, pose_const, _K8)[0] * wimg
    ), Tensor(depth0.data.copy())
    pose0 = np.array([[0.05, 0.02, -0.08, 0.01, -0.015, 0.02]])
    yield "warp_image_pose", lambda t: dc.tsum(
        warp_image(refc, dc.constant(depth0.data), t, _K8)[0] * wimg
    ), Tensor(pose0.copy())
    yield "warp_image_ref", lambda t: dc.tsum(
        warp_image(t, dc.constant(depth0.data), pose_const, _K8)[0] * wimg
    ), _rand(rng, img, 0.0, 1.0)
    wn = dc.constant(rng.normal(size=(1, 3, 8, 8)))
    yield "surface_normals", lambda t: dc.tsum(surface_normals(t, _K8)[0] * wn), Tensor(
        depth0.data.copy()
    )
    yield "inv_depth", lambda t: dc.tsum(inv_depth(t, 0.1, 100.0) * b_any.reshape(1, 1, 8, 8)), _rand(rng, (1, 1, 8, 8))

    # losses
    a_img = dc.constant(rng.uniform(0.05, 0.95, size=img))
    wssim = dc.constant(rng.normal(size=img))
    wpe = dc.constant(rng.normal(size=(1, 1, 8, 8)))
    yield "ssim", lambda t: dc.tsum(L.ssim(a_img, t) * wssim), _rand(rng, img, 0.1, 0.9)
    yield "photometric", lambda t: dc.tsum(L.photometric(a_img, t) * wpe), _rand(rng, img, 0.1, 0.9)
    yield "photometric_arg0", lambda t: dc.tsum(L.photometric(t, a_img) * wpe), _rand(rng, img, 0.1, 0.9)
    gt_depth = rng.uniform(2.0, 20.0, size=(1, 1, 8, 8))
    yield "silog", lambda t: L.silog(t, gt_depth, None, 0.85), Tensor(
        rng.uniform(2.0, 20.0, size=(1, 1, 8, 8))
    )
    lab2 = rng.integers(0, 4, size=(1, 8, 8))
    yield "bootstrapped_ce", lambda t: L.bootstrapped_ce(t, lab2, 0.3), Tensor(
        rng.normal(size=(1, 4, 8, 8))
    )
    yield "pseudo_label_loss", lambda t: L.pseudo_label_loss(t, lab2, 0.3)[0], Tensor(
        rng.normal(size=(1, 4, 8, 8))
    )
    yield "normal_regularization", lambda t: L.normal_regularization(t, gt_depth, _K8), Tensor(
        rng.uniform(4.0, 8.0, size=(1, 1, 8, 8))
    )

    # the full reprojection losses, wrt predicted depth and pose
    tgt = dc.constant(rng.uniform(0.1, 0.9, size=img))
    refs = dc.constant(rng.uniform(0.1, 0.9, size=(2, 3, 8, 8)))
    poses2 = [
        euler6_to_transform([0.04, 0.0, -0.06, 0.005, -0.01, 0.01]),
        euler6_to_transform([-0.04, 0.01, 0.06, -0.008, 0.01, -0.01]),
    ]

    def self_sup_depth(t):
        ctx = L.PhotometricContext(tgt, refs, [t], poses2, _K8)
        return L.self_supervised_loss(ctx)[0]

    yield "self_supervised_depth", self_sup_depth, Tensor(
        rng.uniform(4.0, 8.0, size=(1, 1, 8, 8))
    )

    pose_var0 = np.array(
        [[0.04, 0.0, -0.06, 0.005, -0.01, 0.01], [-0.04, 0.01, 0.06, -0.008, 0.01, -0.01]]
    )

    def self_sup_pose(t):
        ctx = L.PhotometricContext(tgt, refs, [dc.constant(depth0.data)], t, _K8)
        return L.self_supervised_loss(ctx)[0]

    yield "self_supervised_pose", self_sup_pose, Tensor(pose_var0.copy())

    def partial_photo(t):
        ctx = L.PhotometricContext(tgt, refs, [t], poses2, _K8)
        return L.partial_photometric(ctx, gt_depth.copy(), poses2)[0]

    yield "partial_photometric", partial_photo, Tensor(rng.uniform(4.0, 8.0, size=(1, 1, 8, 8)))

    # loss composition linearity
    wts = L.LossWeights()
    part_weights = [dc.constant(rng.normal(size=sq)) for _ in range(6)]

    def composed(t):
        parts = [dc.tmean(t * pw) for pw in part_weights]
        lv = L.compose_virtual(parts[0], parts[1], parts[2], parts[3], wts)
        lr_ = L.compose_real(parts[4], parts[5], wts)
        return L.compose_total(lr_, lv, wts)

    yield "loss_composition", composed, _rand(rng, sq)


def _network_checks(rng):
    """Finite differences through the full network via parameter probes."""
    model = MultiTaskModel(ModelConfig(), seed=11, dtype=np.float64)
    image = dc.constant(rng.uniform(0, 1, size=(1, 3, 32, 32)))
    image_b = dc.constant(rng.uniform(0, 1, size=(1, 3, 32, 32)))
    wd = dc.constant(rng.normal(size=(1, 1, 32, 32)))
    wl = dc.constant(rng.normal(size=(1, model.config.num_classes, 32, 32)))
    wp6 = dc.constant(rng.normal(size=(1, 6)))

    def full_loss():
        pyr = model.encoder_forward(image)
        depths = model.depth_forward(pyr)
        logits = model.semantic_forward(pyr)
        pose = model.pose_forward(image, image_b)
        return (
            dc.tsum(depths[0] * wd)
            + dc.tsum(logits * wl)
            + dc.tsum(pose * wp6) * 100.0
        )

    probes = [
        ("network_enc_bias_l0", model.enc[0], "b"),
        ("network_enc_bias_l4", model.enc[4], "b"),
        ("network_depth_head_w", model.depth_heads[3], "w"),
        ("network_sem_head_b", model.sem_head, "b"),
        ("network_pose_out_b", model.pose_out, "b"),
    ]
    for name, layer, attr in probes:
        def f(t, layer=layer, attr=attr):
            saved = getattr(layer, attr)
            setattr(layer, attr, t)
            try:
                return full_loss()
            finally:
                setattr(layer, attr, saved)

        yield name, f, Tensor(getattr(layer, attr).data.copy())


def run_gradient_suite(n_instances=5, h=1e-6, tol=1e-4, seed=1234, include_networks=True, verbose=False):
    """Run every check on ``n_instances`` random instances.

    Returns (all_passed, results) where results maps check name to the
    worst GradCheckReport observed.
    """
    results = {}
    ok = True
    for inst in range(n_instances):
        rng = np.random.default_rng(np.random.PCG64(seed + inst))
        for name, f, x in _checks(rng):
            rep = grad_check(f, x, h=h, tol=tol)
            prev = results.get(name)
            if prev is None or rep.max_rel_error > prev.max_rel_error:
                results[name] = rep
            if not rep.passed:
                ok = False
                if verbose:
                    print(f"  FAIL {name} (instance {inst}): {rep}")
    if include_networks:
        rng = np.random.default_rng(np.random.PCG64(seed + 999))
        for name, f, x in _network_checks(rng):
            rep = grad_check(f, x, h=h, tol=tol)
            results[name] = rep
            if not rep.passed:
                ok = False
                if verbose:
                    print(f"  FAIL {name}: {rep}")
    return ok, results
