"""Training objectives: photometric self-supervision, supervised depth and
semantics, surface-normal regularization, and their weighted composition.

All losses return scalar tensors and are differentiable end to end; masks
(auto-masking, validity, top-K selection) are computed on detached data
and enter the graph as constants.
"""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .geometry import surface_normals, warp_image

_BIG = 1.0e4  # sentinel photometric error for invalid warp samples
# tie margin for auto-masking: float rounding makes an identity warp differ
# from the raw reference at the ulp level, and the static-scene contract
# needs those ties masked; real photometric improvements are >= 1e-4
_AUTOMASK_EPS = 1e-7


@dataclass
class LossWeights:
    lambda_V: float = 1.0
    lambda_PL: float = 0.01
    lambda_S: float = 0.001
    lambda_N: float = 0.01
    lambda_PP: float = 0.005
    alpha_ssim: float = 0.85
    silog_lambda: float = 0.85
    bootstrap_fraction: float = 0.3

    def __post_init__(self):
        for name in ("lambda_V", "lambda_PL", "lambda_S", "lambda_N", "lambda_PP"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.alpha_ssim <= 1.0:
            raise ValueError("alpha_ssim must lie in [0,1]")
        if not 0.0 <= self.silog_lambda <= 1.0:
            raise ValueError("silog_lambda must lie in [0,1]")
        if not 0.0 < self.bootstrap_fraction <= 1.0:
            raise ValueError("bootstrap_fraction must lie in (0,1]")

    def to_json(self):
        return {k: float(getattr(self, k)) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj):
        return LossWeights(**{k: float(v) for k, v in obj.items()})


@dataclass
class PhotometricContext:
    """One batch of video triplets ready for reprojection losses.

    ``refs`` stacks both temporal neighbors along the batch axis
    ([previous block; next block], so 2B rows), and ``poses`` follows the
    same layout: row i maps points from the camera of target i (mod B)
    into reference i's camera. ``depths`` holds the predicted depth
    pyramid, finest first, each [B,1,h,w] in meters.
    """

    target: Tensor  # [B,3,H,W]
    refs: Tensor  # [2B,3,H,W]
    depths: list  # multi-scale depth tensors
    poses: object  # Tensor [2B,6] or sequence of RigidTransform
    intrinsics: object

    def __post_init__(self):
        if self.refs.shape[0] != 2 * self.target.shape[0]:
            raise ValueError("expected exactly two reference frames per target")


def ssim(a, b):
    """Per-pixel SSIM over a 3x3 mean-pooled window (C1=0.01^2, C2=0.03^2)."""
    if a.shape != b.shape:
        raise dc.ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    c1 = np.asarray(0.01**2, a.dtype)
    c2 = np.asarray(0.03**2, a.dtype)
    m = a.shape[0]
    pooled = dc.avg_pool3x3(dc.concat([a, b, a * a, b * b, a * b], axis=0))
    mu_a = pooled[0 * m : 1 * m]
    mu_b = pooled[1 * m : 2 * m]
    var_a = pooled[2 * m : 3 * m] - mu_a * mu_a
    var_b = pooled[3 * m : 4 * m] - mu_b * mu_b
    cov = pooled[4 * m : 5 * m] - mu_a * mu_b
    num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def photometric(a, b, alpha=0.85):
    """alpha*(1-SSIM)/2 + (1-alpha)*L1, channel-averaged -> [M,1,H,W]."""
    sim = dc.tmean(ssim(a, b), axis=1, keepdims=True)
    l1 = dc.tmean(dc.absolute(a - b), axis=1, keepdims=True)
    return (1.0 - sim) * (alpha * 0.5) + l1 * (1.0 - alpha)


def _upsample_depth(depth, h, w):
    """Upsample a depth map by resampling its reciprocal (inverse depth)."""
    if depth.shape[2:] == (h, w):
        return depth
    inv = 1.0 / depth
    return 1.0 / dc.bilinear_resize(inv, h, w)


def _target_stats(a):
    """Pooled SSIM statistics of a constant image; reused across scales."""
    with dc.no_grad():
        pooled = dc.avg_pool3x3(dc.concat([a, a * a], axis=0))
    m = a.shape[0]
    mu = pooled.data[:m]
    var = pooled.data[m:] - mu * mu
    return a, dc.constant(mu), dc.constant(mu * mu), dc.constant(var)


def _photometric_vs(stats, b, alpha):
    """photometric(a, b) with the a-side statistics precomputed."""
    a, mu_a, mu_a_sq, var_a = stats
    m = b.shape[0]
    c1 = 0.01**2
    c2 = 0.03**2
    pooled = dc.avg_pool3x3(dc.concat([b, b * b, a * b], axis=0))
    mu_b = pooled[:m]
    var_b = pooled[m : 2 * m] - mu_b * mu_b
    cov = pooled[2 * m :] - mu_a * mu_b
    num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)
    den = (mu_a_sq + mu_b * mu_b + c1) * (var_a + var_b + c2)
    sim = dc.tmean(num / den, axis=1, keepdims=True)
    l1 = dc.tmean(dc.absolute(a - b), axis=1, keepdims=True)
    return (1.0 - sim) * (alpha * 0.5) + l1 * (1.0 - alpha)


def min_reprojection_loss(target, refs, depths, poses, K, alpha=0.85):
    """Multi-scale minimum-reprojection photometric loss with auto-masking.

    Per scale: upsample (inverse) depth to full resolution, warp both
    reference frames, take the per-pixel minimum photometric error over
    the two reconstructions, and keep only pixels whose warped error
    strictly beats the unwarped error against the same references.
    Invalid warp samples are masked out. Scales are averaged with equal
    weight; a scale with no kept pixels contributes 0 and is flagged.

    Returns (scalar Tensor, diagnostics dict).
    """
    b = target.shape[0]
    h, w = target.shape[2:]
    dtype = target.dtype
    tgt2 = dc.concat([target.detach(), target.detach()], axis=0)
    stats = _target_stats(tgt2)

    with dc.no_grad():
        pe_id = _photometric_vs(stats, refs.detach(), alpha)
    id_min = pe_id.data.reshape(2, b, 1, h, w).min(axis=0)

    total = None
    kept_fracs = []
    empty_scales = 0
    for depth in depths:
        d_full = _upsample_depth(depth, h, w)
        d2 = dc.concat([d_full, d_full], axis=0)
        warped, valid = warp_image(refs, d2, poses, K)
        pe = _photometric_vs(stats, warped, alpha)
        if valid.all():
            best = dc.minimum(pe[:b], pe[b:])
        else:
            vmask = valid.astype(dtype)
            offs = np.asarray(_BIG, dtype) * (1.0 - vmask)
            pe = pe * dc.constant(vmask) + dc.constant(offs)
            best = dc.minimum(pe[:b], pe[b:])
        keep = (best.data < id_min - _AUTOMASK_EPS) & (best.data < _BIG / 2)
        kept = int(keep.sum())
        kept_fracs.append(kept / keep.size)
        if kept == 0:
            empty_scales += 1
            continue
        scale_loss = dc.tsum(best * dc.constant(keep.astype(dtype))) / kept
        total = scale_loss if total is None else total + scale_loss
    n_scales = len(depths)
    diagnostics = {"kept_fraction": kept_fracs, "empty_scales": empty_scales}
    if total is None:
        return dc.constant(np.asarray(0.0, dtype)), diagnostics
    return total / n_scales, diagnostics


def self_supervised_loss(ctx, weights=None):
    """Photometric video loss of the unlabeled (real) domain."""
    alpha = weights.alpha_ssim if weights is not None else 0.85
    return min_reprojection_loss(
        ctx.target, ctx.refs, ctx.depths, ctx.poses, ctx.intrinsics, alpha
    )


def partial_photometric(ctx, depth_gt, poses_gt, weights=None):
    """Photometric loss decoupled with ground truth (labeled domain only).

    Averages three reconstructions: predicted depth + predicted pose,
    ground-truth depth + predicted pose, predicted depth + ground-truth
    pose; each with the full min-reprojection/auto-mask protocol.
    """
    if depth_gt is None or poses_gt is None:
        raise ValueError("partial_photometric needs ground-truth depth and poses")
    alpha = weights.alpha_ssim if weights is not None else 0.85
    k = ctx.intrinsics
    l_pred, diag = min_reprojection_loss(ctx.target, ctx.refs, ctx.depths, ctx.poses, k, alpha)
    gt_depth = depth_gt if isinstance(depth_gt, Tensor) else dc.constant(depth_gt)
    l_gtd, _ = min_reprojection_loss(ctx.target, ctx.refs, [gt_depth], ctx.poses, k, alpha)
    l_gtp, _ = min_reprojection_loss(ctx.target, ctx.refs, ctx.depths, poses_gt, k, alpha)
    return (l_pred + l_gtd + l_gtp) / 3.0, diag


def silog(d_hat, d, mask=None, silog_lambda=0.85):
    """Scale-invariant log depth loss over masked pixels.

    With e = log d - log d_hat: mean(e^2) - silog_lambda * mean(e)^2.
    """
    gt = d.data if isinstance(d, Tensor) else np.asarray(d)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    p = int(mask.sum())
    if p == 0:
        raise ValueError("silog needs at least one valid pixel")
    if np.any(gt[mask] <= 0) or np.any(d_hat.data[mask] <= 0):
        raise dc.DomainError("silog needs positive depths under the mask")
    dtype = d_hat.dtype
    m = dc.constant(mask.astype(dtype))
    one_minus = dc.constant((1.0 - mask).astype(dtype))
    dh_safe = d_hat * m + one_minus
    gt_safe = np.where(mask, gt, 1.0).astype(dtype)
    delta = dc.constant(np.log(gt_safe)) - dc.log(dh_safe)
    sq_term = dc.tsum(delta * delta) / p
    mean_term = dc.tsum(delta)
    return sq_term - (mean_term * mean_term) * np.asarray(silog_lambda / p**2, dtype)


def bootstrapped_ce(logits, labels, fraction=0.3, ignore_index=255):
    """Mean cross entropy over the worst ceil(fraction * valid) pixels.

    Ties at the cut are resolved by pixel index order. fraction = 1
    reproduces the plain mean cross entropy over valid pixels.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0,1]")
    ce_map, valid = dc.softmax_cross_entropy_map(logits, labels, ignore_index)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("bootstrapped_ce got no valid pixels")
    k = math.ceil(fraction * n_valid)
    flat_vals = ce_map.data.reshape(-1)
    flat_valid = valid.reshape(-1)
    cand = np.nonzero(flat_valid)[0]
    order = np.lexsort((cand, -flat_vals[cand]))
    chosen = cand[order[:k]]
    sel = np.zeros(flat_vals.shape, dtype=logits.dtype)
    sel[chosen] = 1.0
    sel = sel.reshape(ce_map.shape)
    return dc.tsum(ce_map * dc.constant(sel)) / k


def pseudo_label_loss(logits, pseudo_labels, fraction=0.3, ignore_index=255):
    """Bootstrapped cross entropy against a pre-computed pseudo-label map.

    An all-ignored map contributes 0 (flagged) instead of raising.
    Returns (scalar Tensor, coverage fraction).
    """
    lab = np.asarray(pseudo_labels)
    coverage = float((lab != ignore_index).mean())
    if coverage == 0.0:
        return dc.constant(np.asarray(0.0, logits.dtype)), 0.0
    return bootstrapped_ce(logits, lab, fraction, ignore_index), coverage


def normal_cosine_loss(n_hat, n, valid):
    """(1/2P) * sum over valid pixels of (1 - cos(n_hat, n)); range [0,1]."""
    p = int(valid.sum())
    if p == 0:
        raise ValueError("normal loss has no valid pixels")
    ncst = n if isinstance(n, Tensor) else dc.constant(n)
    cosang = dc.tsum(n_hat * ncst, axis=1, keepdims=True)
    keep = dc.constant(valid.astype(n_hat.dtype))
    return dc.tsum((1.0 - cosang) * keep) / (2.0 * p)


def normal_regularization(d_hat, d, K):
    """Cosine mismatch between normals of predicted and reference depth."""
    n_hat, deg_hat = surface_normals(d_hat, K)
    with dc.no_grad():
        n_gt, deg_gt = surface_normals(d if isinstance(d, Tensor) else dc.constant(d), K)
    valid = ~(deg_hat | deg_gt)
    return normal_cosine_loss(n_hat, n_gt.detach(), valid)


# -- composition ------------------------------------------------------------


def compose_virtual(l_depth, l_sem, l_normal, l_photo_partial, weights):
    """Labeled-domain loss: depth + weighted semantics, normals, partial photometric."""
    out = l_depth + weights.lambda_S * l_sem + weights.lambda_N * l_normal
    if l_photo_partial is not None:
        out = out + weights.lambda_PP * l_photo_partial
    return out


def compose_real(l_photo, l_pseudo, weights):
    """Unlabeled-domain loss: photometric plus optional pseudo-label term."""
    if l_pseudo is None:
        return l_photo
    return l_photo + weights.lambda_PL * l_pseudo


def compose_total(l_real, l_virtual, weights):
    """Mixed-batch objective: real + lambda_V * virtual."""
    return l_real + weights.lambda_V * l_virtual
