import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoadapt import diffcore as dc
from geoadapt import losses as L
from geoadapt.diffcore import Tensor
from geoadapt.geometry import Intrinsics, euler6_to_transform

K8 = Intrinsics(fx=7.0, fy=7.0, cx=4.0, cy=4.0, width=8, height=8)


def _rng(seed=0):
    return np.random.default_rng(seed)


class TestSsim:
    def test_self_similarity_is_one(self):
        a = dc.constant(_rng().random((2, 3, 9, 11)))
        assert np.allclose(L.ssim(a, a).data, 1.0, atol=1e-7)

    def test_constant_images_hand_value(self):
        z = dc.constant(np.zeros((1, 1, 6, 6)))
        o = dc.constant(np.ones((1, 1, 6, 6)))
        c1 = 0.01**2
        assert np.allclose(L.ssim(z, o).data, c1 / (1 + c1))

    def test_symmetry_bitwise(self):
        rng = _rng(1)
        a = dc.constant(rng.random((1, 3, 7, 7)))
        b = dc.constant(rng.random((1, 3, 7, 7)))
        assert np.array_equal(L.ssim(a, b).data, L.ssim(b, a).data)

    def test_range(self):
        rng = _rng(2)
        a = dc.constant(rng.random((1, 3, 8, 8)))
        b = dc.constant(rng.random((1, 3, 8, 8)))
        s = L.ssim(a, b).data
        assert s.min() >= -1.0 - 1e-9 and s.max() <= 1.0 + 1e-9


class TestPhotometric:
    def test_identical_images_exact_zero(self):
        a = dc.constant(_rng(3).random((2, 3, 8, 8)))
        assert np.abs(L.photometric(a, a).data).max() == 0.0

    def test_zero_vs_one_hand_value(self):
        z = dc.constant(np.zeros((1, 3, 6, 6)))
        o = dc.constant(np.ones((1, 3, 6, 6)))
        c1 = 0.01**2
        expected = 0.85 * (1 - c1 / (1 + c1)) / 2 + 0.15 * 1.0
        got = L.photometric(z, o).data
        assert np.allclose(got, expected, atol=1e-9)
        assert abs(expected - 0.5750) < 1e-4

    def test_non_negative(self):
        rng = _rng(4)
        a = dc.constant(rng.random((1, 3, 8, 8)))
        b = dc.constant(rng.random((1, 3, 8, 8)))
        assert L.photometric(a, b).data.min() >= 0.0


class TestSilog:
    def test_identical_is_zero(self):
        d = _rng(5).uniform(1, 30, (1, 1, 5, 5))
        assert L.silog(Tensor(d.copy()), d).item() == 0.0

    def test_plus_minus_point_one(self):
        gt = np.ones((1, 1, 1, 2))
        pred = np.exp([[-0.1, 0.1]]).reshape(1, 1, 1, 2)
        for lam in (0.0, 0.5, 0.85, 1.0):
            assert abs(L.silog(Tensor(pred.copy()), gt, silog_lambda=lam).item() - 0.01) < 1e-12

    def test_scale_invariance_at_lambda_one(self):
        rng = _rng(6)
        pred = rng.uniform(0.5, 20, (1, 1, 6, 6))
        gt = rng.uniform(0.5, 20, (1, 1, 6, 6))
        v1 = L.silog(Tensor(pred.copy()), gt, silog_lambda=1.0).item()
        v2 = L.silog(Tensor(pred * 7.3), gt, silog_lambda=1.0).item()
        assert abs(v1 - v2) < 1e-9

    def test_masked_pixels_ignored(self):
        pred = np.full((1, 1, 2, 2), 2.0)
        gt = np.full((1, 1, 2, 2), 2.0)
        gt[0, 0, 0, 0] = 50.0
        mask = np.ones_like(gt, bool)
        mask[0, 0, 0, 0] = False
        assert L.silog(Tensor(pred), gt, mask).item() == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            L.silog(Tensor(np.ones((1, 1, 2, 2))), np.ones((1, 1, 2, 2)), np.zeros((1, 1, 2, 2), bool))
        with pytest.raises(dc.DomainError):
            L.silog(Tensor(np.ones((1, 1, 1, 1))), np.array([[[[-1.0]]]]))


class TestBootstrappedCE:
    def test_full_fraction_equals_mean_ce(self):
        rng = _rng(7)
        logits = Tensor(rng.normal(size=(1, 4, 8, 8)))
        labels = rng.integers(0, 4, (1, 8, 8))
        full = L.bootstrapped_ce(logits, labels, fraction=1.0).item()
        ce, valid = dc.softmax_cross_entropy_map(logits, labels)
        assert abs(full - ce.data[valid].mean()) < 1e-9

    def test_uniform_logits_any_fraction(self):
        logits = Tensor(np.zeros((1, 2, 5, 5)))
        labels = np.zeros((1, 5, 5), int)
        for frac in (0.1, 0.3, 0.7, 1.0):
            assert abs(L.bootstrapped_ce(logits, labels, frac).item() - np.log(2)) < 1e-7

    def test_monotone_in_fraction(self):
        rng = _rng(8)
        logits = Tensor(rng.normal(size=(1, 5, 10, 10)))
        labels = rng.integers(0, 5, (1, 10, 10))
        vals = [L.bootstrapped_ce(logits, labels, f).item() for f in (0.1, 0.3, 0.5, 0.8, 1.0)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_selects_worst_pixels(self):
        logits = np.zeros((1, 2, 1, 4))
        logits[0, 0] = [5.0, 5.0, -5.0, 5.0]
        labels = np.zeros((1, 1, 4), int)
        got = L.bootstrapped_ce(Tensor(logits), labels, fraction=0.25).item()
        ce, _ = dc.softmax_cross_entropy_map(Tensor(logits), labels)
        assert abs(got - ce.data.max()) < 1e-12

    def test_no_valid_pixels_raises(self):
        with pytest.raises(ValueError):
            L.bootstrapped_ce(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 255), 0.3)


class TestPseudoLabelLoss:
    def test_matches_bootstrapped_bitwise(self):
        rng = _rng(9)
        logits = Tensor(rng.normal(size=(1, 4, 6, 6)))
        labels = rng.integers(0, 4, (1, 6, 6))
        labels[0, :2] = 255
        a = L.bootstrapped_ce(logits, labels, 0.3).item()
        b, cov = L.pseudo_label_loss(logits, labels, 0.3)
        assert a == b.item()
        assert 0 < cov < 1

    def test_all_ignored_contributes_zero(self):
        val, cov = L.pseudo_label_loss(
            Tensor(np.zeros((1, 2, 3, 3))), np.full((1, 3, 3), 255), 0.3
        )
        assert val.item() == 0.0 and cov == 0.0

    def test_confident_argmax_near_zero(self):
        rng = _rng(10)
        labels = rng.integers(0, 3, (1, 5, 5))
        logits = np.full((1, 3, 5, 5), -20.0)
        for c in range(3):
            logits[0, c][labels[0] == c] = 20.0
        val, _ = L.pseudo_label_loss(Tensor(logits), labels, 0.3)
        assert val.item() < 1e-12


class TestNormalLosses:
    def _flat(self, v):
        n = np.zeros((1, 3, 4, 4))
        n[:, 2] = v
        return n

    def test_same_zero_antiparallel_one_orthogonal_half(self):
        n = self._flat(1.0)
        valid = np.ones((1, 1, 4, 4), bool)
        assert L.normal_cosine_loss(Tensor(n.copy()), n, valid).item() == 0.0
        assert L.normal_cosine_loss(Tensor(-n), n, valid).item() == 1.0
        orth = np.zeros((1, 3, 4, 4))
        orth[:, 0] = 1.0
        assert L.normal_cosine_loss(Tensor(orth), n, valid).item() == 0.5

    def test_normal_regularization_self_is_zero(self):
        d = _rng(11).uniform(2, 20, (1, 1, 8, 8))
        assert abs(L.normal_regularization(Tensor(d.copy()), d, K8).item()) < 1e-9

    def test_bounded_unit_interval(self):
        rng = _rng(12)
        a = rng.uniform(2, 20, (1, 1, 8, 8))
        b = rng.uniform(2, 20, (1, 1, 8, 8))
        v = L.normal_regularization(Tensor(a), b, K8).item()
        assert 0.0 <= v <= 1.0


class TestMinReprojection:
    def _ctx(self, rng, depth_list, poses=None):
        tgt = dc.constant(rng.uniform(0.1, 0.9, (1, 3, 8, 8)))
        refs = dc.constant(rng.uniform(0.1, 0.9, (2, 3, 8, 8)))
        if poses is None:
            poses = [
                euler6_to_transform([0.03, 0.0, -0.05, 0.004, -0.01, 0.008]),
                euler6_to_transform([-0.03, 0.01, 0.05, -0.006, 0.01, -0.008]),
            ]
        return L.PhotometricContext(tgt, refs, depth_list, poses, K8)

    def test_static_identical_triplet_is_zero(self):
        rng = _rng(13)
        frame = rng.uniform(0.1, 0.9, (1, 3, 8, 8))
        tgt = dc.constant(frame)
        refs = dc.constant(np.concatenate([frame, frame]))
        depth = [dc.constant(rng.uniform(3, 10, (1, 1, 8, 8)))]
        pose = Tensor(np.zeros((2, 6)))  # identity motion
        ctx = L.PhotometricContext(tgt, refs, depth, pose, K8)
        loss, diag = L.self_supervised_loss(ctx)
        assert loss.item() == 0.0
        assert diag["empty_scales"] == 1

    def test_swapping_reference_order_invariant(self):
        rng = _rng(14)
        frame = rng.uniform(0.1, 0.9, (1, 3, 8, 8))
        r0 = rng.uniform(0.1, 0.9, (1, 3, 8, 8))
        r1 = rng.uniform(0.1, 0.9, (1, 3, 8, 8))
        depth = [dc.constant(rng.uniform(3, 10, (1, 1, 8, 8)))]
        p0 = euler6_to_transform([0.03, 0, -0.05, 0, 0, 0])
        p1 = euler6_to_transform([-0.03, 0, 0.05, 0, 0, 0])
        a = L.self_supervised_loss(
            L.PhotometricContext(dc.constant(frame), dc.constant(np.concatenate([r0, r1])), depth, [p0, p1], K8)
        )[0].item()
        b = L.self_supervised_loss(
            L.PhotometricContext(dc.constant(frame), dc.constant(np.concatenate([r1, r0])), depth, [p1, p0], K8)
        )[0].item()
        assert abs(a - b) < 1e-7

    def test_multi_scale_upsampling(self):
        rng = _rng(15)
        depths = [
            dc.constant(rng.uniform(3, 10, (1, 1, 8, 8))),
            dc.constant(rng.uniform(3, 10, (1, 1, 4, 4))),
        ]
        loss, diag = L.self_supervised_loss(self._ctx(rng, depths))
        assert np.isfinite(loss.item())
        assert len(diag["kept_fraction"]) == 2

    def test_partial_photometric_identical_predictions(self):
        # predictions equal to ground truth -> all three terms coincide
        rng = _rng(16)
        depth_gt = rng.uniform(3, 10, (1, 1, 8, 8))
        poses = [
            euler6_to_transform([0.03, 0.0, -0.05, 0.004, -0.01, 0.008]),
            euler6_to_transform([-0.03, 0.01, 0.05, -0.006, 0.01, -0.008]),
        ]
        ctx = self._ctx(rng, [dc.constant(depth_gt.copy())], poses)
        lp = L.self_supervised_loss(ctx)[0].item()
        lpp = L.partial_photometric(ctx, depth_gt, poses)[0].item()
        assert abs(lp - lpp) < 1e-7

    def test_partial_photometric_requires_ground_truth(self):
        rng = _rng(17)
        ctx = self._ctx(rng, [dc.constant(rng.uniform(3, 10, (1, 1, 8, 8)))])
        with pytest.raises(ValueError):
            L.partial_photometric(ctx, None, None)

    def test_non_negative(self):
        rng = _rng(18)
        loss, _ = L.self_supervised_loss(self._ctx(rng, [dc.constant(rng.uniform(1, 30, (1, 1, 8, 8)))]))
        assert loss.item() >= 0.0


class TestComposition:
    def test_virtual_hand_sum(self):
        w = L.LossWeights()
        one = dc.constant(1.0)
        v = L.compose_virtual(one, one, one, one, w).item()
        assert abs(v - 1.016) < 1e-9

    def test_real_hand_sum(self):
        w = L.LossWeights()
        one = dc.constant(1.0)
        assert abs(L.compose_real(one, one, w).item() - 1.01) < 1e-9
        assert L.compose_real(one, None, w).item() == 1.0

    def test_total_hand_sum(self):
        w = L.LossWeights()
        assert L.compose_total(dc.constant(2.0), dc.constant(3.0), w).item() == 5.0
        w0 = L.LossWeights(lambda_V=0.0)
        assert L.compose_total(dc.constant(2.0), dc.constant(3.0), w0).item() == 2.0

    def test_default_weights_match_training_recipe(self):
        w = L.LossWeights()
        assert (w.lambda_V, w.lambda_S, w.lambda_N, w.lambda_PP, w.lambda_PL) == (
            1.0,
            0.001,
            0.01,
            0.005,
            0.01,
        )
        assert w.alpha_ssim == 0.85 and w.silog_lambda == 0.85 and w.bootstrap_fraction == 0.3

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            L.LossWeights(lambda_S=-1.0)
        with pytest.raises(ValueError):
            L.LossWeights(bootstrap_fraction=0.0)

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(0, 10),
        st.floats(0, 10),
        st.floats(0, 10),
        st.floats(0, 10),
        st.floats(0, 10),
        st.floats(0, 10),
    )
    def test_linearity_property(self, a, b, c, d, e, f):
        w = L.LossWeights()
        lv = L.compose_virtual(dc.constant(a), dc.constant(b), dc.constant(c), dc.constant(d), w)
        lr = L.compose_real(dc.constant(e), dc.constant(f), w)
        total = L.compose_total(lr, lv, w).item()
        expect = (e + 0.01 * f) + 1.0 * (a + 0.001 * b + 0.01 * c + 0.005 * d)
        assert abs(total - expect) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.2, 5.0))
def test_silog_scale_property(seed, scale):
    rng = np.random.default_rng(seed)
    pred = rng.uniform(0.5, 30, (1, 1, 4, 4))
    gt = rng.uniform(0.5, 30, (1, 1, 4, 4))
    v1 = L.silog(Tensor(pred.copy()), gt, silog_lambda=1.0).item()
    v2 = L.silog(Tensor(pred * scale), gt, silog_lambda=1.0).item()
    assert abs(v1 - v2) < 1e-8
