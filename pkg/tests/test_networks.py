import numpy as np
import pytest

from geoadapt import diffcore as dc
from geoadapt.geometry import euler6_to_transform
from geoadapt.networks import ModelConfig, MultiTaskModel, inv_depth


def _model(seed=0, **kw):
    return MultiTaskModel(ModelConfig(**kw), seed=seed)


def _image(rng, n=1, h=64, w=64):
    return dc.constant(rng.random((n, 3, h, w)).astype(np.float32))


class TestInvDepth:
    def test_hand_value_at_zero(self):
        d = inv_depth(dc.Tensor(np.zeros((1, 1, 1, 1))), 0.1, 100.0)
        assert abs(d.item() - 1.0 / (0.01 + 9.99 * 0.5)) < 1e-12

    def test_limits(self):
        lo = inv_depth(dc.Tensor(np.full((1, 1, 1, 1), 40.0)), 0.1, 100.0).item()
        hi = inv_depth(dc.Tensor(np.full((1, 1, 1, 1), -40.0)), 0.1, 100.0).item()
        assert abs(lo - 0.1) < 1e-6 and abs(hi - 100.0) < 1e-3

    def test_monotone_decreasing(self):
        f = np.linspace(-5, 5, 21).reshape(1, 1, 3, 7)
        d = inv_depth(dc.Tensor(f), 0.1, 100.0).data
        assert np.all(np.diff(d.reshape(-1)) < 0)

    def test_validation(self):
        with pytest.raises(ValueError):
            inv_depth(dc.Tensor(np.zeros((1, 1, 1, 1))), 5.0, 1.0)


class TestEncoder:
    def test_pyramid_shapes(self):
        rng = np.random.default_rng(0)
        m = _model()
        pyr = m.encoder_forward(_image(rng))
        assert [f.shape[2] for f in pyr] == [32, 16, 8, 4, 2]
        assert [f.shape[1] for f in pyr] == list(m.config.enc_channels)

    def test_indivisible_input_rejected(self):
        m = _model()
        with pytest.raises(dc.ShapeError):
            m.encoder_forward(dc.constant(np.zeros((1, 3, 60, 60), np.float32)))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(1)
        img = _image(rng)
        a = _model(seed=3).encoder_forward(img)[-1].data
        b = _model(seed=3).encoder_forward(img)[-1].data
        assert np.array_equal(a, b)

    def test_gradient_reaches_encoder_from_both_decoders(self):
        rng = np.random.default_rng(2)
        m = _model()
        img = _image(rng)
        for head in ("depth", "semantic"):
            m.zero_grad()
            pyr = m.encoder_forward(img)
            loss = (
                dc.tmean(m.depth_forward(pyr)[0])
                if head == "depth"
                else dc.tmean(m.semantic_forward(pyr))
            )
            loss.backward()
            enc_norm = sum(
                float(np.abs(p.grad).sum())
                for k, p in m.params.items()
                if k.startswith("encoder") and p.grad is not None
            )
            assert enc_norm > 0.0, head


class TestDepthDecoder:
    def test_four_scales_finest_first(self):
        rng = np.random.default_rng(3)
        m = _model()
        maps = m.depth_forward(m.encoder_forward(_image(rng, h=64, w=96)))
        assert [d.shape[2:] for d in maps] == [(64, 96), (32, 48), (16, 24), (8, 12)]

    def test_outputs_within_depth_range(self):
        rng = np.random.default_rng(4)
        m = _model()
        for d in m.depth_forward(m.encoder_forward(_image(rng))):
            assert d.data.min() > m.config.d_min
            assert d.data.max() < m.config.d_max

    def test_initial_depth_near_d_init(self):
        rng = np.random.default_rng(5)
        m = _model()
        d = m.depth_forward(m.encoder_forward(_image(rng)))[0]
        assert 0.3 * m.config.d_init < np.median(d.data) < 3.0 * m.config.d_init


class TestSemanticDecoder:
    def test_logit_shape_and_finiteness(self):
        rng = np.random.default_rng(6)
        m = _model(num_classes=6)
        logits = m.semantic_forward(m.encoder_forward(_image(rng, h=32, w=64)))
        assert logits.shape == (1, 6, 32, 64)
        assert np.isfinite(logits.data).all()

    def test_parameter_separation(self):
        rng = np.random.default_rng(7)
        m = _model()
        img = _image(rng)
        pyr = m.encoder_forward(img)
        logits_before = m.semantic_forward(pyr).data.copy()
        depth_before = m.depth_forward(pyr).pop(0).data.copy()
        for name, p in m.params.items():
            if name.startswith("depth."):
                p.data = p.data + 0.37
        pyr = m.encoder_forward(img)
        assert np.array_equal(m.semantic_forward(pyr).data, logits_before)
        assert not np.array_equal(m.depth_forward(pyr)[0].data, depth_before)


class TestPoseNetwork:
    def test_six_components_scaled(self):
        rng = np.random.default_rng(8)
        m = _model()
        v = m.pose_forward(_image(rng, n=2), _image(rng, n=2))
        assert v.shape == (2, 6)

    def test_zero_init_final_layer_gives_identity(self):
        rng = np.random.default_rng(9)
        m = _model()
        v = m.pose_forward(_image(rng), _image(rng))
        assert np.abs(v.data).max() == 0.0
        t = euler6_to_transform(v.data[0].astype(np.float64))
        assert np.allclose(t.matrix(), np.eye(4))

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(10)
        m = _model()
        with pytest.raises(dc.ShapeError):
            m.pose_forward(_image(rng, h=64, w=64), _image(rng, h=32, w=64))


class TestModelPlumbing:
    def test_param_count_regression(self):
        # pinned for the default config; catches silent architecture drift
        assert _model().param_count() == 540624

    def test_checkpoint_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        m = _model(seed=13)
        ckpt = tmp_path / "ckpt"
        m.save_checkpoint(ckpt, step=42, extra={"mode": "guda"})
        back, manifest = MultiTaskModel.load_checkpoint(ckpt)
        assert manifest["step"] == 42 and manifest["mode"] == "guda"
        img = _image(rng)
        a = m.semantic_forward(m.encoder_forward(img)).data
        b = back.semantic_forward(back.encoder_forward(img)).data
        assert np.array_equal(a, b)

    def test_checkpoint_rejects_wrong_names(self, tmp_path):
        m = _model()
        ckpt = tmp_path / "ckpt"
        m.save_checkpoint(ckpt)
        import json

        manifest = json.loads((ckpt / "manifest.json").read_text())
        manifest["parameters"] = manifest["parameters"][:-1]
        (ckpt / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError):
            MultiTaskModel.load_checkpoint(ckpt)
