"""Toy-scale multi-task networks: shared 5-level conv encoder, depth and
semantic decoders with skip connections, and a separate pose regressor.

The depth and semantic decoders consume the same feature pyramid; the
depth decoder emits sigmoid-bounded depth at four scales (1, 1/2, 1/4,
1/8), the semantic decoder one full-resolution logit map built from its
four upsampled intermediate stages.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import gtsr
from .diffcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    enc_channels: tuple = (16, 16, 32, 64, 128)
    num_classes: int = 6
    d_min: float = 0.1
    d_max: float = 100.0
    d_init: float = 3.0  # depth emitted by a zero-activation head at start
    # per-component output scaling (tx,ty,tz,rx,ry,rz): forward motion must
    # be reachable within a desk-scale step budget, rotations stay gentle
    pose_scale: tuple = (0.05, 0.05, 1.0, 0.01, 0.01, 0.01)
    pose_stem: tuple = (16, 32, 32)
    pose_hidden: int = 32

    def to_json(self):
        return {
            "enc_channels": list(self.enc_channels),
            "num_classes": self.num_classes,
            "d_min": self.d_min,
            "d_max": self.d_max,
            "d_init": self.d_init,
            "pose_scale": list(self.pose_scale),
            "pose_stem": list(self.pose_stem),
            "pose_hidden": self.pose_hidden,
        }

    @staticmethod
    def from_json(obj):
        return ModelConfig(
            enc_channels=tuple(obj["enc_channels"]),
            num_classes=int(obj["num_classes"]),
            d_min=float(obj["d_min"]),
            d_max=float(obj["d_max"]),
            d_init=float(obj["d_init"]),
            pose_scale=tuple(obj["pose_scale"]),
            pose_stem=tuple(obj["pose_stem"]),
            pose_hidden=int(obj["pose_hidden"]),
        )


def inv_depth(f, d_min, d_max):
    """Sigmoid-bounded depth: 1/d = 1/d_max + (1/d_min - 1/d_max) * sigmoid(f)."""
    if not 0 < d_min < d_max:
        raise ValueError("need 0 < d_min < d_max")
    lo = 1.0 / d_max
    span = 1.0 / d_min - 1.0 / d_max
    return 1.0 / (dc.sigmoid(f) * span + lo)


def _pad_top_left(x):
    """One zero row on top and one zero column on the left.

    Stride-2 halving with an odd kernel needs asymmetric padding on even
    input sizes; symmetric padding cannot make the output size integral.
    """
    n, c, h, w = x.shape
    row = dc.constant(np.zeros((n, c, 1, w), dtype=x.dtype))
    x = dc.concat([row, x], axis=2)
    col = dc.constant(np.zeros((n, c, h + 1, 1), dtype=x.dtype))
    return dc.concat([col, x], axis=3)


class _Conv:
    """3x3 (or kxk) convolution layer whose parameters live in the model dict."""

    def __init__(self, model, name, cin, cout, stride=1, k=3, zero_init=False):
        bound = np.sqrt(6.0 / (cin * k * k))
        if zero_init:
            w = np.zeros((cout, cin, k, k))
        else:
            w = model.rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.w = model._add_param(f"{name}.w", w)
        self.b = model._add_param(f"{name}.b", np.zeros(cout))
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x):
        if self.stride == 2 and x.shape[2] % 2 == 0:
            return dc.conv2d(_pad_top_left(x), self.w, self.b, 2, 0)
        return dc.conv2d(x, self.w, self.b, self.stride, self.pad)


class MultiTaskModel:
    """Shared encoder, depth decoder, semantic decoder, and pose network.

    Parameters are seeded He-uniform (fan-in) except the final pose layer,
    which starts at zero so the initial predicted motion is the identity.
    """

    def __init__(self, config=None, seed=0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(np.random.PCG64(seed))
        self.params = {}
        c = self.config.enc_channels
        if len(c) != 5:
            raise ValueError("encoder needs exactly 5 levels")

        self.enc = [
            _Conv(self, f"encoder.l{i}", cin, cout, stride=2)
            for i, (cin, cout) in enumerate(zip((3,) + tuple(c[:-1]), c))
        ]

        # decoder channel ladder mirrors the encoder: 64, 32, 16, 8, 8
        dch = (c[3], c[2], c[1], 8, 8)
        self.depth_up = []
        self.depth_fuse = []
        self.depth_heads = []
        self.sem_up = []
        self.sem_fuse = []
        skips = (c[3], c[2], c[1], c[0], None)
        for task in ("depth", "semantic"):
            up, fuse = [], []
            cin = c[4]
            for i in range(5):
                cout = dch[i]
                up.append(_Conv(self, f"{task}.up{i}", cin, cout))
                skip = skips[i]
                fuse.append(
                    _Conv(self, f"{task}.fuse{i}", cout + (skip or 0), cout)
                )
                cin = cout
            if task == "depth":
                self.depth_up, self.depth_fuse = up, fuse
            else:
                self.sem_up, self.sem_fuse = up, fuse
        # depth heads at strides 8, 4, 2, 1 (fuse stages 1..4); bias set so a
        # zero-activation head starts at d_init rather than at d_min-ish
        self.depth_heads = [
            _Conv(self, f"depth.head{i}", dch[i], 1) for i in range(1, 5)
        ]
        span = 1.0 / self.config.d_min - 1.0 / self.config.d_max
        frac = (1.0 / self.config.d_init - 1.0 / self.config.d_max) / span
        head_bias = float(np.log(frac / (1.0 - frac)))
        for head in self.depth_heads:
            head.b.data = np.full_like(head.b.data, head_bias)
        sem_cat = sum(dch[1:])
        # 1x1 fusion over the concatenated multi-scale stages
        self.sem_head = _Conv(self, "semantic.head", sem_cat, self.config.num_classes, k=1)

        stem = self.config.pose_stem
        hid = self.config.pose_hidden
        self.pose_stem = [
            _Conv(self, f"pose.stem{i}", cin, cout, stride=2)
            for i, (cin, cout) in enumerate(zip((6,) + tuple(stem[:-1]), stem))
        ]
        self.pose_hidden = [
            _Conv(self, f"pose.hid{i}", stem[-1] if i == 0 else hid, hid)
            for i in range(3)
        ]
        self.pose_out = _Conv(self, "pose.out", hid, 6, zero_init=True)

    # -- parameter plumbing -------------------------------------------

    def _add_param(self, name, value):
        t = Tensor(value.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward passes -------------------------------------------------

    def encoder_forward(self, image):
        """Image [N,3,H,W] (H, W divisible by 32) -> 5 features, stride 2..32."""
        h, w = image.shape[2:]
        if h % 32 or w % 32:
            raise dc.ShapeError(f"input {h}x{w} not divisible by 32")
        feats = []
        x = image
        for layer in self.enc:
            x = dc.elu(layer(x))
            feats.append(x)
        return feats

    def _decode(self, pyramid, up, fuse):
        """Shared decoder ladder; returns the 5 fused stages, coarse to fine."""
        skips = [pyramid[3], pyramid[2], pyramid[1], pyramid[0], None]
        x = pyramid[4]
        stages = []
        for i in range(5):
            x = dc.elu(up[i](x))
            skip = skips[i]
            target = skip.shape[2:] if skip is not None else (x.shape[2] * 2, x.shape[3] * 2)
            x = dc.bilinear_resize(x, *target)
            if skip is not None:
                x = dc.concat([x, skip], axis=1)
            x = dc.elu(fuse[i](x))
            stages.append(x)
        return stages

    def depth_forward(self, pyramid):
        """Feature pyramid -> depth maps at scales 1, 1/2, 1/4, 1/8 (finest first)."""
        stages = self._decode(pyramid, self.depth_up, self.depth_fuse)
        cfg = self.config
        maps = [
            inv_depth(head(stages[i + 1]), cfg.d_min, cfg.d_max)
            for i, head in enumerate(self.depth_heads)
        ]
        return maps[::-1]

    def semantic_forward(self, pyramid):
        """Feature pyramid -> class logits [N,C,H,W] at full resolution."""
        stages = self._decode(pyramid, self.sem_up, self.sem_fuse)
        h, w = stages[4].shape[2:]
        taps = [dc.bilinear_resize(s, h, w) for s in stages[1:]]
        return self.sem_head(dc.concat(taps, axis=1))

    def pose_forward(self, img_a, img_b):
        """Image pair -> 6-vector [N, (tx,ty,tz,rx,ry,rz)], pre-scaled."""
        if img_a.shape != img_b.shape:
            raise dc.ShapeError("pose inputs must share a shape")
        x = dc.concat([img_a, img_b], axis=1)
        for layer in self.pose_stem:
            x = dc.relu(layer(x))
        for layer in self.pose_hidden:
            x = dc.relu(layer(x))
        x = self.pose_out(x)
        pooled = dc.tmean(x, axis=(2, 3))
        scale = np.asarray(self.config.pose_scale, dtype=pooled.dtype)
        return pooled * dc.constant(scale[None, :])

    def forward_all(self, image):
        pyr = self.encoder_forward(image)
        return self.depth_forward(pyr), self.semantic_forward(pyr)

    # -- checkpoints -----------------------------------------------------

    def save_checkpoint(self, out_dir, step=0, extra=None):
        os.makedirs(out_dir, exist_ok=True)
        names = sorted(self.params)
        for name in names:
            gtsr.write(os.path.join(out_dir, f"{name}.gtsr"), self.params[name].data)
        manifest = {
            "config": self.config.to_json(),
            "step": int(step),
            "dtype": self.dtype.name,
            "parameters": names,
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, sort_keys=True, indent=1)

    @staticmethod
    def load_checkpoint(ckpt_dir):
        with open(os.path.join(ckpt_dir, "manifest.json")) as fh:
            manifest = json.load(fh)
        model = MultiTaskModel(
            ModelConfig.from_json(manifest["config"]),
            seed=0,
            dtype=np.dtype(manifest.get("dtype", "float32")),
        )
        expected = set(model.params)
        loaded = set(manifest["parameters"])
        if expected != loaded:
            raise ValueError("checkpoint parameter names do not match the config")
        for name in manifest["parameters"]:
            arr = gtsr.read(os.path.join(ckpt_dir, f"{name}.gtsr"))
            if arr.shape != model.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
            model.params[name].data = arr.astype(model.dtype)
        return model, manifest
