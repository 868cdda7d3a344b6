"""Mixed-batch training: one labeled (virtual) and one unlabeled (real)
batch per step through the shared multi-task model, Adam updates, the
resolution schedule, pseudo-label generation/refinement, and the domain-
adversarial baseline.
"""

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import gtsr
from . import losses as L
from .dataset import IGNORE_INDEX, DatasetReader
from .diffcore import Tensor
from .networks import ModelConfig, MultiTaskModel

MODES = (
    "guda",
    "source_only",
    "target_pl_only",
    "dann",
    "guda_dann",
    "guda_pl",
    "target_only",
)
_REAL_PHOTO_MODES = ("guda", "guda_pl", "guda_dann", "target_only")
_PSEUDO_MODES = ("guda_pl", "target_pl_only")
_VIRTUAL_MODES = ("guda", "guda_pl", "guda_dann", "source_only", "dann")
_DANN_MODES = ("dann", "guda_dann")


class TrainingAbort(RuntimeError):
    """A loss component or gradient went non-finite; named in the message."""


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    # phases of (epochs, resolution scale, lr multiplier)
    schedule: tuple = ((15, 0.5, 1.0), (7, 1.0, 1.0), (8, 1.0, 0.5))
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    mode: str = "guda"
    model: ModelConfig = field(default_factory=ModelConfig)
    lambda_grl: float = 1.0
    lambda_domain: float = 0.2
    pseudo_confidence: float = 0.9
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_json(self):
        return {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "schedule": [list(p) for p in self.schedule],
            "weights": self.weights.to_json(),
            "seed": self.seed,
            "mode": self.mode,
            "model": self.model.to_json(),
            "lambda_grl": self.lambda_grl,
            "lambda_domain": self.lambda_domain,
            "pseudo_confidence": self.pseudo_confidence,
            "adam_eps": self.adam_eps,
        }

    @staticmethod
    def from_json(obj):
        obj = dict(obj)
        if "weights" in obj:
            obj["weights"] = L.LossWeights.from_json(obj["weights"])
        if "model" in obj:
            obj["model"] = ModelConfig.from_json(obj["model"])
        if "schedule" in obj:
            obj["schedule"] = tuple(tuple(p) for p in obj["schedule"])
        return TrainConfig(**obj)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @staticmethod
    def for_params(params):
        return AdamState(
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update; parameters without a gradient are skipped."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingAbort(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.data = p.data - update.astype(p.dtype)


class Discriminator:
    """3-conv domain classifier over the stride-32 encoder features."""

    def __init__(self, in_channels, seed=0, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(np.random.PCG64(seed))
        self.params = {}
        chans = [(in_channels, 32), (32, 32), (32, 1)]
        self.layers = []
        for i, (cin, cout) in enumerate(chans):
            bound = np.sqrt(6.0 / (cin * 9))
            w = self.rng.uniform(-bound, bound, size=(cout, cin, 3, 3)).astype(self.dtype)
            b = np.zeros(cout, dtype=self.dtype)
            wt = Tensor(w, requires_grad=True)
            bt = Tensor(b, requires_grad=True)
            self.params[f"disc.l{i}.w"] = wt
            self.params[f"disc.l{i}.b"] = bt
            self.layers.append((wt, bt))

    def forward(self, feats):
        x = feats
        for i, (w, b) in enumerate(self.layers):
            x = dc.conv2d(x, w, b, 1, 1)
            if i < len(self.layers) - 1:
                x = dc.relu(x)
        return dc.tmean(x, axis=(1, 2, 3))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _bce_with_logits(logits, labels):
    """Stable binary cross entropy; labels is a constant 0/1 array."""
    y = dc.constant(labels.astype(logits.dtype))
    return dc.tmean(
        dc.relu(logits) - logits * y + dc.log(1.0 + dc.exp(-dc.absolute(logits)))
    )


def domain_confusion_loss(disc, feat_virtual, feat_real, lambda_grl):
    """Binary domain loss on gradient-reversed encoder features."""
    feats = dc.gradient_reversal(dc.concat([feat_virtual, feat_real], axis=0), lambda_grl)
    logits = disc.forward(feats)
    n_v = feat_virtual.shape[0]
    n_r = feat_real.shape[0]
    labels = np.concatenate([np.zeros(n_v), np.ones(n_r)])
    return _bce_with_logits(logits, labels)


# -- batch assembly ----------------------------------------------------------


class _Batch:
    """Collated triplets ready for the loss stack."""

    def __init__(self, samples):
        self.n = len(samples)
        imgs = np.stack([s.images for s in samples])  # [B,3,3,H,W]
        self.target = dc.constant(np.ascontiguousarray(imgs[:, 1]))
        self.refs = dc.constant(
            np.concatenate([imgs[:, 0], imgs[:, 2]], axis=0)
        )  # [2B,3,H,W], previous block then next block
        self.intrinsics = samples[0].intrinsics
        self.depth = None
        self.semantic = None
        self.pseudo = None
        self.poses = None
        if samples[0].depth is not None:
            self.depth = np.stack([s.depth for s in samples])[:, None].astype(np.float32)
        if samples[0].semantic is not None:
            self.semantic = np.stack([s.semantic for s in samples])
        if samples[0].pseudo is not None:
            self.pseudo = np.stack([s.pseudo for s in samples])
        if samples[0].poses is not None:
            self.poses = [s.poses[0] for s in samples] + [s.poses[1] for s in samples]


def _predict_poses(model, batch):
    tgt2 = dc.concat([batch.target, batch.target], axis=0)
    return model.pose_forward(tgt2, batch.refs)


def _finite(name, value):
    if not np.isfinite(value):
        raise TrainingAbort(f"{name} is not finite")
    return value


def mixed_batch_step(model, real_batch, virtual_batch, config, optimizer_state, lr, disc=None):
    """One optimization step; returns the logged component report.

    Forward both domain batches through the shared model (as the mode
    requires), combine real + lambda_V * virtual losses, run one backward
    pass and one Adam update.
    """
    mode = config.mode
    w = config.weights
    report = {k: 0.0 for k in ("L", "L_P", "L_PL", "L_D", "L_S", "L_N", "L_PP", "L_domain")}
    zero = dc.constant(np.float32(0.0))

    l_real = None
    l_virtual = None
    l_domain = None
    feat_real = None
    feat_virtual = None

    if real_batch is not None:
        need_photo = mode in _REAL_PHOTO_MODES
        need_sem = mode in _PSEUDO_MODES
        need_encoder = need_photo or need_sem or mode in _DANN_MODES
        if need_encoder:
            pyr = model.encoder_forward(real_batch.target)
            feat_real = pyr[-1]
            l_p = None
            l_pl = None
            if need_photo:
                depths = model.depth_forward(pyr)
                poses = _predict_poses(model, real_batch)
                ctx = L.PhotometricContext(
                    real_batch.target, real_batch.refs, depths, poses, real_batch.intrinsics
                )
                l_p, _diag = L.self_supervised_loss(ctx, w)
                report["L_P"] = _finite("photometric", l_p.item())
            if need_sem:
                logits = model.semantic_forward(pyr)
                l_pl, _cov = L.pseudo_label_loss(
                    logits, real_batch.pseudo, w.bootstrap_fraction, IGNORE_INDEX
                )
                report["L_PL"] = _finite("pseudo-label", l_pl.item())
            l_real = L.compose_real(l_p if l_p is not None else zero, l_pl, w)

    if mode in _VIRTUAL_MODES:
        vb = virtual_batch
        pyr = model.encoder_forward(vb.target)
        feat_virtual = pyr[-1]
        depths = model.depth_forward(pyr)
        logits = model.semantic_forward(pyr)
        l_d = L.silog(depths[0], vb.depth, None, w.silog_lambda)
        l_s = L.bootstrapped_ce(logits, vb.semantic, w.bootstrap_fraction, IGNORE_INDEX)
        l_n = L.normal_regularization(depths[0], vb.depth, vb.intrinsics)
        l_pp = None
        if vb.poses is not None:
            poses = _predict_poses(model, vb)
            ctx = L.PhotometricContext(vb.target, vb.refs, depths, poses, vb.intrinsics)
            l_pp, _ = L.partial_photometric(ctx, vb.depth, vb.poses, w)
            report["L_PP"] = _finite("partial photometric", l_pp.item())
        report["L_D"] = _finite("depth", l_d.item())
        report["L_S"] = _finite("semantic", l_s.item())
        report["L_N"] = _finite("normal", l_n.item())
        l_virtual = L.compose_virtual(l_d, l_s, l_n, l_pp, w)

    if mode in _DANN_MODES:
        if disc is None:
            raise ValueError("dann modes need a discriminator")
        l_domain = domain_confusion_loss(disc, feat_virtual, feat_real, config.lambda_grl)
        report["L_domain"] = _finite("domain", l_domain.item())

    if l_real is None and l_virtual is None:
        raise ValueError(f"mode {mode} produced no loss")
    if l_real is not None and l_virtual is not None:
        total = L.compose_total(l_real, l_virtual, w)
    elif l_virtual is not None:
        total = l_virtual
    else:
        total = l_real
    if l_domain is not None:
        total = total + config.lambda_domain * l_domain

    report["L"] = _finite("total", total.item())
    total.backward()

    params = dict(model.params)
    if disc is not None:
        params.update(disc.params)
    grads = {k: p.grad for k, p in params.items()}
    adam_step(params, grads, optimizer_state, lr, config.beta1, config.beta2, config.adam_eps)
    model.zero_grad()
    if disc is not None:
        disc.zero_grad()
    return report


# -- training loop -----------------------------------------------------------

_CSV_COLUMNS = ("epoch", "step", "L", "L_P", "L_PL", "L_D", "L_S", "L_N", "L_PP", "L_domain", "lr")


def _load_batch(reader, indices, step):
    return _Batch([reader.load_triplet(i).subsample(step) for i in indices])


def train(config, source_root, target_root, out_dir, model=None, log_every=1):
    """Run the schedule; writes checkpoint/ and metrics.csv under out_dir.

    The epoch length is one pass over the target triplets (regardless of
    mode, for comparability); source triplets are paired uniformly at
    random with replacement.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(np.random.PCG64(config.seed))
    mode = config.mode

    needs_virtual = mode in _VIRTUAL_MODES
    needs_real = mode != "source_only"
    source = DatasetReader(source_root, "source", split="train") if needs_virtual else None
    target = DatasetReader(
        target_root, "target", split="train", with_pseudo=mode in _PSEUDO_MODES
    )
    n_steps_per_epoch = len(target) // config.batch_size

    if model is None:
        model = MultiTaskModel(config.model, seed=config.seed)
    disc = None
    if mode in _DANN_MODES:
        disc = Discriminator(config.model.enc_channels[-1], seed=config.seed + 7)
    params = dict(model.params)
    if disc is not None:
        params.update(disc.params)
    state = AdamState.for_params(params)

    rows = []
    epoch = 0
    total_steps = 0
    for phase_epochs, scale, lr_mult in config.schedule:
        step_stride = int(round(1.0 / scale))
        lr = config.lr * lr_mult
        for _ in range(phase_epochs):
            order = rng.permutation(len(target))
            for si in range(n_steps_per_epoch):
                t_idx = order[si * config.batch_size : (si + 1) * config.batch_size]
                real_batch = (
                    _load_batch(target, t_idx, step_stride) if needs_real else None
                )
                virtual_batch = None
                if needs_virtual:
                    s_idx = rng.integers(0, len(source), size=config.batch_size)
                    virtual_batch = _load_batch(source, s_idx, step_stride)
                report = mixed_batch_step(
                    model, real_batch, virtual_batch, config, state, lr, disc
                )
                total_steps += 1
                if total_steps % log_every == 0:
                    rows.append(
                        [epoch, total_steps]
                        + [report[k] for k in _CSV_COLUMNS[2:-1]]
                        + [lr]
                    )
            epoch += 1

    metrics_path = os.path.join(out_dir, "metrics.csv")
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for row in rows:
            writer.writerow([f"{v:.8g}" if isinstance(v, float) else v for v in row])

    ckpt_dir = os.path.join(out_dir, "checkpoint")
    extra = {"mode": mode, "train_config": config.to_json()}
    model.save_checkpoint(ckpt_dir, step=total_steps, extra=extra)
    if disc is not None:
        disc_dir = os.path.join(out_dir, "discriminator")
        os.makedirs(disc_dir, exist_ok=True)
        for name in sorted(disc.params):
            gtsr.write(os.path.join(disc_dir, f"{name}.gtsr"), disc.params[name].data)
    return ckpt_dir, metrics_path


def generate_pseudo_labels(ckpt_dir, target_root, confidence=0.9, batch_frames=8):
    """Write argmax class maps (confidence-gated) beside every target frame.

    Pixels whose softmax confidence falls below the threshold become
    IGNORE_INDEX. Returns (n_frames, coverage fraction).
    """
    model, _manifest = MultiTaskModel.load_checkpoint(ckpt_dir)
    reader = DatasetReader(target_root, "target", split="train")
    ids = reader.frame_ids()
    covered = 0
    total = 0
    with dc.no_grad():
        for start in range(0, len(ids), batch_frames):
            chunk = ids[start : start + batch_frames]
            imgs = np.stack([reader.load_frame(seq, fi)[0] for seq, fi in chunk])
            pyr = model.encoder_forward(dc.constant(imgs))
            logits = model.semantic_forward(pyr).data
            z = logits - logits.max(axis=1, keepdims=True)
            ez = np.exp(z)
            prob = ez / ez.sum(axis=1, keepdims=True)
            conf = prob.max(axis=1)
            cls = prob.argmax(axis=1)
            labels = np.where(conf >= confidence, cls, IGNORE_INDEX)
            for j, (seq, fi) in enumerate(chunk):
                gtsr.write(reader.pseudo_path(seq, fi), labels[j].astype(np.float32))
            covered += int((labels != IGNORE_INDEX).sum())
            total += labels[0].size * len(chunk)
    return len(ids), covered / total


def refine_with_pseudo_labels(config, ckpt_dir, source_root, target_root, out_dir):
    """Continue training from a checkpoint with the pseudo-label loss active."""
    probe = DatasetReader(target_root, "target", split="train")
    seq, fi = probe.frame_ids()[0]
    if not os.path.exists(probe.pseudo_path(seq, fi)):
        raise FileNotFoundError("pseudo-label files missing; run pseudo-label generation first")
    model, _ = MultiTaskModel.load_checkpoint(ckpt_dir)
    refine_cfg = replace(config, mode="guda_pl")
    return train(refine_cfg, source_root, target_root, out_dir, model=model)
