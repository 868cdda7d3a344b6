"""Corpus readers with access logging and held-out label protection.

Training code only ever constructs train-split readers, which refuse to
touch anything under ``target/heldout/`` and record every path they
open; the hygiene tests assert on that log. The eval split is the only
way to read target labels.
"""

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import gtsr
from .geometry import Intrinsics, RigidTransform

IGNORE_INDEX = 255


class HeldoutAccessError(RuntimeError):
    """A training-split reader tried to read held-out evaluation labels."""


@dataclass
class FrameSample:
    """One training triplet; label fields are None on the unlabeled domain."""

    images: np.ndarray  # [3,3,H,W] float32: previous, current, next
    intrinsics: Intrinsics
    depth: Optional[np.ndarray] = None  # [H,W] meters
    semantic: Optional[np.ndarray] = None  # [H,W] int64
    pseudo: Optional[np.ndarray] = None  # [H,W] int64 with IGNORE_INDEX holes
    poses: Optional[tuple] = None  # (T_t^{t-1}, T_t^{t+1})

    def subsample(self, step):
        """Every ``step``-th pixel; exact pinhole geometry under K/step."""
        if step == 1:
            return self
        return FrameSample(
            images=np.ascontiguousarray(self.images[:, :, ::step, ::step]),
            intrinsics=self.intrinsics.scaled(1.0 / step),
            depth=None if self.depth is None else np.ascontiguousarray(self.depth[::step, ::step]),
            semantic=None
            if self.semantic is None
            else np.ascontiguousarray(self.semantic[::step, ::step]),
            pseudo=None if self.pseudo is None else np.ascontiguousarray(self.pseudo[::step, ::step]),
            poses=self.poses,
        )


class DatasetReader:
    """Reads one domain of a rendered corpus.

    split="train" never reads held-out data (and raises if asked to);
    split="eval" may. Every opened path lands in ``self.accessed``.
    """

    def __init__(self, root, domain, split="train", with_pseudo=False, cache=True):
        if split not in ("train", "eval"):
            raise ValueError("split must be 'train' or 'eval'")
        self.root = root
        self.domain = domain
        self.split = split
        self.with_pseudo = with_pseudo
        self.accessed = []
        self._cache = {} if cache else None
        with open(os.path.join(root, domain, "manifest.json")) as fh:
            self.manifest = json.load(fh)
        self.intrinsics = Intrinsics.from_json(self.manifest["intrinsics"])
        self.frames_per_seq = self.manifest["frames_per_seq"]
        self.sequences = [e["seq_id"] for e in self.manifest["sequences"]]
        self.triplets = [
            (seq, fi)
            for seq in self.sequences
            for fi in range(1, self.frames_per_seq - 1)
        ]
        self.labeled = domain == "source" or split == "eval"

    def __len__(self):
        return len(self.triplets)

    @property
    def n_frames(self):
        return len(self.sequences) * self.frames_per_seq

    def _guard(self, path):
        if self.split == "train" and "heldout" in os.path.normpath(path).split(os.sep):
            raise HeldoutAccessError(f"training reader asked for held-out data: {path}")
        self.accessed.append(path)

    def _read_gtsr(self, path):
        self._guard(path)
        if self._cache is not None and path in self._cache:
            return self._cache[path]
        arr = gtsr.read(path)
        if self._cache is not None:
            self._cache[path] = arr
        return arr

    def _read_json(self, path):
        self._guard(path)
        if self._cache is not None and path in self._cache:
            return self._cache[path]
        with open(path) as fh:
            obj = json.load(fh)
        if self._cache is not None:
            self._cache[path] = obj
        return obj

    def _seq_dir(self, seq):
        return os.path.join(self.root, self.domain, seq)

    def _label_dir(self, seq):
        if self.domain == "target":
            return os.path.join(self.root, "target", "heldout", seq)
        return self._seq_dir(seq)

    def _rgb(self, seq, fi):
        return self._read_gtsr(os.path.join(self._seq_dir(seq), f"frame_{fi:03d}.rgb.gtsr"))

    def _pose(self, seq, fi):
        obj = self._read_json(os.path.join(self._label_dir(seq), f"pose_{fi:03d}.json"))
        return RigidTransform.from_json(obj)

    def load_triplet(self, index):
        seq, fi = self.triplets[index]
        images = np.stack([self._rgb(seq, fi - 1), self._rgb(seq, fi), self._rgb(seq, fi + 1)])
        depth = semantic = pseudo = poses = None
        if self.labeled:
            lab = self._label_dir(seq)
            depth = self._read_gtsr(os.path.join(lab, f"frame_{fi:03d}.depth.gtsr"))
            semantic = self._read_gtsr(os.path.join(lab, f"frame_{fi:03d}.sem.gtsr")).astype(np.int64)
            wc_prev = self._pose(seq, fi - 1)
            wc_t = self._pose(seq, fi)
            wc_next = self._pose(seq, fi + 1)
            poses = (
                wc_prev.inverse().compose(wc_t),
                wc_next.inverse().compose(wc_t),
            )
        if self.with_pseudo:
            path = os.path.join(self._seq_dir(seq), f"frame_{fi:03d}.psem.gtsr")
            if not os.path.exists(path):
                raise FileNotFoundError(f"missing pseudo labels: {path}")
            pseudo = self._read_gtsr(path).astype(np.int64)
        return FrameSample(
            images=images.astype(np.float32),
            intrinsics=self.intrinsics,
            depth=depth,
            semantic=semantic,
            pseudo=pseudo,
            poses=poses,
        )

    # frame-level access (pseudo-label generation, evaluation)

    def frame_ids(self):
        return [(seq, fi) for seq in self.sequences for fi in range(self.frames_per_seq)]

    def load_frame(self, seq, fi, with_labels=False):
        image = self._rgb(seq, fi)
        if not with_labels:
            return image, None, None
        if not self.labeled:
            raise HeldoutAccessError("labels requested from an unlabeled reader")
        lab = self._label_dir(seq)
        depth = self._read_gtsr(os.path.join(lab, f"frame_{fi:03d}.depth.gtsr"))
        semantic = self._read_gtsr(os.path.join(lab, f"frame_{fi:03d}.sem.gtsr")).astype(np.int64)
        return image, depth, semantic

    def pseudo_path(self, seq, fi):
        return os.path.join(self._seq_dir(seq), f"frame_{fi:03d}.psem.gtsr")
