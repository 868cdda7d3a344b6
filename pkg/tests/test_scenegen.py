import json
import os

import numpy as np
import pytest

from geoadapt import diffcore as dc
from geoadapt import gtsr
from geoadapt.geometry import Intrinsics, warp_image
from geoadapt.scenegen import (
    CLASS_NAMES,
    D_MAX,
    DEFAULT_INTRINSICS,
    GROUND,
    SKY,
    DomainConfig,
    camera_trajectory,
    default_domain_config,
    generate_scene,
    make_dataset,
    occlusion_mask,
    relative_pose,
    render_frame,
)

SRC = default_domain_config("source", 7)
TGT = default_domain_config("target", 107)
K = DEFAULT_INTRINSICS


class TestSceneGeneration:
    def test_deterministic(self):
        a = generate_scene(SRC, 5)
        b = generate_scene(SRC, 5)
        assert len(a.boxes) == len(b.boxes)
        for ba, bb in zip(a.boxes, b.boxes):
            assert np.array_equal(ba.lo, bb.lo) and np.array_equal(ba.hi, bb.hi)
            assert ba.class_id == bb.class_id

    def test_object_count_within_bounds(self):
        for i in range(30):
            scene = generate_scene(SRC, i)
            assert len(scene.boxes) + scene.skipped_objects <= 12
            assert len(scene.boxes) >= 1

    def test_class_histogram_covers_all_classes(self):
        seen = set()
        for i in range(100):
            cfg = SRC if i % 2 == 0 else TGT
            scene = generate_scene(cfg, i)
            seen.update(b.class_id for b in scene.boxes)
        seen.update((GROUND, SKY))  # always present in every rendered frame
        assert seen == set(range(len(CLASS_NAMES)))

    def test_boxes_do_not_overlap(self):
        for i in range(20):
            boxes = generate_scene(SRC, i).boxes
            for j, a in enumerate(boxes):
                for b in boxes[j + 1 :]:
                    sep = (
                        a.hi[0] < b.lo[0]
                        or a.lo[0] > b.hi[0]
                        or a.hi[2] < b.lo[2]
                        or a.lo[2] > b.hi[2]
                    )
                    assert sep


class TestRenderFrame:
    def test_deterministic_bits(self):
        scene = generate_scene(SRC, 2)
        pose = camera_trajectory(SRC, 2, 4)[1]
        a = render_frame(scene, pose, K, SRC, 1)
        b = render_frame(scene, pose, K, SRC, 1)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_ground_rows_and_horizon(self):
        scene = generate_scene(SRC, 0)
        pose = camera_trajectory(SRC, 0, 3)[0]
        img, depth, sem = render_frame(scene, pose, K, SRC, 0)
        assert (sem[-1] == GROUND).all()
        col = depth[:, K.width // 2]
        ground_rows = sem[:, K.width // 2] == GROUND
        gd = col[ground_rows]
        assert np.all(np.diff(gd) <= 1e-5)  # nearer toward the bottom
        assert (sem[0] != GROUND).all()

    def test_sky_depth_is_dmax(self):
        scene = generate_scene(SRC, 1)
        pose = camera_trajectory(SRC, 1, 3)[0]
        _, depth, sem = render_frame(scene, pose, K, SRC, 0)
        assert np.all(depth[sem == SKY] == D_MAX)
        assert depth.max() <= D_MAX

    def test_image_in_unit_range(self):
        scene = generate_scene(TGT, 3)
        pose = camera_trajectory(TGT, 3, 3)[0]
        img, _, _ = render_frame(scene, pose, K, TGT, 0)
        assert img.min() >= 0.0 and img.max() <= 1.0 and img.dtype == np.float32

    def test_fronto_parallel_box_face_constant_depth(self):
        cfg = DomainConfig(domain="source", seed=0, noise_sigma=0.0)
        scene = generate_scene(cfg, 4)
        from geoadapt.scenegen import Box

        scene.boxes = [
            Box(
                np.array([-2.0, -3.0, 10.0]),
                np.array([2.0, 0.0, 12.0]),
                2,
                1.0,
                (0.1, 0.2, 0.3),
            )
        ]
        pose = camera_trajectory(cfg, 4, 3)[0]
        _, depth, sem = render_frame(scene, pose, K, cfg, 0)
        face = depth[sem == 2]
        assert face.size > 50
        assert face.max() - face.min() < 1e-6

    def test_domains_differ_in_stats_not_intrinsics(self):
        s_scene = generate_scene(SRC, 6)
        t_scene = generate_scene(TGT, 6)
        pose = camera_trajectory(SRC, 6, 3)[0]
        img_s, _, _ = render_frame(s_scene, pose, K, SRC, 0)
        img_t, _, _ = render_frame(t_scene, pose, K, TGT, 0)
        assert abs(img_s.mean() - img_t.mean()) > 0.02


class TestWarpOracle:
    def test_reconstruction_from_ground_truth(self):
        # the renderer is the oracle for the differentiable warp
        maes = []
        for cfg, si in ((SRC, 0), (SRC, 1), (TGT, 2)):
            scene = generate_scene(cfg, si)
            poses = camera_trajectory(cfg, si, 8)
            for fi in (2, 5):
                img_t, dep_t, _ = render_frame(scene, poses[fi], K, cfg, fi)
                img_r, dep_r, _ = render_frame(scene, poses[fi + 1], K, cfg, fi + 1)
                rel = relative_pose(poses[fi], poses[fi + 1])
                warped, valid = warp_image(
                    dc.constant(img_r[None].astype(np.float64)),
                    dc.constant(dep_t[None, None].astype(np.float64)),
                    [rel],
                    K,
                )
                occ = occlusion_mask(
                    dep_t.astype(np.float64), dep_r.astype(np.float64), rel, K
                )
                m = valid[0, 0] & occ
                assert m.mean() > 0.3
                maes.append(np.abs(warped.data[0] - img_t).mean(axis=0)[m].mean())
        assert max(maes) < 0.02

    def test_class_reprojection_consistency(self):
        scene = generate_scene(SRC, 3)
        poses = camera_trajectory(SRC, 3, 8)
        _, dep_t, sem_t = render_frame(scene, poses[4], K, SRC, 4)
        _, dep_r, sem_r = render_frame(scene, poses[5], K, SRC, 5)
        rel = relative_pose(poses[4], poses[5])
        h, w = dep_t.shape
        us = (np.arange(w) - K.cx) / K.fx
        vs = (np.arange(h) - K.cy) / K.fy
        xn, yn = np.meshgrid(us, vs)
        pts = np.stack([xn * dep_t, yn * dep_t, dep_t], -1).reshape(-1, 3)
        q = pts @ rel.rotation.T + rel.translation
        z = q[:, 2]
        u = K.fx * q[:, 0] / z + K.cx
        v = K.fy * q[:, 1] / z + K.cy
        ok = (
            occlusion_mask(dep_t.astype(np.float64), dep_r.astype(np.float64), rel, K).ravel()
            & (u >= 0)
            & (u <= w - 1)
            & (v >= 0)
            & (v <= h - 1)
        )
        ui = np.clip(np.round(u), 0, w - 1).astype(int)
        vi = np.clip(np.round(v), 0, h - 1).astype(int)
        same = sem_r[vi, ui] == sem_t.ravel()
        assert same[ok].mean() >= 0.95


class TestMakeDataset:
    def test_layout_and_manifest(self, tmp_path):
        root = tmp_path / "corpus"
        man_s = make_dataset(default_domain_config("source", 1), 2, 4, root)
        man_t = make_dataset(default_domain_config("target", 2), 2, 4, root)
        assert man_s["n_samples"] == 2 * (4 - 2)
        # source carries labels next to frames
        seq = root / "source" / "seq_0000"
        assert (seq / "frame_000.rgb.gtsr").exists()
        assert (seq / "frame_000.depth.gtsr").exists()
        assert (seq / "frame_000.sem.gtsr").exists()
        assert (seq / "pose_000.json").exists()
        assert (seq / "intrinsics.json").exists()
        # target carries only rgb in the training tree
        tseq = root / "target" / "seq_0001"
        assert (tseq / "frame_001.rgb.gtsr").exists()
        assert not (tseq / "frame_001.depth.gtsr").exists()
        held = root / "target" / "heldout" / "seq_0001"
        assert (held / "frame_001.depth.gtsr").exists()
        assert (held / "frame_001.sem.gtsr").exists()
        # per-sequence manifest and root manifest agree with files on disk
        entry = json.loads((seq / "manifest.json").read_text())
        rgb_count = len(list(seq.glob("frame_*.rgb.gtsr")))
        assert entry["n_frames"] == rgb_count == 4
        assert man_t["n_samples"] == sum(
            e["n_triplets"] for e in man_t["sequences"]
        )

    def test_triplet_count_sliding_window(self, tmp_path):
        man = make_dataset(default_domain_config("source", 3), 1, 10, tmp_path / "c")
        assert man["sequences"][0]["n_triplets"] == 8

    def test_byte_identical_regeneration(self, tmp_path):
        a_root = tmp_path / "a"
        b_root = tmp_path / "b"
        make_dataset(default_domain_config("target", 9), 2, 4, a_root)
        make_dataset(default_domain_config("target", 9), 2, 4, b_root)
        rels = []
        for base, _dirs, files in os.walk(a_root):
            for f in files:
                rels.append(os.path.relpath(os.path.join(base, f), a_root))
        assert rels
        for rel in rels:
            with open(a_root / rel, "rb") as fa, open(b_root / rel, "rb") as fb:
                assert fa.read() == fb.read(), rel

    def test_frames_per_seq_validation(self, tmp_path):
        with pytest.raises(ValueError):
            make_dataset(SRC, 1, 2, tmp_path / "bad")

    def test_intrinsics_identical_across_domains(self, tmp_path):
        root = tmp_path / "c2"
        make_dataset(default_domain_config("source", 4), 1, 3, root)
        make_dataset(default_domain_config("target", 104), 1, 3, root)
        a = Intrinsics.load(root / "source" / "seq_0000" / "intrinsics.json")
        b = Intrinsics.load(root / "target" / "seq_0000" / "intrinsics.json")
        assert a == b
