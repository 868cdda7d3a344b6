"""Procedural two-domain scene generator and ray-cast renderer.

Scenes are a textured ground plane plus axis-aligned textured boxes of
four object classes under a directional light; the camera drives forward
through them. The "source" and "target" domains share the geometry
generator and intrinsics but differ in class palettes, texture family,
color transform, noise, and object density. Rendering is deterministic
in (seed, scene index, pose) and produces image, metric depth, and class
maps, which makes the renderer the ground-truth oracle for warping and
evaluation.

World frame: x right, y down, z forward; the ground plane is y = 0 and
the camera travels at y = -CAMERA_HEIGHT.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import gtsr
from .geometry import Intrinsics, RigidTransform, euler6_to_transform

CLASS_NAMES = ("ground", "sky", "building", "vehicle", "pole", "vegetation")
GROUND, SKY, BUILDING, VEHICLE, POLE, VEGETATION = range(6)

CAMERA_HEIGHT = 1.5
D_MAX = 100.0
DEFAULT_INTRINSICS = Intrinsics(fx=96.0, fy=96.0, cx=96.0, cy=32.0, width=192, height=64)

# class palettes per texture family (albedo RGB); the target palette is a
# shifted, not remapped, version of the source one: the class-color link
# weakens across the gap but is not inverted
_PALETTES = {
    "source": {
        GROUND: (0.42, 0.40, 0.36),
        SKY: (0.62, 0.72, 0.92),
        BUILDING: (0.56, 0.58, 0.64),
        VEHICLE: (0.66, 0.28, 0.22),
        POLE: (0.30, 0.30, 0.32),
        VEGETATION: (0.22, 0.52, 0.24),
    },
    "target": {
        GROUND: (0.28, 0.28, 0.33),
        SKY: (0.80, 0.78, 0.70),
        BUILDING: (0.52, 0.44, 0.38),
        VEHICLE: (0.42, 0.24, 0.26),
        POLE: (0.26, 0.24, 0.22),
        VEGETATION: (0.26, 0.42, 0.18),
    },
}

# directional/ambient lighting balance per texture family
_AMBIENT = {"source": 0.50, "target": 0.42}


@dataclass(frozen=True)
class DomainConfig:
    domain: str = "source"
    seed: int = 0
    color_gain: tuple = (1.0, 1.0, 1.0)
    color_bias: tuple = (0.0, 0.0, 0.0)
    color_gamma: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.005
    texture_family: str = "source"
    density: tuple = (3, 10)
    speed_range: tuple = (0.3, 0.9)

    def __post_init__(self):
        if self.domain not in ("source", "target"):
            raise ValueError("domain must be 'source' or 'target'")
        if self.texture_family not in _PALETTES:
            raise ValueError(f"unknown texture family {self.texture_family}")


def default_domain_config(domain, seed):
    """The stock source/target pair: shared geometry, shifted appearance."""
    if domain == "source":
        return DomainConfig(domain="source", seed=seed)
    return DomainConfig(
        domain="target",
        seed=seed,
        color_gain=(0.86, 0.94, 1.08),
        color_bias=(0.02, 0.01, -0.02),
        color_gamma=(1.18, 1.06, 0.94),
        noise_sigma=0.008,
        texture_family="target",
        density=(4, 12),
        speed_range=(0.2, 1.0),
    )


@dataclass
class Box:
    lo: np.ndarray  # [3] min corner
    hi: np.ndarray  # [3] max corner
    class_id: int
    shade_jitter: float
    tex_phase: tuple


@dataclass
class Scene:
    index: int
    boxes: list
    ground_phase: tuple
    light_dir: np.ndarray  # unit, points from the light into the scene (y > 0)
    palette: dict
    family: str
    skipped_objects: int = 0


_CLASS_SIZES = {
    # (width x, height y, depth z) ranges per object class
    BUILDING: ((3.0, 7.0), (4.0, 9.0), (3.0, 7.0)),
    VEHICLE: ((1.7, 2.3), (1.3, 1.9), (3.2, 5.0)),
    POLE: ((0.25, 0.45), (3.0, 6.0), (0.25, 0.45)),
    VEGETATION: ((1.2, 3.0), (1.5, 3.2), (1.2, 3.0)),
}
_OBJECT_CLASSES = (BUILDING, VEHICLE, POLE, VEGETATION)
_CORRIDOR = 2.4  # |x| kept free of objects so the camera path stays outside geometry


def _scene_rng(config, scene_index, stream):
    seq = np.random.SeedSequence(entropy=config.seed, spawn_key=(scene_index, stream))
    return np.random.Generator(np.random.PCG64(seq))


def generate_scene(config, scene_index):
    """Deterministic scene layout: 3..12 non-overlapping boxes in a 40 m frustum."""
    rng = _scene_rng(config, scene_index, 0)
    n_objects = int(rng.integers(config.density[0], config.density[1] + 1))
    boxes = []
    skipped = 0
    for _ in range(n_objects):
        cls = int(rng.choice(_OBJECT_CLASSES))
        (wx0, wx1), (wy0, wy1), (wz0, wz1) = _CLASS_SIZES[cls]
        placed = False
        for _attempt in range(24):
            sx = rng.uniform(wx0, wx1)
            sy = rng.uniform(wy0, wy1)
            sz = rng.uniform(wz0, wz1)
            side = -1.0 if rng.random() < 0.5 else 1.0
            cx = side * rng.uniform(_CORRIDOR + sx / 2 + 0.2, 14.0)
            cz = rng.uniform(5.0, 38.0)
            lo = np.array([cx - sx / 2, -sy, cz - sz / 2])
            hi = np.array([cx + sx / 2, 0.0, cz + sz / 2])
            if all(
                hi[0] + 0.3 < b.lo[0]
                or lo[0] - 0.3 > b.hi[0]
                or hi[2] + 0.3 < b.lo[2]
                or lo[2] - 0.3 > b.hi[2]
                for b in boxes
            ):
                boxes.append(
                    Box(
                        lo,
                        hi,
                        cls,
                        shade_jitter=float(rng.uniform(0.85, 1.15)),
                        tex_phase=tuple(rng.uniform(0.0, 6.283, size=3)),
                    )
                )
                placed = True
                break
        if not placed:
            skipped += 1
    elev = rng.uniform(0.55, 0.95)
    azim = rng.uniform(-0.9, 0.9)
    light = np.array([np.sin(azim), elev, np.cos(azim) * 0.6])
    light /= np.linalg.norm(light)
    return Scene(
        index=scene_index,
        boxes=boxes,
        ground_phase=tuple(rng.uniform(0.0, 6.283, size=3)),
        light_dir=light,
        palette=_PALETTES[config.texture_family],
        family=config.texture_family,
        skipped_objects=skipped,
    )


# -- texturing --------------------------------------------------------------


def _hash_lattice(ix, iy, iz, salt):
    """Deterministic uint64 lattice hash -> uniform values in [-1, 1]."""
    h = (
        ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        ^ iy.astype(np.uint64) * np.uint64(0xBF58476D1CE4E5B9)
        ^ iz.astype(np.uint64) * np.uint64(0x94D049BB133111EB)
        ^ np.uint64(salt)
    )
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 52) - 1.0


def _value_noise(points, cell, salt):
    """Smooth aperiodic noise field over world points (trilinear lattice).

    Aperiodicity matters: repeating patterns would give the photometric
    reprojection loss false depth minima at every period.
    """
    q = points / cell
    i0 = np.floor(q).astype(np.int64)
    f = q - i0
    f = f * f * (3.0 - 2.0 * f)  # smoothstep keeps the field C1
    out = np.zeros(len(points))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (f[:, 0] if dx else 1.0 - f[:, 0])
                    * (f[:, 1] if dy else 1.0 - f[:, 1])
                    * (f[:, 2] if dz else 1.0 - f[:, 2])
                )
                out += w * _hash_lattice(i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz, salt)
    return out


_FAMILY_CELLS = {"source": (2.6, 0.85), "target": (3.3, 1.05)}


def _pattern(family, points, phase, fade):
    """Broadband albedo modulation in about [-1, 1] over world points.

    Two value-noise octaves; the fine octave fades with viewing distance
    so distant surfaces stay smooth relative to the pixel footprint.
    """
    coarse_cell, fine_cell = _FAMILY_CELLS[family]
    salt0 = int(phase[0] * 1e6) & 0xFFFFFFFF
    salt1 = (int(phase[1] * 1e6) & 0xFFFFFFFF) | (1 << 33)
    s = 0.62 * _value_noise(points, coarse_cell, salt0)
    s += 0.38 * fade * _value_noise(points, fine_cell, salt1)
    return s


_ROUGHNESS = {GROUND: 0.40, BUILDING: 0.32, VEHICLE: 0.26, POLE: 0.22, VEGETATION: 0.55}


def _albedo(scene, cls, points, phase, dist, jitter=1.0):
    base = np.asarray(scene.palette[cls])
    fade = 1.0 / (1.0 + 0.08 * dist)
    s = _pattern(scene.family, points, phase, fade)
    mod = jitter * (1.0 + _ROUGHNESS[cls] * s)
    return base[None, :] * np.clip(mod, 0.05, None)[:, None]


def _sky_color(scene, dirs):
    base = np.asarray(scene.palette[SKY])
    elev = np.clip(-dirs[:, 1] / np.linalg.norm(dirs, axis=1), 0.0, 1.0)
    fade = 0.82 + 0.35 * elev
    return np.clip(base[None, :] * fade[:, None], 0.0, 1.0)


# -- ray casting -------------------------------------------------------------


def render_frame(scene, pose, K, config, frame_index=0):
    """Ray-cast one frame from camera-to-world ``pose``.

    Returns (image [3,H,W] float32 in [0,1], depth [H,W] float32 meters,
    semantic [H,W] uint8). Lambertian shading with the scene light, then
    the domain color transform and clamped Gaussian noise on the image.
    """
    h, w = K.height, K.width
    us = (np.arange(w) - K.cx) / K.fx
    vs = (np.arange(h) - K.cy) / K.fy
    uu, vv = np.meshgrid(us, vs)
    dirs_cam = np.stack([uu.ravel(), vv.ravel(), np.ones(h * w)], axis=1)
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    n_rays = h * w
    best_t = np.full(n_rays, np.inf)
    hit_class = np.full(n_rays, SKY, dtype=np.int64)
    hit_normal = np.zeros((n_rays, 3))
    hit_box = np.full(n_rays, -1, dtype=np.int64)

    dy = dirs[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dy > 1e-9, (0.0 - origin[1]) / dy, np.inf)
    ground_hit = t_ground < best_t
    best_t[ground_hit] = t_ground[ground_hit]
    hit_class[ground_hit] = GROUND
    hit_normal[ground_hit] = (0.0, -1.0, 0.0)

    with np.errstate(divide="ignore"):
        inv_dirs = np.where(np.abs(dirs) > 1e-12, 1.0 / dirs, 1e12 * np.sign(dirs) + 1e12)
    for bi, box in enumerate(scene.boxes):
        t1 = (box.lo[None, :] - origin[None, :]) * inv_dirs
        t2 = (box.hi[None, :] - origin[None, :]) * inv_dirs
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        near_ax = np.argmax(tmin, axis=1)
        tnear = tmin[np.arange(n_rays), near_ax]
        tfar = tmax.min(axis=1)
        hit = (tnear <= tfar) & (tnear > 1e-6) & (tnear < best_t)
        if not hit.any():
            continue
        best_t[hit] = tnear[hit]
        hit_class[hit] = box.class_id
        hit_box[hit] = bi
        axis = near_ax[hit]
        sign = -np.sign(dirs[hit, axis])
        normal = np.zeros((int(hit.sum()), 3))
        normal[np.arange(len(axis)), axis] = sign
        hit_normal[hit] = normal

    solid = np.isfinite(best_t)
    depth = np.where(solid, np.minimum(best_t, D_MAX), D_MAX)
    hit_class[~solid] = SKY

    points = origin[None, :] + dirs * np.where(solid, best_t, D_MAX)[:, None]
    colors = np.zeros((n_rays, 3))
    sky_mask = hit_class == SKY
    if sky_mask.any():
        colors[sky_mask] = _sky_color(scene, dirs[sky_mask])

    ambient = _AMBIENT[scene.family]
    lambert = np.maximum(0.0, -(hit_normal @ scene.light_dir))
    shade = ambient + (1.0 - ambient) * lambert
    gmask = hit_class == GROUND
    if gmask.any():
        colors[gmask] = _albedo(
            scene, GROUND, points[gmask], scene.ground_phase, depth[gmask]
        ) * shade[gmask, None]
    for bi, box in enumerate(scene.boxes):
        bmask = hit_box == bi
        if bmask.any():
            colors[bmask] = _albedo(
                scene,
                box.class_id,
                points[bmask],
                box.tex_phase,
                depth[bmask],
                box.shade_jitter,
            ) * shade[bmask, None]

    gain = np.asarray(config.color_gain)
    bias = np.asarray(config.color_bias)
    gamma = np.asarray(config.color_gamma)
    colors = np.clip(colors, 0.0, 1.0) ** gamma[None, :] * gain[None, :] + bias[None, :]

    if config.noise_sigma > 0:
        nrng = _scene_rng(config, scene.index, 1000 + frame_index)
        colors = colors + nrng.normal(0.0, config.noise_sigma, size=colors.shape)
    colors = np.clip(colors, 0.0, 1.0)

    image = colors.T.reshape(3, h, w).astype(np.float32)
    return (
        image,
        depth.reshape(h, w).astype(np.float32),
        hit_class.reshape(h, w).astype(np.uint8),
    )


def camera_trajectory(config, scene_index, n_frames):
    """Smooth forward drive: per-frame speed in the domain range, small yaw."""
    rng = _scene_rng(config, scene_index, 1)
    speed = rng.uniform(*config.speed_range)
    yaw = 0.0
    x = rng.uniform(-0.6, 0.6)
    z = rng.uniform(-1.0, 1.0)
    poses = []
    for _ in range(n_frames):
        poses.append(
            euler6_to_transform([x, -CAMERA_HEIGHT, z, 0.0, yaw, 0.0])
        )
        step = speed + rng.uniform(-0.06, 0.06)
        yaw += rng.uniform(-0.012, 0.012)
        x += np.sin(yaw) * step + rng.uniform(-0.02, 0.02)
        z += np.cos(yaw) * step
        x = float(np.clip(x, -1.8, 1.8))
    return poses


# -- dataset writing ---------------------------------------------------------


def make_dataset(config, n_sequences, frames_per_seq, out_dir, K=None):
    """Render a training corpus under ``out_dir``/<domain>/.

    Source sequences carry depth, semantics and per-frame camera poses;
    target sequences carry only images, with their evaluation labels in a
    separate ``heldout/`` subtree that training code must never read.
    Returns the corpus manifest (also written as manifest.json).
    """
    if frames_per_seq < 3:
        raise ValueError("need at least 3 frames per sequence for triplets")
    K = K or DEFAULT_INTRINSICS
    domain_dir = os.path.join(out_dir, config.domain)
    os.makedirs(domain_dir, exist_ok=True)
    heldout_root = os.path.join(out_dir, "target", "heldout")
    seq_entries = []
    for si in range(n_sequences):
        seq_id = f"seq_{si:04d}"
        seq_dir = os.path.join(domain_dir, seq_id)
        os.makedirs(seq_dir, exist_ok=True)
        scene = generate_scene(config, si)
        poses = camera_trajectory(config, si, frames_per_seq)
        K.save(os.path.join(seq_dir, "intrinsics.json"))
        held_dir = None
        if config.domain == "target":
            held_dir = os.path.join(heldout_root, seq_id)
            os.makedirs(held_dir, exist_ok=True)
        for fi in range(frames_per_seq):
            image, depth, sem = render_frame(scene, poses[fi], K, config, fi)
            gtsr.write(os.path.join(seq_dir, f"frame_{fi:03d}.rgb.gtsr"), image)
            if config.domain == "source":
                gtsr.write(os.path.join(seq_dir, f"frame_{fi:03d}.depth.gtsr"), depth)
                gtsr.write(
                    os.path.join(seq_dir, f"frame_{fi:03d}.sem.gtsr"),
                    sem.astype(np.float32),
                )
                with open(os.path.join(seq_dir, f"pose_{fi:03d}.json"), "w") as fh:
                    json.dump(poses[fi].to_json(), fh)
            else:
                gtsr.write(os.path.join(held_dir, f"frame_{fi:03d}.depth.gtsr"), depth)
                gtsr.write(
                    os.path.join(held_dir, f"frame_{fi:03d}.sem.gtsr"),
                    sem.astype(np.float32),
                )
                with open(os.path.join(held_dir, f"pose_{fi:03d}.json"), "w") as fh:
                    json.dump(poses[fi].to_json(), fh)
        entry = {
            "seq_id": seq_id,
            "n_frames": frames_per_seq,
            "n_triplets": frames_per_seq - 2,
            "skipped_objects": scene.skipped_objects,
        }
        seq_entries.append(entry)
        with open(os.path.join(seq_dir, "manifest.json"), "w") as fh:
            json.dump(entry, fh, sort_keys=True, indent=1)
    manifest = {
        "domain": config.domain,
        "seed": config.seed,
        "n_sequences": n_sequences,
        "frames_per_seq": frames_per_seq,
        "n_samples": sum(e["n_triplets"] for e in seq_entries),
        "intrinsics": K.to_json(),
        "sequences": seq_entries,
    }
    with open(os.path.join(domain_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


# -- renderer-as-oracle utilities --------------------------------------------


def relative_pose(pose_t, pose_ref):
    """Transform taking camera-t coordinates into camera-ref coordinates."""
    return pose_ref.inverse().compose(pose_t)


def occlusion_mask(depth_t, depth_ref, rel_pose, K, tol=0.04):
    """Pixels of frame t whose surface is visible in the reference frame.

    Projects every pixel into the reference view and z-tests the landing
    depth against the reference depth map (min of the 2x2 neighborhood,
    conservative). Pixels landing outside the reference image, behind an
    occluder, or on a depth discontinuity are masked out.
    """
    h, w = depth_t.shape
    us = (np.arange(w) - K.cx) / K.fx
    vs = (np.arange(h) - K.cy) / K.fy
    uu, vv = np.meshgrid(us, vs)
    pts = np.stack([uu * depth_t, vv * depth_t, depth_t], axis=-1).reshape(-1, 3)
    q = pts @ rel_pose.rotation.T + rel_pose.translation
    z = q[:, 2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    u = K.fx * q[:, 0] / zs + K.cx
    v = K.fy * q[:, 1] / zs + K.cy
    ok &= (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    x0 = np.clip(np.floor(u).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(v).astype(int), 0, h - 2)
    neigh = np.stack(
        [
            depth_ref[y0, x0],
            depth_ref[y0, x0 + 1],
            depth_ref[y0 + 1, x0],
            depth_ref[y0 + 1, x0 + 1],
        ]
    )
    near = neigh.min(axis=0)
    spread = neigh.max(axis=0) - near
    ok &= z <= near * (1.0 + tol) + 0.05
    ok &= spread <= np.maximum(0.5, 0.05 * near)
    return ok.reshape(h, w)
