"""Deterministic synthetic scenes with exact analytic z-depth.

Scenes are a finite ground plane plus random boxes and spheres, rendered with
flat Lambertian shading over per-primitive checkerboard albedo. Cameras orbit
the scene center; poses are re-anchored so frame 0 is the identity. Depth is
the exact ray-surface intersection z-component (0 = no hit).

On-disk format ("USCN"): magic, version u32, length-prefixed JSON header,
then per-frame raw little-endian f32 image (3,H,W) and depth (H,W) payloads.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import geometry as geo
from .supervision import compute_scale_target

SCENE_MAGIC = b"USCN"
SCENE_VERSION = 1

_EPS = 1e-9
_LIGHT = np.array([0.35, 0.85, 0.4])
_LIGHT_DIR = _LIGHT / np.linalg.norm(_LIGHT)


class SceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    n_frames: int = 4
    image_size: int = 64
    fov_range: tuple = (0.7, 1.4)           # radians
    n_boxes: int = 2
    n_spheres: int = 2
    orbit_radius_range: tuple = (4.0, 7.0)
    look_jitter: float = 0.4                # meters around the scene center
    plane_extent: float = 12.0
    metric: bool = True

    def __post_init__(self):
        if self.n_frames < 1:
            raise SceneError("n_frames must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["fov_range"] = list(self.fov_range)
        d["orbit_radius_range"] = list(self.orbit_radius_range)
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        if "fov_range" in d:
            d["fov_range"] = tuple(d["fov_range"])
        if "orbit_radius_range" in d:
            d["orbit_radius_range"] = tuple(d["orbit_radius_range"])
        return SceneSpec(**d)


@dataclass
class SceneSample:
    images: list                 # (3, H, W) float64 in [0, 1]
    depths: list                 # (H, W) float64 meters, 0 = no hit
    intrinsics: geo.Intrinsics   # shared across frames
    poses: list                  # frame-0 anchored world-from-camera
    metric: bool
    s_gt: float | None = None
    # generation-only context (not serialized): primitives and the original
    # un-anchored camera poses, used by the cross-view consistency oracle
    primitives: list = field(default_factory=list, repr=False)
    world_poses: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Plane:
    extent: float
    colors: np.ndarray  # (2, 3)

    def intersect(self, origin, dirs):
        dy = dirs[..., 1]
        t = np.where(np.abs(dy) > _EPS, -origin[1] / np.where(
            np.abs(dy) > _EPS, dy, 1.0), np.inf)
        hit = origin[None, None, :] + t[..., None] * dirs
        inside = (np.abs(hit[..., 0]) <= self.extent) & (np.abs(hit[..., 2]) <= self.extent)
        t = np.where((t > _EPS) & inside, t, np.inf)
        normal = np.zeros_like(dirs)
        normal[..., 1] = 1.0
        return t, normal

    def albedo(self, points):
        parity = (np.floor(points[..., 0]) + np.floor(points[..., 2])).astype(int) % 2
        return self.colors[parity]

    def contains(self, c, margin):
        return c[1] < margin


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    colors: np.ndarray

    def intersect(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc
        cc = oc @ oc - self.radius ** 2
        disc = b * b - cc
        sq = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - sq
        t1 = -b + sq
        t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
        t = np.where(disc > 0, t, np.inf)
        hit = origin[None, None, :] + t[..., None] * dirs
        normal = (hit - self.center) / self.radius
        return t, normal

    def albedo(self, points):
        parity = np.floor(2.0 * (points - self.center)).sum(axis=-1).astype(int) % 2
        return self.colors[parity]

    def contains(self, c, margin):
        return np.linalg.norm(c - self.center) < self.radius + margin


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    colors: np.ndarray

    def intersect(self, origin, dirs):
        inv = np.where(np.abs(dirs) > _EPS, 1.0 / np.where(
            np.abs(dirs) > _EPS, dirs, 1.0), np.inf * np.sign(dirs + _EPS))
        t_lo = (self.lo - origin) * inv
        t_hi = (self.hi - origin) * inv
        t1 = np.minimum(t_lo, t_hi)
        t2 = np.maximum(t_lo, t_hi)
        t_near = t1.max(axis=-1)
        t_far = t2.min(axis=-1)
        t = np.where((t_near <= t_far) & (t_near > _EPS), t_near, np.inf)
        hit = origin[None, None, :] + t[..., None] * dirs
        # face normal: axis where the near slab was binding
        axis = np.argmax(t1, axis=-1)
        normal = np.zeros_like(dirs)
        idx = np.indices(axis.shape)
        normal[idx[0], idx[1], axis] = -np.sign(dirs[idx[0], idx[1], axis])
        return t, normal

    def albedo(self, points):
        parity = np.floor(2.0 * points).sum(axis=-1).astype(int) % 2
        return self.colors[parity]

    def contains(self, c, margin):
        return bool(np.all(c > self.lo - margin) and np.all(c < self.hi + margin))


def raycast(origin, dirs, primitives):
    """Nearest-hit distance, normal, and albedo per ray (inf = no hit)."""
    best_t = np.full(dirs.shape[:2], np.inf)
    best_n = np.zeros_like(dirs)
    best_c = np.zeros_like(dirs)
    with np.errstate(invalid="ignore", divide="ignore"):
        for prim in primitives:
            t, n = prim.intersect(origin, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_n = np.where(closer[..., None], n, best_n)
            if np.any(closer):
                hit = origin[None, None, :] + np.where(
                    np.isfinite(t), t, 0.0)[..., None] * dirs
                best_c = np.where(closer[..., None], prim.albedo(hit), best_c)
    return best_t, best_n, best_c


# ---------------------------------------------------------------------------
# generation


def _random_colors(rng):
    return rng.uniform(0.15, 0.95, size=(2, 3))


def _build_primitives(spec, rng):
    prims = [Plane(extent=spec.plane_extent, colors=_random_colors(rng))]
    for _ in range(spec.n_boxes):
        center = np.array([rng.uniform(-3, 3), 0.0, rng.uniform(-3, 3)])
        half = rng.uniform(0.3, 1.0, size=3)
        lo = center - np.array([half[0], 0.0, half[2]])
        hi = center + np.array([half[0], 2 * half[1], half[2]])
        prims.append(Box(lo=lo, hi=hi, colors=_random_colors(rng)))
    for _ in range(spec.n_spheres):
        radius = rng.uniform(0.3, 1.0)
        center = np.array([rng.uniform(-3, 3),
                           rng.uniform(radius + 0.2, 2.5),
                           rng.uniform(-3, 3)])
        prims.append(Sphere(center=center, radius=radius, colors=_random_colors(rng)))
    return prims


def _look_at(center, target):
    z = target - center
    nz = np.linalg.norm(z)
    if nz < _EPS:
        raise SceneError("camera placed at its look target")
    z = z / nz
    down = np.array([0.0, -1.0, 0.0])
    x = np.cross(z, down)
    nx = np.linalg.norm(x)
    if nx < 1e-6:  # looking straight up/down; pick an arbitrary horizontal axis
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / nx
    y = np.cross(z, x)
    return geo.Pose(np.stack([x, y, z], axis=-1), center)


def _place_camera(spec, rng, prims, frame_index, max_tries=100):
    for _ in range(max_tries):
        theta = 2 * np.pi * frame_index / spec.n_frames + rng.uniform(-0.3, 0.3)
        radius = rng.uniform(*spec.orbit_radius_range)
        height = rng.uniform(1.0, 0.6 * radius)
        center = np.array([radius * np.cos(theta), height, radius * np.sin(theta)])
        target = rng.uniform(-spec.look_jitter, spec.look_jitter, size=3)
        target[1] = abs(target[1])
        if any(p.contains(center, 0.3) for p in prims):
            continue
        return _look_at(center, target)
    raise SceneError("could not place camera outside all primitives")


def generate_scene(spec: SceneSpec) -> SceneSample:
    """Render a scene; identical seed gives a bit-identical sample."""
    rng = np.random.default_rng(spec.seed)
    prims = _build_primitives(spec, rng)
    fov = rng.uniform(*spec.fov_range)
    k = geo.K_from_fov([fov, fov], spec.image_size, spec.image_size)
    raymap = geo.make_raymap(k)

    world_poses = [_place_camera(spec, rng, prims, i) for i in range(spec.n_frames)]
    images, depths = [], []
    for pose in world_poses:
        dirs_world = raymap @ pose.rotation.T
        t, normals, albedo = raycast(pose.translation, dirs_world, prims)
        hit = np.isfinite(t)
        depth = np.where(hit, t * raymap[..., 2], 0.0)
        shade = 0.2 + 0.8 * np.maximum(normals @ _LIGHT_DIR, 0.0)
        img = np.clip(albedo * shade[..., None], 0.0, 1.0)
        img = np.where(hit[..., None], img, 0.05)  # dark background
        images.append(np.ascontiguousarray(img.transpose(2, 0, 1)))
        depths.append(depth)

    anchor = world_poses[0].inverse()
    poses = [anchor.compose(p) for p in world_poses]
    poses[0] = geo.Pose.identity()  # exact anchor, no numerical residue

    sample = SceneSample(images=images, depths=depths, intrinsics=k,
                         poses=poses, metric=spec.metric, primitives=prims,
                         world_poses=world_poses)
    target = compute_scale_target(sample.depths,
                                  [k] * spec.n_frames, poses)
    if spec.metric:
        sample.s_gt = target.s_gt
    else:
        # unknown-scale source: pre-normalize and erase the scale
        sample.depths = [d / target.s_gt for d in sample.depths]
        sample.poses = [geo.Pose(p.rotation, p.translation / target.s_gt)
                        for p in sample.poses]
        sample.s_gt = None
    return sample


def cross_view_depth_consistency(sample: SceneSample, frame_a=0, frame_b=1,
                                 n_samples=200, rng=None):
    """Max geometric disagreement (meters) between two views of the scene.

    Unprojects valid pixels of frame A, maps them into frame B, and re-casts
    the exact continuous ray of frame B against the generating primitives;
    returns the worst |z_from_A - z_analytic|. Needs the in-memory generation
    context (primitives + un-anchored poses), so it applies to freshly
    generated metric scenes, not deserialized ones.
    """
    if not sample.primitives or not sample.world_poses:
        raise SceneError("cross-view check needs the in-memory generation context")
    rng = rng or np.random.default_rng(0)
    k = sample.intrinsics
    pose_a = sample.world_poses[frame_a]
    pose_b = sample.world_poses[frame_b]
    pts_cam = geo.unproject(sample.depths[frame_a], k)
    mask = sample.depths[frame_a] > 0
    vs, us = np.nonzero(mask)
    if len(vs) == 0:
        return 0.0
    sel = rng.choice(len(vs), size=min(n_samples, len(vs)), replace=False)
    world = geo.transform_points(pts_cam[vs[sel], us[sel]], pose_a)
    cam_b = geo.transform_points(world, pose_b.inverse())
    worst = 0.0
    origin_b = pose_b.translation
    for p_cam in cam_b:
        if p_cam[2] <= 1e-6:
            continue
        d_cam = p_cam / np.linalg.norm(p_cam)
        d_world = pose_b.rotation @ d_cam
        t, _, _ = raycast(origin_b, d_world[None, None, :], sample.primitives)
        if not np.isfinite(t[0, 0]):
            continue
        z_analytic = t[0, 0] * d_cam[2]
        diff = abs(z_analytic - p_cam[2])
        if diff > 1e-3:  # occluded by a nearer surface in view B: not covisible
            continue
        worst = max(worst, diff)
    return worst


# ---------------------------------------------------------------------------
# serialization


def _f32(arr):
    return np.ascontiguousarray(arr, dtype="<f4")


def write_scene(sample: SceneSample, path):
    n = len(sample.images)
    k = sample.intrinsics
    header = {
        "width": k.width, "height": k.height, "n_frames": n,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "poses": [p.matrix().tolist() for p in sample.poses],
        "metric": sample.metric,
        "s_gt": sample.s_gt,
        "depth_kind": "z-depth",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<I", SCENE_VERSION))
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for img, depth in zip(sample.images, sample.depths):
            fh.write(_f32(img).tobytes())
            fh.write(_f32(depth).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise SceneError(f"truncated scene file while reading {what}")
    return buf


def read_scene(path) -> SceneSample:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != SCENE_MAGIC:
            raise SceneError("bad magic; not a USCN scene file")
        version, = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != SCENE_VERSION:
            raise SceneError(f"unsupported scene version {version}")
        hlen, = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        h, w, n = header["height"], header["width"], header["n_frames"]
        ki = header["intrinsics"]
        k = geo.Intrinsics(fx=ki["fx"], fy=ki["fy"], cx=ki["cx"], cy=ki["cy"],
                           width=w, height=h)
        poses = []
        for m in header["poses"]:
            m = np.asarray(m, dtype=np.float64)
            poses.append(geo.Pose(m[:3, :3], m[:3, 3]))
        images, depths = [], []
        for _ in range(n):
            img = np.frombuffer(_read_exact(fh, 3 * h * w * 4, "image"),
                                dtype="<f4").reshape(3, h, w)
            dep = np.frombuffer(_read_exact(fh, h * w * 4, "depth"),
                                dtype="<f4").reshape(h, w)
            images.append(img.astype(np.float64))
            depths.append(dep.astype(np.float64))
        if fh.read(1):
            raise SceneError("trailing bytes after declared payload")
    return SceneSample(images=images, depths=depths, intrinsics=k, poses=poses,
                       metric=header["metric"], s_gt=header["s_gt"])


# ---------------------------------------------------------------------------
# dataset manifests


def make_dataset(specs, split_ratios, seed, out_dir, jobs=1):
    """Generate scenes to disk and write a train/val manifest.

    ``split_ratios`` = (train, val) and must sum to 1. Non-metric specs come
    out pre-normalized (their recomputed scale target is exactly 1) with the
    true scale erased. Regeneration with the same inputs is bit-identical;
    ``jobs`` parallelizes generation only, writes stay in spec order.
    """
    specs = list(specs)
    if not specs:
        raise SceneError("make_dataset: empty spec list")
    if abs(sum(split_ratios) - 1.0) > 1e-9:
        raise SceneError("split ratios must sum to 1")
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(specs))
    n_train = int(round(split_ratios[0] * len(specs)))
    split_of = {int(idx): ("train" if rank < n_train else "val")
                for rank, idx in enumerate(order)}

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(generate_scene, specs))
    else:
        samples = [generate_scene(spec) for spec in specs]

    entries = []
    for i, (spec, sample) in enumerate(zip(specs, samples)):
        name = f"scene_{i:04d}.uscn"
        write_scene(sample, os.path.join(out_dir, name))
        entries.append({"path": name, "split": split_of[i],
                        "metric": bool(spec.metric)})
    manifest = {"version": 1, "seed": seed, "scenes": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def load_manifest(path):
    with open(path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    scenes = []
    for entry in manifest["scenes"]:
        scenes.append((entry, os.path.join(base, entry["path"])))
    return manifest, scenes
