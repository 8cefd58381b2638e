"""Synthetic driving scenes with analytic ground truth, plus dataset I/O.

Scenes are ray-cast: a ground plane, a backdrop wall, static boxes lining a
(possibly curved) road and a few independently translating boxes. Texture is
seeded value noise attached to each surface point, so every view of a point
sees the same colour and warping with the true flow reproduces the target.

World frame: x right, y down, z forward; the ground is ``y = camera_height``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .geomcore import CameraIntrinsics, Plane, RigidPose, compose_flows, warp_synthesize

GROUND, BACKDROP, BUILDING, VEHICLE = 0, 1, 2, 3
CLASS_NAMES = ("ground", "backdrop", "building", "vehicle")
NUM_CLASSES = len(CLASS_NAMES)
STUFF_CLASSES = (GROUND, BACKDROP)
WHEELBASE = 2.7

_BASE_COLORS = {
    GROUND: (0.42, 0.42, 0.40),
    BACKDROP: (0.55, 0.68, 0.82),
    BUILDING: (0.66, 0.50, 0.36),
    VEHICLE: (0.80, 0.22, 0.20),
}


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 96
    focal: float = 56.0
    n_frames: int = 3
    n_static: int = 8
    n_moving: int = 1
    camera_speed: float = 0.5
    curvature: float = 0.0
    object_speed: float = 0.4
    camera_height: float = 1.5
    backdrop_distance: float = 35.0
    road_half_width: float = 3.5
    texture: str = "noise"
    texture_cell: float = 7.0
    texture_amplitude: float = 0.35

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"image size must be positive, got {self.height}x{self.width}")
        if self.n_frames < 1:
            raise ValueError("a scene needs at least one frame")
        if self.n_static < 0 or self.n_moving < 0:
            raise ValueError("object counts must be non-negative")
        if self.texture not in ("noise", "flat"):
            raise ValueError(f"unknown texture style {self.texture!r}")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, (self.width - 1) / 2, (self.height - 1) / 2,
                                self.width, self.height)


@dataclass
class Box:
    center: np.ndarray      # world position at frame 0
    size: np.ndarray        # full extents (x, y, z) in the box frame
    yaw: float
    semantic: int
    instance: int
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # world units per frame
    color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def center_at(self, frame: int) -> np.ndarray:
        return self.center + frame * self.velocity


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    # rotation about +y (down): heading z turns toward +x for positive yaw
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def road_point(arc: float, curvature: float):
    """Centre-line position and heading after ``arc`` units along a constant-curvature road."""
    heading = curvature * arc
    if abs(curvature) < 1e-9:
        return np.array([0.0, 0.0, arc]), heading
    return np.array([(1 - math.cos(heading)) / curvature, 0.0, math.sin(heading) / curvature]), heading


class ValueNoise:
    """Seeded 2D value noise with quintic interpolation, returning values in [-1, 1]."""

    def __init__(self, rng: np.random.Generator, size: int = 256):
        self.size = size
        self.perm = rng.permutation(size)
        self.values = rng.uniform(-1.0, 1.0, size)

    def _lattice(self, ix, iy):
        n = self.size
        return self.values[self.perm[(self.perm[ix % n] + iy) % n]]

    def __call__(self, x, y):
        ix, iy = np.floor(x).astype(np.int64), np.floor(y).astype(np.int64)
        fx, fy = x - ix, y - iy
        sx = fx ** 3 * (fx * (fx * 6 - 15) + 10)
        sy = fy ** 3 * (fy * (fy * 6 - 15) + 10)
        v00, v10 = self._lattice(ix, iy), self._lattice(ix + 1, iy)
        v01, v11 = self._lattice(ix, iy + 1), self._lattice(ix + 1, iy + 1)
        top = v00 + sx * (v10 - v00)
        bottom = v01 + sx * (v11 - v01)
        return top + sy * (bottom - top)


@dataclass
class FlowGroundTruth:
    """Analytic target-to-source quantities, all in the target camera frame."""
    pose: RigidPose
    depth: np.ndarray
    rigid: np.ndarray
    complete: np.ndarray
    independent: np.ndarray
    final: np.ndarray
    mask: np.ndarray
    valid: np.ndarray


@dataclass
class SyntheticScene:
    config: SceneConfig
    seed: int
    intrinsics: CameraIntrinsics
    images: np.ndarray       # (T, 3, H, W) float32 in [0, 1]
    depths: np.ndarray       # (T, H, W) z-depth
    surface: np.ndarray      # (T, H, W) surface index: 0 ground, 1 backdrop, 2+ boxes
    semantic: np.ndarray     # (T, H, W)
    instance: np.ndarray     # (T, H, W), 0 for stuff
    motion: np.ndarray       # (T, H, W) 1 on independently moving surfaces
    cam_rot: np.ndarray      # (T, 3, 3) camera-to-world rotation
    cam_pos: np.ndarray      # (T, 3) camera centre in world
    boxes: list
    steering_angle: float = 0.0

    def pose(self, target: int, source: int) -> RigidPose:
        R = self.cam_rot[source].T @ self.cam_rot[target]
        t = self.cam_rot[source].T @ (self.cam_pos[target] - self.cam_pos[source])
        from .geomcore import matrix_to_axis_angle
        rot = matrix_to_axis_angle(torch.from_numpy(R))
        return RigidPose(rot[None], torch.from_numpy(t)[None])

    def ground_plane(self, frame: int) -> Plane:
        """True ground plane in the camera frame of ``frame``, normal pointing up."""
        n_world = np.array([0.0, -1.0, 0.0])
        normal = self.cam_rot[frame].T @ n_world
        offset = -self.config.camera_height - n_world @ self.cam_pos[frame]
        return Plane(normal / np.linalg.norm(normal), offset)

    def camera_points(self, frame: int) -> np.ndarray:
        """``(3, H, W)`` unprojected points of ``frame`` in its camera coordinates."""
        K = self.intrinsics
        v, u = np.mgrid[0:K.height, 0:K.width].astype(np.float64)
        d = self.depths[frame]
        return np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d])

    def ground_truth(self, target: int = 1, source: int = 0) -> FlowGroundTruth:
        cfg, K = self.config, self.intrinsics
        x_t = self.camera_points(target)
        Rt, ct = self.cam_rot[target], self.cam_pos[target]
        Rs, cs = self.cam_rot[source], self.cam_pos[source]
        world = np.einsum("ij,jhw->ihw", Rt, x_t) + ct[:, None, None]
        surf = self.surface[target]
        for idx, box in enumerate(self.boxes):
            sel = surf == idx + 2
            if sel.any():
                world[:, sel] += ((source - target) * box.velocity)[:, None]
        x_s = np.einsum("ij,jhw->ihw", Rs.T, world - cs[:, None, None])
        pose = self.pose(target, source)
        R = pose.matrix()[0].numpy()
        rigid = np.einsum("ij,jhw->ihw", R, x_t) + pose.translation[0].numpy()[:, None, None] - x_t
        complete = x_s - x_t
        mask = self.motion[target].astype(np.float64)
        independent, final = compose_flows(torch.from_numpy(rigid)[None], torch.from_numpy(complete)[None],
                                           torch.from_numpy(mask)[None, None])
        valid = self._correspondence_valid(x_s, surf, source)
        return FlowGroundTruth(pose, self.depths[target], rigid, complete, independent[0].numpy(),
                               final[0].numpy(), mask, valid)

    def _correspondence_valid(self, x_s, surf, source):
        """True where the source view sees the same surface around the reprojected point."""
        K = self.intrinsics
        z = x_s[2]
        u = K.fx * x_s[0] / np.maximum(z, 1e-6) + K.cx
        v = K.fy * x_s[1] / np.maximum(z, 1e-6) + K.cy
        valid = (z > 1e-3) & (u >= 0) & (u <= K.width - 1) & (v >= 0) & (v <= K.height - 1)
        u0 = np.clip(np.floor(u).astype(int), 0, K.width - 2)
        v0 = np.clip(np.floor(v).astype(int), 0, K.height - 2)
        src_surf, src_depth = self.surface[source], self.depths[source]
        for dv in (0, 1):
            for du in (0, 1):
                valid &= src_surf[v0 + dv, u0 + du] == surf
                valid &= np.abs(src_depth[v0 + dv, u0 + du] - z) <= 0.05 * z + 0.05
        return valid

    def verify(self, min_psnr: float = 40.0) -> dict:
        """Check the flow identity and the true-flow warp; raise AssertionError on failure."""
        report = {}
        for target, source in _frame_pairs(self.config.n_frames):
            gt = self.ground_truth(target, source)
            residual = gt.final - (gt.rigid + gt.mask[None] * (gt.complete - gt.rigid))
            assert np.array_equal(gt.final, gt.rigid + gt.independent), "final flow is not rigid + independent"
            assert np.abs(residual).max() == 0, "flow composition identity violated"
            warped, inside = warp_synthesize(torch.from_numpy(self.images[source]).double()[None],
                                             torch.from_numpy(gt.depth)[None, None],
                                             torch.from_numpy(gt.final)[None], self.intrinsics)
            mask = gt.valid & inside[0, 0].numpy()
            assert mask.mean() > 0.3, f"too few co-visible pixels ({mask.mean():.2f}) for frames {target}->{source}"
            p = psnr(warped[0].numpy(), self.images[target].astype(np.float64), mask)
            assert p > min_psnr, f"true-flow warp PSNR {p:.1f} dB below {min_psnr} for frames {target}->{source}"
            report[(target, source)] = p
        return report


def _frame_pairs(n_frames: int):
    if n_frames < 2:
        return []
    mid = n_frames // 2
    return [(mid, s) for s in (mid - 1, mid + 1) if 0 <= s < n_frames]


def psnr(a, b, mask=None) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; ``mask`` is ``(H, W)``."""
    err = (np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2
    if mask is not None:
        err = err[..., np.asarray(mask, bool)]
    mse = err.mean()
    return float("inf") if mse == 0 else float(10 * np.log10(1.0 / mse))


def _ray_box(origin, dirs, box: Box, frame: int):
    """Entry distance of rays ``(N, 3)`` into an oriented box, ``inf`` on miss."""
    R = _yaw_matrix(box.yaw)
    o = R.T @ (origin - box.center_at(frame))
    d = dirs @ R  # rows are R^T d
    half = box.size / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    return np.where(hit, tmin, np.inf)


def _texture(points, surface_ids, boxes, frame, cfg: SceneConfig, noises):
    """RGB colour of world ``points`` (N, 3) on the given surfaces."""
    n = len(points)
    colors = np.zeros((n, 3))
    tex_points = points.copy()
    for idx, box in enumerate(boxes):
        sel = surface_ids == idx + 2
        tex_points[sel] -= frame * box.velocity
    z = np.maximum(tex_points[:, 2], 1.0)
    # texture lives on image-like coordinates of the frame-0 camera, keeping its pixel scale stable
    a = cfg.focal * tex_points[:, 0] / z / cfg.texture_cell
    b = cfg.focal * tex_points[:, 1] / z / cfg.texture_cell
    for sid in np.unique(surface_ids):
        sel = surface_ids == sid
        if sid == GROUND:
            base = np.array(_BASE_COLORS[GROUND])
        elif sid == BACKDROP:
            base = np.array(_BASE_COLORS[BACKDROP])
        else:
            base = boxes[sid - 2].color
        colors[sel] = base
        if cfg.texture == "noise":
            noise = noises[int(sid) % len(noises)]
            lum = noise(a[sel] + 17.0 * sid, b[sel]) * cfg.texture_amplitude
            hue = noise(a[sel] * 0.5 + 101.0, b[sel] * 0.5 + 53.0 * sid) * cfg.texture_amplitude * 0.3
            colors[sel] += lum[:, None] + hue[:, None] * np.array([1.0, -0.5, -0.5])
    return np.clip(colors, 0.0, 1.0)


def render_frame(cfg: SceneConfig, boxes, rot, pos, frame, noises):
    """Ray-cast one view; returns image (3, H, W), depth, surface, semantic, instance, motion."""
    K = cfg.intrinsics()
    v, u = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    dirs_cam = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], -1).reshape(-1, 3)
    dirs = dirs_cam @ rot.T
    n = len(dirs)
    best_t = np.full(n, np.inf)
    surf = np.full(n, -1, dtype=np.int64)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 1] > 1e-9, (cfg.camera_height - pos[1]) / dirs[:, 1], np.inf)
        t_back = np.where(dirs[:, 2] > 1e-9, (cfg.backdrop_distance - pos[2]) / dirs[:, 2], np.inf)
    for t_surf, sid in ((t_ground, GROUND), (t_back, BACKDROP)):
        closer = (t_surf > 0) & (t_surf < best_t)
        best_t[closer], surf[closer] = t_surf[closer], sid
    for idx, box in enumerate(boxes):
        t_box = _ray_box(pos, dirs, box, frame)
        closer = t_box < best_t
        best_t[closer], surf[closer] = t_box[closer], idx + 2
    if (surf < 0).any():
        raise RuntimeError("ray escaped the scene; backdrop misconfigured")

    points = pos + best_t[:, None] * dirs
    image = _texture(points, surf, boxes, frame, cfg, noises)
    semantic = np.where(surf == GROUND, GROUND, BACKDROP)
    instance = np.zeros(n, dtype=np.int64)
    motion = np.zeros(n, dtype=np.uint8)
    for idx, box in enumerate(boxes):
        sel = surf == idx + 2
        semantic[sel] = box.semantic
        instance[sel] = box.instance
        motion[sel] = np.any(box.velocity != 0)
    shape = (cfg.height, cfg.width)
    return (image.T.reshape(3, *shape).astype(np.float32), best_t.reshape(shape), surf.reshape(shape),
            semantic.reshape(shape), instance.reshape(shape), motion.reshape(shape))


def _make_boxes(cfg: SceneConfig, rng: np.random.Generator):
    boxes = []
    instance = 1
    for i in range(cfg.n_static):
        arc = rng.uniform(6.0, cfg.backdrop_distance - 8.0)
        side = -1.0 if i % 2 == 0 else 1.0
        centre, heading = road_point(arc, cfg.curvature)
        normal = np.array([math.cos(heading), 0.0, -math.sin(heading)])
        size = np.array([rng.uniform(1.0, 2.5), rng.uniform(1.2, 3.5), rng.uniform(1.5, 4.0)])
        lateral = side * (cfg.road_half_width + size[0] / 2 + rng.uniform(0.0, 2.0))
        c = centre + lateral * normal
        c[1] = cfg.camera_height - size[1] / 2
        color = np.array(_BASE_COLORS[BUILDING]) + rng.uniform(-0.12, 0.12, 3)
        boxes.append(Box(c, size, heading, BUILDING, instance, color=color))
        instance += 1
    for _ in range(cfg.n_moving):
        arc = rng.uniform(7.0, 14.0)
        centre, heading = road_point(arc, cfg.curvature)
        normal = np.array([math.cos(heading), 0.0, -math.sin(heading)])
        size = np.array([rng.uniform(1.4, 1.9), rng.uniform(1.0, 1.5), rng.uniform(2.2, 3.5)])
        c = centre + rng.uniform(-1.8, 1.8) * normal
        c[1] = cfg.camera_height - size[1] / 2
        direction = rng.normal(size=3)
        direction[1] = 0.0
        direction /= np.linalg.norm(direction) + 1e-12
        velocity = direction * cfg.object_speed * rng.uniform(0.6, 1.0)
        color = np.array(_BASE_COLORS[VEHICLE]) + rng.uniform(-0.1, 0.1, 3)
        boxes.append(Box(c, size, heading, VEHICLE, instance, velocity=velocity, color=color))
        instance += 1
    return boxes


def generate_scene(seed: int, config: SceneConfig | None = None, verify: bool = True) -> SyntheticScene:
    """Render ``config.n_frames`` views of a seeded scene; pure in ``(seed, config)``."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    noises = [ValueNoise(rng) for _ in range(4)]
    boxes = _make_boxes(cfg, rng)
    T = cfg.n_frames
    rots, poss, outs = [], [], []
    for k in range(T):
        centre, heading = road_point(k * cfg.camera_speed, cfg.curvature)
        rots.append(_yaw_matrix(heading))
        poss.append(centre)
        outs.append(render_frame(cfg, boxes, rots[-1], poss[-1], k, noises))
    images, depths, surf, sem, inst, motion = (np.stack(x) for x in zip(*outs))
    scene = SyntheticScene(cfg, seed, cfg.intrinsics(), images, depths, surf, sem, inst, motion,
                           np.stack(rots), np.stack(poss), boxes, steering_angle_for(cfg.curvature))
    if verify:
        scene.verify()
    return scene


# -- steering sequences ---------------------------------------------------------

def steering_angle_for(curvature: float) -> float:
    """Front-wheel angle in degrees of a bicycle model following the given curvature."""
    return math.degrees(math.atan(WHEELBASE * curvature))


@dataclass
class SteeringSequence:
    frames: np.ndarray   # (16, 3, H, W)
    target: float
    curvature: float
    seed: int

    def __post_init__(self):
        if self.frames.shape[0] != 16:
            raise ValueError(f"a steering sequence holds exactly 16 frames, got {self.frames.shape[0]}")


def make_steering_sequence(seed: int, curvature: float, config: SceneConfig | None = None) -> SteeringSequence:
    base = config or SceneConfig()
    cfg = SceneConfig(**{**asdict(base), "n_frames": 16, "curvature": curvature, "n_moving": 0,
                         "camera_speed": 0.4})
    scene = generate_scene(seed, cfg, verify=False)
    return SteeringSequence(scene.images, scene.steering_angle, curvature, seed)


def make_steering_dataset(seed: int, n_sequences: int, max_curvature: float = 0.06,
                          config: SceneConfig | None = None):
    """Sequences with curvatures spread evenly over ``[-max, max]`` in a seeded order."""
    if n_sequences < 10:
        raise ValueError(f"need at least 10 steering sequences for tenfold evaluation, got {n_sequences}")
    rng = np.random.default_rng(seed)
    curvatures = np.linspace(-max_curvature, max_curvature, n_sequences)
    curvatures = curvatures[rng.permutation(n_sequences)]
    seeds = rng.integers(0, 2**31 - 1, n_sequences)
    return [make_steering_sequence(int(s), float(c), config) for s, c in zip(seeds, curvatures)]


# -- preprocessing ----------------------------------------------------------------

@dataclass
class FrameTriple:
    prev: np.ndarray
    target: np.ndarray
    next: np.ndarray
    intrinsics: CameraIntrinsics
    index: int = 0


def build_triples(frames, intrinsics: CameraIntrinsics) -> list:
    """Sliding ``(t-1, t, t+1)`` windows over a frame sequence."""
    return [FrameTriple(frames[t - 1], frames[t], frames[t + 1], intrinsics, t) for t in range(1, len(frames) - 1)]


def crop_bottom(arrays: dict, intrinsics: CameraIntrinsics, fraction: float = 0.25):
    """Drop the bottom ``fraction`` of rows from every array (height is axis -2).

    The principal point is unchanged because rows are removed from the bottom.
    """
    if not 0 <= fraction < 1:
        raise ValueError(f"crop fraction must lie in [0, 1), got {fraction}")
    keep = intrinsics.height - int(round(intrinsics.height * fraction))
    out = {}
    for name, arr in arrays.items():
        if arr.shape[-2] != intrinsics.height:
            raise ValueError(f"{name} has height {arr.shape[-2]}, expected {intrinsics.height}")
        out[name] = arr[..., :keep, :]
    K = CameraIntrinsics(intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy, intrinsics.width, keep)
    return out, K


# -- on-disk layout ------------------------------------------------------------------

def _save_png(path, image_chw):
    from PIL import Image
    arr = np.clip(np.round(np.transpose(image_chw, (1, 2, 0)) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _load_png(path) -> np.ndarray:
    from PIL import Image
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def save_scene(scene: SyntheticScene, directory: str):
    os.makedirs(directory, exist_ok=True)
    for t in range(scene.images.shape[0]):
        _save_png(os.path.join(directory, f"frame_{t}.png"), scene.images[t])
    arrays = {"depth": scene.depths, "semantic": scene.semantic, "instance": scene.instance,
              "motion": scene.motion, "surface": scene.surface, "cam_rot": scene.cam_rot, "cam_pos": scene.cam_pos}
    for target, source in _frame_pairs(scene.config.n_frames):
        gt = scene.ground_truth(target, source)
        arrays[f"flow_complete_{target}_{source}"] = gt.complete
        arrays[f"flow_rigid_{target}_{source}"] = gt.rigid
        arrays[f"valid_{target}_{source}"] = gt.valid
    np.savez_compressed(os.path.join(directory, "gt.npz"), **arrays)
    meta = {
        "seed": scene.seed,
        "config": asdict(scene.config),
        "intrinsics": scene.intrinsics.to_dict(),
        "planes": [{"normal": scene.ground_plane(t).normal.tolist(), "offset": scene.ground_plane(t).offset}
                   for t in range(scene.images.shape[0])],
        "poses": {f"{t}->{s}": scene.pose(t, s).as_vector()[0].tolist()
                  for t, s in _frame_pairs(scene.config.n_frames)},
        "steering_angle": scene.steering_angle,
    }
    with open(os.path.join(directory, "meta.json"), "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)


def load_scene_arrays(directory: str) -> dict:
    """Images plus ground-truth arrays of a saved scene, as plain numpy."""
    with open(os.path.join(directory, "meta.json")) as f:
        meta = json.load(f)
    n = meta["config"]["n_frames"]
    images = np.stack([_load_png(os.path.join(directory, f"frame_{t}.png")) for t in range(n)])
    with np.load(os.path.join(directory, "gt.npz")) as gt:
        arrays = {k: gt[k] for k in gt.files}
    arrays["images"] = images
    arrays["meta"] = meta
    arrays["intrinsics"] = CameraIntrinsics.from_dict(meta["intrinsics"])
    return arrays


def write_dataset(out_dir: str, seed: int, n_scenes: int, config: SceneConfig | None = None,
                  val_fraction: float = 0.2, n_steering: int = 0) -> dict:
    """Render ``n_scenes`` scenes (and optional steering sequences) and write a manifest."""
    if n_scenes <= 0:
        raise ValueError("need at least one scene")
    cfg = config or SceneConfig()
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, n_scenes)
    ids = []
    for i, s in enumerate(scene_seeds):
        scene_id = f"{i:05d}"
        save_scene(generate_scene(int(s), cfg), os.path.join(out_dir, "scenes", scene_id))
        ids.append(scene_id)
    n_val = int(round(n_scenes * val_fraction)) if n_scenes > 1 else 0
    manifest = {"seed": seed, "config": asdict(cfg), "splits": {"train": ids[:n_scenes - n_val], "val": ids[n_scenes - n_val:]},
                "scene_seeds": [int(s) for s in scene_seeds]}
    if n_steering:
        steer_ids = []
        for i, seq in enumerate(make_steering_dataset(int(rng.integers(0, 2**31 - 1)), n_steering, config=cfg)):
            d = os.path.join(out_dir, "steering", f"{i:05d}")
            os.makedirs(d, exist_ok=True)
            for k in range(16):
                _save_png(os.path.join(d, f"frame_{k}.png"), seq.frames[k])
            with open(os.path.join(d, "meta.json"), "w") as f:
                json.dump({"target": seq.target, "curvature": seq.curvature, "seed": seq.seed}, f, indent=2)
            steer_ids.append(f"{i:05d}")
        manifest["splits"]["steering"] = steer_ids
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return manifest


def load_steering_dataset(root: str) -> list:
    with open(os.path.join(root, "manifest.json")) as f:
        manifest = json.load(f)
    out = []
    for sid in manifest["splits"].get("steering", []):
        d = os.path.join(root, "steering", sid)
        with open(os.path.join(d, "meta.json")) as f:
            meta = json.load(f)
        frames = np.stack([_load_png(os.path.join(d, f"frame_{k}.png")) for k in range(16)])
        out.append(SteeringSequence(frames, meta["target"], meta["curvature"], meta["seed"]))
    return out
