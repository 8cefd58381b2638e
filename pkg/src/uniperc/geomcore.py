"""Pinhole geometry, SE(3) pose algebra, scene-flow composition and warping.

Tensor layout is NCHW everywhere: depth maps are ``(B, 1, H, W)``, point grids
and scene flows ``(B, 3, H, W)``, motion masks ``(B, 1, H, W)`` and images
``(B, C, H, W)``. Scene flow is expressed in the target camera frame: it
displaces a target-frame point to where that point sits in the source camera.
All functions follow the dtype of their inputs, so float64 inputs give the
64-bit mode used by the gradient checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

EPS = 1e-7


class ShapeError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    def matrix(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor([[self.fx, 0.0, self.cx],
                             [0.0, self.fy, self.cy],
                             [0.0, 0.0, 1.0]], dtype=dtype)

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by ``factor`` (pixel-index convention, align_corners)."""
        width = max(1, int(round(self.width * factor)))
        height = max(1, int(round(self.height * factor)))
        sx = (width - 1) / max(self.width - 1, 1)
        sy = (height - 1) / max(self.height - 1, 1)
        return CameraIntrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def axis_angle_to_matrix(rotation: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, ``(..., 3) -> (..., 3, 3)``; smooth through zero rotation."""
    theta2 = (rotation * rotation).sum(-1, keepdim=True)
    theta = torch.sqrt(theta2 + 1e-30)
    small = theta2 < 1e-8
    # Taylor branches keep the gradient finite at the identity.
    a = torch.where(small, 1 - theta2 / 6, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24, (1 - torch.cos(theta)) / torch.where(small, torch.ones_like(theta2), theta2))
    x, y, z = rotation.unbind(-1)
    zero = torch.zeros_like(x)
    skew = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], -1).reshape(rotation.shape[:-1] + (3, 3))
    eye = torch.eye(3, dtype=rotation.dtype, device=rotation.device).expand_as(skew)
    return eye + a[..., None] * skew + b[..., None] * (skew @ skew)


def matrix_to_axis_angle(matrix: torch.Tensor) -> torch.Tensor:
    trace = matrix[..., 0, 0] + matrix[..., 1, 1] + matrix[..., 2, 2]
    cos = ((trace - 1) / 2).clamp(-1.0, 1.0)
    theta = torch.acos(cos)
    vee = torch.stack([matrix[..., 2, 1] - matrix[..., 1, 2],
                       matrix[..., 0, 2] - matrix[..., 2, 0],
                       matrix[..., 1, 0] - matrix[..., 0, 1]], -1)
    sin = torch.sin(theta)
    scale = torch.where(sin.abs() < 1e-8, 0.5 + theta ** 2 / 12, theta / (2 * sin.clamp_min(1e-12)))
    return vee * scale[..., None]


@dataclass
class RigidPose:
    """Batched transform from target to source camera: ``x_s = R x_t + t``.

    ``rotation`` is axis-angle in radians and ``translation`` in scene units,
    both shaped ``(B, 3)``.
    """
    rotation: torch.Tensor
    translation: torch.Tensor

    @classmethod
    def from_vector(cls, vec: torch.Tensor) -> "RigidPose":
        vec = torch.as_tensor(vec)
        if vec.dim() == 1:
            vec = vec[None]
        if vec.shape[-1] != 6:
            raise ShapeError(f"pose vector must have 6 entries, got {tuple(vec.shape)}")
        return cls(vec[:, :3], vec[:, 3:])

    @classmethod
    def identity(cls, batch: int = 1, dtype=torch.float32) -> "RigidPose":
        return cls(torch.zeros(batch, 3, dtype=dtype), torch.zeros(batch, 3, dtype=dtype))

    def as_vector(self) -> torch.Tensor:
        return torch.cat([self.rotation, self.translation], -1)

    def detach(self) -> "RigidPose":
        return RigidPose(self.rotation.detach(), self.translation.detach())

    def matrix(self) -> torch.Tensor:
        return axis_angle_to_matrix(self.rotation)

    def inverse(self) -> "RigidPose":
        R = self.matrix()
        t = -(R.transpose(-1, -2) @ self.translation[..., None])[..., 0]
        return RigidPose(-self.rotation, t)

    def compose(self, other: "RigidPose") -> "RigidPose":
        """``self ∘ other``: apply ``other`` first."""
        R1, R2 = self.matrix(), other.matrix()
        t = (R1 @ other.translation[..., None])[..., 0] + self.translation
        return RigidPose(matrix_to_axis_angle(R1 @ R2), t)

    def apply(self, points: torch.Tensor) -> torch.Tensor:
        """Transform a ``(B, 3, H, W)`` point grid or ``(B, N, 3)`` point set."""
        R = self.matrix()
        if points.dim() == 4:
            b, _, h, w = points.shape
            flat = points.reshape(b, 3, -1)
            return (R @ flat + self.translation[..., None]).reshape(b, 3, h, w)
        return points @ R.transpose(-1, -2) + self.translation[:, None, :]


def _check_spatial(name: str, tensor: torch.Tensor, height: int, width: int):
    if tensor.shape[-2:] != (height, width):
        raise ShapeError(f"{name} has spatial shape {tuple(tensor.shape[-2:])}, expected {(height, width)}")


def pixel_grid(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """``(1, 2, H, W)`` grid of (u, v) pixel coordinates."""
    v, u = torch.meshgrid(torch.arange(height, dtype=dtype), torch.arange(width, dtype=dtype), indexing="ij")
    return torch.stack([u, v])[None]


def unproject(depth: torch.Tensor, K: CameraIntrinsics) -> torch.Tensor:
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise ShapeError(f"depth must be (B, 1, H, W), got {tuple(depth.shape)}")
    _check_spatial("depth", depth, K.height, K.width)
    grid = pixel_grid(K.height, K.width, depth.dtype).to(depth.device)
    x = (grid[:, 0:1] - K.cx) / K.fx * depth
    y = (grid[:, 1:2] - K.cy) / K.fy * depth
    return torch.cat([x, y, depth], 1)


def project(points: torch.Tensor, K: CameraIntrinsics, eps: float = 1e-6, slack: float = 1e-3):
    """Pinhole projection of a ``(B, 3, H, W)`` grid.

    Returns ``(coords, valid)``: ``coords`` is ``(B, 2, H, W)`` in pixel units and
    ``valid`` a bool ``(B, 1, H, W)`` mask, false where ``z <= eps`` or the
    projection falls outside the image (with ``slack`` pixels of round-off allowance).
    """
    x, y, z = points[:, 0:1], points[:, 1:2], points[:, 2:3]
    in_front = z > eps
    z_safe = torch.where(in_front, z, torch.full_like(z, eps))
    u = K.fx * x / z_safe + K.cx
    v = K.fy * y / z_safe + K.cy
    inside = (u >= -slack) & (u <= K.width - 1 + slack) & (v >= -slack) & (v <= K.height - 1 + slack)
    return torch.cat([u, v], 1), in_front & inside


def rigid_flow(depth: torch.Tensor, pose: RigidPose, K: CameraIntrinsics) -> torch.Tensor:
    points = unproject(depth, K)
    return pose.apply(points) - points


def compose_flows(flow_rigid: torch.Tensor, flow_complete: torch.Tensor, mask: torch.Tensor):
    """Gate the non-rigid residual by the motion mask.

    Returns ``(independent, final)`` with ``independent = mask * (complete - rigid)``
    and ``final = rigid + independent``.
    """
    if flow_rigid.shape != flow_complete.shape:
        raise ShapeError(f"rigid flow {tuple(flow_rigid.shape)} vs complete flow {tuple(flow_complete.shape)}")
    if mask.shape[-2:] != flow_rigid.shape[-2:] or mask.shape[0] != flow_rigid.shape[0] or mask.shape[1] != 1:
        raise ShapeError(f"mask {tuple(mask.shape)} does not match flow {tuple(flow_rigid.shape)}")
    independent = mask * (flow_complete - flow_rigid)
    return independent, flow_rigid + independent


def bilinear_sample(image: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``image`` at pixel ``coords`` ``(B, 2, H, W)``; out-of-frame reads clamp to the border."""
    _, _, h, w = image.shape
    gx = 2 * coords[:, 0] / max(w - 1, 1) - 1
    gy = 2 * coords[:, 1] / max(h - 1, 1) - 1
    grid = torch.stack([gx, gy], -1)
    return F.grid_sample(image, grid, mode="bilinear", padding_mode="border", align_corners=True)


def warp_synthesize(image_s: torch.Tensor, depth_t: torch.Tensor, flow: torch.Tensor, K: CameraIntrinsics):
    """Inverse-warp the source image into the target view.

    Each target pixel is unprojected with ``depth_t``, displaced by ``flow``
    into the source camera, projected, and the source image is bilinearly
    sampled there. Returns ``(image_t_hat, valid)``.
    """
    _check_spatial("source image", image_s, K.height, K.width)
    _check_spatial("flow", flow, K.height, K.width)
    if flow.shape[1] != 3:
        raise ShapeError(f"flow must have 3 channels, got {flow.shape[1]}")
    points = unproject(depth_t, K) + flow
    coords, valid = project(points, K)
    return bilinear_sample(image_s, coords), valid


@dataclass(frozen=True)
class Plane:
    """Plane ``{p : normal·p = offset}``; ``normal`` points to the "above" side."""
    normal: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"plane normal must be a unit 3-vector, got {self.normal}")
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "offset", float(self.offset))


def signed_height_above(points, plane: Plane):
    """Signed distance of ``(..., 3)`` points to ``plane``, positive on the normal side."""
    if isinstance(points, torch.Tensor):
        normal = torch.as_tensor(plane.normal, dtype=points.dtype, device=points.device)
    else:
        points = np.asarray(points, dtype=np.float64)
        normal = plane.normal
    return points @ normal - plane.offset


def _plane_from_points(points: np.ndarray, up: np.ndarray) -> Plane:
    centroid = points.mean(0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1] / np.linalg.norm(vt[-1])
    if normal @ up < 0:
        normal = -normal
    return Plane(normal, float(normal @ centroid))


def _is_collinear(points: np.ndarray, tol: float = 1e-9) -> bool:
    centered = points - points.mean(0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[0] == 0 or s[1] <= tol * max(s[0], 1.0)


def fit_ground_plane(points, iterations: int = 100, inlier_threshold: float | None = None,
                     rng=None, up=(0.0, -1.0, 0.0)) -> Plane:
    """RANSAC plane fit followed by a least-squares refit on the inliers.

    ``points`` is ``(N, 3)``. The default threshold is 1% of the median point
    depth (z). ``up`` selects the normal orientation; the default suits a
    camera frame with y pointing down. ``rng`` is a ``numpy.random.Generator``
    or a seed.
    """
    if isinstance(points, torch.Tensor):
        points = points.detach().cpu().numpy()
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    points = points[np.isfinite(points).all(1)]
    if len(points) < 3:
        raise DegenerateInputError(f"need at least 3 points to fit a plane, got {len(points)}")
    if _is_collinear(points):
        raise DegenerateInputError("all points are collinear")
    up = np.asarray(up, dtype=np.float64)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if inlier_threshold is None:
        inlier_threshold = 0.01 * float(np.median(np.abs(points[:, 2])))
        inlier_threshold = max(inlier_threshold, 1e-9)

    best_count, best_inliers = -1, None
    for _ in range(iterations):
        sample = points[rng.choice(len(points), 3, replace=False)]
        normal = np.cross(sample[1] - sample[0], sample[2] - sample[0])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        inliers = np.abs((points - sample[0]) @ normal) <= inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
    if best_inliers is None or best_count < 3 or _is_collinear(points[best_inliers]):
        raise DegenerateInputError("RANSAC found no non-degenerate plane hypothesis")
    return _plane_from_points(points[best_inliers], up)
