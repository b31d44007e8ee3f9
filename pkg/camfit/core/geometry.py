"""
Pinhole camera model, SE3 pose algebra and optical-flow induction

All functions accept leading batch dimensions and are differentiable through
torch autograd unless stated otherwise. Geometry runs in float64 by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import torch

from .errors import GeometryError

Tensor = torch.Tensor
FocalLike = Union[float, Tensor]

DTYPE = torch.float64

# Below this squared angle the Rodrigues coefficients switch to their Taylor series.
_SMALL_ANGLE_SQ = 1e-8


@dataclass(frozen=True)
class Pinhole:
    """Single focal length camera with the principal point at (W/2, H/2)"""

    focal: FocalLike
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image dimensions must be >= 1, got {self.width}x{self.height}")
        focal = self.focal
        if isinstance(focal, Tensor):
            if not bool(torch.all(focal.detach() > 0)):
                raise GeometryError("focal length must be positive")
        elif not focal > 0:
            raise GeometryError(f"focal length must be positive, got {focal}")

    @property
    def principal_point(self) -> Tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def with_focal(self, focal: FocalLike) -> "Pinhole":
        """Same image geometry, different focal length"""
        return Pinhole(focal=focal, width=self.width, height=self.height)

    def focal_tensor(self, like: Tensor) -> Tensor:
        """Focal as a tensor on the dtype/device of `like`"""
        return torch.as_tensor(self.focal, dtype=like.dtype, device=like.device)


def pixel_grid(height: int, width: int, dtype=DTYPE, device=None) -> Tensor:
    """
    Continuous coordinates of the pixel lattice.

    Pixel (u, v) of the 1-based lattice samples the point (u - 0.5, v - 0.5)
    measured from the top-left image corner, so 0-based column c sits at c + 0.5.

    Returns:
        Tensor of shape (H, W, 2) holding (x, y) per pixel
    """
    ys = torch.arange(height, dtype=dtype, device=device) + 0.5
    xs = torch.arange(width, dtype=dtype, device=device) + 0.5
    grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([grid_x, grid_y], dim=-1)


def skew(vec: Tensor) -> Tensor:
    """Cross-product matrix of a (..., 3) vector"""
    x, y, z = vec.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        [
            torch.stack([zero, -z, y], dim=-1),
            torch.stack([z, zero, -x], dim=-1),
            torch.stack([-y, x, zero], dim=-1),
        ],
        dim=-2,
    )


def rotation_from_axis_angle(axis_angle: Tensor) -> Tensor:
    """
    Rodrigues formula for (..., 3) axis-angle vectors.

    The zero vector maps to the exact identity; the small-angle branch keeps
    gradients finite at the origin.
    """
    theta_sq = (axis_angle * axis_angle).sum(-1)
    small = theta_sq < _SMALL_ANGLE_SQ
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    half_sin = torch.sin(theta / 2)

    coef_a = torch.where(
        small,
        1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0,
        torch.sin(theta) / theta,
    )
    coef_b = torch.where(
        small,
        0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0,
        2.0 * half_sin * half_sin / safe_sq,
    )

    k = skew(axis_angle)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + coef_a[..., None, None] * k + coef_b[..., None, None] * (k @ k)


def matrix_to_quaternion(rotation: Tensor) -> Tensor:
    """
    Rotation matrices (..., 3, 3) to unit quaternions (..., 4) ordered (w, x, y, z).

    Uses the numerically largest of the four trace-based candidates; the sign
    is fixed so that w >= 0.
    """
    m00, m01, m02 = rotation[..., 0, 0], rotation[..., 0, 1], rotation[..., 0, 2]
    m10, m11, m12 = rotation[..., 1, 0], rotation[..., 1, 1], rotation[..., 1, 2]
    m20, m21, m22 = rotation[..., 2, 0], rotation[..., 2, 1], rotation[..., 2, 2]

    diag_terms = torch.stack(
        [
            1.0 + m00 + m11 + m22,
            1.0 + m00 - m11 - m22,
            1.0 - m00 + m11 - m22,
            1.0 - m00 - m11 + m22,
        ],
        dim=-1,
    )
    q_abs = torch.sqrt(torch.clamp(diag_terms, min=1e-30))

    candidates = torch.stack(
        [
            torch.stack([q_abs[..., 0] ** 2, m21 - m12, m02 - m20, m10 - m01], dim=-1),
            torch.stack([m21 - m12, q_abs[..., 1] ** 2, m10 + m01, m02 + m20], dim=-1),
            torch.stack([m02 - m20, m10 + m01, q_abs[..., 2] ** 2, m12 + m21], dim=-1),
            torch.stack([m10 - m01, m20 + m02, m21 + m12, q_abs[..., 3] ** 2], dim=-1),
        ],
        dim=-2,
    )
    candidates = candidates / (2.0 * torch.clamp(q_abs[..., None], min=0.1))

    best = q_abs.argmax(dim=-1)
    index = best[..., None, None].expand(*best.shape, 1, 4)
    quat = torch.gather(candidates, -2, index).squeeze(-2)
    quat = quat / torch.linalg.norm(quat, dim=-1, keepdim=True)
    sign = torch.where(quat[..., :1] < 0, -torch.ones_like(quat[..., :1]), torch.ones_like(quat[..., :1]))
    return quat * sign


def quaternion_to_axis_angle(quat: Tensor) -> Tensor:
    """Unit quaternions (w, x, y, z) with w >= 0 to axis-angle in [0, pi]"""
    w = quat[..., 0]
    xyz = quat[..., 1:]
    norm_sq = (xyz * xyz).sum(-1)
    small = norm_sq < 1e-12
    norm = torch.sqrt(torch.where(small, torch.ones_like(norm_sq), norm_sq))
    w_safe = torch.where(small, w, torch.ones_like(w))
    ratio = torch.where(
        small,
        2.0 / w_safe * (1.0 - norm_sq / (3.0 * w_safe * w_safe)),
        2.0 * torch.atan2(norm, w) / norm,
    )
    return xyz * ratio[..., None]


def matrix_to_axis_angle(rotation: Tensor) -> Tensor:
    """SO3 logarithm in the canonical range ||omega|| <= pi"""
    return quaternion_to_axis_angle(matrix_to_quaternion(rotation))


def geodesic_angle(rot_a: Tensor, rot_b: Tensor) -> Tensor:
    """Angle in radians of the rotation taking rot_a to rot_b"""
    delta = rot_a.transpose(-1, -2) @ rot_b
    return torch.linalg.norm(matrix_to_axis_angle(delta), dim=-1)


@dataclass(frozen=True)
class PoseSE3:
    """
    Rigid transform with the rotation stored as axis-angle.

    Both fields carry the same leading batch shape, so one PoseSE3 can hold a
    single pose, a trajectory (N,) or a candidate bank (m, N).
    """

    axis_angle: Tensor
    translation: Tensor

    def __post_init__(self):
        if self.axis_angle.shape[-1:] != (3,) or self.translation.shape[-1:] != (3,):
            raise GeometryError("axis_angle and translation must end in a dimension of size 3")
        if self.axis_angle.shape != self.translation.shape:
            raise GeometryError(
                f"batch shape mismatch: {tuple(self.axis_angle.shape)} vs {tuple(self.translation.shape)}"
            )

    @classmethod
    def identity(cls, batch_shape: Tuple[int, ...] = (), dtype=DTYPE, device=None) -> "PoseSE3":
        zeros = torch.zeros(*batch_shape, 3, dtype=dtype, device=device)
        return cls(zeros, zeros.clone())

    @classmethod
    def from_vector(cls, vec: Tensor) -> "PoseSE3":
        """From (..., 6) vectors laid out as (axis_angle, translation)"""
        return cls(vec[..., :3], vec[..., 3:])

    @classmethod
    def from_matrix(cls, matrix: Tensor) -> "PoseSE3":
        """From (..., 4, 4) homogeneous matrices; rotation mapped to the canonical range"""
        return cls(matrix_to_axis_angle(matrix[..., :3, :3]), matrix[..., :3, 3])

    @classmethod
    def stack(cls, poses: Sequence["PoseSE3"], dim: int = 0) -> "PoseSE3":
        if len(poses) == 0:
            raise GeometryError("cannot stack an empty pose sequence")
        return cls(
            torch.stack([p.axis_angle for p in poses], dim=dim),
            torch.stack([p.translation for p in poses], dim=dim),
        )

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return tuple(self.axis_angle.shape[:-1])

    def __len__(self) -> int:
        if not self.batch_shape:
            raise TypeError("a single pose has no length")
        return self.batch_shape[0]

    def __getitem__(self, index) -> "PoseSE3":
        return PoseSE3(self.axis_angle[index], self.translation[index])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def vector(self) -> Tensor:
        return torch.cat([self.axis_angle, self.translation], dim=-1)

    def rotation(self) -> Tensor:
        return rotation_from_axis_angle(self.axis_angle)

    def matrix(self) -> Tensor:
        """Homogeneous (..., 4, 4) matrix"""
        rot = self.rotation()
        top = torch.cat([rot, self.translation[..., None]], dim=-1)
        bottom = torch.zeros(*self.batch_shape, 1, 4, dtype=rot.dtype, device=rot.device)
        bottom[..., 0, 3] = 1.0
        return torch.cat([top, bottom], dim=-2)

    def inverse(self) -> "PoseSE3":
        rot_t = self.rotation().transpose(-1, -2)
        trans = -(rot_t @ self.translation[..., None]).squeeze(-1)
        return PoseSE3(-self.axis_angle, trans)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Matrix product self . other"""
        return PoseSE3.from_matrix(self.matrix() @ other.matrix())

    def canonical(self) -> "PoseSE3":
        return PoseSE3.from_matrix(self.matrix())

    def transform_points(self, points: Tensor) -> Tensor:
        """Apply to (..., 3) points broadcasting against the pose batch"""
        rot = self.rotation()
        return (rot @ points[..., None]).squeeze(-1) + self.translation

    def detach(self) -> "PoseSE3":
        return PoseSE3(self.axis_angle.detach(), self.translation.detach())

    def to(self, *args, **kwargs) -> "PoseSE3":
        return PoseSE3(self.axis_angle.to(*args, **kwargs), self.translation.to(*args, **kwargs))


def compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    """M(compose(a, b)) = M(a) . M(b)"""
    return a.compose(b)


def invert(a: PoseSE3) -> PoseSE3:
    return a.inverse()


def _as_pose_batch(poses: Union[PoseSE3, Sequence[PoseSE3]]) -> PoseSE3:
    if isinstance(poses, PoseSE3):
        return poses
    return PoseSE3.stack(list(poses))


def _focal_like(cam: Pinhole, like: Tensor, trailing: int) -> Tensor:
    focal = cam.focal_tensor(like)
    return focal.reshape(*focal.shape, *([1] * trailing))


def project(points: Tensor, cam: Pinhole) -> Tensor:
    """
    Pinhole projection of (..., 3) points to (..., 2) pixels.

    Raises:
        GeometryError: if any point has z <= 0
    """
    z = points[..., 2]
    if bool(torch.any(z <= 0)):
        raise GeometryError("point behind camera (z <= 0) cannot be projected")
    focal = cam.focal_tensor(points)
    cx, cy = cam.principal_point
    u = focal * points[..., 0] / z + cx
    v = focal * points[..., 1] / z + cy
    return torch.stack([u, v], dim=-1)


def unproject(pixels: Tensor, depth: Union[float, Tensor], cam: Pinhole) -> Tensor:
    """
    Lift (..., 2) pixels with depth to (..., 3) camera-frame points.

    Raises:
        GeometryError: if any depth is not positive
    """
    depth = torch.as_tensor(depth, dtype=pixels.dtype, device=pixels.device)
    if bool(torch.any(depth <= 0)):
        raise GeometryError("depth must be positive to unproject")
    focal = cam.focal_tensor(pixels)
    cx, cy = cam.principal_point
    x = (pixels[..., 0] - cx) / focal * depth
    y = (pixels[..., 1] - cy) / focal * depth
    return torch.stack([x, y, depth.expand_as(x)], dim=-1)


def induced_flow(pose: PoseSE3, depth: Tensor, cam: Pinhole) -> Tuple[Tensor, Tensor]:
    """
    Optical flow induced by a rigid motion under a static-world assumption.

    Every pixel p of frame i is lifted with its depth, moved by `pose` and
    projected again; the flow is the displacement. A focal tensor broadcasts
    against the leading batch dims of `depth`.

    Returns:
        Tuple of (flow (..., 2, H, W), valid (..., H, W)); pixels whose moved
        point has z <= 0 are invalid and carry zero flow.
    """
    height, width = depth.shape[-2:]
    if (height, width) != (cam.height, cam.width):
        raise GeometryError(
            f"depth raster {height}x{width} does not match camera {cam.height}x{cam.width}"
        )
    grid = pixel_grid(height, width, dtype=depth.dtype, device=depth.device)
    focal = _focal_like(cam, depth, trailing=2)
    cx, cy = cam.principal_point

    x = (grid[..., 0] - cx) / focal * depth
    y = (grid[..., 1] - cy) / focal * depth
    points = torch.stack([x, y, depth], dim=-1)

    rot = pose.rotation()[..., None, None, :, :]
    trans = pose.translation[..., None, None, :]
    moved = (rot @ points[..., None]).squeeze(-1) + trans

    z = moved[..., 2]
    valid = z > 0
    z_safe = torch.where(valid, z, torch.ones_like(z))
    u = focal * moved[..., 0] / z_safe + cx
    v = focal * moved[..., 1] / z_safe + cy

    flow = torch.stack([u - grid[..., 0], v - grid[..., 1]], dim=-3)
    flow = torch.where(valid.unsqueeze(-3), flow, torch.zeros_like(flow))
    return flow, valid


def chain_relative_poses(rel: Union[PoseSE3, Sequence[PoseSE3]]) -> PoseSE3:
    """
    Chain relative poses into absolute poses.

    Output k is the left-to-right product rel[0] . rel[1] . ... . rel[k], so the
    output has the same length as the input.
    """
    rel = _as_pose_batch(rel)
    if not rel.batch_shape or rel.batch_shape[0] == 0:
        raise GeometryError("cannot chain an empty pose sequence")
    mats = rel.matrix()
    acc = mats[0]
    chained = [acc]
    for k in range(1, mats.shape[0]):
        acc = acc @ mats[k]
        chained.append(acc)
    return PoseSE3.from_matrix(torch.stack(chained))


def consecutive_differences(absolute: Union[PoseSE3, Sequence[PoseSE3]]) -> PoseSE3:
    """Inverse of chain_relative_poses: d_0 = A_0, d_k = A_{k-1}^-1 . A_k"""
    absolute = _as_pose_batch(absolute)
    mats = absolute.matrix()
    inv = absolute.inverse().matrix()
    diffs = [mats[0]] + [inv[k - 1] @ mats[k] for k in range(1, mats.shape[0])]
    return PoseSE3.from_matrix(torch.stack(diffs))


def trajectory_from_relative(rel: Union[PoseSE3, Sequence[PoseSE3]]) -> PoseSE3:
    """
    Camera-to-reference trajectory (n poses) from n-1 point transforms P^{i->i+1}.

    The camera motion from frame i to i+1 is the inverse of the point transform;
    those motions are chained, and frame 0 sits at the identity.
    """
    rel = _as_pose_batch(rel)
    chained = chain_relative_poses(rel.inverse())
    first = PoseSE3.identity((1,), dtype=chained.axis_angle.dtype, device=chained.axis_angle.device)
    return PoseSE3(
        torch.cat([first.axis_angle, chained.axis_angle]),
        torch.cat([first.translation, chained.translation]),
    )


def relative_from_trajectory(trajectory: Union[PoseSE3, Sequence[PoseSE3]]) -> PoseSE3:
    """Point transforms P^{k->k+1} = A_{k+1}^-1 . A_k of a camera-to-reference trajectory"""
    trajectory = _as_pose_batch(trajectory)
    if trajectory.batch_shape[0] < 2:
        raise GeometryError("a trajectory needs at least 2 poses to have relative motion")
    mats = trajectory.matrix()
    inv = trajectory.inverse().matrix()
    rel = [inv[k + 1] @ mats[k] for k in range(mats.shape[0] - 1)]
    return PoseSE3.from_matrix(torch.stack(rel))


def se3_exp(xi: Tensor) -> PoseSE3:
    """Exponential map of (..., 6) twists (omega, rho)"""
    omega, rho = xi[..., :3], xi[..., 3:]
    theta_sq = (omega * omega).sum(-1)
    small = theta_sq < _SMALL_ANGLE_SQ
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    coef_b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / safe_sq)
    coef_c = torch.where(
        small, 1.0 / 6.0 - theta_sq / 120.0, (theta - torch.sin(theta)) / (safe_sq * theta)
    )
    k = skew(omega)
    eye = torch.eye(3, dtype=xi.dtype, device=xi.device)
    v = eye + coef_b[..., None, None] * k + coef_c[..., None, None] * (k @ k)
    return PoseSE3(omega, (v @ rho[..., None]).squeeze(-1))


def se3_log(pose: PoseSE3) -> Tensor:
    """Logarithm map to (..., 6) twists; the rotation part is canonicalized first"""
    omega = matrix_to_axis_angle(pose.rotation())
    theta_sq = (omega * omega).sum(-1)
    small = theta_sq < _SMALL_ANGLE_SQ
    safe_sq = torch.where(small, torch.ones_like(theta_sq), theta_sq)
    theta = torch.sqrt(safe_sq)
    half = theta / 2
    coef_d = torch.where(
        small,
        1.0 / 12.0 + theta_sq / 720.0,
        1.0 / safe_sq - torch.cos(half) / (2.0 * theta * torch.sin(half)),
    )
    k = skew(omega)
    eye = torch.eye(3, dtype=omega.dtype, device=omega.device)
    v_inv = eye - 0.5 * k + coef_d[..., None, None] * (k @ k)
    rho = (v_inv @ pose.translation[..., None]).squeeze(-1)
    return torch.cat([omega, rho], dim=-1)
