"""
Synthetic dynamic scenes with exact depth, optical flow and motion masks

Scenes are a fronto-parallel background plane plus axis-aligned boxes, some of
which move linearly. Every pixel is ray cast analytically; flow comes from
projecting the hit surface point through the next (or previous) camera, with
the object's own motion added for movers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Tuple

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from ..models.schemas import SceneSpec
from .errors import SceneError
from .geometry import DTYPE, Pinhole, PoseSE3, relative_from_trajectory

logger = logging.getLogger(__name__)

_EPS = 1e-9
_STATIC_DEPTH_RANGE = (2.5, 4.0)
_STATIC_SIZE_RANGE = (0.3, 0.8)
_MOVER_DEPTH_RANGE = (1.4, 1.9)
_MOVER_THICKNESS = 0.1


@dataclass
class Box:
    """Axis-aligned box at frame 0 with a per-frame velocity"""

    lo: np.ndarray
    hi: np.ndarray
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def moving(self) -> bool:
        return bool(np.any(self.velocity != 0))

    def at(self, frame: int) -> Tuple[np.ndarray, np.ndarray]:
        offset = self.velocity * frame
        return self.lo + offset, self.hi + offset


@dataclass
class SyntheticSequence:
    """Rendered oracle sequence; poses are camera-to-world with frame 0 at identity"""

    spec: SceneSpec
    focal: float
    poses_c2w: np.ndarray
    depths: np.ndarray
    flows_fwd: np.ndarray
    flows_bwd: np.ndarray
    masks: np.ndarray
    boxes: List[Box] = field(default_factory=list)

    @property
    def frames(self) -> int:
        return int(self.depths.shape[0])

    @property
    def height(self) -> int:
        return int(self.depths.shape[1])

    @property
    def width(self) -> int:
        return int(self.depths.shape[2])

    @property
    def camera(self) -> Pinhole:
        return Pinhole(focal=self.focal, width=self.width, height=self.height)

    @property
    def gt_absolute(self) -> PoseSE3:
        return PoseSE3.from_matrix(torch.as_tensor(self.poses_c2w, dtype=DTYPE))

    @property
    def gt_relative(self) -> PoseSE3:
        """Point transforms P^{i->i+1} between neighbouring frames"""
        return relative_from_trajectory(self.gt_absolute)

    def observations(self):
        """Per-frame depth and flow inputs for the solver, refinement and predictor"""
        from .solver import FrameObservations

        obs = []
        for i in range(self.frames):
            last = i == self.frames - 1
            obs.append(
                FrameObservations(
                    depth=torch.as_tensor(self.depths[i], dtype=DTYPE),
                    flow_fwd=None if last else torch.as_tensor(self.flows_fwd[i], dtype=DTYPE),
                    flow_bwd=None if last else torch.as_tensor(self.flows_bwd[i], dtype=DTYPE),
                )
            )
        return obs


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * angle).as_matrix()


def camera_path(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """(n, 4, 4) camera-to-world poses of the requested path family"""
    n = spec.frames
    step = spec.translation_per_frame
    angle = math.radians(spec.rotation_per_frame_deg)
    poses = np.tile(np.eye(4), (n, 1, 1))

    if spec.camera_path == "straight":
        direction = np.array([1.0, 0.0, 0.3])
        direction /= np.linalg.norm(direction)
        for k in range(n):
            poses[k, :3, 3] = k * step * direction
    elif spec.camera_path == "arc":
        axis = np.array([0.1, 1.0, 0.05])
        direction = np.array([1.0, 0.05, 0.2])
        direction /= np.linalg.norm(direction)
        for k in range(n):
            poses[k, :3, :3] = _rotation(axis, k * angle)
            poses[k, :3, 3] = k * step * direction
    elif spec.camera_path == "rotation":
        axis = np.array([0.05, 1.0, 0.1])
        for k in range(n):
            poses[k, :3, :3] = _rotation(axis, k * angle)
            poses[k, :3, 3] = k * 0.1 * step * np.array([1.0, 0.0, 0.0])
    elif spec.camera_path == "handheld":
        direction = np.array([0.6, 0.0, 1.0])
        direction /= np.linalg.norm(direction)
        rotvec = np.zeros(3)
        position = np.zeros(3)
        for k in range(1, n):
            rotvec = rotvec + rng.normal(scale=spec.jitter * angle + angle / 4, size=3)
            position = position + step * direction + rng.normal(scale=spec.jitter * step, size=3)
            poses[k, :3, :3] = Rotation.from_rotvec(rotvec).as_matrix()
            poses[k, :3, 3] = position
    else:
        raise SceneError(f"unknown camera path {spec.camera_path!r}")
    return poses


def _pixel_rays(width: int, height: int, focal: float) -> Tuple[np.ndarray, np.ndarray]:
    ys = np.arange(height, dtype=np.float64) + 0.5
    xs = np.arange(width, dtype=np.float64) + 0.5
    grid_x, grid_y = np.meshgrid(xs, ys)
    dirs = np.stack([(grid_x - width / 2) / focal, (grid_y - height / 2) / focal, np.ones_like(grid_x)], -1)
    return np.stack([grid_x, grid_y], 0), dirs


def _box_hit(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Ray parameter of the entry point into a box; inf where the ray misses"""
    safe = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)
    t1 = (lo - origin) / safe
    t2 = (hi - origin) / safe
    t_near = np.minimum(t1, t2).max(-1)
    t_far = np.maximum(t1, t2).min(-1)
    hit = (t_far >= t_near) & (t_near > _EPS)
    return np.where(hit, t_near, np.inf)


def _layout(spec: SceneSpec, rng: np.random.Generator) -> List[Box]:
    width, height, focal = spec.width, spec.height, spec.focal
    boxes: List[Box] = []

    for _ in range(spec.static_boxes):
        z = rng.uniform(*_STATIC_DEPTH_RANGE)
        size = rng.uniform(*_STATIC_SIZE_RANGE)
        u, v = rng.uniform(0.1, 0.9) * width, rng.uniform(0.1, 0.9) * height
        center = np.array([(u - width / 2) * z / focal, (v - height / 2) * z / focal, z])
        boxes.append(Box(lo=center - size / 2, hi=center + size / 2))

    if spec.movers == 0 or spec.mover_coverage == 0:
        return boxes

    # one slot per mover: the image center for a single mover, quadrant centers otherwise
    if spec.movers == 1:
        slots = [(0.5, 0.5)]
    else:
        slots = [(0.25, 0.25), (0.75, 0.75), (0.75, 0.25), (0.25, 0.75)][: spec.movers]
    coverage = spec.mover_coverage / spec.movers
    side_px = math.sqrt(coverage * width * height)
    slot_px = min(width, height) / (1 if spec.movers == 1 else 2)
    slack = max(0.0, (slot_px - side_px) / 2)

    for sx, sy in slots:
        z = rng.uniform(*_MOVER_DEPTH_RANGE)
        u = sx * width + rng.uniform(-slack, slack) * 0.5
        v = sy * height + rng.uniform(-slack, slack) * 0.5
        side = side_px * z / focal
        center = np.array([(u - width / 2) * z / focal, (v - height / 2) * z / focal])
        heading = rng.uniform(0, 2 * math.pi)
        velocity = spec.mover_speed * np.array([math.cos(heading), math.sin(heading), 0.0])
        boxes.append(
            Box(
                lo=np.array([center[0] - side / 2, center[1] - side / 2, z]),
                hi=np.array([center[0] + side / 2, center[1] + side / 2, z + _MOVER_THICKNESS * side]),
                velocity=velocity,
            )
        )
    return boxes


def _cast(
    pose: np.ndarray, frame: int, dirs_cam: np.ndarray, boxes: List[Box], plane_z: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Depth, world hit points and hit object index (-1 for background) of one frame"""
    rot, origin = pose[:3, :3], pose[:3, 3]
    if origin[2] >= plane_z:
        raise SceneError(f"camera of frame {frame} is behind the background plane")
    dirs = dirs_cam @ rot.T

    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.where(dirs[..., 2] > _EPS, (plane_z - origin[2]) / dirs[..., 2], np.inf)
    if not np.all(np.isfinite(t_plane)):
        raise SceneError(f"rays of frame {frame} miss the background plane")

    depth = t_plane
    hit = np.full(depth.shape, -1, dtype=np.int64)
    for index, box in enumerate(boxes):
        lo, hi = box.at(frame)
        if np.all(origin > lo) and np.all(origin < hi):
            raise SceneError(f"camera of frame {frame} is inside box {index}")
        t_box = _box_hit(origin, dirs, lo, hi)
        closer = t_box < depth
        depth = np.where(closer, t_box, depth)
        hit = np.where(closer, index, hit)

    points = origin + depth[..., None] * dirs
    return depth, points, hit


def _flow_to(
    points: np.ndarray, hit: np.ndarray, boxes: List[Box], direction: int, pose: np.ndarray, grid: np.ndarray, focal: float
) -> np.ndarray:
    width, height = grid.shape[2], grid.shape[1]
    moved = points.copy()
    for index, box in enumerate(boxes):
        if box.moving:
            moved[hit == index] += direction * box.velocity
    cam = (moved - pose[:3, 3]) @ pose[:3, :3]
    if np.any(cam[..., 2] <= _EPS):
        raise SceneError("surface point falls behind the neighbouring camera")
    u = focal * cam[..., 0] / cam[..., 2] + width / 2
    v = focal * cam[..., 1] / cam[..., 2] + height / 2
    return np.stack([u, v], 0) - grid


def generate_scene(spec: SceneSpec) -> SyntheticSequence:
    """
    Render a sequence from its specification.

    Raises:
        SceneError: if a camera sits inside geometry or a ray misses the scene
    """
    rng = np.random.default_rng(spec.seed)
    poses = camera_path(spec, rng)
    boxes = _layout(spec, rng)
    grid, dirs_cam = _pixel_rays(spec.width, spec.height, spec.focal)

    depths, points, hits = [], [], []
    for k in range(spec.frames):
        depth, point, hit = _cast(poses[k], k, dirs_cam, boxes, spec.background_depth)
        depths.append(depth)
        points.append(point)
        hits.append(hit)

    movers = {i for i, box in enumerate(boxes) if box.moving}
    masks = np.stack([np.isin(hit, list(movers)) for hit in hits]) if movers else np.zeros(
        (spec.frames, spec.height, spec.width), dtype=bool
    )

    flows_fwd, flows_bwd = [], []
    for k in range(spec.frames - 1):
        flows_fwd.append(_flow_to(points[k], hits[k], boxes, 1, poses[k + 1], grid, spec.focal))
        flows_bwd.append(_flow_to(points[k + 1], hits[k + 1], boxes, -1, poses[k], grid, spec.focal))

    empty = np.zeros((0, 2, spec.height, spec.width))
    sequence = SyntheticSequence(
        spec=spec,
        focal=float(spec.focal),
        poses_c2w=poses,
        depths=np.stack(depths),
        flows_fwd=np.stack(flows_fwd) if flows_fwd else empty,
        flows_bwd=np.stack(flows_bwd) if flows_bwd else empty.copy(),
        masks=masks,
        boxes=boxes,
    )
    logger.debug(
        "rendered %d frames (%s path, %d movers, mask coverage %.3f)",
        spec.frames,
        spec.camera_path,
        len(movers),
        float(masks[0].mean()) if spec.frames else 0.0,
    )
    return sequence


def perturb(
    seq: SyntheticSequence, flow_sigma: float = 0.0, depth_sigma: float = 0.0, seed: int = 0
) -> SyntheticSequence:
    """
    Noisy copy of the observations; ground truth is left untouched.

    Flow gets additive Gaussian noise in pixels, depth multiplicative log-normal
    noise with `depth_sigma` as the standard deviation of log depth.
    """
    if flow_sigma < 0 or depth_sigma < 0:
        raise SceneError("noise levels must be nonnegative")
    if flow_sigma == 0 and depth_sigma == 0:
        return replace(seq)

    rng = np.random.default_rng(seed)
    depths = seq.depths * np.exp(rng.normal(scale=depth_sigma, size=seq.depths.shape)) if depth_sigma else seq.depths.copy()
    flows_fwd = seq.flows_fwd + rng.normal(scale=flow_sigma, size=seq.flows_fwd.shape) if flow_sigma else seq.flows_fwd.copy()
    flows_bwd = seq.flows_bwd + rng.normal(scale=flow_sigma, size=seq.flows_bwd.shape) if flow_sigma else seq.flows_bwd.copy()
    return replace(seq, depths=depths, flows_fwd=flows_fwd, flows_bwd=flows_bwd)


def render_corpus(n: int, template: SceneSpec, seed: int = 0) -> List[SyntheticSequence]:
    """
    Render `n` sequences for toy training.

    Focal length, camera path, motion magnitude and movers are drawn per
    sequence around the template; scenes that cannot be rendered are redrawn.
    """
    rng = np.random.default_rng(seed)
    paths = ["arc", "straight", "rotation", "handheld"]
    corpus: List[SyntheticSequence] = []
    attempts = 0
    while len(corpus) < n:
        attempts += 1
        if attempts > 10 * n:
            raise SceneError(f"could not render {n} corpus sequences from the template")
        height = template.height
        spec = template.model_copy(
            update={
                "focal": float(height * math.exp(rng.uniform(math.log(0.4), math.log(2.5)))),
                "camera_path": paths[int(rng.integers(len(paths)))],
                "translation_per_frame": float(template.translation_per_frame * rng.uniform(0.5, 1.5)),
                "rotation_per_frame_deg": float(template.rotation_per_frame_deg * rng.uniform(0.5, 2.0)),
                "movers": int(rng.integers(0, 2)),
                "mover_coverage": float(rng.uniform(0.05, 0.2)),
                "seed": int(rng.integers(2**31)),
            }
        )
        try:
            corpus.append(generate_scene(spec))
        except SceneError as exc:
            logger.debug("corpus scene rejected: %s", exc)
    return corpus


def mask_coverage(seq: SyntheticSequence, frame: int = 0) -> float:
    """Fraction of pixels covered by movers in one frame"""
    return float(seq.masks[frame].mean())
