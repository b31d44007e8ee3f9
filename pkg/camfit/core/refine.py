"""
Test-time trajectory refinement

Tracks are built by chaining optical flow over consecutive frames from anchors
sampled every `stride` frames; every tracked point carries the uncertainty
accumulated along the chain. A reprojection bundle adjustment over keyframe
poses, anchor inverse depths and the focal length then runs in overlapping
windows followed by one global pass. Keyframe poses are moved by se(3)
corrections; frames in between take the correction interpolated linearly
between their two keyframes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..config import get_config
from ..models.schemas import RefineConfig, RefinementReport, WindowReport
from .errors import GeometryError, InputError, NumericalError
from .geometry import DTYPE, PoseSE3, se3_exp, se3_log

logger = logging.getLogger(__name__)

Tensor = torch.Tensor
PosesLike = Union[PoseSE3, Tensor]

# Below this the window loss is treated as already converged for the divergence test.
_LOSS_FLOOR = 1e-9
_MIN_Z = 1e-6


@dataclass
class Track:
    """One tracked point: pixel positions in consecutive frames and accumulated uncertainty"""

    start_frame: int
    grid_pos: Tuple[float, float]
    pixels: List[Tuple[float, float]]
    uncertainties: List[float]
    inv_depth: float


@dataclass
class TrackSet:
    """
    Padded batch of tracks.

    Track t starts in frame `anchors[t]`; its point j was observed in frame
    `frame_indices[t, j]`. `valid` is False for padding and truncated tails.
    """

    keyframes: List[int]
    anchors: Tensor
    frame_indices: Tensor
    positions: Tensor
    sigmas: Tensor
    valid: Tensor
    inv_depth: Tensor

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    def subset(self, keep: Tensor) -> "TrackSet":
        return TrackSet(
            keyframes=self.keyframes,
            anchors=self.anchors[keep],
            frame_indices=self.frame_indices[keep],
            positions=self.positions[keep],
            sigmas=self.sigmas[keep],
            valid=self.valid[keep],
            inv_depth=self.inv_depth[keep],
        )

    def restrict(self, first: int, last: int) -> Tuple["TrackSet", Tensor]:
        """
        Tracks anchored in frames [first, last) with points after `last` dropped.

        Returns:
            Tuple of (restricted set, indices of the kept tracks in this set)
        """
        inside = (self.frame_indices >= first) & (self.frame_indices <= last) & self.valid
        keep = (self.anchors >= first) & (self.anchors < last) & (inside.sum(dim=1) >= 2)
        index = torch.nonzero(keep, as_tuple=False).reshape(-1)
        restricted = self.subset(index)
        restricted.valid = inside[index]
        return restricted, index

    def track(self, t: int) -> Track:
        count = int(self.valid[t].sum())
        return Track(
            start_frame=int(self.anchors[t]),
            grid_pos=tuple(float(c) for c in self.positions[t, 0]),
            pixels=[tuple(float(c) for c in p) for p in self.positions[t, :count]],
            uncertainties=[float(s) for s in self.sigmas[t, :count]],
            inv_depth=float(self.inv_depth[t]),
        )


@dataclass
class RefinedTrajectory:
    """Refined camera-to-world poses for every frame, focal length and anchor inverse depths"""

    poses: PoseSE3
    focal: float
    inv_depths: Tensor
    keyframes: List[int]
    report: RefinementReport


def keyframe_indices(frames: int, stride: int) -> List[int]:
    """Every `stride`-th frame; the last frame is always a keyframe"""
    if frames < 2:
        raise InputError(f"refinement needs at least 2 frames, got {frames}")
    keyframes = list(range(0, frames, stride))
    if keyframes[-1] != frames - 1:
        keyframes.append(frames - 1)
    return keyframes


def _sample(raster: Tensor, points: Tensor) -> Tensor:
    """Bilinear lookup of a (C, H, W) raster at (N, 2) continuous pixel coordinates"""
    height, width = raster.shape[-2:]
    norm = torch.stack([2.0 * points[:, 0] / width - 1.0, 2.0 * points[:, 1] / height - 1.0], dim=-1)
    out = F.grid_sample(
        raster[None], norm[None, None], mode="bilinear", padding_mode="border", align_corners=False
    )
    return out[0, :, 0]


def _lattice(grid: int, height: int, width: int) -> Tuple[Tensor, Tensor, Tensor]:
    """Anchor pixels of a grid x grid lattice snapped to pixel centers"""
    cols = torch.clamp(((torch.arange(grid, dtype=DTYPE) + 0.5) * width / grid).floor().long(), max=width - 1)
    rows = torch.clamp(((torch.arange(grid, dtype=DTYPE) + 0.5) * height / grid).floor().long(), max=height - 1)
    row_idx, col_idx = torch.meshgrid(rows, cols, indexing="ij")
    row_idx, col_idx = row_idx.reshape(-1), col_idx.reshape(-1)
    points = torch.stack([col_idx.to(DTYPE) + 0.5, row_idx.to(DTYPE) + 0.5], dim=-1)
    return points, row_idx, col_idx


def build_tracks(
    flows: Tensor, sigmas: Tensor, depths: Tensor, config: RefineConfig = RefineConfig()
) -> TrackSet:
    """
    Chain forward flow from a lattice of anchors in every keyframe but the last.

    Args:
        flows: (n-1, 2, H, W) forward flow of each frame pair
        sigmas: (n-1, H, W) flow uncertainty of each frame pair
        depths: (n, H, W) depth of every frame

    A track records its position in each following frame, up to `track_length`
    points or the end of the sequence; the uncertainty of point j is the sum of
    the uncertainty sampled at every frame before it (0 at the anchor).
    Tracks leaving the image are truncated; tracks with fewer than 2 points are dropped.
    """
    frames = depths.shape[0]
    if flows.shape[0] != frames - 1 or sigmas.shape[0] != frames - 1:
        raise GeometryError(
            f"expected {frames - 1} flow and uncertainty rasters for {frames} frames, "
            f"got {flows.shape[0]} and {sigmas.shape[0]}"
        )
    height, width = depths.shape[-2:]
    flows, sigmas, depths = flows.to(DTYPE), sigmas.to(DTYPE), depths.to(DTYPE)
    if config.weighting == "uniform":
        sigmas = torch.zeros_like(sigmas)

    keyframes = keyframe_indices(frames, config.stride)
    length = config.track_length
    lattice, rows, cols = _lattice(config.grid, height, width)

    anchors, indices, positions, accumulated, valids, inv_depths = [], [], [], [], [], []
    for anchor in keyframes[:-1]:
        frame = anchor
        point = lattice.clone()
        alive = torch.ones(point.shape[0], dtype=torch.bool)
        acc = torch.zeros(point.shape[0], dtype=DTYPE)
        rec_pos, rec_sigma, rec_valid, rec_index = [point], [acc], [alive], [anchor]

        while frame < frames - 1 and len(rec_pos) < length:
            acc = acc + _sample(sigmas[frame][None], point)[0]
            point = point + _sample(flows[frame], point).T
            frame += 1
            inside = (point[:, 0] >= 0) & (point[:, 0] <= width) & (point[:, 1] >= 0) & (point[:, 1] <= height)
            alive = alive & inside
            rec_pos.append(point)
            rec_sigma.append(acc)
            rec_valid.append(alive)
            rec_index.append(frame)

        pad = length - len(rec_pos)
        pos = torch.stack(rec_pos, dim=1)
        sig = torch.stack(rec_sigma, dim=1)
        val = torch.stack(rec_valid, dim=1)
        idx = torch.tensor(rec_index, dtype=torch.long).expand(point.shape[0], -1)
        if pad:
            pos = torch.cat([pos, pos[:, -1:].expand(-1, pad, -1)], dim=1)
            sig = torch.cat([sig, sig[:, -1:].expand(-1, pad)], dim=1)
            val = torch.cat([val, torch.zeros(point.shape[0], pad, dtype=torch.bool)], dim=1)
            idx = torch.cat([idx, idx[:, -1:].expand(-1, pad)], dim=1)

        keep = val.sum(dim=1) >= 2
        anchors.append(torch.full((int(keep.sum()),), anchor, dtype=torch.long))
        indices.append(idx[keep])
        positions.append(pos[keep])
        accumulated.append(sig[keep])
        valids.append(val[keep])
        inv_depths.append(1.0 / depths[anchor][rows, cols][keep])

    tracks = TrackSet(
        keyframes=keyframes,
        anchors=torch.cat(anchors),
        frame_indices=torch.cat(indices),
        positions=torch.cat(positions),
        sigmas=torch.cat(accumulated),
        valid=torch.cat(valids),
        inv_depth=torch.cat(inv_depths),
    )
    logger.debug("built %d tracks from %d anchor frames", len(tracks), len(keyframes) - 1)
    return tracks


def _rigid_inverse(mats: Tensor) -> Tensor:
    rot_t = mats[..., :3, :3].transpose(-1, -2)
    out = torch.zeros_like(mats)
    out[..., :3, :3] = rot_t
    out[..., :3, 3] = -(rot_t @ mats[..., :3, 3:]).squeeze(-1)
    out[..., 3, 3] = 1.0
    return out


def _matrices(poses: PosesLike) -> Tensor:
    return poses.matrix() if isinstance(poses, PoseSE3) else poses


def reprojection_cost(
    tracks: TrackSet,
    poses: PosesLike,
    focal,
    width: int,
    height: int,
    sigma_max: float = 0.05,
    inv_depth: Optional[Tensor] = None,
) -> Tensor:
    """
    Uncertainty-gated reprojection error.

    `poses` holds the camera-to-world pose of every frame, as a PoseSE3 or as
    (n, 4, 4) matrices. Each anchor is lifted with its inverse depth, moved by
    P^{a->j} = A_j^-1 . A_a and projected; the L1 pixel error of point j is
    weighted by max(sigma_max - sigma_j, 0). Points behind the camera and gated
    points contribute exactly 0. Mean over tracks.
    """
    if len(tracks) == 0:
        return torch.zeros((), dtype=DTYPE)
    inv_depth = tracks.inv_depth if inv_depth is None else inv_depth
    focal = torch.as_tensor(focal, dtype=DTYPE)
    cx, cy = width / 2.0, height / 2.0

    anchor_px = tracks.positions[:, 0]
    z = 1.0 / inv_depth
    anchor = torch.stack([(anchor_px[:, 0] - cx) / focal * z, (anchor_px[:, 1] - cy) / focal * z, z], dim=-1)

    mats = _matrices(poses)
    relative = _rigid_inverse(mats)[tracks.frame_indices] @ mats[tracks.anchors][:, None]
    moved = (relative[..., :3, :3] @ anchor[:, None, :, None]).squeeze(-1) + relative[..., :3, 3]

    depth = moved[..., 2]
    in_front = depth > _MIN_Z
    safe = torch.where(in_front, depth, torch.ones_like(depth))
    u = focal * moved[..., 0] / safe + cx
    v = focal * moved[..., 1] / safe + cy
    residual = (u - tracks.positions[..., 0]).abs() + (v - tracks.positions[..., 1]).abs()

    weight = torch.clamp(sigma_max - tracks.sigmas, min=0.0)
    use = tracks.valid & in_front & (weight > 0)
    use[:, 0] = False
    contribution = torch.where(use, residual * weight, torch.zeros_like(residual))
    return contribution.sum() / len(tracks)


def smoothness_cost(poses: PosesLike) -> Tensor:
    """
    Mean over i of || M(P^{i->i+1})^-1 . M(P^{i+1->i+2}) - I ||_{1,1}.

    The relative transforms are taken between consecutive camera-to-world poses,
    so a global rigid transform of the trajectory leaves the value unchanged.
    """
    mats = _matrices(poses)
    if mats.shape[0] < 3:
        raise GeometryError(f"smoothness needs at least 3 poses, got {mats.shape[0]}")
    inv_mats = _rigid_inverse(mats)
    relative = inv_mats[1:] @ mats[:-1]
    relative_inv = inv_mats[:-1] @ mats[1:]
    product = relative_inv[:-1] @ relative[1:]
    eye = torch.eye(4, dtype=product.dtype)
    return (product - eye).abs().sum(dim=(-2, -1)).mean()


def _segments(frames: int, keyframes: Sequence[int]) -> Tuple[Tensor, Tensor, Tensor]:
    """Per frame: positions of the enclosing keyframes and the fraction of the way between them"""
    left = torch.zeros(frames, dtype=torch.long)
    right = torch.zeros(frames, dtype=torch.long)
    alpha = torch.zeros(frames, dtype=DTYPE)
    for k in range(len(keyframes) - 1):
        a, b = keyframes[k], keyframes[k + 1]
        for t in range(a + 1, b):
            left[t], right[t], alpha[t] = k, k + 1, (t - a) / (b - a)
    for k, frame in enumerate(keyframes):
        left[frame], right[frame] = k, k
    return left, right, alpha


def frame_matrices(
    initial: Tensor,
    keyframes: Sequence[int],
    corrections: Tensor,
    segments: Optional[Tuple[Tensor, Tensor, Tensor]] = None,
) -> Tensor:
    """
    Camera-to-world matrices of every frame after keyframe corrections.

    Args:
        initial: (n, 4, 4) initial camera-to-world matrices
        corrections: (K, 6) se(3) twists, one per keyframe, applied on the left

    Frame t between keyframes a and b gets exp((1 - s) xi_a + s xi_b) . A_t with
    s = (t - a) / (b - a), so keyframes take exactly their own correction and
    zero corrections leave the initial poses unchanged.
    """
    left, right, alpha = segments if segments is not None else _segments(initial.shape[0], keyframes)
    twist = (1.0 - alpha)[:, None] * corrections[left] + alpha[:, None] * corrections[right]
    return se3_exp(twist).matrix() @ initial


def _keep_unchanged(initial: PoseSE3, mats: Tensor) -> PoseSE3:
    """PoseSE3 of `mats` that keeps the exact input representation where nothing changed"""
    init_m = initial.matrix()
    result = PoseSE3.from_matrix(mats)
    same = (mats == init_m).reshape(mats.shape[0], -1).all(dim=1)
    return PoseSE3(
        torch.where(same[:, None], initial.axis_angle, result.axis_angle),
        torch.where(same[:, None], initial.translation, result.translation),
    )


def interpolate_poses(initial: PoseSE3, keyframes: Sequence[int], refined: PoseSE3) -> PoseSE3:
    """
    Fill frames between keyframes.

    The correction that takes each initial keyframe pose to its refined pose is
    interpolated linearly in the Lie algebra and applied to the initial poses
    of the frames in between.
    """
    if len(keyframes) != len(refined):
        raise GeometryError(f"{len(keyframes)} keyframes but {len(refined)} refined poses")
    init_m = initial.matrix()
    ref_m = refined.matrix()
    corrections = torch.zeros(len(keyframes), 6, dtype=init_m.dtype)
    for k, frame in enumerate(keyframes):
        if torch.equal(refined.vector()[k], initial.vector()[frame]):
            continue
        corrections[k] = se3_log(PoseSE3.from_matrix(ref_m[k] @ _rigid_inverse(init_m[frame])))

    out = frame_matrices(init_m, keyframes, corrections)
    for k, frame in enumerate(keyframes):
        out[frame] = ref_m[k]
    return _keep_unchanged(initial, out)


class WindowedRefiner:
    """Sliding-window then global bundle adjustment over keyframe parameters"""

    def __init__(self, config: RefineConfig = RefineConfig()):
        self.config = config
        self.progress = get_config().PROGRESS
        # set per run
        self._keyframes: List[int] = []
        self._initial: Optional[Tensor] = None
        self._segments: Optional[Tuple[Tensor, Tensor, Tensor]] = None

    def _loss(
        self,
        tracks: TrackSet,
        corrections: Tensor,
        log_inv_depth: Tensor,
        log_focal: Tensor,
        window: Tuple[int, int],
        width: int,
        height: int,
    ) -> Tensor:
        mats = frame_matrices(self._initial, self._keyframes, corrections, self._segments)
        cost = reprojection_cost(
            tracks, mats, torch.exp(log_focal), width, height, self.config.sigma_max, torch.exp(log_inv_depth)
        )
        lo, hi = window
        if self.config.lambda_smooth > 0 and hi - lo >= 3:
            keyframe_mats = mats[torch.tensor(self._keyframes[lo:hi], dtype=torch.long)]
            cost = cost + self.config.lambda_smooth * smoothness_cost(keyframe_mats)
        return cost

    def _optimize(
        self,
        tracks: TrackSet,
        state: Dict[str, Tensor],
        keyframe_ids: List[int],
        free: List[int],
        steps: int,
        width: int,
        height: int,
    ) -> WindowReport:
        """
        Optimize the corrections of `free` keyframes (plus depths and focal)
        inside a range of keyframes; everything else is held fixed.
        """
        lo, hi = keyframe_ids[0], keyframe_ids[-1] + 1
        local, track_index = tracks.restrict(self._keyframes[lo], self._keyframes[hi - 1])

        base = state["corrections"].detach()
        free_index = torch.tensor(free, dtype=torch.long)
        free_corrections = base[free_index].clone().requires_grad_(True)
        depth_param = state["log_inv_depth"][track_index].clone().requires_grad_(True)
        focal_param = state["log_focal"].clone().requires_grad_(self.config.optimize_focal)

        def assemble() -> Tensor:
            return base.index_put((free_index,), free_corrections)

        def loss() -> Tensor:
            return self._loss(local, assemble(), depth_param, focal_param, (lo, hi), width, height)

        params = [free_corrections, depth_param] + ([focal_param] if self.config.optimize_focal else [])
        optimizer = torch.optim.Adam(params, lr=self.config.step_size)

        with torch.no_grad():
            initial = float(loss())
        final = initial
        for step in range(steps):
            optimizer.zero_grad()
            value = loss()
            if not torch.isfinite(value):
                final = math.inf
                break
            if not value.requires_grad:
                # no tracks and no smoothness term inside this window
                break
            value.backward()
            optimizer.step()
        else:
            with torch.no_grad():
                final = float(loss())

        aborted = not math.isfinite(final) or (
            final > self.config.divergence_factor * initial and final > _LOSS_FLOOR
        )
        report = WindowReport(
            keyframes=list(keyframe_ids),
            free=list(free),
            initial_loss=initial,
            final_loss=final if math.isfinite(final) else float("inf"),
            aborted=aborted,
        )
        if aborted:
            logger.warning(
                "window %s diverged (%.6g -> %.6g); keeping its initialization", keyframe_ids, initial, final
            )
            return report

        with torch.no_grad():
            state["corrections"] = assemble().detach().clone()
            log_inv_depth = state["log_inv_depth"].clone()
            log_inv_depth[track_index] = depth_param
            state["log_inv_depth"] = log_inv_depth
            state["log_focal"] = focal_param.detach().clone()
        return report

    def windows(self, count: int) -> List[Tuple[List[int], List[int]]]:
        """(keyframes in window, keyframes optimized in it) of the sweep"""
        width = self.config.window
        shift = width - self.config.overlap
        plan = []
        done = 0
        start = 0
        while True:
            ids = list(range(start, min(start + width, count)))
            free = [k for k in ids if k > done]
            if free:
                plan.append((ids, free))
                done = max(done, ids[-1])
            if ids[-1] >= count - 1:
                break
            start += shift
        return plan

    def run(
        self, initial: PoseSE3, tracks: TrackSet, focal: float, width: int, height: int
    ) -> Tuple[Dict[str, Tensor], List[WindowReport], Optional[WindowReport]]:
        """
        Refine keyframe corrections, inverse depths and focal length.

        Args:
            initial: (n,) camera-to-world poses of every frame
            tracks: tracks whose keyframes define the optimized poses
        """
        self._keyframes = list(tracks.keyframes)
        self._initial = initial.matrix().detach().to(DTYPE)
        self._segments = _segments(len(initial), self._keyframes)
        count = len(self._keyframes)
        state = {
            "corrections": torch.zeros(count, 6, dtype=DTYPE),
            "log_inv_depth": torch.log(tracks.inv_depth.detach().to(DTYPE)),
            "log_focal": torch.tensor(math.log(focal), dtype=DTYPE),
        }
        reports = []
        plan = self.windows(count)
        for ids, free in tqdm(plan, disable=not self.progress, desc="refine windows"):
            report = self._optimize(tracks, state, ids, free, self.config.steps_per_window, width, height)
            logger.debug("window %s: %.6g -> %.6g", ids, report.initial_loss, report.final_loss)
            reports.append(report)

        global_report = None
        if self.config.global_steps > 0 and count > 1:
            everything = list(range(count))
            global_report = self._optimize(
                tracks, state, everything, everything[1:], self.config.global_steps, width, height
            )
            logger.info(
                "global refinement: %.6g -> %.6g", global_report.initial_loss, global_report.final_loss
            )
        return state, reports, global_report


def refine_trajectory(
    initial: PoseSE3,
    focal: float,
    depths: Tensor,
    flows: Tensor,
    sigmas: Tensor,
    config: RefineConfig = RefineConfig(),
) -> RefinedTrajectory:
    """
    Refine a camera-to-world trajectory and focal length against flow tracks.

    Args:
        initial: (n,) camera-to-world poses, frame 0 at the identity
        focal: initial focal length in pixels
        depths: (n, H, W) depth rasters
        flows: (n-1, 2, H, W) forward flow
        sigmas: (n-1, H, W) flow uncertainty

    Raises:
        InputError: if the trajectory and rasters disagree in length
    """
    frames = depths.shape[0]
    if len(initial) != frames:
        raise InputError(f"trajectory has {len(initial)} poses but {frames} depth rasters were given")
    height, width = int(depths.shape[-2]), int(depths.shape[-1])
    torch.manual_seed(config.seed)

    tracks = build_tracks(flows, sigmas, depths, config)
    keyframes = tracks.keyframes
    initial = initial.to(DTYPE)

    refiner = WindowedRefiner(config)
    state, reports, global_report = refiner.run(initial, tracks, focal, width, height)
    corrections = state["corrections"]
    if not torch.all(torch.isfinite(corrections)):
        raise NumericalError("refined keyframe poses are not finite")

    poses = _keep_unchanged(initial, frame_matrices(initial.matrix(), keyframes, corrections))
    refined_focal = float(torch.exp(state["log_focal"]))
    report = RefinementReport(
        keyframes=keyframes,
        tracks=len(tracks),
        windows=reports,
        global_initial_loss=None if global_report is None else global_report.initial_loss,
        global_final_loss=None if global_report is None else global_report.final_loss,
        initial_focal=float(focal),
        refined_focal=refined_focal,
    )
    logger.info(
        "refined %d frames (%d keyframes, %d tracks), focal %.2f -> %.2f",
        frames,
        len(keyframes),
        len(tracks),
        focal,
        refined_focal,
    )
    return RefinedTrajectory(
        poses=poses,
        focal=refined_focal,
        inv_depths=torch.exp(state["log_inv_depth"]),
        keyframes=keyframes,
        report=report,
    )
