"""
Trajectory alignment and accuracy metrics
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from ..models.schemas import MetricsReport
from .errors import GeometryError
from .geometry import PoseSE3

logger = logging.getLogger(__name__)

TrajectoryLike = Union[PoseSE3, np.ndarray]

ALIGNMENT_MODES = ("none", "rigid", "similarity")


def as_matrices(trajectory: TrajectoryLike) -> np.ndarray:
    """(n, 4, 4) float64 camera-to-world matrices"""
    if isinstance(trajectory, PoseSE3):
        return trajectory.matrix().detach().cpu().numpy().astype(np.float64)
    mats = np.asarray(trajectory, dtype=np.float64)
    if mats.ndim != 3 or mats.shape[1:] != (4, 4):
        raise GeometryError(f"trajectory must be (n, 4, 4) matrices, got shape {mats.shape}")
    return mats


@dataclass
class Alignment:
    """Similarity transform applied to the estimate: x -> scale * R x + t"""

    aligned: np.ndarray
    scale: float
    rotation: np.ndarray
    translation: np.ndarray


def _check_lengths(est: np.ndarray, gt: np.ndarray) -> None:
    if est.shape[0] != gt.shape[0]:
        raise GeometryError(f"trajectory lengths differ: {est.shape[0]} vs {gt.shape[0]}")


def _is_degenerate(points: np.ndarray) -> bool:
    centered = points - points.mean(0)
    singular = np.linalg.svd(centered, compute_uv=False)
    return singular[0] == 0 or singular[1] <= 1e-9 * singular[0]


def align(est: TrajectoryLike, gt: TrajectoryLike, mode: str = "similarity") -> Alignment:
    """
    Closed-form least-squares alignment of estimated positions onto ground truth.

    Horn/Umeyama: the rotation comes from the SVD of the cross-covariance, the
    scale (similarity mode only) from the ratio of the singular values to the
    estimate's variance.

    Raises:
        GeometryError: on length mismatch, fewer than 3 poses or collinear positions
    """
    if mode not in ALIGNMENT_MODES:
        raise GeometryError(f"unknown alignment mode {mode!r}; expected one of {ALIGNMENT_MODES}")
    est_m, gt_m = as_matrices(est), as_matrices(gt)
    _check_lengths(est_m, gt_m)
    if mode == "none":
        return Alignment(aligned=est_m.copy(), scale=1.0, rotation=np.eye(3), translation=np.zeros(3))

    est_p, gt_p = est_m[:, :3, 3], gt_m[:, :3, 3]
    if est_p.shape[0] < 3:
        raise GeometryError(f"{mode} alignment needs at least 3 poses, got {est_p.shape[0]}")
    if _is_degenerate(est_p) or _is_degenerate(gt_p):
        raise GeometryError(f"{mode} alignment is degenerate for collinear positions")

    mu_e, mu_g = est_p.mean(0), gt_p.mean(0)
    est_c, gt_c = est_p - mu_e, gt_p - mu_g
    cov = gt_c.T @ est_c / est_p.shape[0]
    u, d, vt = np.linalg.svd(cov)
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    scale = 1.0
    if mode == "similarity":
        variance = (est_c * est_c).sum(1).mean()
        scale = float(np.trace(np.diag(d) @ s) / variance)
    trans = mu_g - scale * rot @ mu_e

    aligned = est_m.copy()
    aligned[:, :3, :3] = rot @ est_m[:, :3, :3]
    aligned[:, :3, 3] = scale * est_p @ rot.T + trans
    logger.debug("%s alignment: scale %.6f", mode, scale)
    return Alignment(aligned=aligned, scale=scale, rotation=rot, translation=trans)


def ate(est_aligned: TrajectoryLike, gt: TrajectoryLike) -> float:
    """RMSE of position differences"""
    est_m, gt_m = as_matrices(est_aligned), as_matrices(gt)
    _check_lengths(est_m, gt_m)
    diff = est_m[:, :3, 3] - gt_m[:, :3, 3]
    return float(np.sqrt((diff * diff).sum(1).mean()))


def _relative(mats: np.ndarray, delta: int) -> np.ndarray:
    return np.linalg.inv(mats[:-delta]) @ mats[delta:]


def rpe(est: TrajectoryLike, gt: TrajectoryLike, delta: int = 1) -> Tuple[float, float]:
    """
    Relative pose error over a frame gap.

    Returns:
        Tuple of (RMSE of translation error norms, RMSE of rotation error angles in degrees)
    """
    est_m, gt_m = as_matrices(est), as_matrices(gt)
    _check_lengths(est_m, gt_m)
    if delta < 1 or est_m.shape[0] <= delta:
        raise GeometryError(f"rpe needs more than {delta} poses, got {est_m.shape[0]}")
    errors = np.linalg.inv(_relative(gt_m, delta)) @ _relative(est_m, delta)
    trans = np.linalg.norm(errors[:, :3, 3], axis=1)
    angles = np.degrees(Rotation.from_matrix(errors[:, :3, :3]).magnitude())
    return float(np.sqrt((trans * trans).mean())), float(np.sqrt((angles * angles).mean()))


def focal_errors(est_f: float, gt_f: float) -> Tuple[float, float]:
    """Absolute and relative focal error"""
    if not gt_f > 0:
        raise GeometryError(f"ground-truth focal must be positive, got {gt_f}")
    if not est_f > 0:
        raise GeometryError(f"estimated focal must be positive, got {est_f}")
    afe = abs(est_f - gt_f)
    return afe, afe / gt_f


def motion_segmentation_iou(
    sigma: Union[np.ndarray, torch.Tensor], mask: Union[np.ndarray, torch.Tensor], threshold: float
) -> float:
    """IoU between pixels with uncertainty above `threshold` and a motion mask"""
    sigma = sigma.detach().cpu().numpy() if isinstance(sigma, torch.Tensor) else np.asarray(sigma)
    mask = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    if sigma.shape != mask.shape:
        raise GeometryError(f"uncertainty {sigma.shape} and mask {mask.shape} differ in shape")
    predicted = sigma > threshold
    mask = mask.astype(bool)
    union = np.logical_or(predicted, mask).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(predicted, mask).sum() / union)


def evaluate_trajectory(
    est: TrajectoryLike,
    gt: TrajectoryLike,
    mode: str = "similarity",
    delta: int = 1,
    est_focal: Optional[float] = None,
    gt_focal: Optional[float] = None,
) -> MetricsReport:
    """Align, then report ATE, RPE and (when both focals are given) AFE/RFE"""
    alignment = align(est, gt, mode)
    rpe_trans, rpe_rot = rpe(alignment.aligned, gt, delta)
    afe = rfe = None
    if est_focal is not None and gt_focal is not None:
        afe, rfe = focal_errors(est_focal, gt_focal)
    return MetricsReport(
        ate=ate(alignment.aligned, gt),
        rpe_trans=rpe_trans,
        rpe_rot=rpe_rot,
        afe=afe,
        rfe=rfe,
        alignment=mode,
        scale=alignment.scale,
    )
