"""
Network-free per-sequence estimation of poses, uncertainties and focal length

Every focal candidate gets its own relative poses (both directions) and its own
coarse uncertainty grids. The candidates are optimized as one batched problem
whose objective is a sum of per-candidate terms, so they stay independent.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from ..config import get_config
from ..models.schemas import FitConfig
from .errors import InputError, NumericalError
from .geometry import DTYPE, Pinhole, PoseSE3, induced_flow
from .hypotheses import (
    DEFAULT_TEMPERATURE,
    FocalSchedule,
    LikelihoodVector,
    losses_to_target_distribution,
)
from .losses import (
    LossWeights,
    flow_residual,
    fwd_bwd_consistency_loss,
    sequence_flow_nll,
    sigma_from_raw,
)

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

_SMOOTHING_WINDOW = 10


@dataclass
class FrameObservations:
    """Depth of frame i and the flows between frame i and frame i+1"""

    depth: Tensor
    flow_fwd: Optional[Tensor] = None
    flow_bwd: Optional[Tensor] = None

    def __post_init__(self):
        self.depth = torch.as_tensor(self.depth, dtype=DTYPE)
        if self.depth.dim() != 2:
            raise InputError(f"depth must be an HxW raster, got shape {tuple(self.depth.shape)}")
        if not bool(torch.all(torch.isfinite(self.depth))) or not bool(torch.all(self.depth > 0)):
            raise InputError("depth values must be finite and positive")
        for name in ("flow_fwd", "flow_bwd"):
            flow = getattr(self, name)
            if flow is None:
                continue
            flow = torch.as_tensor(flow, dtype=DTYPE)
            if tuple(flow.shape) != (2, *self.dims):
                raise InputError(f"{name} must have shape (2, {self.dims[0]}, {self.dims[1]}), got {tuple(flow.shape)}")
            if not bool(torch.all(torch.isfinite(flow))):
                raise InputError(f"{name} contains non-finite values")
            setattr(self, name, flow)

    @property
    def dims(self) -> Tuple[int, int]:
        return int(self.depth.shape[0]), int(self.depth.shape[1])


def stack_observations(obs: Sequence[FrameObservations]) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Stack a sequence into dense tensors.

    Returns:
        Tuple of (depths (n, H, W), flows_fwd (n-1, 2, H, W), flows_bwd (n-1, 2, H, W))
    """
    if len(obs) < 2:
        raise InputError("need at least 2 frames, got a single-frame sequence" if len(obs) == 1 else "empty sequence")
    dims = obs[0].dims
    for i, frame in enumerate(obs):
        if frame.dims != dims:
            raise InputError(f"frame {i} is {frame.dims[0]}x{frame.dims[1]}, expected {dims[0]}x{dims[1]}")
    for i, frame in enumerate(obs[:-1]):
        if frame.flow_fwd is None or frame.flow_bwd is None:
            raise InputError(f"frame {i} is missing its forward or backward flow")
    depths = torch.stack([frame.depth for frame in obs])
    flows_fwd = torch.stack([frame.flow_fwd for frame in obs[:-1]])
    flows_bwd = torch.stack([frame.flow_bwd for frame in obs[:-1]])
    return depths, flows_fwd, flows_bwd


@dataclass
class CandidateEstimate:
    """Poses and uncertainties of one focal hypothesis"""

    focal: float
    poses: PoseSE3
    sigmas: Tensor
    flow_loss: float
    poses_bwd: Optional[PoseSE3] = None
    flow_loss_bwd: Optional[float] = None
    consistency_loss: Optional[float] = None

    def __post_init__(self):
        if not math.isfinite(self.flow_loss):
            raise NumericalError(f"flow loss of candidate f={self.focal:.2f} is not finite")
        if self.sigmas.shape[0] != len(self.poses):
            raise InputError("pose count and uncertainty map count differ")


@dataclass
class CandidateBank:
    """All candidate estimates of a sequence plus the likelihood over them"""

    schedule: FocalSchedule
    candidates: List[CandidateEstimate]
    likelihood: LikelihoodVector
    best_index: int
    loss_history: List[float] = field(default_factory=list)

    @property
    def best(self) -> CandidateEstimate:
        return self.candidates[self.best_index]

    def flow_losses(self) -> Tensor:
        return torch.tensor([c.flow_loss for c in self.candidates], dtype=DTYPE)


@dataclass
class GradientReport:
    """Analytic vs central-difference gradient comparison"""

    max_relative_deviation: float
    analytic: Tensor
    numeric: Tensor


def gradient_check(
    parameters: Tensor, evaluator: Callable[[Tensor], Tensor], step: float = 1e-5
) -> GradientReport:
    """
    Compare the autograd gradient of a scalar evaluator with central differences.

    The deviation is max_i |analytic_i - numeric_i| divided by the largest
    numeric gradient magnitude.
    """
    point = parameters.detach().clone().to(DTYPE).requires_grad_(True)
    value = evaluator(point)
    (analytic,) = torch.autograd.grad(value, point)

    numeric = torch.zeros_like(point)
    flat = numeric.view(-1)
    with torch.no_grad():
        base = point.detach().clone()
        entries = base.view(-1)
        for i in range(entries.numel()):
            original = float(entries[i])
            entries[i] = original + step
            upper = float(evaluator(base))
            entries[i] = original - step
            lower = float(evaluator(base))
            entries[i] = original
            flat[i] = (upper - lower) / (2.0 * step)

    scale = max(float(numeric.abs().max()), 1e-300)
    deviation = float((analytic - numeric).abs().max()) / scale
    return GradientReport(max_relative_deviation=deviation, analytic=analytic.detach(), numeric=numeric)


def _grid_shape(height: int, width: int, resolution: int) -> Tuple[int, int]:
    return (
        max(2, math.ceil((height - 1) / resolution) + 1),
        max(2, math.ceil((width - 1) / resolution) + 1),
    )


def upsample_sigma(raw_grid: Tensor, height: int, width: int) -> Tensor:
    """Bilinearly upsample (..., gh, gw) raw uncertainty grids and map them to sigma"""
    lead = raw_grid.shape[:-2]
    flat = raw_grid.reshape(-1, 1, *raw_grid.shape[-2:])
    dense = F.interpolate(flat, size=(height, width), mode="bilinear", align_corners=True)
    return sigma_from_raw(dense.reshape(*lead, height, width))


class SequenceSolver:
    """Fits every focal candidate of a schedule to one sequence"""

    def __init__(self, config: FitConfig = FitConfig(), temperature: float = DEFAULT_TEMPERATURE):
        self.config = config
        self.temperature = temperature
        self.weights = LossWeights(
            lambda_flow=config.lambda_flow, lambda_consistency=config.lambda_consistency, lambda_intr=0.0
        )
        self.progress = get_config().PROGRESS

    def _objective(self, params, cam, depths, flows_fwd, flows_bwd):
        """Per-candidate forward/backward flow losses and consistency loss"""
        height, width = cam.height, cam.width
        pose_fwd = PoseSE3.from_vector(params["pose_fwd"])
        pose_bwd = PoseSE3.from_vector(params["pose_bwd"])
        sigma_fwd = upsample_sigma(params["sigma_fwd"], height, width)
        sigma_bwd = upsample_sigma(params["sigma_bwd"], height, width)

        induced_f, valid_f = induced_flow(pose_fwd, depths[:-1], cam)
        induced_b, valid_b = induced_flow(pose_bwd, depths[1:], cam)
        loss_f = sequence_flow_nll(flow_residual(induced_f, flows_fwd, valid_f), sigma_fwd, valid_f)
        loss_b = sequence_flow_nll(flow_residual(induced_b, flows_bwd, valid_b), sigma_bwd, valid_b)
        consistency = fwd_bwd_consistency_loss(pose_fwd, pose_bwd)
        return loss_f, loss_b, consistency, sigma_fwd

    def fit(self, obs: Sequence[FrameObservations], schedule: FocalSchedule) -> CandidateBank:
        """Optimize all candidates and select the one with the lowest flow loss"""
        config = self.config
        depths, flows_fwd, flows_bwd = stack_observations(obs)
        height, width = depths.shape[-2:]
        pairs = depths.shape[0] - 1
        m = schedule.m
        torch.manual_seed(config.seed)

        focal = schedule.candidates.to(DTYPE).reshape(m, 1)
        cam = Pinhole(focal=focal, width=int(width), height=int(height))
        grid_h, grid_w = _grid_shape(int(height), int(width), config.sigma_resolution)

        params = {
            "pose_fwd": torch.zeros(m, pairs, 6, dtype=DTYPE, requires_grad=True),
            "pose_bwd": torch.zeros(m, pairs, 6, dtype=DTYPE, requires_grad=True),
            "sigma_fwd": torch.zeros(m, pairs, grid_h, grid_w, dtype=DTYPE, requires_grad=True),
            "sigma_bwd": torch.zeros(m, pairs, grid_h, grid_w, dtype=DTYPE, requires_grad=True),
        }
        optimizer = torch.optim.Adam(
            [
                {"params": [params["pose_fwd"], params["pose_bwd"]], "lr": config.step_size},
                {"params": [params["sigma_fwd"], params["sigma_bwd"]], "lr": config.sigma_step_size},
            ]
        )
        base_lrs = [group["lr"] for group in optimizer.param_groups]

        history: List[float] = []
        smoothed_prev = None
        iterations = config.max_iterations
        with tqdm(total=iterations, disable=not self.progress, desc="fit") as bar:
            for it in range(iterations):
                alpha = it / max(iterations - 1, 1)
                for group, base in zip(optimizer.param_groups, base_lrs):
                    group["lr"] = base * (1.0 - (1.0 - config.lr_decay_final) * alpha)

                optimizer.zero_grad()
                loss_f, loss_b, consistency, _ = self._objective(params, cam, depths, flows_fwd, flows_bwd)
                per_candidate = self.weights.lambda_flow * (loss_f + loss_b) + self.weights.lambda_consistency * consistency
                objective = per_candidate.sum()
                value = float(objective)
                if not math.isfinite(value):
                    bad = [i for i, v in enumerate(per_candidate.detach().tolist()) if not math.isfinite(v)]
                    raise NumericalError(
                        f"non-finite fit loss at iteration {it} for candidates {bad} "
                        f"(focals {[round(schedule[i], 2) for i in bad]})"
                    )
                objective.backward()
                optimizer.step()
                history.append(value)
                bar.update(1)

                if it % 100 == 0:
                    logger.debug("fit iteration %d loss %.6f", it, value)
                if it + 1 >= config.min_iterations and len(history) >= 2 * _SMOOTHING_WINDOW:
                    smoothed = sum(history[-_SMOOTHING_WINDOW:]) / _SMOOTHING_WINDOW
                    if smoothed_prev is not None:
                        change = abs(smoothed_prev - smoothed) / max(abs(smoothed_prev), 1e-12)
                        if change < config.convergence_tol:
                            logger.info("fit converged after %d iterations", it + 1)
                            break
                    smoothed_prev = smoothed

        with torch.no_grad():
            loss_f, loss_b, consistency, sigma_fwd = self._objective(params, cam, depths, flows_fwd, flows_bwd)
        pose_fwd = PoseSE3.from_vector(params["pose_fwd"].detach())
        pose_bwd = PoseSE3.from_vector(params["pose_bwd"].detach())

        candidates = [
            CandidateEstimate(
                focal=schedule[k],
                poses=pose_fwd[k],
                sigmas=sigma_fwd[k],
                flow_loss=float(loss_f[k]),
                poses_bwd=pose_bwd[k],
                flow_loss_bwd=float(loss_b[k]),
                consistency_loss=float(consistency[k]),
            )
            for k in range(m)
        ]
        likelihood = losses_to_target_distribution(loss_f, self.temperature)
        best_index = int(torch.argmin(loss_f))
        logger.info(
            "fit selected candidate %d (f=%.2f) with flow loss %.6f", best_index, schedule[best_index], float(loss_f[best_index])
        )
        return CandidateBank(
            schedule=schedule,
            candidates=candidates,
            likelihood=likelihood,
            best_index=best_index,
            loss_history=history,
        )


def fit_sequence(
    obs: Sequence[FrameObservations],
    schedule: FocalSchedule,
    config: FitConfig = FitConfig(),
    temperature: float = DEFAULT_TEMPERATURE,
) -> CandidateBank:
    """Fit all focal candidates of `schedule` to the observations"""
    return SequenceSolver(config, temperature=temperature).fit(obs, schedule)
