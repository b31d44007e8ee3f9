"""
Loss terms for pose, uncertainty and intrinsics estimation

Raster losses reduce over the trailing (H, W) axes and keep any leading batch
axes (candidates, frame pairs, sequences), so the solver and the predictor can
evaluate a whole candidate bank in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import torch

from .errors import GeometryError, NumericalError
from .geometry import PoseSE3
from .hypotheses import LikelihoodVector

Tensor = torch.Tensor

SIGMA_FLOOR = 1e-3
SIGMA_CEIL = 10.0

_SQRT2 = math.sqrt(2.0)
_LOG_SQRT2 = 0.5 * math.log(2.0)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective"""

    lambda_flow: float = 1.0
    lambda_consistency: float = 1.0
    lambda_intr: float = 1.0

    def __post_init__(self):
        for name in ("lambda_flow", "lambda_consistency", "lambda_intr"):
            if getattr(self, name) < 0:
                raise GeometryError(f"{name} must be nonnegative")


@dataclass
class LossReport:
    """Per-candidate flow and consistency losses, intrinsics KL and their total"""

    flow: Tensor
    consistency: Tensor
    intrinsics: Tensor
    total: Tensor

    def to_dict(self) -> Dict[str, object]:
        return {
            "flow": [float(v) for v in self.flow.detach().reshape(-1)],
            "consistency": [float(v) for v in self.consistency.detach().reshape(-1)],
            "intrinsics": float(self.intrinsics.detach()),
            "total": float(self.total.detach()),
        }


def sigma_from_raw(raw: Tensor) -> Tensor:
    """Map unconstrained values to uncertainties in [SIGMA_FLOOR, SIGMA_CEIL]"""
    return torch.clamp(torch.exp(raw), min=SIGMA_FLOOR, max=SIGMA_CEIL)


def flow_residual(induced: Tensor, reference: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """
    Per-pixel L1 distance between two (..., 2, H, W) flow rasters.

    Masked-out pixels are set to 0.
    """
    if induced.shape[-3:] != reference.shape[-3:] or induced.shape[-3] != 2:
        raise GeometryError(
            f"flow rasters must be (..., 2, H, W) with equal sizes, got "
            f"{tuple(induced.shape)} and {tuple(reference.shape)}"
        )
    residual = (induced - reference).abs().sum(dim=-3)
    if mask is not None:
        residual = torch.where(mask, residual, torch.zeros_like(residual))
    return residual


def uncertainty_flow_nll(residual: Tensor, sigma: Tensor, mask: Optional[Tensor] = None) -> Tensor:
    """
    Laplacian negative log-likelihood of flow residuals.

    mean over valid pixels of ln(sqrt(2) * sigma) + sqrt(2) * residual / sigma.
    The mean runs over the trailing (H, W) axes; leading axes are kept.
    """
    if residual.shape[-2:] != sigma.shape[-2:]:
        raise GeometryError(
            f"residual {tuple(residual.shape[-2:])} and sigma {tuple(sigma.shape[-2:])} rasters differ"
        )
    if bool(torch.any(sigma.detach() <= 0)):
        raise GeometryError("uncertainty must be positive")

    per_pixel = torch.log(sigma) + _LOG_SQRT2 + _SQRT2 * residual / sigma
    if mask is None:
        return per_pixel.mean(dim=(-2, -1))
    weight = mask.to(per_pixel.dtype)
    count = torch.clamp(weight.sum(dim=(-2, -1)), min=1.0)
    per_pixel = torch.where(mask, per_pixel, torch.zeros_like(per_pixel))
    return per_pixel.sum(dim=(-2, -1)) / count


def sequence_flow_nll(residuals: Tensor, sigmas: Tensor, masks: Optional[Tensor] = None) -> Tensor:
    """Sum of per-pair losses over the pair axis (..., n-1, H, W)"""
    return uncertainty_flow_nll(residuals, sigmas, masks).sum(dim=-1)


def fwd_bwd_consistency_loss(fwd: PoseSE3, bwd: PoseSE3) -> Tensor:
    """
    Sum over frame pairs of || M(fwd_i) . M(bwd_i) - I_4 ||_{1,1}.

    bwd_i is the transform P^{i+1->i} estimated on the reversed sequence and is
    expected to invert fwd_i; it is used as given, not inverted here, so the
    product vanishes when both directions agree.
    """
    if fwd.batch_shape != bwd.batch_shape:
        raise GeometryError(
            f"forward/backward pose sequences differ in length: {fwd.batch_shape} vs {bwd.batch_shape}"
        )
    product = fwd.matrix() @ bwd.matrix()
    eye = torch.eye(4, dtype=product.dtype, device=product.device)
    return (product - eye).abs().sum(dim=(-2, -1)).sum(dim=-1)


def _probabilities(dist: Union[LikelihoodVector, Tensor]) -> Tensor:
    return dist.probabilities if isinstance(dist, LikelihoodVector) else dist


def intrinsics_kl_loss(
    predicted: Union[LikelihoodVector, Tensor], target: Union[LikelihoodVector, Tensor]
) -> Tensor:
    """
    D_KL(target || predicted) over the trailing candidate axis.

    The target comes from detached flow losses: no gradient flows into it.
    """
    pred = _probabilities(predicted)
    tgt = _probabilities(target).detach()
    if pred.shape != tgt.shape:
        raise GeometryError(f"distribution sizes differ: {tuple(pred.shape)} vs {tuple(tgt.shape)}")
    if bool(torch.any((pred.detach() <= 0) & (tgt > 0))):
        raise GeometryError("predicted distribution has zero mass where the target is positive")

    positive = tgt > 0
    safe_pred = torch.where(positive, pred, torch.ones_like(pred))
    safe_tgt = torch.where(positive, tgt, torch.ones_like(tgt))
    terms = torch.where(positive, tgt * (torch.log(safe_tgt) - torch.log(safe_pred)), torch.zeros_like(pred))
    return terms.sum(dim=-1)


def pose_token_penalty(tokens: Tensor, weight: float) -> Tensor:
    """L2 decay applied to pose tokens"""
    return weight * (tokens * tokens).mean()


def total_loss(
    flow: Tensor, consistency: Tensor, intrinsics: Tensor, weights: LossWeights = LossWeights()
) -> LossReport:
    """sum_k (l_F * flow_k + l_c * consistency_k) + l_I * KL"""
    parts = (flow, consistency, intrinsics)
    if not all(bool(torch.all(torch.isfinite(p.detach()))) for p in parts):
        raise NumericalError("loss parts must be finite")
    total = (
        weights.lambda_flow * flow.sum(dim=-1)
        + weights.lambda_consistency * consistency.sum(dim=-1)
        + weights.lambda_intr * intrinsics
    )
    return LossReport(flow=flow, consistency=consistency, intrinsics=intrinsics, total=total)
