"""
Focal-length candidate schedule and candidate selection
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import torch

from .errors import GeometryError

Tensor = torch.Tensor

DEFAULT_TEMPERATURE = 100.0


@dataclass(frozen=True)
class FocalSchedule:
    """m focal candidates, descending from f_max to f_min"""

    m: int
    f_min: float
    f_max: float
    candidates: Tensor

    @classmethod
    def from_image_height(
        cls, height: int, m: int = 32, f_min_ratio: float = 0.1, f_max_ratio: float = 3.5
    ) -> "FocalSchedule":
        """Schedule spanning [f_min_ratio * H, f_max_ratio * H]"""
        return build_focal_schedule(m, f_min_ratio * height, f_max_ratio * height)

    def __len__(self) -> int:
        return self.m

    def __getitem__(self, index: int) -> float:
        return float(self.candidates[index])

    def nearest_bin(self, focal: float) -> int:
        """Index of the candidate closest to `focal` in log space"""
        distances = torch.abs(torch.log(self.candidates) - math.log(focal))
        return int(torch.argmin(distances))

    def to_list(self):
        return [float(f) for f in self.candidates]


@dataclass(frozen=True)
class LikelihoodVector:
    """Probabilities over the m focal candidates"""

    probabilities: Tensor

    def __post_init__(self):
        probs = self.probabilities.detach()
        if probs.dim() != 1:
            raise GeometryError("likelihood vector must be one-dimensional")
        if bool(torch.any(probs < 0)):
            raise GeometryError("likelihoods must be nonnegative")
        total = float(probs.sum())
        if abs(total - 1.0) > 1e-6:
            raise GeometryError(f"likelihoods must sum to 1, got {total}")

    def __len__(self) -> int:
        return int(self.probabilities.shape[0])

    def to_list(self):
        return [float(p) for p in self.probabilities]


def build_focal_schedule(m: int, f_min: float, f_max: float) -> FocalSchedule:
    """
    Linear/exponential blend of focal candidates.

    delta_i = i / (m - 1); the exponential and linear interpolants between
    f_max (delta = 0) and f_min (delta = 1) are mixed 3:1.
    """
    if m < 2:
        raise GeometryError(f"focal schedule needs at least 2 candidates, got m={m}")
    if not 0 < f_min < f_max:
        raise GeometryError(f"invalid focal range: need 0 < f_min < f_max, got [{f_min}, {f_max}]")

    delta = torch.arange(m, dtype=torch.float64) / (m - 1)
    f_exp = torch.exp(delta * math.log(f_min) + (1.0 - delta) * math.log(f_max))
    f_lin = delta * f_min + (1.0 - delta) * f_max
    candidates = 0.75 * f_exp + 0.25 * f_lin
    # pin the endpoints so they are exact rather than exp(log(.)) round trips
    candidates[0] = f_max
    candidates[-1] = f_min
    return FocalSchedule(m=m, f_min=float(f_min), f_max=float(f_max), candidates=candidates)


def select_best_candidate(likelihood: Union[LikelihoodVector, Tensor, Sequence[float]]) -> int:
    """Argmax index; ties go to the lower index (larger focal)"""
    if isinstance(likelihood, LikelihoodVector):
        probs = likelihood.probabilities
    else:
        probs = torch.as_tensor(likelihood, dtype=torch.float64)
    probs = probs.detach()
    best = torch.nonzero(probs == probs.max(), as_tuple=False)
    return int(best[0, 0])


def losses_to_target_distribution(
    losses: Union[Tensor, Sequence[float]], temperature: float = DEFAULT_TEMPERATURE
) -> LikelihoodVector:
    """softmax(-temperature * losses)"""
    if not temperature > 0:
        raise GeometryError(f"temperature must be positive, got {temperature}")
    losses = torch.as_tensor(losses, dtype=torch.float64) if not isinstance(losses, Tensor) else losses
    if not bool(torch.all(torch.isfinite(losses.detach()))):
        raise GeometryError("candidate losses must be finite")
    return LikelihoodVector(torch.softmax(-temperature * losses, dim=-1))
