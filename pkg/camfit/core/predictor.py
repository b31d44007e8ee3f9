"""
Toy sequence model: frame-pair encoder, self-attention token mixing and one
pose/uncertainty head per focal candidate plus a sequence head over candidates
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..models.schemas import ModelConfig
from .errors import GeometryError, InputError
from .geometry import Pinhole, PoseSE3, induced_flow
from .hypotheses import FocalSchedule, LikelihoodVector, select_best_candidate
from .losses import flow_residual, sequence_flow_nll, sigma_from_raw

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

# pixel-coordinate features appended to every pooled patch
_COORD_CHANNELS = 2
_INPUT_CHANNELS = 4


@dataclass
class TokenState:
    """n-1 pose tokens and one sequence token per batch element"""

    pose_tokens: Tensor
    sequence_token: Tensor

    def __post_init__(self):
        if self.pose_tokens.shape[0] != self.sequence_token.shape[0]:
            raise GeometryError("pose and sequence tokens disagree in batch size")


@dataclass
class PredictorOutput:
    """Raw predictions for a batch of sequences"""

    poses: Tensor
    sigmas: Tensor
    likelihood: Tensor
    tokens: TokenState
    focals: Tensor


def apply_pose_token_dropout(
    tokens: TokenState, p_drop: float, seed: Optional[int] = None, generator: Optional[torch.Generator] = None
) -> TokenState:
    """
    Zero each pose-token element independently with probability p_drop.

    Kept elements are not rescaled; the sequence token is returned unchanged.
    """
    if not 0.0 <= p_drop <= 1.0:
        raise InputError(f"p_drop must lie in [0, 1], got {p_drop}")
    if p_drop == 0.0:
        return tokens
    if generator is None and seed is not None:
        generator = torch.Generator(device=tokens.pose_tokens.device).manual_seed(seed)
    draw = torch.rand(
        tokens.pose_tokens.shape, generator=generator, device=tokens.pose_tokens.device, dtype=tokens.pose_tokens.dtype
    )
    keep = draw >= p_drop
    return TokenState(
        pose_tokens=torch.where(keep, tokens.pose_tokens, torch.zeros_like(tokens.pose_tokens)),
        sequence_token=tokens.sequence_token,
    )


class MultiHeadAttention(nn.Module):
    """Multi-head self-attention"""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise InputError("dim must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        B, N, C = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * (self.head_dim ** -0.5)).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, C)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm attention block with a feed-forward layer"""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PairEncoder(nn.Module):
    """
    Pools flow and log-depth of each frame pair into patches and embeds them.

    Returns per-patch features (for the uncertainty heads) and their mean as
    the pair token.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.stride = config.patch_stride
        self.embed = nn.Sequential(
            nn.Linear(_INPUT_CHANNELS + _COORD_CHANNELS, config.feature_dim),
            nn.GELU(),
            nn.Linear(config.feature_dim, config.feature_dim),
        )

    def forward(self, depths: Tensor, flows: Tensor) -> Tuple[Tensor, Tensor, Tuple[int, int]]:
        B, n, H, W = depths.shape
        log_depth = torch.log(depths)
        log_depth = log_depth - log_depth.mean(dim=(1, 2, 3), keepdim=True)
        pair = torch.cat([flows / H, log_depth[:, :-1, None], log_depth[:, 1:, None]], dim=2)
        pooled = F.avg_pool2d(pair.reshape(B * (n - 1), _INPUT_CHANNELS, H, W), self.stride, ceil_mode=True)
        h, w = pooled.shape[-2:]

        ys = torch.linspace(-1.0, 1.0, h, dtype=pooled.dtype, device=pooled.device)
        xs = torch.linspace(-1.0, 1.0, w, dtype=pooled.dtype, device=pooled.device)
        grid_y, grid_x = torch.meshgrid(ys, xs, indexing="ij")
        coords = torch.stack([grid_x, grid_y]).expand(B * (n - 1), -1, -1, -1)
        patches = torch.cat([pooled, coords], dim=1).flatten(2).transpose(1, 2)

        features = self.embed(patches).reshape(B, n - 1, h * w, -1)
        return features, features.mean(dim=2), (h, w)


def time_encoding(count: int, dim: int, dtype=torch.float32, device=None) -> Tensor:
    """Sinusoidal encoding of pair positions"""
    position = torch.arange(count, dtype=dtype, device=device)[:, None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=dtype, device=device) * (-math.log(10000.0) / dim))
    enc = torch.zeros(count, dim, dtype=dtype, device=device)
    enc[:, 0::2] = torch.sin(position * freq)
    enc[:, 1::2] = torch.cos(position * freq)[:, : dim // 2]
    return enc


class CandidateHeads(nn.Module):
    """
    m pose heads and m uncertainty heads stored as stacked weights.

    Head f only reads its own slice of every weight tensor, so candidates do not
    interact. Final layers start at zero: identity poses and unit uncertainty.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        m, d, h = config.m, config.feature_dim, config.hidden_dim
        self.pose_scale = config.pose_scale
        self.pose_w1 = nn.Parameter(torch.randn(m, d, h) / math.sqrt(d))
        self.pose_b1 = nn.Parameter(torch.zeros(m, h))
        self.pose_w2 = nn.Parameter(torch.zeros(m, h, 6))
        self.pose_b2 = nn.Parameter(torch.zeros(m, 6))
        self.sigma_w1 = nn.Parameter(torch.randn(m, d, h) / math.sqrt(d))
        self.sigma_b1 = nn.Parameter(torch.zeros(m, h))
        self.sigma_w2 = nn.Parameter(torch.zeros(m, h))
        self.sigma_b2 = nn.Parameter(torch.zeros(m))

    def poses(self, pose_tokens: Tensor) -> Tensor:
        """(B, n-1, D) tokens to (B, m, n-1, 6) pose vectors"""
        hidden = F.gelu(torch.einsum("bnd,mdh->bmnh", pose_tokens, self.pose_w1) + self.pose_b1[None, :, None])
        raw = torch.einsum("bmnh,mho->bmno", hidden, self.pose_w2) + self.pose_b2[None, :, None]
        return self.pose_scale * raw

    def log_sigmas(self, patch_features: Tensor, pose_tokens: Tensor) -> Tensor:
        """(B, n-1, P, D) patches plus tokens to (B, m, n-1, P) log uncertainties"""
        inputs = patch_features + pose_tokens[:, :, None]
        hidden = F.gelu(torch.einsum("bnpd,mdh->bmnph", inputs, self.sigma_w1) + self.sigma_b1[None, :, None, None])
        return torch.einsum("bmnph,mh->bmnp", hidden, self.sigma_w2) + self.sigma_b2[None, :, None, None]

    def permute(self, order: Tensor) -> None:
        with torch.no_grad():
            for param in self.parameters():
                param.copy_(param[order])


class SequenceModel(nn.Module):
    """Predicts per-candidate poses and uncertainties plus a likelihood over candidates"""

    def __init__(self, config: ModelConfig, focal_ratios: Sequence[float]):
        super().__init__()
        if len(focal_ratios) != config.m:
            raise InputError(f"model has {config.m} heads but {len(focal_ratios)} focal candidates were given")
        self.config = config
        self.register_buffer("focal_ratios", torch.as_tensor(list(focal_ratios), dtype=torch.float32))
        self.encoder = PairEncoder(config)
        self.sequence_token = nn.Parameter(torch.zeros(1, 1, config.feature_dim))
        nn.init.normal_(self.sequence_token, mean=0, std=0.02)
        self.blocks = nn.ModuleList(
            [TransformerBlock(config.feature_dim, config.attention_heads) for _ in range(config.attention_layers)]
        )
        self.norm = nn.LayerNorm(config.feature_dim)
        self.heads = CandidateHeads(config)
        self.sequence_head = nn.Sequential(
            nn.Linear(config.feature_dim, config.hidden_dim), nn.GELU(), nn.Linear(config.hidden_dim, config.m)
        )

    @classmethod
    def from_schedule(cls, config: ModelConfig, schedule: FocalSchedule, image_height: int) -> "SequenceModel":
        return cls(config, [f / image_height for f in schedule.to_list()])

    def focals(self, height: int) -> Tensor:
        """Candidate focal lengths in pixels for images of the given height"""
        return self.focal_ratios * height

    def encode(self, depths: Tensor, flows: Tensor) -> Tuple[TokenState, Tensor, Tuple[int, int]]:
        B, n = depths.shape[:2]
        patches, pair_tokens, patch_grid = self.encoder(depths, flows)
        pair_tokens = pair_tokens + time_encoding(n - 1, pair_tokens.shape[-1], pair_tokens.dtype, pair_tokens.device)
        x = torch.cat([self.sequence_token.expand(B, -1, -1).to(pair_tokens.dtype), pair_tokens], dim=1)
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return TokenState(pose_tokens=x[:, 1:], sequence_token=x[:, 0]), patches, patch_grid

    def forward(self, depths: Tensor, flows: Tensor, generator: Optional[torch.Generator] = None) -> PredictorOutput:
        """
        Args:
            depths: (B, n, H, W) depth of every frame
            flows: (B, n-1, 2, H, W) flow between neighbouring frames
        """
        if depths.dim() != 4 or flows.dim() != 5:
            raise GeometryError(
                f"expected depths (B, n, H, W) and flows (B, n-1, 2, H, W), got {tuple(depths.shape)} and {tuple(flows.shape)}"
            )
        B, n, H, W = depths.shape
        if n < 2:
            raise InputError("need at least 2 frames")
        if tuple(flows.shape) != (B, n - 1, 2, H, W):
            raise GeometryError(f"flow shape {tuple(flows.shape)} does not match depth shape {tuple(depths.shape)}")

        tokens, patches, (h, w) = self.encode(depths, flows)
        pose_tokens = tokens.pose_tokens
        if self.training and self.config.p_drop > 0:
            pose_tokens = apply_pose_token_dropout(tokens, self.config.p_drop, generator=generator).pose_tokens

        poses = self.heads.poses(pose_tokens)
        log_sigma = self.heads.log_sigmas(patches, tokens.pose_tokens).reshape(B * self.config.m * (n - 1), 1, h, w)
        log_sigma = F.interpolate(log_sigma, size=(H, W), mode="bilinear", align_corners=True)
        sigmas = sigma_from_raw(log_sigma.reshape(B, self.config.m, n - 1, H, W))

        likelihood = torch.softmax(self.sequence_head(tokens.sequence_token.detach()), dim=-1)
        return PredictorOutput(
            poses=poses, sigmas=sigmas, likelihood=likelihood, tokens=tokens, focals=self.focals(H).to(depths.dtype)
        )

    def permute_candidates(self, order: Sequence[int]) -> None:
        """Reorder heads, sequence-head logits and focal candidates together"""
        order = torch.as_tensor(list(order), dtype=torch.long)
        self.heads.permute(order)
        with torch.no_grad():
            last = self.sequence_head[-1]
            last.weight.copy_(last.weight[order])
            last.bias.copy_(last.bias[order])
            self.focal_ratios.copy_(self.focal_ratios[order])


def candidate_flow_losses(output: PredictorOutput, depths: Tensor, flows: Tensor) -> Tensor:
    """(B, m) sequence flow losses of every candidate"""
    H, W = depths.shape[-2:]
    cam = Pinhole(focal=output.focals.reshape(-1, 1), width=int(W), height=int(H))
    poses = PoseSE3.from_vector(output.poses)
    induced, valid = induced_flow(poses, depths[:, None, :-1], cam)
    residual = flow_residual(induced, flows[:, None], valid)
    return sequence_flow_nll(residual, output.sigmas, valid)


def predict_sequence(model: SequenceModel, obs, schedule: Optional[FocalSchedule] = None):
    """
    Run the model on one sequence and wrap the result as a candidate bank.

    The best candidate is the most likely one under the sequence head.
    """
    from .solver import CandidateBank, CandidateEstimate, stack_observations

    depths, flows_fwd, _ = stack_observations(obs)
    height = int(depths.shape[-2])
    dtype = model.focal_ratios.dtype
    if schedule is None:
        focals = model.focals(height).to(torch.float64)
        schedule = FocalSchedule(
            m=model.config.m, f_min=float(focals.min()), f_max=float(focals.max()), candidates=focals
        )
    elif schedule.m != model.config.m:
        raise InputError(f"schedule has {schedule.m} candidates but the model has {model.config.m} heads")

    model.eval()
    with torch.no_grad():
        batch_depths, batch_flows = depths[None].to(dtype), flows_fwd[None].to(dtype)
        output = model(batch_depths, batch_flows)
        losses = candidate_flow_losses(output, batch_depths, batch_flows)[0].to(torch.float64)

    likelihood = LikelihoodVector(output.likelihood[0].to(torch.float64) / output.likelihood[0].to(torch.float64).sum())
    candidates = [
        CandidateEstimate(
            focal=float(schedule[k]),
            poses=PoseSE3.from_vector(output.poses[0, k].to(torch.float64)),
            sigmas=output.sigmas[0, k].to(torch.float64),
            flow_loss=float(losses[k]),
        )
        for k in range(model.config.m)
    ]
    best = select_best_candidate(likelihood)
    logger.info("predictor selected candidate %d (f=%.2f)", best, schedule[best])
    return CandidateBank(schedule=schedule, candidates=candidates, likelihood=likelihood, best_index=best)
