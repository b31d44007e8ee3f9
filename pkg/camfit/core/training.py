"""
Self-supervised training of the toy sequence model on synthetic corpora
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from ..config import get_config
from ..models.schemas import TrainConfig
from .errors import InputError, NumericalError
from .geometry import PoseSE3
from .losses import (
    LossReport,
    LossWeights,
    fwd_bwd_consistency_loss,
    intrinsics_kl_loss,
    pose_token_penalty,
    total_loss,
)
from .predictor import SequenceModel, candidate_flow_losses
from .synth import SyntheticSequence

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


@dataclass
class TrainLogEntry:
    """Loss terms of one optimizer step"""

    step: int
    stage: int
    sequence_length: int
    loss: float
    flow: float
    consistency: float
    intrinsics: float
    learning_rate: float


@dataclass
class TrainingResult:
    model: SequenceModel
    log: List[TrainLogEntry] = field(default_factory=list)

    def losses(self) -> List[float]:
        return [entry.loss for entry in self.log]

    def to_rows(self) -> List[dict]:
        return [asdict(entry) for entry in self.log]


def sample_batch(
    corpus: Sequence[SyntheticSequence], batch_size: int, length: int, rng: np.random.Generator
) -> Tuple[Tensor, Tensor, Tensor]:
    """
    Random windows of `length` consecutive frames.

    Returns:
        Tuple of float32 (depths (B, L, H, W), flows_fwd (B, L-1, 2, H, W), flows_bwd (B, L-1, 2, H, W))
    """
    depths, fwd, bwd = [], [], []
    for _ in range(batch_size):
        seq = corpus[int(rng.integers(len(corpus)))]
        if seq.frames < length:
            raise InputError(f"corpus sequence has {seq.frames} frames, stage needs {length}")
        start = int(rng.integers(seq.frames - length + 1))
        depths.append(seq.depths[start : start + length])
        fwd.append(seq.flows_fwd[start : start + length - 1])
        bwd.append(seq.flows_bwd[start : start + length - 1])
    return tuple(torch.as_tensor(np.stack(arrays), dtype=torch.float32) for arrays in (depths, fwd, bwd))


def reverse_sequence(depths: Tensor, flows_bwd: Tensor) -> Tuple[Tensor, Tensor]:
    """Frames in reverse order; the backward flows become the forward flows"""
    return torch.flip(depths, dims=[1]), torch.flip(flows_bwd, dims=[1])


def sequence_loss(
    model: SequenceModel,
    depths: Tensor,
    flows_fwd: Tensor,
    flows_bwd: Tensor,
    weights: LossWeights,
    temperature: float,
    generator: Optional[torch.Generator] = None,
) -> Tuple[Tensor, LossReport]:
    """
    Training objective of one batch.

    The reversed sequence supplies P^{i+1->i} for the consistency term; the
    intrinsics target is the softmax of the detached forward flow losses.
    """
    out_fwd = model(depths, flows_fwd, generator=generator)
    rev_depths, rev_flows = reverse_sequence(depths, flows_bwd)
    out_bwd = model(rev_depths, rev_flows, generator=generator)

    flow_fwd = candidate_flow_losses(out_fwd, depths, flows_fwd)
    flow_bwd = candidate_flow_losses(out_bwd, rev_depths, rev_flows)

    poses_fwd = PoseSE3.from_vector(out_fwd.poses)
    # pair k of the reversed sequence is pair n-2-k of the forward one
    poses_bwd = PoseSE3.from_vector(torch.flip(out_bwd.poses, dims=[2]))
    consistency = fwd_bwd_consistency_loss(poses_fwd, poses_bwd)

    target = torch.softmax(-temperature * flow_fwd.detach(), dim=-1)
    intrinsics = intrinsics_kl_loss(out_fwd.likelihood, target)

    report = total_loss(flow_fwd + flow_bwd, consistency, intrinsics, weights)
    penalty = pose_token_penalty(out_fwd.tokens.pose_tokens, model.config.weight_decay_pose_tokens)
    penalty = penalty + pose_token_penalty(out_bwd.tokens.pose_tokens, model.config.weight_decay_pose_tokens)
    return report.total.mean() + penalty, report


def train(model: SequenceModel, corpus: Sequence[SyntheticSequence], config: TrainConfig = TrainConfig()) -> TrainingResult:
    """
    Run the training stages in order.

    Adam at `learning_rate`, dropped to `decayed_learning_rate` once the global
    step reaches `decay_boundary`.

    Raises:
        NumericalError: if a step produces a non-finite loss
    """
    if not corpus:
        raise InputError("training corpus is empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    weights = LossWeights(config.lambda_flow, config.lambda_consistency, config.lambda_intr)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    progress = get_config().PROGRESS

    result = TrainingResult(model=model)
    model.train()
    step = 0
    total_steps = sum(stage.steps for stage in config.stages)
    with tqdm(total=total_steps, disable=not progress, desc="train") as bar:
        for stage_index, stage in enumerate(config.stages):
            logger.info("stage %d: %d steps on %d-frame sequences", stage_index, stage.steps, stage.sequence_length)
            for _ in range(stage.steps):
                lr = config.learning_rate if step < config.decay_boundary else config.decayed_learning_rate
                for group in optimizer.param_groups:
                    group["lr"] = lr

                depths, flows_fwd, flows_bwd = sample_batch(corpus, config.batch_size, stage.sequence_length, rng)
                optimizer.zero_grad()
                loss, report = sequence_loss(
                    model, depths, flows_fwd, flows_bwd, weights, config.temperature, generator
                )
                value = float(loss)
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite training loss at step {step} (stage {stage_index})")
                loss.backward()
                optimizer.step()

                result.log.append(
                    TrainLogEntry(
                        step=step,
                        stage=stage_index,
                        sequence_length=stage.sequence_length,
                        loss=value,
                        flow=float(report.flow.detach().sum(dim=-1).mean()),
                        consistency=float(report.consistency.detach().sum(dim=-1).mean()),
                        intrinsics=float(report.intrinsics.detach().mean()),
                        learning_rate=lr,
                    )
                )
                if step % config.log_every == 0:
                    logger.info("step %d loss %.6f", step, value)
                step += 1
                bar.update(1)
    model.eval()
    return result
