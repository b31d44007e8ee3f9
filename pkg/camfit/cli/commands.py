"""
camfit subcommands
"""

import argparse
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import torch

from .. import __version__
from ..core.errors import ConfigError, InputError
from ..core.evaluation import evaluate_trajectory
from ..core.formats import (
    UNCERTAINTY_NAME,
    read_raster,
    read_run_config,
    read_sequence_dir,
    read_trajectory,
    write_raster,
    write_sequence_dir,
    write_trajectory,
)
from ..core.geometry import DTYPE, trajectory_from_relative
from ..core.hypotheses import build_focal_schedule
from ..core.predictor import SequenceModel, predict_sequence
from ..core.refine import refine_trajectory
from ..core.solver import CandidateBank, fit_sequence, stack_observations
from ..core.storage import artifact_store
from ..core.synth import generate_scene, render_corpus
from ..core.training import train
from ..models.schemas import CandidateSummary, ResultManifest, RunConfig

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace, RunConfig], ResultManifest]


@dataclass
class Command:
    name: str
    help: str
    handler: Handler
    arguments: List[Tuple[Tuple[str, ...], dict]] = field(default_factory=list)


class CommandRouter:
    """Collects subcommands and their arguments"""

    def __init__(self):
        self.commands: Dict[str, Command] = {}

    def command(self, name: str, help: str, arguments: Optional[List[Tuple[Tuple[str, ...], dict]]] = None):
        def register(handler: Handler) -> Handler:
            self.commands[name] = Command(name=name, help=help, handler=handler, arguments=arguments or [])
            return handler

        return register

    def install(self, subparsers) -> None:
        for command in self.commands.values():
            parser = subparsers.add_parser(command.name, help=command.help)
            parser.add_argument("--seed", type=int, default=None, help="Seed for every random component")
            parser.add_argument("--config", type=Path, default=None, help="Run configuration file (key = value)")
            parser.add_argument("--out-dir", type=Path, default=Path("camfit-out"), help="Directory for all outputs")
            parser.add_argument("--plot", action="store_true", help="Write static PNG plots")
            for flags, options in command.arguments:
                parser.add_argument(*flags, **options)
            parser.set_defaults(command=command.name)


router = CommandRouter()


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Run configuration from --config with --seed applied to every section"""
    config = read_run_config(args.config) if args.config is not None else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError(f"--seed must be nonnegative, got {args.seed}")
        for section in ("fit", "refine", "synth", "train"):
            getattr(config, section).seed = args.seed
    return config


def run_command(args: argparse.Namespace) -> ResultManifest:
    config = load_run_config(args)
    manifest = router.commands[args.command].handler(args, config)
    manifest.artifacts.append("manifest.json")
    artifact_store.write_text(args.out_dir / "manifest.json", manifest.model_dump_json(indent=2) + "\n")
    return manifest


def _schedule(config: RunConfig, height: int):
    f_min, f_max = config.schedule.focal_range(height)
    return build_focal_schedule(config.schedule.m, f_min, f_max)


def _bank_summary(bank: CandidateBank) -> List[CandidateSummary]:
    likelihood = bank.likelihood.to_list()
    return [
        CandidateSummary(
            index=k,
            focal=c.focal,
            flow_loss=c.flow_loss,
            flow_loss_bwd=c.flow_loss_bwd,
            consistency_loss=c.consistency_loss,
            likelihood=likelihood[k],
        )
        for k, c in enumerate(bank.candidates)
    ]


def _write_estimate(args, bank: CandidateBank, manifest: ResultManifest, title: str) -> None:
    """Trajectory, uncertainty rasters and plots of the selected candidate"""
    best = bank.best
    trajectory = trajectory_from_relative(best.poses)
    write_trajectory(args.out_dir / "trajectory_init.txt", trajectory, focal=best.focal, schedule=bank.schedule.to_list())
    manifest.artifacts.append("trajectory_init.txt")
    for i, sigma in enumerate(best.sigmas):
        name = UNCERTAINTY_NAME.format(i)
        write_raster(args.out_dir / name, sigma.to(torch.float32))
        manifest.artifacts.append(name)
    if args.plot:
        from ..core.plotting import plot_trajectories, plot_uncertainty

        plot_trajectories(args.out_dir / "trajectory.png", {title: trajectory}, title=f"f = {best.focal:.1f} px")
        plot_uncertainty(args.out_dir / "uncertainty.png", best.sigmas[0].numpy(), title="pair 0")
        manifest.artifacts.extend(["trajectory.png", "uncertainty.png"])


_INPUT = (("--input",), {"type": Path, "required": True, "help": "Directory with depth/flow rasters"})


@router.command("fit", help="Estimate poses, uncertainty and focal length by direct optimization", arguments=[_INPUT])
def fit_command(args: argparse.Namespace, config: RunConfig) -> ResultManifest:
    obs = read_sequence_dir(args.input, crop_square=config.input.crop_square)
    height, width = obs[0].dims
    schedule = _schedule(config, height)
    bank = fit_sequence(obs, schedule, config.fit, temperature=config.schedule.temperature)

    manifest = ResultManifest(
        command="fit",
        version=__version__,
        seed=config.fit.seed,
        frames=len(obs),
        width=width,
        height=height,
        schedule=schedule.to_list(),
        selection="min_loss",
        selected_index=bank.best_index,
        selected_focal=bank.best.focal,
        candidates=_bank_summary(bank),
        loss_report={
            "iterations": len(bank.loss_history),
            "final_objective": bank.loss_history[-1] if bank.loss_history else None,
        },
    )
    _write_estimate(args, bank, manifest, "fit")
    return manifest


@router.command(
    "predict",
    help="Estimate poses, uncertainty and focal length with a trained sequence model",
    arguments=[_INPUT, (("--checkpoint",), {"type": Path, "required": True, "help": "Model checkpoint"})],
)
def predict_command(args: argparse.Namespace, config: RunConfig) -> ResultManifest:
    model, _ = artifact_store.load_checkpoint(args.checkpoint)
    obs = read_sequence_dir(args.input, crop_square=config.input.crop_square)
    height, width = obs[0].dims
    bank = predict_sequence(model, obs)

    manifest = ResultManifest(
        command="predict",
        version=__version__,
        seed=config.fit.seed,
        frames=len(obs),
        width=width,
        height=height,
        schedule=bank.schedule.to_list(),
        selection="likelihood",
        selected_index=bank.best_index,
        selected_focal=bank.best.focal,
        candidates=_bank_summary(bank),
    )
    _write_estimate(args, bank, manifest, "predict")
    return manifest


@router.command(
    "refine",
    help="Refine an existing trajectory and focal length by windowed bundle adjustment",
    arguments=[
        _INPUT,
        (("--trajectory",), {"type": Path, "required": True, "help": "Initial trajectory file"}),
        (("--uncertainty",), {"type": Path, "default": None, "help": "Directory with uncertainty rasters"}),
        (("--focal",), {"type": float, "default": None, "help": "Initial focal length (overrides the file header)"}),
    ],
)
def refine_command(args: argparse.Namespace, config: RunConfig) -> ResultManifest:
    obs = read_sequence_dir(args.input, crop_square=config.input.crop_square)
    depths, flows_fwd, _ = stack_observations(obs)
    initial = read_trajectory(args.trajectory)
    focal = args.focal if args.focal is not None else initial.focal
    if focal is None:
        raise InputError(f"{args.trajectory}: no focal in the header; pass --focal")

    uncertainty_dir = args.uncertainty if args.uncertainty is not None else args.trajectory.parent
    sigmas = []
    for i in range(len(obs) - 1):
        path = uncertainty_dir / UNCERTAINTY_NAME.format(i)
        if not path.exists():
            if args.uncertainty is not None:
                raise InputError(f"{path}: file not found")
            logger.warning("no uncertainty rasters next to %s; refining with zero uncertainty", args.trajectory)
            sigmas = [torch.zeros(depths.shape[-2:], dtype=DTYPE) for _ in range(len(obs) - 1)]
            break
        sigmas.append(torch.as_tensor(read_raster(path)[0], dtype=DTYPE))
    refined = refine_trajectory(initial.poses, focal, depths, flows_fwd, torch.stack(sigmas), config.refine)

    write_trajectory(args.out_dir / "trajectory_refined.txt", refined.poses, focal=refined.focal, schedule=initial.schedule)
    manifest = ResultManifest(
        command="refine",
        version=__version__,
        seed=config.refine.seed,
        frames=len(obs),
        width=int(depths.shape[-1]),
        height=int(depths.shape[-2]),
        schedule=initial.schedule or [],
        selected_focal=refined.focal,
        refinement=refined.report,
        artifacts=["trajectory_refined.txt"],
    )
    if args.plot:
        from ..core.plotting import plot_trajectories

        plot_trajectories(
            args.out_dir / "trajectory_refined.png", {"initial": initial.poses, "refined": refined.poses}
        )
        manifest.artifacts.append("trajectory_refined.png")
    return manifest


@router.command(
    "eval",
    help="Compare a trajectory with ground truth",
    arguments=[
        (("--trajectory",), {"type": Path, "required": True, "help": "Estimated trajectory file"}),
        (("--gt",), {"type": Path, "required": True, "help": "Ground-truth trajectory file"}),
        (("--alignment",), {"choices": ["none", "rigid", "similarity"], "default": None, "help": "Alignment mode"}),
    ],
)
def eval_command(args: argparse.Namespace, config: RunConfig) -> ResultManifest:
    est = read_trajectory(args.trajectory)
    gt = read_trajectory(args.gt)
    mode = args.alignment or config.eval.alignment
    report = evaluate_trajectory(
        est.poses, gt.poses, mode=mode, delta=config.eval.rpe_delta, est_focal=est.focal, gt_focal=gt.focal
    )
    artifact_store.write_text(args.out_dir / "metrics.txt", report.to_text())
    artifact_store.write_text(args.out_dir / "metrics.json", report.model_dump_json(indent=2) + "\n")
    manifest = ResultManifest(
        command="eval",
        version=__version__,
        seed=config.fit.seed,
        frames=len(est.indices),
        selected_focal=est.focal,
        metrics=report,
        artifacts=["metrics.txt", "metrics.json"],
    )
    if args.plot:
        from ..core.evaluation import align
        from ..core.plotting import plot_trajectories

        aligned = align(est.poses, gt.poses, mode).aligned
        plot_trajectories(args.out_dir / "eval.png", {"ground truth": gt.poses, "estimate": aligned})
        manifest.artifacts.append("eval.png")
    return manifest


@router.command("synth", help="Render a synthetic oracle sequence to disk")
def synth_command(args: argparse.Namespace, config: RunConfig) -> ResultManifest:
    seq = generate_scene(config.synth)
    names = write_sequence_dir(args.out_dir, seq)
    manifest = ResultManifest(
        command="synth",
        version=__version__,
        seed=config.synth.seed,
        frames=seq.frames,
        width=seq.width,
        height=seq.height,
        selected_focal=seq.focal,
        artifacts=names,
    )
    if args.plot:
        from ..core.plotting import plot_trajectories

        plot_trajectories(args.out_dir / "gt_trajectory.png", {"ground truth": seq.poses_c2w})
        manifest.artifacts.append("gt_trajectory.png")
    return manifest


@router.command("train", help="Train the toy sequence model on a synthetic corpus")
def train_command(args: argparse.Namespace, config: RunConfig) -> ResultManifest:
    settings = config.train
    if config.schedule.m != config.model.m:
        raise ConfigError(f"schedule.m ({config.schedule.m}) must equal model.m ({config.model.m})")
    longest = max(stage.sequence_length for stage in settings.stages)
    if settings.corpus_frames < longest:
        raise ConfigError(f"train.corpus_frames ({settings.corpus_frames}) is shorter than the longest stage ({longest})")

    template = config.synth.model_copy(
        update={"frames": settings.corpus_frames, "width": settings.image_size, "height": settings.image_size}
    )
    corpus = render_corpus(settings.corpus_size, template, seed=settings.seed)

    torch.manual_seed(settings.seed)
    schedule = _schedule(config, settings.image_size)
    model = SequenceModel.from_schedule(config.model, schedule, settings.image_size)
    result = train(model, corpus, settings)

    artifact_store.save_checkpoint(args.out_dir / "model.ckpt", result.model, settings.image_size)
    artifact_store.write_text(args.out_dir / "train_log.json", json.dumps(result.to_rows(), indent=1) + "\n")
    manifest = ResultManifest(
        command="train",
        version=__version__,
        seed=settings.seed,
        width=settings.image_size,
        height=settings.image_size,
        schedule=schedule.to_list(),
        loss_report={"first": result.log[0].loss, "last": result.log[-1].loss, "steps": len(result.log)},
        artifacts=["model.ckpt", "train_log.json"],
    )
    if args.plot:
        from ..core.plotting import plot_losses

        plot_losses(args.out_dir / "train_loss.png", result.losses())
        manifest.artifacts.append("train_loss.png")
    return manifest
