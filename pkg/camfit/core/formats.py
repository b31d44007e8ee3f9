"""
On-disk formats: binary rasters, trajectory text files and run configuration files
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from pydantic import ValidationError
from scipy.spatial.transform import Rotation

from ..models.schemas import RunConfig
from .errors import ConfigError, FormatError, InputError
from .geometry import DTYPE, PoseSE3
from .storage import artifact_store

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

RASTER_MAGIC = b"ACRS"
RASTER_VERSION = 1
RASTER_DTYPE_F32 = 1
_RASTER_HEADER = struct.Struct("<4sHHHII")

DEPTH_NAME = "depth_{:06d}.acrs"
FLOW_NAME = "flow_{:06d}.acrs"
FLOW_BWD_NAME = "flow_{:06d}_bwd.acrs"
UNCERTAINTY_NAME = "uncertainty_{:06d}.acrs"
MASK_NAME = "mask_{:06d}.acrs"

QUATERNION_TOLERANCE = 1e-6


# Rasters


def encode_raster(array) -> bytes:
    """(H, W) or (C, H, W) array to a raster container"""
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise InputError(f"raster must be (H, W) or (C, H, W), got shape {array.shape}")
    channels, height, width = array.shape
    header = _RASTER_HEADER.pack(RASTER_MAGIC, RASTER_VERSION, RASTER_DTYPE_F32, channels, height, width)
    return header + np.ascontiguousarray(array, dtype="<f4").tobytes()


def decode_raster(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """
    Parse a raster container into a (C, H, W) float32 array.

    Raises:
        FormatError: on wrong magic, unknown version or dtype, or a payload of the wrong size
    """
    if len(data) < _RASTER_HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, dtype_tag, channels, height, width = _RASTER_HEADER.unpack_from(data)
    if magic != RASTER_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {RASTER_MAGIC!r}")
    if version != RASTER_VERSION:
        raise FormatError(f"{source}: raster version {version} is not supported (expected {RASTER_VERSION})")
    if dtype_tag != RASTER_DTYPE_F32:
        raise FormatError(f"{source}: unknown dtype tag {dtype_tag}")
    expected = channels * height * width * 4
    payload = data[_RASTER_HEADER.size :]
    if len(payload) < expected:
        raise FormatError(f"{source}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise FormatError(f"{source}: {len(payload) - expected} trailing bytes after the payload")
    return np.frombuffer(payload, dtype="<f4").reshape(channels, height, width).astype(np.float32)


def write_raster(path: PathLike, array) -> Path:
    return artifact_store.write_bytes(path, encode_raster(array))


def read_raster(path: PathLike) -> np.ndarray:
    return decode_raster(artifact_store.read_bytes(path), str(path))


def center_crop_square(array: np.ndarray) -> np.ndarray:
    """Crop the trailing (H, W) axes to a centered min(H, W) square"""
    height, width = array.shape[-2:]
    side = min(height, width)
    top, left = (height - side) // 2, (width - side) // 2
    return array[..., top : top + side, left : left + side]


def read_sequence_dir(directory: PathLike, crop_square: bool = False):
    """
    Load per-frame depth, forward flow and backward flow rasters.

    Raises:
        InputError: if the directory holds no depth rasters or a flow file is missing
    """
    from .solver import FrameObservations

    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"{directory}: input directory not found")
    frames = sorted(
        int(match.group(1))
        for match in (re.fullmatch(r"depth_(\d{6})\.acrs", p.name) for p in directory.iterdir())
        if match
    )
    if not frames:
        raise InputError(f"{directory}: no depth rasters (depth_%06d.acrs) found")
    if frames != list(range(len(frames))):
        raise InputError(f"{directory}: depth rasters must be numbered 0..{len(frames) - 1} without gaps")

    def load(name: str, channels: int) -> np.ndarray:
        raster = read_raster(directory / name)
        if raster.shape[0] != channels:
            raise FormatError(f"{directory / name}: expected {channels} channel(s), got {raster.shape[0]}")
        raster = raster[0] if channels == 1 else raster
        return center_crop_square(raster) if crop_square else raster

    obs = []
    for i in frames:
        last = i == frames[-1]
        obs.append(
            FrameObservations(
                depth=torch.as_tensor(load(DEPTH_NAME.format(i), 1), dtype=DTYPE),
                flow_fwd=None if last else torch.as_tensor(load(FLOW_NAME.format(i), 2), dtype=DTYPE),
                flow_bwd=None if last else torch.as_tensor(load(FLOW_BWD_NAME.format(i), 2), dtype=DTYPE),
            )
        )
    logger.info("loaded %d frames from %s", len(obs), directory)
    return obs


def write_sequence_dir(directory: PathLike, seq) -> List[str]:
    """Export a synthetic sequence as rasters plus its ground-truth trajectory"""
    directory = Path(directory)
    names = []
    for i in range(seq.frames):
        names.append(DEPTH_NAME.format(i))
        write_raster(directory / names[-1], seq.depths[i])
        names.append(MASK_NAME.format(i))
        write_raster(directory / names[-1], seq.masks[i].astype(np.float32))
        if i < seq.frames - 1:
            names.append(FLOW_NAME.format(i))
            write_raster(directory / names[-1], seq.flows_fwd[i])
            names.append(FLOW_BWD_NAME.format(i))
            write_raster(directory / names[-1], seq.flows_bwd[i])
    names.append("gt_trajectory.txt")
    write_trajectory(directory / names[-1], seq.poses_c2w, focal=seq.focal)
    return names


# Trajectories


@dataclass
class TrajectoryData:
    """Parsed trajectory file"""

    poses: PoseSE3
    indices: List[int]
    focal: Optional[float] = None
    schedule: Optional[List[float]] = None

    def matrices(self) -> np.ndarray:
        return self.poses.matrix().detach().cpu().numpy()


def format_trajectory(
    poses: Union[PoseSE3, np.ndarray], focal: Optional[float] = None, schedule: Optional[Sequence[float]] = None
) -> str:
    """'index tx ty tz qx qy qz qw' lines behind a '#' header"""
    mats = poses.matrix().detach().cpu().numpy() if isinstance(poses, PoseSE3) else np.asarray(poses, dtype=np.float64)
    quats = Rotation.from_matrix(mats[:, :3, :3]).as_quat()
    lines = ["# camfit trajectory: index tx ty tz qx qy qz qw (camera-to-world)"]
    if focal is not None:
        lines.append(f"# focal {focal:.17g}")
    if schedule is not None:
        lines.append("# schedule " + " ".join(f"{f:.17g}" for f in schedule))
    for i, (mat, quat) in enumerate(zip(mats, quats)):
        values = list(mat[:3, 3]) + list(quat)
        lines.append(f"{i} " + " ".join(f"{v:.17g}" for v in values))
    return "\n".join(lines) + "\n"


def write_trajectory(
    path: PathLike,
    poses: Union[PoseSE3, np.ndarray],
    focal: Optional[float] = None,
    schedule: Optional[Sequence[float]] = None,
) -> Path:
    return artifact_store.write_text(path, format_trajectory(poses, focal, schedule))


def parse_trajectory(text: str, source: str = "<text>") -> TrajectoryData:
    """
    Raises:
        FormatError: on malformed lines, non-monotone indices or non-unit quaternions
    """
    focal, schedule = None, None
    indices, translations, quats = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            fields = line[1:].split()
            try:
                if fields[:1] == ["focal"]:
                    focal = float(fields[1])
                elif fields[:1] == ["schedule"]:
                    schedule = [float(f) for f in fields[1:]]
            except (IndexError, ValueError):
                raise FormatError(f"{source}:{lineno}: malformed header line") from None
            continue
        fields = line.split()
        if len(fields) != 8:
            raise FormatError(f"{source}:{lineno}: expected 8 fields, got {len(fields)}")
        try:
            index = int(fields[0])
            values = [float(f) for f in fields[1:]]
        except ValueError:
            raise FormatError(f"{source}:{lineno}: non-numeric field") from None
        if indices and index <= indices[-1]:
            raise FormatError(f"{source}:{lineno}: frame indices must increase")
        quat = np.array(values[3:])
        if abs(np.linalg.norm(quat) - 1.0) > QUATERNION_TOLERANCE:
            raise FormatError(f"{source}:{lineno}: quaternion is not unit length (norm {np.linalg.norm(quat):.9g})")
        indices.append(index)
        translations.append(values[:3])
        quats.append(quat)
    if not indices:
        raise FormatError(f"{source}: no poses")

    rotvecs = Rotation.from_quat(np.stack(quats)).as_rotvec()
    poses = PoseSE3(torch.as_tensor(rotvecs, dtype=DTYPE), torch.as_tensor(np.array(translations), dtype=DTYPE))
    return TrajectoryData(poses=poses, indices=indices, focal=focal, schedule=schedule)


def read_trajectory(path: PathLike) -> TrajectoryData:
    return parse_trajectory(artifact_store.read_text(path), str(path))


# Run configuration

_NULLS = {"none", "null", ""}


def _parse_value(key: str, value: str):
    if value.lower() in _NULLS:
        return None
    if key == "train.stages":
        stages = []
        for item in value.split(","):
            try:
                length, steps = item.split(":")
                stages.append({"sequence_length": int(length), "steps": int(steps)})
            except ValueError:
                raise ConfigError(f"{key}: expected 'length:steps' pairs, got {item.strip()!r}") from None
        return stages
    return value


def parse_run_config(text: str, source: str = "<text>") -> RunConfig:
    """
    Parse flat 'section.key = value' lines into a validated RunConfig.

    Raises:
        ConfigError: on malformed lines, unknown keys or invalid values
    """
    sections: Dict[str, Dict[str, object]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{source}:{lineno}: key {key!r} must be 'section.name'")
        section, name = key.split(".")
        if section not in RunConfig.model_fields:
            raise ConfigError(f"{source}:{lineno}: unknown section {section!r} in key {key!r}")
        if name in sections.setdefault(section, {}):
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        sections[section][name] = _parse_value(key, value)

    try:
        return RunConfig.model_validate(sections)
    except ValidationError as exc:
        error = exc.errors()[0]
        loc = ".".join(str(part) for part in error["loc"])
        raise ConfigError(f"{source}: {loc}: {error['msg']}") from None


def read_run_config(path: PathLike) -> RunConfig:
    return parse_run_config(artifact_store.read_text(path), str(path))


def format_run_config(config: RunConfig) -> str:
    """Inverse of parse_run_config"""
    lines = []
    for section, values in config.model_dump().items():
        for name, value in values.items():
            if value is None:
                text = "none"
            elif section == "train" and name == "stages":
                text = ",".join(f"{s['sequence_length']}:{s['steps']}" for s in value)
            elif isinstance(value, bool):
                text = "true" if value else "false"
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{section}.{name} = {text}")
    return "\n".join(lines) + "\n"
