"""
Artifact storage: atomic file writes and model checkpoints
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Union

import cbor2
import numpy as np
import torch

from ..models.schemas import CheckpointManifest, TensorEntry
from .digest import payload_digest
from .errors import FormatError, InputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CHECKPOINT_FORMAT = "camfit-checkpoint"
CHECKPOINT_VERSION = 1


class ArtifactStore:
    """Writes files through a temporary sibling and an atomic rename"""

    def write_bytes(self, path: PathLike, data: bytes) -> Path:
        """Atomically replace `path` with `data`"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(data)
                handle.flush()
                os.fsync(handle.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        logger.debug("wrote %s (%d bytes)", path, len(data))
        return path

    def write_text(self, path: PathLike, text: str) -> Path:
        return self.write_bytes(path, text.encode("utf-8"))

    def read_bytes(self, path: PathLike) -> bytes:
        """Read a file, naming the path when it is missing"""
        path = Path(path)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise InputError(f"{path}: file not found") from None
        except IsADirectoryError:
            raise InputError(f"{path}: is a directory") from None

    def read_text(self, path: PathLike) -> str:
        try:
            return self.read_bytes(path).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: not valid UTF-8 text ({exc})") from None

    def save_checkpoint(self, path: PathLike, model, image_size: int) -> Path:
        """
        Serialize a sequence model.

        The container is a CBOR map {format, version, manifest, payload, sha256};
        the manifest lists every parameter tensor with its byte range in the payload.
        """
        entries, chunks, offset = [], [], 0
        for name, tensor in model.state_dict().items():
            data = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes()
            entries.append(
                TensorEntry(name=name, shape=list(tensor.shape), dtype="float32", offset=offset, nbytes=len(data))
            )
            chunks.append(data)
            offset += len(data)
        payload = b"".join(chunks)

        focals = (model.focal_ratios.detach().cpu().to(torch.float64) * image_size).tolist()
        manifest = CheckpointManifest(model=model.config, schedule=focals, image_size=image_size, tensors=entries)
        container = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "manifest": manifest.model_dump(),
            "payload": payload,
            "sha256": payload_digest.digest(payload),
        }
        return self.write_bytes(path, cbor2.dumps(container))

    def load_checkpoint(self, path: PathLike):
        """
        Rebuild a sequence model from a checkpoint.

        Raises:
            FormatError: on a foreign container, version mismatch or digest mismatch
        """
        from .predictor import SequenceModel

        raw = self.read_bytes(path)
        try:
            container = cbor2.loads(raw)
        except Exception as exc:
            raise FormatError(f"{path}: not a CBOR checkpoint ({exc})") from None
        if not isinstance(container, dict) or container.get("format") != CHECKPOINT_FORMAT:
            raise FormatError(f"{path}: expected a {CHECKPOINT_FORMAT!r} container")
        if container.get("version") != CHECKPOINT_VERSION:
            raise FormatError(
                f"{path}: checkpoint version {container.get('version')} is not supported (expected {CHECKPOINT_VERSION})"
            )
        payload = container.get("payload", b"")
        if not payload_digest.verify(payload, container.get("sha256", b"")):
            raise FormatError(f"{path}: payload digest mismatch")

        try:
            manifest = CheckpointManifest.model_validate(container["manifest"])
        except Exception as exc:
            raise FormatError(f"{path}: invalid checkpoint manifest ({exc})") from None
        ratios = [f / manifest.image_size for f in manifest.schedule]
        model = SequenceModel(manifest.model, ratios)

        state = {}
        for entry in manifest.tensors:
            if entry.offset + entry.nbytes > len(payload):
                raise FormatError(f"{path}: tensor {entry.name} runs past the end of the payload")
            values = np.frombuffer(payload, dtype="<f4", count=entry.nbytes // 4, offset=entry.offset)
            state[entry.name] = torch.from_numpy(values.copy()).reshape(entry.shape)
        try:
            model.load_state_dict(state)
        except RuntimeError as exc:
            raise FormatError(f"{path}: checkpoint tensors do not match the model ({exc})") from None
        model.eval()
        logger.info("loaded checkpoint %s (%d tensors)", path, len(state))
        return model, manifest


# Global storage instance
artifact_store = ArtifactStore()
