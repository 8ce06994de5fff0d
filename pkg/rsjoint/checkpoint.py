"""
Checkpoint container
====================

One file, little-endian throughout::

    b"GERSPCKP"                 8-byte magic
    <uint32 manifest length>
    <manifest JSON, UTF-8>
    <tensor payloads, float32, concatenated>
    <uint32 CRC-32 of every preceding byte>

The manifest lists each tensor's ``name``, ``shape``, ``dtype`` (always
``"f32"``), ``offset`` (relative to the payload start) and ``length`` in
bytes, next to the training config echo and run metadata. Its
``content_checksum`` is the SHA-256 of the payload bytes alone, so two runs
that learned the same weights agree on it even though their wall times
differ.

Tensor namespaces: ``backbone/`` is what downstream tasks load;
``nonessential/projector/`` and ``nonessential/predictor/`` are kept only so
pre-training can resume. The teacher, the negative queue and the optimizer
velocity are not stored.
"""

import hashlib
import json
import logging
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from .config import EncoderSpec, TrainingConfig
from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ShapeMismatchError,
)
from .model import Backbone, EncoderBundle, StudentNetwork, TeacherNetwork, init_encoder, shape_manifest

if TYPE_CHECKING:
    from .trainer import TrainState

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

MAGIC = b"GERSPCKP"
FORMAT_VERSION = 1
BACKBONE = "backbone/"
PROJECTOR = "nonessential/projector/"
PREDICTOR = "nonessential/predictor/"

_HEADER = struct.Struct("<I")
_CRC = struct.Struct("<I")

NOTES = {
    "backbone": "downstream loaders read backbone/ tensors only",
    "nonessential": "projector and predictor are stored for resuming pre-training",
    "queue": "the negative queue is not stored; resumed runs start with an empty queue",
    "teacher": "the teacher is not stored; it is re-copied from the student on load",
}


@dataclass(frozen=True)
class TensorEntry:
    name: str
    shape: Tuple[int, ...]
    offset: int
    length: int
    dtype: str = "f32"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "shape": list(self.shape),
            "dtype": self.dtype,
            "offset": self.offset,
            "length": self.length,
        }


@dataclass
class Checkpoint:
    """Parsed manifest of a checkpoint file."""

    path: Path
    format_version: int
    config: Dict[str, Any]
    metadata: Dict[str, Any]
    tensors: List[TensorEntry]
    content_checksum: str
    notes: Dict[str, str] = field(default_factory=dict)

    @property
    def tensor_names(self) -> List[str]:
        return [t.name for t in self.tensors]

    def manifest(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "tensors": [t.to_dict() for t in self.tensors],
            "config": self.config,
            "metadata": self.metadata,
            "content_checksum": self.content_checksum,
            "notes": self.notes,
        }

    @classmethod
    def from_manifest(cls, path: Path, manifest: Dict[str, Any]) -> "Checkpoint":
        try:
            tensors = [
                TensorEntry(t["name"], tuple(int(d) for d in t["shape"]), int(t["offset"]), int(t["length"]), t["dtype"])
                for t in manifest["tensors"]
            ]
            return cls(
                path=path,
                format_version=int(manifest["format_version"]),
                config=manifest["config"],
                metadata=manifest.get("metadata", {}),
                tensors=tensors,
                content_checksum=manifest["content_checksum"],
                notes=manifest.get("notes", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(f"{path}: malformed manifest ({exc})") from exc


# --------------------------------------------------------------------------
# Raw container I/O
# --------------------------------------------------------------------------


def _to_bytes(tensor: torch.Tensor) -> bytes:
    return tensor.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False).tobytes()


def write_container(
    path: PathLike,
    tensors: Dict[str, torch.Tensor],
    config: Dict[str, Any],
    metadata: Dict[str, Any],
    format_version: int = FORMAT_VERSION,
) -> Checkpoint:
    """Serialize ``tensors`` atomically: a temp file in the target directory is renamed into place."""
    path = Path(path)
    entries: List[TensorEntry] = []
    payloads: List[bytes] = []
    offset = 0
    for name, tensor in tensors.items():
        blob = _to_bytes(tensor)
        entries.append(TensorEntry(name, tuple(tensor.shape), offset, len(blob)))
        payloads.append(blob)
        offset += len(blob)
    payload = b"".join(payloads)
    checkpoint = Checkpoint(
        path=path,
        format_version=format_version,
        config=config,
        metadata=metadata,
        tensors=entries,
        content_checksum=hashlib.sha256(payload).hexdigest(),
        notes=dict(NOTES),
    )
    manifest = json.dumps(checkpoint.manifest(), sort_keys=True).encode("utf-8")
    body = MAGIC + _HEADER.pack(len(manifest)) + manifest + payload
    blob = body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.info("💾 Wrote checkpoint %s (%d tensors, %d bytes)", path, len(entries), len(blob))
    return checkpoint


def _parse(path: Path, blob: bytes) -> Tuple[Checkpoint, bytes]:
    """Validate the framing, CRC and version; return the manifest and raw payload."""
    if len(blob) < len(MAGIC):
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a rsjoint checkpoint (bad magic)")
    header_end = len(MAGIC) + _HEADER.size
    if len(blob) < header_end:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    (manifest_len,) = _HEADER.unpack_from(blob, len(MAGIC))
    manifest_end = header_end + manifest_len
    if len(blob) < manifest_end + _CRC.size:
        raise CheckpointTruncatedError(f"{path}: file ends inside the manifest")

    body, trailer = blob[: -_CRC.size], blob[-_CRC.size :]
    try:
        manifest = json.loads(blob[header_end:manifest_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        manifest = None
    if manifest is not None:
        declared = sum(int(t.get("length", 0)) for t in manifest.get("tensors", []))
        if len(body) - manifest_end < declared:
            raise CheckpointTruncatedError(
                f"{path}: payload holds {len(body) - manifest_end} bytes, manifest declares {declared}"
            )

    (stored_crc,) = _CRC.unpack(trailer)
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"{path}: CRC mismatch, file is corrupted")
    if manifest is None:
        raise CheckpointFormatError(f"{path}: manifest is not valid JSON")

    checkpoint = Checkpoint.from_manifest(path, manifest)
    if checkpoint.format_version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {checkpoint.format_version}, this build reads version {FORMAT_VERSION}"
        )
    payload = body[manifest_end:]
    if hashlib.sha256(payload).hexdigest() != checkpoint.content_checksum:
        raise CheckpointChecksumError(f"{path}: content checksum mismatch")
    return checkpoint, payload


def read_manifest(path: PathLike) -> Checkpoint:
    """Parse and fully verify ``path`` without building tensors."""
    path = Path(path)
    checkpoint, _ = _parse(path, path.read_bytes())
    return checkpoint


def read_container(path: PathLike) -> Tuple[Checkpoint, Dict[str, torch.Tensor]]:
    path = Path(path)
    checkpoint, payload = _parse(path, path.read_bytes())
    tensors: Dict[str, torch.Tensor] = {}
    for entry in checkpoint.tensors:
        if entry.dtype != "f32":
            raise CheckpointFormatError(f"{path}: tensor {entry.name} has unsupported dtype {entry.dtype}")
        expected = int(np.prod(entry.shape, dtype=np.int64)) * 4
        if entry.length != expected or entry.offset + entry.length > len(payload):
            raise CheckpointFormatError(f"{path}: tensor {entry.name} has inconsistent size or offset")
        raw = np.frombuffer(payload, dtype="<f4", count=entry.length // 4, offset=entry.offset)
        tensors[entry.name] = torch.from_numpy(raw.reshape(entry.shape).astype(np.float32))
    return checkpoint, tensors


# --------------------------------------------------------------------------
# Encoder save/load
# --------------------------------------------------------------------------


def _float_state(prefix: str, module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    # BN num_batches_tracked counters are integers and are not stored
    return {f"{prefix}{k}": v for k, v in module.state_dict().items() if v.is_floating_point()}


def student_tensors(student: StudentNetwork) -> Dict[str, torch.Tensor]:
    tensors = _float_state(BACKBONE, student.backbone)
    tensors.update(_float_state(PROJECTOR, student.projector))
    tensors.update(_float_state(PREDICTOR, student.predictor))
    return tensors


def save_checkpoint(state: "TrainState", path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
    final = state.history[-1].to_dict() if state.history else None
    info: Dict[str, Any] = {
        "epochs_completed": state.epoch,
        "iterations": state.iteration,
        "final_losses": final,
    }
    info.update(metadata or {})
    return write_container(
        path,
        student_tensors(state.bundle.student),
        state.config.model_dump(mode="json"),
        info,
    )


def _expected_shapes(spec: EncoderSpec) -> Dict[str, Tuple[int, ...]]:
    expected: Dict[str, Tuple[int, ...]] = {}
    for name, shape in shape_manifest(spec).items():
        head, _, rest = name.partition(".")
        prefix = {"backbone": BACKBONE, "projector": PROJECTOR, "predictor": PREDICTOR}[head]
        expected[prefix + rest] = shape
    return expected


def check_shapes(tensors: Dict[str, torch.Tensor], spec: EncoderSpec, prefix: str = "") -> None:
    """Raise on the first stored tensor (in file order) that ``spec`` does not produce."""
    expected = _expected_shapes(spec)
    for name, tensor in tensors.items():
        if not name.startswith(prefix):
            continue
        if name not in expected:
            raise ShapeMismatchError(f"{name}: not part of the configured encoder", name)
        if tuple(tensor.shape) != expected[name]:
            raise ShapeMismatchError(
                f"{name}: stored shape {tuple(tensor.shape)} != configured shape {expected[name]}", name
            )


def _load_prefixed(module: torch.nn.Module, tensors: Dict[str, torch.Tensor], prefix: str) -> None:
    state = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing, unexpected = module.load_state_dict(state, strict=False)
    missing = [k for k in missing if not k.endswith("num_batches_tracked")]
    if missing or unexpected:
        name = (missing or unexpected)[0]
        raise ShapeMismatchError(f"{prefix}{name}: missing from checkpoint or not expected", prefix + name)


def load_checkpoint(
    path: PathLike, expected: Optional[TrainingConfig] = None
) -> Tuple[EncoderBundle, TrainingConfig]:
    """Rebuild the student (teacher re-copied from it) from ``path``.

    ``expected`` selects the encoder to load into; by default the stored
    config's encoder is used.
    """
    checkpoint, tensors = read_container(path)
    config = TrainingConfig.from_dict(checkpoint.config)
    target = expected if expected is not None else config
    check_shapes(tensors, target.encoder)
    bundle = init_encoder(target.encoder, target.seed)
    student = bundle.student
    _load_prefixed(student.backbone, tensors, BACKBONE)
    _load_prefixed(student.projector, tensors, PROJECTOR)
    _load_prefixed(student.predictor, tensors, PREDICTOR)
    bundle.teacher = TeacherNetwork.from_student(student)
    logger.info("📂 Loaded checkpoint %s (%d tensors)", path, len(tensors))
    return bundle, config


def load_backbone(path: PathLike, encoder: Optional[EncoderSpec] = None) -> Tuple[Backbone, TrainingConfig]:
    """Backbone only; ``nonessential/`` tensors are ignored."""
    checkpoint, tensors = read_container(path)
    config = TrainingConfig.from_dict(checkpoint.config)
    spec = encoder if encoder is not None else config.encoder
    check_shapes(tensors, spec, prefix=BACKBONE)
    backbone = Backbone(spec)
    _load_prefixed(backbone, tensors, BACKBONE)
    return backbone, config
