# forceadapt/checkpoint.py
"""
Checkpoint file layout:

    magic line          b"FORCEADAPT-CKPT\\n"
    header length       8 bytes, unsigned little-endian
    header              UTF-8 JSON: format version, config hash, config,
                        tensor manifest, curriculum state, extra metadata
    payload             tensors in manifest order, little-endian float32
    checksum            8-byte blake2b digest of everything above
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import torch

from .config import ExperimentConfig, config_hash, parse_config
from .errors import CheckpointChecksumError, CheckpointError, CheckpointVersionError
from .force_curriculum import CurriculumState

logger = logging.getLogger(__name__)

MAGIC = b"FORCEADAPT-CKPT\n"
FORMAT_VERSION = 1
_CHECKSUM_BYTES = 8


@dataclass
class Checkpoint:
    header: Dict[str, Any]
    tensors: Dict[str, np.ndarray]

    @property
    def config(self) -> ExperimentConfig:
        return parse_config(self.header["config"])

    @property
    def extra(self) -> Dict[str, Any]:
        return self.header.get("extra", {})

    def curriculum_state(self) -> CurriculumState:
        data = self.header["curriculum"]
        state = CurriculumState.from_config(self.config.curriculum)
        state.alpha_g = data["alpha_g"]
        state.success_window.extend(data["window"])
        state.filter_state = np.asarray(data["filter_state"], dtype=float)
        return state

    def state_dict(self, prefix: str) -> Dict[str, torch.Tensor]:
        return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in self.tensors.items() if k.startswith(prefix)}


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_CHECKSUM_BYTES).digest()


def checkpoint_save(
    path: Path,
    modules: Dict[str, torch.nn.Module],
    config: ExperimentConfig,
    curriculum: CurriculumState,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """`modules` maps a tensor-name prefix to a module whose state_dict is stored under it."""
    manifest, chunks, offset = [], [], 0
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            array = tensor.detach().cpu().numpy().astype("<f4")
            manifest.append({"name": f"{prefix}.{name}", "shape": list(array.shape), "offset": offset, "count": int(array.size)})
            chunks.append(array.tobytes())
            offset += int(array.size)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(config),
        "config": config.model_dump(mode="json"),
        "tensors": manifest,
        "curriculum": {
            "alpha_g": curriculum.alpha_g,
            "window": list(curriculum.success_window),
            "filter_state": np.asarray(curriculum.filter_state).tolist(),
        },
        "extra": extra or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(chunks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    digest = _digest(body)
    path.write_bytes(body + digest)
    logger.info("checkpoint written: %s (%d tensors, checksum %s)", path, len(manifest), digest.hex())
    return path


def checkpoint_load(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a forceadapt checkpoint")
    if len(data) < len(MAGIC) + 8 + _CHECKSUM_BYTES:
        raise CheckpointChecksumError(f"{path} is truncated")
    body, stored = data[:-_CHECKSUM_BYTES], data[-_CHECKSUM_BYTES:]
    if _digest(body) != stored:
        raise CheckpointChecksumError(f"{path}: checksum mismatch, file is corrupted")

    start = len(MAGIC)
    header_len = int.from_bytes(body[start:start + 8], "little")
    header = json.loads(body[start + 8:start + 8 + header_len].decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")

    payload = np.frombuffer(body[start + 8 + header_len:], dtype="<f4")
    tensors = {}
    for entry in header["tensors"]:
        flat = payload[entry["offset"]:entry["offset"] + entry["count"]]
        tensors[entry["name"]] = flat.astype(np.float32).reshape(entry["shape"])
    logger.info("checkpoint loaded: %s (checksum %s)", path, stored.hex())
    return Checkpoint(header, tensors)
