"""Portable checkpoint directories: manifest.json + one raw blob per tensor.

The manifest records names, shapes and dtype ("f32", little-endian); metadata
carries the stage tag, seed, config hash and the model config needed to
rebuild the module. save -> load round-trips bit-identically.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, config_hash, to_jsonable
from .errors import CheckpointFormatError
from .model import MergedModel

MANIFEST = "manifest.json"
DTYPES = {"f32": np.dtype("<f4"), "i64": np.dtype("<i8")}


def _dtype_tag(arr: np.ndarray) -> str:
    for tag, dt in DTYPES.items():
        if arr.dtype == dt:
            return tag
    raise CheckpointFormatError(f"unsupported tensor dtype {arr.dtype}")


@dataclass
class Checkpoint:
    """Named tensor tree + metadata; the unit of merging and persistence."""

    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            name: {"shape": list(arr.shape), "dtype": _dtype_tag(arr)}
            for name, arr in self.tensors.items()
        }

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        doc = {"tensors": self.manifest(), "metadata": self.metadata}
        with open(path / MANIFEST, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        for name, arr in self.tensors.items():
            with open(path / f"{name}.bin", "wb") as fh:
                fh.write(np.ascontiguousarray(arr).tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        manifest_path = path / MANIFEST
        if not manifest_path.exists():
            raise CheckpointFormatError(f"no {MANIFEST} in {path}")
        with open(manifest_path) as fh:
            doc = json.load(fh)
        if "tensors" not in doc or "metadata" not in doc:
            raise CheckpointFormatError("manifest missing 'tensors' or 'metadata'")
        names = set(doc["tensors"])
        blobs = {p.name[: -len(".bin")] for p in path.glob("*.bin")}
        if names != blobs:
            missing = sorted(names - blobs)
            extra = sorted(blobs - names)
            raise CheckpointFormatError(
                f"manifest/blob mismatch: missing blobs {missing}, extra blobs {extra}"
            )
        tensors = {}
        for name, entry in doc["tensors"].items():
            if entry.get("dtype") not in DTYPES:
                raise CheckpointFormatError(f"{name}: unsupported dtype {entry.get('dtype')}")
            dtype = DTYPES[entry["dtype"]]
            shape = tuple(entry["shape"])
            raw = (path / f"{name}.bin").read_bytes()
            expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
            if len(raw) != expected:
                raise CheckpointFormatError(
                    f"{name}: blob has {len(raw)} bytes, manifest shape {shape} "
                    f"needs {expected}"
                )
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        return cls(tensors=tensors, metadata=doc["metadata"])

    def bytes_equal(self, other: "Checkpoint") -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(
            a.dtype == other.tensors[k].dtype
            and a.shape == other.tensors[k].shape
            and a.tobytes() == other.tensors[k].tobytes()
            for k, a in self.tensors.items()
        )


def checkpoint_from_model(
    model: MergedModel, stage: str = "", seed: int | None = None, **extra
) -> Checkpoint:
    """Snapshot a model's full state (parameters and buffers) as f32 arrays."""
    tensors = {
        name: t.detach().cpu().to(torch.float32).numpy().astype("<f4")
        for name, t in model.state_dict().items()
    }
    metadata = {
        "stage": stage,
        "seed": seed,
        "config_hash": config_hash(model.cfg),
        "model_config": to_jsonable(model.cfg),
    }
    metadata.update(extra)
    return Checkpoint(tensors=tensors, metadata=metadata)


def model_from_checkpoint(ckpt: Checkpoint) -> MergedModel:
    """Rebuild a model from checkpoint metadata + tensors (strict load)."""
    if "model_config" not in ckpt.metadata:
        raise CheckpointFormatError("checkpoint metadata missing model_config")
    cfg = ModelConfig.from_dict(ckpt.metadata["model_config"])
    model = MergedModel(cfg, seed=0)
    state = {k: torch.from_numpy(v.copy()) for k, v in ckpt.tensors.items()}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointFormatError(f"state does not match architecture: {exc}") from exc
    model.eval()
    return model


def save_model(model: MergedModel, path, stage: str = "", seed: int | None = None, **extra):
    ckpt = checkpoint_from_model(model, stage=stage, seed=seed, **extra)
    ckpt.save(path)
    return ckpt


def load_model(path) -> MergedModel:
    return model_from_checkpoint(Checkpoint.load(path))
