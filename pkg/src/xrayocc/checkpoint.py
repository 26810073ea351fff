"""Checkpoints: ``manifest.json`` + ``params.f32`` (little-endian float32, manifest order)."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .autodiff import ParamStore
from .network import StudentModel, TeacherModel

FORMAT_VERSION = 1
FEATURE_ORDER = "view-major: [view1 fused, view1 additional | view2 fused, view2 additional | ...]"
BASELINE_FEATURE_ORDER = "view-major: [view1 additional | view2 additional | ...]"


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    model: TeacherModel | StudentModel,
    config: dict,
    step: int = 0,
    metrics: dict | None = None,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    role = "student" if isinstance(model, StudentModel) else "teacher"
    manifest = {
        "format_version": FORMAT_VERSION,
        "role": role,
        "channels": model.channels,
        "K": model.K,
        "hidden": list(model.hidden),
        "config": config,
        "params": [{"name": n, "shape": list(t.shape)} for n, t in model.params.items()],
        "step": int(step),
        "metrics": metrics or {},
    }
    if role == "student":
        manifest["distill_layers"] = list(model.layers)
        manifest["spatial"] = bool(model.spatial)
        manifest["feature_order"] = FEATURE_ORDER if model.spatial else BASELINE_FEATURE_ORDER
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in model.params.items())
    (path / "params.f32").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[TeacherModel | StudentModel, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no manifest.json") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {FORMAT_VERSION}")
    blob = np.frombuffer((path / "params.f32").read_bytes(), dtype="<f4")
    sizes = [int(np.prod(p["shape"])) for p in manifest["params"]]
    if blob.size != sum(sizes):
        raise CheckpointError(f"{path}: blob holds {blob.size} values, manifest declares {sum(sizes)}")
    names = [p["name"] for p in manifest["params"]]
    if names != sorted(names):
        raise CheckpointError(f"{path}: parameters not in sorted-name order")
    params = ParamStore()
    offset = 0
    for p, n in zip(manifest["params"], sizes):
        params.add(p["name"], blob[offset : offset + n].reshape(p["shape"]), dtype=np.float32)
        offset += n
    hidden = tuple(manifest["hidden"])
    if manifest["role"] == "student":
        model = StudentModel(
            params, manifest["channels"], manifest["K"], tuple(manifest["distill_layers"]), hidden, manifest.get("spatial", True)
        )
    else:
        model = TeacherModel(params, manifest["channels"], manifest["K"], hidden)
    return model, manifest


def checkpoint_digest(path: str | Path) -> str:
    path = Path(path)
    h = hashlib.sha256()
    for name in ("manifest.json", "params.f32"):
        h.update((path / name).read_bytes())
    return h.hexdigest()
