"""Checkpoint persistence: a JSON manifest plus a named-tensor binary blob.

File layout (little-endian): magic ``AECK``, u32 manifest byte length, the
UTF-8 JSON manifest, then one entry per tensor: u32 name length, the name,
u32 rank, u32 dims, float32 data.  Round-trips are bit-exact.
"""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import LayerSpec, LinearLayer, ScalingConfig, WeakLearner, layers_from_specs

__all__ = [
    "write_tensor_blob",
    "read_tensor_blob",
    "save_checkpoint",
    "load_checkpoint",
    "save_weak_checkpoint",
    "load_weak_checkpoint",
    "save_ensemble_checkpoint",
    "load_ensemble_checkpoint",
]

_MAGIC = b"AECK"
FORMAT_VERSION = 1


def write_tensor_blob(fh, tensors: dict[str, np.ndarray]) -> None:
    for name, arr in tensors.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor_blob(fh) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}

    def take(n: int, what: str) -> bytes:
        chunk = fh.read(n)
        if len(chunk) != n:
            raise CheckpointError(f"truncated blob while reading {what}")
        return chunk

    while True:
        head = fh.read(4)
        if not head:
            return tensors
        if len(head) != 4:
            raise CheckpointError("truncated blob header")
        (name_len,) = struct.unpack("<I", head)
        name = take(name_len, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * count, f"data of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)


def save_checkpoint(path, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        write_tensor_blob(fh, tensors)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(p, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        head = fh.read(4)
        if len(head) != 4:
            raise CheckpointError(f"{path}: truncated manifest length")
        (mlen,) = struct.unpack("<I", head)
        raw = fh.read(mlen)
        if len(raw) != mlen:
            raise CheckpointError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
        tensors = read_tensor_blob(fh)
    return manifest, tensors


# ---------------------------------------------------------------------------
# weak learners


def _specs_to_json(specs) -> list[dict]:
    return [dataclasses.asdict(s) for s in specs]


def _specs_from_json(items) -> list[LayerSpec]:
    try:
        return [LayerSpec(**item) for item in items]
    except TypeError as exc:
        raise CheckpointError(f"bad layer description: {exc}") from exc


def save_weak_checkpoint(path, model: WeakLearner, history: list[dict] | None = None, metrics: dict | None = None) -> None:
    manifest = {
        "kind": "weak",
        "format_version": FORMAT_VERSION,
        "arch": _specs_to_json(model.extractor_specs),
        "scaling": dataclasses.asdict(model.scaling),
        "classes": model.classes,
        "input_size": model.input_size,
        "feature_dim": model.feature_dim,
        "has_head": model.head is not None,
        "frozen": model.frozen,
        "seed": model.seed,
        "history": history or [],
        "metrics": metrics or {},
    }
    save_checkpoint(path, manifest, {name: p.data for name, p in model.parameters()})


def _rebuild_weak(manifest: dict, tensors: dict[str, np.ndarray]) -> WeakLearner:
    specs = _specs_from_json(manifest["arch"])
    rng = np.random.default_rng(0)
    layers = layers_from_specs(specs, rng)
    head = LinearLayer(manifest["feature_dim"], manifest["classes"], rng) if manifest["has_head"] else None
    model = WeakLearner(
        layers,
        specs,
        head,
        ScalingConfig(**manifest["scaling"]),
        manifest["classes"],
        manifest["input_size"],
        manifest["feature_dim"],
        manifest["seed"],
    )
    for name, p in model.parameters():
        if name not in tensors:
            raise CheckpointError(f"missing parameter {name}")
        if tensors[name].shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name} has shape {tensors[name].shape}, expected {p.data.shape}"
            )
        p.data = tensors[name].copy()
    if manifest["frozen"]:
        model.frozen = True
        for _, p in model.parameters():
            p.requires_grad = False
    return model


def load_weak_checkpoint(path) -> tuple[WeakLearner, dict]:
    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "weak":
        raise CheckpointError(f"{path}: not a weak-learner checkpoint (kind={manifest.get('kind')!r})")
    return _rebuild_weak(manifest, tensors), manifest


# ---------------------------------------------------------------------------
# adaptive ensembles


def save_ensemble_checkpoint(path, ensemble, history: dict | None = None, metrics: dict | None = None) -> None:
    from .ensemble import AdaptiveEnsemble

    if not isinstance(ensemble, AdaptiveEnsemble):
        raise CheckpointError("only adaptive ensembles are checkpointed")
    manifest = {
        "kind": "adaptive_ensemble",
        "format_version": FORMAT_VERSION,
        "classes": ensemble.classes,
        "seed": ensemble.seed,
        "feature_dims": ensemble.feature_dims,
        "extractors": [
            {
                "arch": _specs_to_json(ex.extractor_specs),
                "scaling": dataclasses.asdict(ex.scaling),
                "input_size": ex.input_size,
                "feature_dim": ex.feature_dim,
                "seed": ex.seed,
            }
            for ex in ensemble.extractors
        ],
        "history": history or {},
        "metrics": metrics or {},
    }
    tensors: dict[str, np.ndarray] = {}
    for i, ex in enumerate(ensemble.extractors):
        for name, p in ex.parameters():
            tensors[f"ext{i}.{name}"] = p.data
    for name, p in ensemble.parameters():
        tensors[name] = p.data
    save_checkpoint(path, manifest, tensors)


def load_ensemble_checkpoint(path):
    from .ensemble import AdaptiveEnsemble

    manifest, tensors = load_checkpoint(path)
    if manifest.get("kind") != "adaptive_ensemble":
        raise CheckpointError(f"{path}: not an ensemble checkpoint (kind={manifest.get('kind')!r})")
    extractors = []
    for i, sub in enumerate(manifest["extractors"]):
        weak_manifest = {
            "arch": sub["arch"],
            "scaling": sub["scaling"],
            "classes": manifest["classes"],
            "input_size": sub["input_size"],
            "feature_dim": sub["feature_dim"],
            "has_head": False,
            "frozen": True,
            "seed": sub["seed"],
        }
        prefix = f"ext{i}."
        ext_tensors = {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
        extractors.append(_rebuild_weak(weak_manifest, ext_tensors))
    ensemble = AdaptiveEnsemble(extractors, manifest["classes"], seed=manifest["seed"])
    for name, p in ensemble.parameters():
        if name not in tensors:
            raise CheckpointError(f"missing parameter {name}")
        p.data = tensors[name].copy()
    return ensemble, manifest
