"""Checkpoint files: a JSON manifest next to a little-endian float32 blob.

``<stem>.json`` holds the model kind and config, every tensor's name, role
(``param`` or ``buffer``), shape, byte offset and byte length, plus the
SHA-256 of ``<stem>.bin``. Output is byte-identical for identical models.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from cxrnet.errors import CheckpointError, IntegrityError, ShapeError
from cxrnet.models import MetaMLP, ModelConfig, Network, Probe, ResNet

FORMAT = "cxrnet-checkpoint/1"
_LE32 = np.dtype("<f4")


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def _model_config(model: Network) -> dict:
    if isinstance(model, ResNet):
        return model.config.to_dict()
    return dict(model.config)


def export_checkpoint(model: Network, path, extra: dict | None = None) -> Path:
    """Write ``model`` to ``<path>.json`` / ``<path>.bin`` and return the manifest path."""
    manifest_path, blob_path = _paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    params = model.named_parameters()
    entries, chunks, offset = [], [], 0
    for name, value in model.state_dict().items():
        raw = np.ascontiguousarray(value, dtype=_LE32).tobytes()
        entries.append({
            "name": name,
            "role": "param" if name in params else "buffer",
            "shape": list(value.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "kind": model.kind,
        "config": _model_config(model),
        "seed": getattr(model, "seed", None),
        "tensors": entries,
        "blob": blob_path.name,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    if isinstance(model, Probe):
        manifest["base"] = {"config": model.base.config.to_dict(), "seed": model.base.seed}
    if extra:
        manifest["extra"] = extra
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Load and verify a checkpoint; returns ``(manifest, tensors)``."""
    manifest_path, blob_path = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    blob_path = manifest_path.with_name(manifest.get("blob", blob_path.name))
    try:
        blob = blob_path.read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"checkpoint blob missing: {blob_path}") from exc
    if len(blob) != manifest["blob_bytes"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise IntegrityError(f"checkpoint blob {blob_path} does not match its manifest hash")
    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]: e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_LE32).astype(np.float32)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return manifest, tensors


def load_model(path) -> Network:
    """Rebuild the network recorded in a checkpoint, including the head."""
    manifest, tensors = read_checkpoint(path)
    kind = manifest["kind"]
    seed = manifest.get("seed") or 0
    if kind == "resnet":
        model = ResNet(ModelConfig.from_dict(manifest["config"]), seed)
    elif kind == "meta_mlp":
        cfg = manifest["config"]
        model = MetaMLP(seed, hidden=cfg["hidden"], num_labels=cfg["num_labels"])
    elif kind == "probe":
        raise CheckpointError("probe checkpoints need their base; use load_probe(path, base)")
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    _load_named(model, tensors, model.state_dict().keys())
    return model


def load_probe(path, base: ResNet) -> Probe:
    manifest, tensors = read_checkpoint(path)
    if manifest["kind"] != "probe":
        raise CheckpointError(f"{path} holds a {manifest['kind']}, not a probe")
    probe = Probe(base, manifest["config"]["target"], manifest.get("seed") or 0)
    _load_named(probe, tensors, probe.state_dict().keys())
    return probe


def _load_named(model: Network, tensors: dict[str, np.ndarray], names) -> None:
    own = model.state_dict()
    for name in names:
        if name not in tensors:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(own[name].shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(tensors[name].shape)}, model {tuple(own[name].shape)}"
            )
    model.load_state_dict({n: tensors[n] for n in names}, strict=False)


def import_pretrained(model: ResNet, path) -> ResNet:
    """Overwrite every non-head parameter and buffer from a checkpoint.

    The classifier head keeps its fresh initialization. Every other tensor
    must be present with a matching shape; loading a 3-channel stem into a
    1-channel model is refused.
    """
    _, tensors = read_checkpoint(path)
    head = set(model.head_parameter_names())
    names = [n for n in model.state_dict() if n not in head]
    stem = model.stem.weight.name
    if stem in tensors and tensors[stem].shape[1] != model.stem.weight.shape[1]:
        raise CheckpointError(
            f"{stem}: pretrained stem has {tensors[stem].shape[1]} input channels, model has "
            f"{model.stem.weight.shape[1]}; channel transfer is unsupported"
        )
    try:
        _load_named(model, tensors, names)
    except ShapeError as exc:
        raise CheckpointError(str(exc)) from exc
    return model
