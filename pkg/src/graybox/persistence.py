"""Durable storage: versioned model checkpoints and memory serialization.

Checkpoints are JSON with base64-encoded little-endian float64 arrays and a
content hash; round-trips are bit-exact. Memory entries persist their frozen
vectors and cached activations exactly (base64) while cached attribution maps
go to 16-bit PGM files referenced by path, with exact totals in the JSON.
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

from . import netpbm
from .attribution import PatchAttribution
from .kernels import ConceptSnapshot, FeedbackScope, Memory, MemoryEntry
from .model import PrototypeModel

CHECKPOINT_VERSION = 1
MEMORY_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _encode(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode(blob: str, shape) -> np.ndarray:
    raw = base64.b64decode(blob.encode("ascii"))
    return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()


def _payload_hash(payload: dict) -> str:
    blob = json.dumps({k: v for k, v in payload.items() if k != "hash"},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def checkpoint_payload(model: PrototypeModel) -> dict:
    payload = {
        "format": "graybox-checkpoint",
        "version": CHECKPOINT_VERSION,
        "patch_size": list(model.patch_size),
        "stride": model.stride,
        "tau": model.tau,
        "k": model.k,
        "v": model.v,
        "q": model.q,
        "owner_class": [int(x) for x in model.owner_class],
        "prototypes": _encode(model.prototypes),
        "weights": _encode(model.weights),
    }
    payload["hash"] = _payload_hash(payload)
    return payload


def checkpoint_hash(model: PrototypeModel) -> str:
    return checkpoint_payload(model)["hash"]


def save_checkpoint(model: PrototypeModel, path) -> str:
    payload = checkpoint_payload(model)
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))
    return payload["hash"]


def load_checkpoint(path) -> PrototypeModel:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r}; supported: {CHECKPOINT_VERSION}")
    if _payload_hash(payload) != payload.get("hash"):
        raise CheckpointError(f"corrupt checkpoint (hash mismatch): {path}")
    return PrototypeModel(
        prototypes=_decode(payload["prototypes"], (payload["k"], payload["q"])),
        owner_class=np.array(payload["owner_class"], dtype=np.int64),
        weights=_decode(payload["weights"], (payload["v"], payload["k"])),
        patch_size=tuple(payload["patch_size"]),
        stride=payload["stride"],
        tau=payload["tau"],
    )


def save_memory(memory: Memory, path, maps_dir=None) -> None:
    path = Path(path)
    if maps_dir is None:
        maps_dir = path.parent / "memory_maps"
    maps_dir = Path(maps_dir)
    maps_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for e_idx, entry in enumerate(memory.entries):
        snap = entry.snapshot
        maps = []
        for n, pa in enumerate(snap.cached_attributions):
            rel = f"entry{e_idx:03d}_ref{n:04d}.pgm"
            peak = float(pa.values.max())
            quant = (np.rint(pa.values / peak * 65535).astype(np.uint16)
                     if peak > 0 else np.zeros(pa.values.shape, dtype=np.uint16))
            netpbm.write_pgm16(maps_dir / rel, quant)
            maps.append({"path": rel, "position": list(pa.position),
                         "total": pa.total, "max": peak})
        entries.append({
            "frozen_p": _encode(snap.frozen_p),
            "q": int(snap.frozen_p.shape[0]),
            "patch_size": list(snap.patch_size),
            "stride": snap.stride,
            "tau": snap.tau,
            "cached_activations": _encode(snap.cached_activations),
            "n_ref": int(snap.cached_activations.shape[0]),
            "cached_attributions": maps,
            "created_round": snap.created_round,
            "source_concept": snap.source_concept,
            "scope": {"kind": entry.scope.kind, "x_id": entry.scope.x_id,
                      "y": entry.scope.y},
        })
    payload = {"format": "graybox-memory", "version": MEMORY_VERSION,
               "reference_set_id": memory.reference_set_id, "entries": entries,
               "maps_dir": maps_dir.name}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_memory(path) -> Memory:
    path = Path(path)
    payload = json.loads(path.read_text())
    if payload.get("version") != MEMORY_VERSION:
        raise CheckpointError(
            f"unsupported memory version {payload.get('version')!r}; "
            f"supported: {MEMORY_VERSION}")
    maps_dir = path.parent / payload["maps_dir"]
    memory = Memory(reference_set_id=payload["reference_set_id"])
    for rec in payload["entries"]:
        maps = []
        for m in rec["cached_attributions"]:
            quant = netpbm.read_pgm16(maps_dir / m["path"]).astype(np.float64)
            values = quant / 65535.0 * m["max"]
            maps.append(PatchAttribution(position=tuple(m["position"]),
                                         values=values, total=m["total"]))
        snap = ConceptSnapshot(
            frozen_p=_decode(rec["frozen_p"], (rec["q"],)),
            patch_size=tuple(rec["patch_size"]),
            stride=rec["stride"],
            tau=rec["tau"],
            cached_activations=_decode(rec["cached_activations"], (rec["n_ref"],)),
            cached_attributions=maps,
            created_round=rec["created_round"],
            source_concept=rec["source_concept"],
            reference_set_id=payload["reference_set_id"],
        )
        scope = FeedbackScope(kind=rec["scope"]["kind"], x_id=rec["scope"]["x_id"],
                              y=rec["scope"]["y"])
        memory.entries.append(MemoryEntry(snapshot=snap, scope=scope))
    return memory
