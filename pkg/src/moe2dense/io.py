"""On-disk formats.

A *model directory* holds ``manifest.json`` and ``weights.bin``.  The manifest
carries metadata plus a tensor table; each entry names a tensor, its shape, its
byte offset into ``weights.bin`` and its dtype (only ``"f64"``).  Tensors are
stored row-major, little-endian, at 8-byte aligned offsets.

A *bundle file* packs the same thing into one file: an unsigned 64-bit
little-endian header length, the JSON header (space padded to a multiple of
8 bytes), then the blob.  Calibration statistics use it.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ModelFormatError, NumericError, ShapeError
from .model import DenseFfn, ExpertWeights, MoeLayer

FORMAT_NAME = "moe2dense"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def pack_tensors(tensors: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F64)
        raw = arr.tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f64"})
        chunks.append(raw)
        offset += len(raw)  # multiples of 8 keep every offset aligned
    return table, b"".join(chunks)


def unpack_tensors(table: list[dict], blob: bytes) -> dict[str, np.ndarray]:
    out = {}
    for entry in table:
        name = entry.get("name")
        if entry.get("dtype") != "f64":
            raise ModelFormatError(f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
        if offset % 8:
            raise ShapeError(f"tensor {name!r}: offset {offset} is not 8-byte aligned")
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if offset < 0 or end > len(blob):
            raise ShapeError(
                f"tensor {name!r}: shape {shape} at offset {offset} overruns a {len(blob)}-byte blob"
            )
        arr = np.frombuffer(blob, dtype=_LE_F64, count=count, offset=offset).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor {name!r}: non-finite payload")
        out[name] = arr.astype(np.float64)
    return out


def _expert_tensors(prefix: str, e: ExpertWeights) -> dict[str, np.ndarray]:
    return {f"{prefix}.w_gate": e.w_gate, f"{prefix}.w_up": e.w_up, f"{prefix}.w_down": e.w_down}


def model_tensors(model: MoeLayer | DenseFfn) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(model, DenseFfn):
        meta = {"kind": "dense", "d": model.d, "d_dense": model.d_dense}
        return meta, {"w_gate": model.w_gate, "w_up": model.w_up, "w_down": model.w_down}
    if isinstance(model, MoeLayer):
        meta = {
            "kind": "moe",
            "d": model.d,
            "d_expert": model.d_expert,
            "E": model.E,
            "k": model.k,
            "renormalize_topk": model.renormalize_topk,
            "n_shared": len(model.shared_experts),
        }
        tensors = {"router": model.router}
        for i, e in enumerate(model.experts):
            tensors.update(_expert_tensors(f"experts.{i}", e))
        for i, e in enumerate(model.shared_experts):
            tensors.update(_expert_tensors(f"shared.{i}", e))
        return meta, tensors
    raise TypeError(f"cannot serialize {type(model).__name__}")


def _take(tensors: dict, name: str) -> np.ndarray:
    try:
        return tensors[name]
    except KeyError:
        raise ModelFormatError(f"missing tensor {name!r}") from None


def _take_expert(tensors: dict, prefix: str) -> ExpertWeights:
    return ExpertWeights(
        _take(tensors, f"{prefix}.w_gate"), _take(tensors, f"{prefix}.w_up"), _take(tensors, f"{prefix}.w_down")
    )


def model_from_tensors(meta: dict, tensors: dict[str, np.ndarray]) -> MoeLayer | DenseFfn:
    kind = meta.get("kind")
    if kind == "dense":
        return DenseFfn(_take(tensors, "w_gate"), _take(tensors, "w_up"), _take(tensors, "w_down"))
    if kind == "moe":
        experts = tuple(_take_expert(tensors, f"experts.{i}") for i in range(int(meta["E"])))
        shared = tuple(_take_expert(tensors, f"shared.{i}") for i in range(int(meta.get("n_shared", 0))))
        return MoeLayer(
            experts=experts,
            router=_take(tensors, "router"),
            k=int(meta["k"]),
            renormalize_topk=bool(meta["renormalize_topk"]),
            shared_experts=shared,
        )
    raise ModelFormatError(f"unknown model kind {kind!r}")


def save_model(model: MoeLayer | DenseFfn, path, extra: dict | None = None) -> Path:
    """Write ``model`` as a model directory; ``extra`` lands in the manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta, tensors = model_tensors(model)
    table, blob = pack_tensors(tensors)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, **meta, "tensors": table}
    if extra:
        manifest["extra"] = extra
    (path / "weights.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise ModelFormatError(f"{path}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: manifest is not valid JSON ({exc})") from None
    if manifest.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} manifest")
    return manifest


def load_model(path) -> MoeLayer | DenseFfn:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / "weights.bin").read_bytes()
    except FileNotFoundError:
        raise ModelFormatError(f"{path}: no weights.bin") from None
    tensors = unpack_tensors(manifest.get("tensors", []), blob)
    return model_from_tensors(manifest, tensors)


def write_bundle(path, header: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    table, blob = pack_tensors(tensors)
    head = json.dumps({"format": FORMAT_NAME, "version": FORMAT_VERSION, **header, "tensors": table},
                      sort_keys=True).encode()
    head += b" " * (-len(head) % 8)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(struct.pack("<Q", len(head)) + head + blob)
    return path


def read_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except (FileNotFoundError, IsADirectoryError):
        raise ModelFormatError(f"{path}: no such bundle file") from None
    if len(raw) < 8:
        raise ModelFormatError(f"{path}: truncated bundle")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise ModelFormatError(f"{path}: header length {n} overruns the file")
    try:
        header = json.loads(raw[8:8 + n])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: bad bundle header ({exc})") from None
    if header.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{path}: not a {FORMAT_NAME} bundle")
    return header, unpack_tensors(header.get("tensors", []), raw[8 + n:])
