"""Model files: a JSON manifest plus one little-endian float32 blob.

The manifest at ``path`` lists layers in order with their scalar attributes and,
for every tensor, its shape plus an offset/length in float units into the blob.
The blob lives next to the manifest as ``<path>.blob``; there is no alignment
padding between tensors.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .graph import BlockAnnotation, GraphError, LayerSpec, NetGraph, CONV, BN, ACT, DENSE, LAYER_KINDS
from .tensor import ActParams, BNParams, ConvParams, DenseParams

FORMAT_VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed or inconsistent model file."""


def _layer_record(l: LayerSpec, chunks: List[np.ndarray], offset: int) -> Tuple[dict, int]:
    rec = {"id": l.id, "kind": l.kind, "inputs": list(l.inputs), "attrs": {}, "tensors": {}}
    tensors: Dict[str, np.ndarray] = {}
    p = l.params
    if isinstance(p, ConvParams):
        rec["attrs"] = {"stride": p.stride, "padding": p.padding, "groups": p.groups}
        tensors["weight"] = p.weight
        if p.bias is not None:
            tensors["bias"] = p.bias
    elif isinstance(p, BNParams):
        rec["attrs"] = {"eps": p.eps}
        for f in ("gamma", "beta", "running_mean", "running_var"):
            tensors[f] = getattr(p, f)
    elif isinstance(p, ActParams):
        rec["attrs"] = {"act": p.kind}
        if p.slopes is not None:
            tensors["slopes"] = p.slopes
    elif isinstance(p, DenseParams):
        tensors["weight"] = p.weight
        if p.bias is not None:
            tensors["bias"] = p.bias
    for name, arr in tensors.items():
        flat = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).reshape(-1)
        rec["tensors"][name] = {"shape": list(arr.shape), "offset": offset, "length": int(flat.size)}
        chunks.append(flat)
        offset += flat.size
    return rec, offset


def to_bytes(g: NetGraph) -> Tuple[dict, bytes]:
    """Return (manifest, blob bytes) without touching the filesystem."""
    chunks: List[np.ndarray] = []
    offset = 0
    records = []
    for l in g.layers:
        rec, offset = _layer_record(l, chunks, offset)
        records.append(rec)
    blob = b"".join(c.tobytes() for c in chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "input_shape": list(g.input_shape),
        "layers": records,
        "annotations": [
            {"kind": a.kind, "name": a.name, "members": list(a.member_ids), "attrs": a.attrs} for a in g.annotations
        ],
        "metadata": g.metadata,
        "blob_floats": offset,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    return manifest, blob


def graph_hash(g: NetGraph) -> str:
    """Content hash over structure, annotations and exact weight bits."""
    manifest, blob = to_bytes(g)
    h = hashlib.sha256(json.dumps(manifest, sort_keys=True).encode())
    h.update(blob)
    return h.hexdigest()


def save(g: NetGraph, path) -> None:
    path = Path(path)
    manifest, blob = to_bytes(g)
    blob_path = path.with_name(path.name + ".blob")
    manifest["blob"] = blob_path.name
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _tensor(rec: dict, name: str, floats: np.ndarray, required: bool = True):
    t = rec["tensors"].get(name)
    if t is None:
        if required:
            raise FormatError(f"layer {rec['id']}: missing tensor {name!r}")
        return None
    off, length, shape = int(t["offset"]), int(t["length"]), tuple(t["shape"])
    if off < 0 or off + length > floats.size:
        raise FormatError(f"layer {rec['id']}: tensor {name!r} runs past end of blob")
    if int(np.prod(shape)) != length:
        raise FormatError(f"layer {rec['id']}: tensor {name!r} length {length} != shape {shape}")
    return floats[off : off + length].astype(np.float32).reshape(shape)


def _params(rec: dict, floats: np.ndarray):
    kind, attrs = rec["kind"], rec.get("attrs", {})
    if kind == CONV:
        return ConvParams(
            _tensor(rec, "weight", floats),
            _tensor(rec, "bias", floats, required=False),
            stride=int(attrs["stride"]),
            padding=int(attrs["padding"]),
            groups=int(attrs["groups"]),
        )
    if kind == BN:
        return BNParams(*(_tensor(rec, f, floats) for f in ("gamma", "beta", "running_mean", "running_var")),
                        eps=float(attrs["eps"]))
    if kind == ACT:
        return ActParams(attrs["act"], _tensor(rec, "slopes", floats, required=False))
    if kind == DENSE:
        return DenseParams(_tensor(rec, "weight", floats), _tensor(rec, "bias", floats, required=False))
    return None


def from_bytes(manifest: dict, blob: bytes) -> NetGraph:
    try:
        if manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
        want = int(manifest["blob_floats"])
        if len(blob) != want * BLOB_DTYPE.itemsize:
            raise FormatError(f"weight blob has {len(blob)} bytes, manifest declares {want} floats")
        if "blob_sha256" in manifest and hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
            raise FormatError("weight blob checksum mismatch")
        floats = np.frombuffer(blob, dtype=BLOB_DTYPE)
        layers = []
        for rec in manifest["layers"]:
            if rec["kind"] not in LAYER_KINDS:
                raise FormatError(f"unknown layer kind {rec['kind']!r}")
            layers.append(LayerSpec(rec["id"], rec["kind"], tuple(rec["inputs"]), _params(rec, floats)))
        anns = [BlockAnnotation(a["kind"], a["name"], tuple(a["members"]), a.get("attrs", {}))
                for a in manifest.get("annotations", [])]
        return NetGraph(tuple(layers), tuple(manifest["input_shape"]), tuple(anns), manifest.get("metadata", {}))
    except FormatError:
        raise
    except (KeyError, TypeError) as e:
        raise FormatError(f"malformed manifest: {e!r}") from None
    except GraphError as e:
        raise FormatError(f"invalid graph: {e}") from None
    except ValueError as e:
        raise FormatError(f"invalid layer parameters: {e}") from None


def load(path) -> NetGraph:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {e}") from None
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object")
    blob_path = path.with_name(manifest.get("blob", path.name + ".blob"))
    return from_bytes(manifest, blob_path.read_bytes())


def write_tensor(path, x: np.ndarray) -> None:
    """tensor.bin: four little-endian uint64 dims, then little-endian float32 data."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise FormatError(f"tensor must be rank 4, got {x.shape}")
    with open(path, "wb") as f:
        f.write(np.asarray(x.shape, dtype="<u8").tobytes())
        f.write(np.ascontiguousarray(x, dtype=BLOB_DTYPE).tobytes())


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 32:
        raise FormatError("tensor file shorter than its 32-byte header")
    shape = tuple(int(v) for v in np.frombuffer(raw[:32], dtype="<u8"))
    body = raw[32:]
    if len(body) != int(np.prod(shape)) * 4:
        raise FormatError(f"tensor body has {len(body)} bytes, header shape {shape} needs {int(np.prod(shape)) * 4}")
    return np.frombuffer(body, dtype=BLOB_DTYPE).astype(np.float32).reshape(shape)
