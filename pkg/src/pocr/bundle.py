"""Model bundle serialization.

Binary layout, little-endian throughout:

    magic "POCR" | version u32 | manifest length u64 | manifest JSON
    | tensor payload (row-major) | CRC32 of the payload, u32

The manifest carries the architecture config, alphabet, seed, quantization
records, prune-plan provenance, and a tensor table of (name, dtype, shape,
byte offset into the payload).  Supported dtypes: f64, f32, i8; i8 tensors
are dequantized on load using the weight scale recorded for their layer.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .detdb import DetHeadConfig, DetModel
from .nnblocks import BackboneConfig
from .numcore import Tensor
from .rectify import ClsModel
from .reccrnn import RecHeadConfig, RecModel
from .slim import PrunePlan, QuantRecord

MAGIC = b"POCR"
VERSION = 1

_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4"), "i8": np.dtype("i1")}


class BundleError(ValueError):
    """Raised for malformed, truncated, or incompatible bundle files."""


def _manifest_blob(manifest: dict) -> bytes:
    return json.dumps(manifest, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def manifest_bytes(tensors: dict, precision: str = "f64") -> int:
    """Byte size of a minimal manifest for the given tensor dict."""
    table, offset = [], 0
    for name in sorted(tensors):
        arr = tensors[name]
        table.append({"name": name, "dtype": precision,
                      "shape": list(arr.shape), "offset": offset})
        offset += arr.size * _DTYPES[precision].itemsize
    blob = _manifest_blob({"tensors": table})
    return len(MAGIC) + 4 + 8 + len(blob) + 4


def save_bundle(path: str, manifest: dict, tensors: dict,
                dtypes: dict = None) -> None:
    """Write tensors plus manifest; ``dtypes`` maps tensor name -> dtype key
    (default f64).  The tensor table is (re)generated here.
    """
    dtypes = dtypes or {}
    table = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        key = dtypes.get(name, "f64")
        raw = arr.astype(_DTYPES[key]).tobytes(order="C")
        table.append({"name": name, "dtype": key,
                      "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(manifest)
    manifest["tensors"] = table
    blob = _manifest_blob(manifest)
    payload = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_bundle(path: str) -> tuple:
    """Read (manifest, tensors).  i8 tensors are returned raw (int8); use
    load_model for scale-aware reconstruction.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 8 + 4:
        raise BundleError(f"bundle truncated: {path} ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise BundleError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version = struct.unpack_from("<I", data, 4)[0]
    if version != VERSION:
        raise BundleError(f"unsupported bundle version {version}, "
                          f"this reader handles {VERSION}")
    mlen = struct.unpack_from("<Q", data, 8)[0]
    header = 16
    if header + mlen + 4 > len(data):
        raise BundleError(f"bundle truncated: manifest of {mlen} bytes "
                          f"does not fit in {path}")
    try:
        manifest = json.loads(data[header:header + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise BundleError(f"unreadable manifest in {path}: {exc}") from exc
    payload = data[header + mlen:-4]
    crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise BundleError(f"payload checksum mismatch in {path}")
    tensors = {}
    for entry in manifest.get("tensors", []):
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + count * dt.itemsize
        if end > len(payload):
            raise BundleError(
                f"tensor {entry['name']!r} extends past the payload")
        arr = np.frombuffer(payload, dtype=dt, count=count,
                            offset=entry["offset"]).reshape(shape)
        tensors[entry["name"]] = arr
    return manifest, tensors


# ---------------------------------------------------------------------------
# model-level save/load
# ---------------------------------------------------------------------------

_KINDS = ("det", "cls", "rec")


def save_model(path: str, kind: str, model, alphabet: str = "",
               seed: int = 0, quant_records=None, prune_plan=None) -> None:
    """Serialize a pipeline model with enough config to rebuild it.

    With quant_records, weights covered by a record are stored as int8 at
    that record's scale and everything else drops to f32 (inference
    precision); without, everything is stored f64.
    """
    if kind not in _KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    manifest = {
        "kind": kind,
        "alphabet": alphabet,
        "seed": seed,
        "backbone": model.backbone_config.to_dict(),
        "quant_records": [r.to_dict() for r in (quant_records or [])],
        "prune_plan": prune_plan.to_dict() if prune_plan else None,
    }
    if kind == "det":
        manifest["head"] = model.head_config.to_dict()
    elif kind == "rec":
        manifest["head"] = {"seq_dim": model.head_config.seq_dim,
                            "hidden": model.head_config.hidden,
                            "vocab_size": model.head_config.vocab_size}
    tensors = dict(model.state_dict())
    dtypes = {}
    if quant_records:
        by_weight = {r.layer + ".weight": r for r in quant_records
                     if not r.skipped}
        for name in tensors:
            if name in by_weight:
                rec = by_weight[name]
                scale = rec.weight_scale
                levels = 2 ** (rec.bits - 1) - 1
                if scale > 0:
                    q = np.clip(np.round(tensors[name] / scale),
                                -levels, levels)
                    tensors[name] = q
                    dtypes[name] = "i8"
                else:
                    dtypes[name] = "f32"
            else:
                dtypes[name] = "f32"
    save_bundle(path, manifest, tensors, dtypes)


def _rebuild(manifest: dict):
    backbone = BackboneConfig.from_dict(manifest["backbone"])
    kind = manifest["kind"]
    if kind == "det":
        return DetModel(backbone, DetHeadConfig.from_dict(manifest["head"]))
    if kind == "cls":
        return ClsModel(backbone)
    if kind == "rec":
        h = manifest["head"]
        return RecModel(RecHeadConfig(h["seq_dim"], h["hidden"],
                                      h["vocab_size"]), backbone)
    raise BundleError(f"unknown model kind {kind!r} in manifest")


def load_model(path: str):
    """Reconstruct (model, manifest) from a bundle.

    Int8 weights are dequantized with their recorded scales, so a model
    saved after finalize_quantization round-trips bit-exactly.
    """
    manifest, tensors = load_bundle(path)
    for key in ("kind", "backbone"):
        if key not in manifest:
            raise BundleError(f"manifest missing required field {key!r}")
    model = _rebuild(manifest)
    records = [QuantRecord.from_dict(d)
               for d in manifest.get("quant_records", [])]
    scales = {r.layer + ".weight": r.weight_scale for r in records
              if not r.skipped}
    state = {}
    for name, arr in tensors.items():
        if arr.dtype == np.int8:
            if name not in scales:
                raise BundleError(
                    f"int8 tensor {name!r} has no scale in quant_records")
            state[name] = arr.astype(np.float64) * scales[name]
        else:
            state[name] = arr.astype(np.float64)
    expected = set(model.state_dict())
    missing = expected - set(state)
    if missing:
        raise BundleError(f"bundle missing tensors: {sorted(missing)[:5]}")
    model.load_state(state)
    return model, manifest


def load_prune_plan(manifest: dict):
    if manifest.get("prune_plan"):
        return PrunePlan.from_dict(manifest["prune_plan"])
    return None
