"""Delta checkpoints: only the customised tensors, overlaid on a rebuilt base.

File layout (``.samed-delta``)::

    b"SMD1" | u32 LE header length | UTF-8 JSON header | NST sections

Section offsets in the header count from the first byte after the header.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nst
from .lora import LoraSpec
from .model import ModelConfig, SamedModel, count_parameters, customize
from .nst import FormatError

MAGIC = b"SMD1"
FORMAT_VERSION = 1


class IncompatibleCheckpoint(ValueError):
    """Delta was produced against a different base."""


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def config_hash(cfg: ModelConfig, lora: LoraSpec | None, base_seed: int, dtype) -> str:
    doc = {"model": cfg.to_dict(), "lora": None if lora is None else lora.to_dict(),
           "base_seed": int(base_seed), "dtype": np.dtype(dtype).name}
    return f"{fnv1a64(canonical_json(doc)):016x}"


def model_hash(model: SamedModel) -> str:
    return config_hash(model.cfg, model.lora, model.seed, model.dtype)


def encode_delta(model: SamedModel, metadata: dict | None = None) -> bytes:
    sections, blobs, offset = [], [], 0
    for name, p in model.trainable_parameters().items():
        blob = nst.encode(p.data)
        sections.append({"name": name, "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": model_hash(model),
        "model_config": model.cfg.to_dict(),
        "lora": None if model.lora is None else model.lora.to_dict(),
        "base_seed": int(model.seed),
        "dtype": model.dtype.name,
        "metadata": dict(metadata or {}),
        "sections": sections,
    }
    hb = canonical_json(header)
    return MAGIC + struct.pack("<I", len(hb)) + hb + b"".join(blobs)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_delta(model: SamedModel, path, metadata: dict | None = None) -> None:
    _atomic_write(Path(path), encode_delta(model, metadata))


def read_delta(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Header and named section arrays, validated structurally."""
    path = Path(path)
    buf = path.read_bytes()
    src = str(path)
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", 0, src)
    if len(buf) < 8:
        raise FormatError("truncated header length", len(buf), src)
    (hlen,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + hlen:
        raise FormatError("truncated JSON header", len(buf), src)
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable JSON header ({e})", 8, src) from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {header.get('format_version')}", 8, src)
    base = 8 + hlen
    arrays = {}
    for sec in header["sections"]:
        start = base + sec["offset"]
        arr, end = nst.decode(buf, start, source=src)
        if end - start != sec["length"]:
            raise FormatError(f"section {sec['name']} length mismatch", start, src)
        arrays[sec["name"]] = arr
    return header, arrays


def load_delta(base: SamedModel, path) -> SamedModel:
    """Rebuild the customised view declared in ``path`` on top of ``base``."""
    header, arrays = read_delta(path)
    mc = header["model_config"]
    cfg = replace(base.cfg, finetune_mode=mc["finetune_mode"], decoder_lora=mc["decoder_lora"])
    lora = None if header["lora"] is None else LoraSpec(**header["lora"])
    expected = config_hash(cfg, lora, base.seed, base.dtype)
    if expected != header["config_hash"]:
        raise IncompatibleCheckpoint(f"config hash mismatch: checkpoint {header['config_hash']}, "
                                     f"base {expected}")
    view = customize(base, lora, cfg=cfg)
    params = view.trainable_parameters()
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise FormatError(f"sections do not match the model: missing {missing}, unexpected {extra}",
                          source=str(path))
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.shape or arr.dtype != p.dtype:
            raise FormatError(f"section {name} is {arr.shape}/{arr.dtype}, model wants "
                              f"{p.shape}/{p.dtype}", source=str(path))
        p.data = arr.copy()
    return view


def switch_view(base: SamedModel, delta=None) -> SamedModel:
    """The plain base for ``delta=None``; otherwise the customised view from that file."""
    return base if delta is None else load_delta(base, delta)


def inspect(path) -> dict:
    header, arrays = read_delta(path)
    sections = [{"name": n, "shape": list(a.shape), "count": int(a.size),
                 "all_zero": bool(not np.any(a))} for n, a in arrays.items()]
    cfg = ModelConfig.from_dict(header["model_config"])
    base = SamedModel(cfg, seed=header["base_seed"], dtype=np.dtype(header["dtype"]))
    total = count_parameters(customize(base, None if header["lora"] is None
                                       else LoraSpec(**header["lora"])))["total"]
    stored = sum(s["count"] for s in sections)
    return {"config_hash": header["config_hash"], "metadata": header["metadata"],
            "sections": sections, "stored": stored, "total": total,
            "fraction": stored / total if total else 0.0, "file_bytes": Path(path).stat().st_size}
