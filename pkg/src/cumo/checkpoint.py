"""Binary tensor container used for model checkpoints and cached datasets.

Layout (little-endian)::

    b"CUMO" | u32 version | u32 n_tensors
    n_tensors x ( u16 name_len | name | u8 rank | u8 dtype | rank x u32 dims | raw data )
    u32 meta_len | meta (UTF-8 JSON)
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .data import Dataset
from .model import CuMoModel, build_model
from .moe import DenseMlp, MoeBlock
from .upcycle import UpcycleSpec, scratch_moe

MAGIC = b"CUMO"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4"), 2: np.dtype("<i8")}
TAGS = {v: k for k, v in DTYPES.items()}


class FormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def pack(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in TAGS:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        if not 1 <= arr.ndim <= 255:
            raise ValueError(f"{name}: rank {arr.ndim} not storable")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<BB{arr.ndim}I", arr.ndim, TAGS[dt], *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(body)) + body)
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def unpack(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(blob) < 16:
        raise FormatError(f"file too short ({len(blob)} bytes)", len(blob))
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", 0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}", 4)
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise FormatError("checksum mismatch", len(blob) - 4)
    end = len(blob) - 4
    pos = 8

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > end:
            raise FormatError("truncated header", pos)
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    def read_bytes(n: int) -> bytes:
        nonlocal pos
        if pos + n > end:
            raise FormatError("truncated payload", pos)
        out = blob[pos:pos + n]
        pos += n
        return out

    (count,) = read("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = read("<H")
        name = read_bytes(name_len).decode()
        at = pos
        rank, tag = read("<BB")
        if tag not in DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name!r}", at + 1)
        dims = read(f"<{rank}I")
        dt = DTYPES[tag]
        n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(read_bytes(n), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    (meta_len,) = read("<I")
    meta = json.loads(read_bytes(meta_len).decode())
    if pos != end:
        raise FormatError(f"{end - pos} trailing bytes before checksum", pos)
    return tensors, meta


def _write(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


# models ---------------------------------------------------------------------

def model_to_bytes(model: CuMoModel, extra: dict | None = None) -> bytes:
    from .config import to_jsonable

    meta = {
        "kind": "model",
        "config": to_jsonable(model.config),
        "stages_done": list(model.stages_done),
        "moe_blocks": [{"name": b.name, "num_experts": b.num_experts, "k": b.k} for b in model.moe_blocks()],
    }
    meta.update(extra or {})
    return pack({n: t.data for n, t in model.named_parameters()}, meta)


def save_checkpoint(model: CuMoModel, path, extra: dict | None = None) -> None:
    _write(path, model_to_bytes(model, extra))


def _place_moe(model: CuMoModel, name: str, s: int, k: int) -> None:
    """Give ``model`` an MoE block of the right shape at ``name`` (values overwritten later)."""
    section, _, idx = name.partition(".")
    spec = UpcycleSpec(num_experts=s, top_k=k, init_mode="scratch")
    if section == "connector":
        owner, attr = model, "connector"
    else:
        owner, attr = getattr(model, section).blocks[int(idx)], "mlp"
    cur = getattr(owner, attr)
    if isinstance(cur, MoeBlock) and cur.num_experts == s and cur.k == k:
        return
    dims = cur.dims if isinstance(cur, DenseMlp) else cur.experts[0].dims
    setattr(owner, attr, scratch_moe(dims, spec, 0, name=name))


def model_from_bytes(blob: bytes) -> tuple[CuMoModel, dict]:
    from .config import model_from_dict

    tensors, meta = unpack(blob)
    if meta.get("kind") != "model":
        raise FormatError(f"expected a model checkpoint, found {meta.get('kind')!r}", 0)
    model = build_model(model_from_dict(meta["config"]), 0)
    for b in meta["moe_blocks"]:
        _place_moe(model, b["name"], b["num_experts"], b["k"])
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing, extra = sorted(set(params) - set(tensors)), sorted(set(tensors) - set(params))
        raise FormatError(f"tensor table mismatch: missing {missing[:3]}, unexpected {extra[:3]}", 12)
    for name, p in params.items():
        if tensors[name].shape != p.data.shape:
            raise FormatError(f"{name}: shape {tensors[name].shape} != {p.data.shape}", 12)
        p.data = tensors[name].astype(np.float32)
    model.stages_done = list(meta["stages_done"])
    return model, meta


def load_checkpoint(path) -> CuMoModel:
    return model_from_bytes(Path(path).read_bytes())[0]


def load_checkpoint_meta(path) -> tuple[CuMoModel, dict]:
    return model_from_bytes(Path(path).read_bytes())


# datasets -------------------------------------------------------------------

def save_dataset(ds: Dataset, path, meta: dict | None = None) -> None:
    arrays = {"images": ds.images, "captions": ds.captions, "lengths": ds.lengths, "scene_ids": ds.scene_ids}
    _write(path, pack(arrays, {"kind": "dataset", **(meta or {})}))


def load_dataset(path) -> Dataset:
    tensors, meta = unpack(Path(path).read_bytes())
    if meta.get("kind") != "dataset":
        raise FormatError(f"expected a dataset file, found {meta.get('kind')!r}", 0)
    return Dataset(tensors["images"], tensors["captions"], tensors["lengths"], tensors["scene_ids"])
