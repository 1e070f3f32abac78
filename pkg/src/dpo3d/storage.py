"""Binary containers for scene sets and detector checkpoints.

Scene container (little-endian)::

    b"DPO1" | u32 version | u32 H | u32 W | u32 C | f64 cell_size | u32 n_scenes
    per scene: i64 seed | u32 n_boxes | n_boxes x 7 f64 | H*W*C f32 (row-major)

Generator and shift settings go to a JSON sidecar next to the file
(``<path>.json``). Checkpoints::

    b"DPOW" | u32 version | u32 channels | u32 hidden | u32 n | n f64
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .detector import Params
from .geom3d import Box3D
from .scene_gen import BEVFeature, Scene, ShiftSpec

SCENE_MAGIC = b"DPO1"
PARAMS_MAGIC = b"DPOW"
VERSION = 1

_SCENE_HEADER = struct.Struct("<4sIIIIdI")
_SCENE_ENTRY = struct.Struct("<qI")
_PARAMS_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    """A file does not follow the expected container layout."""


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def write_scenes(path, scenes, meta: Optional[dict] = None) -> None:
    if not scenes:
        raise ValueError("nothing to write")
    H, W, C = scenes[0].bev.values.shape
    cs = scenes[0].bev.cell_size
    chunks = [_SCENE_HEADER.pack(SCENE_MAGIC, VERSION, H, W, C, cs, len(scenes))]
    for s in scenes:
        if s.bev.values.shape != (H, W, C) or s.bev.cell_size != cs:
            raise ValueError("all scenes in a container must share grid geometry")
        boxes = np.array([b.as_array() for b in s.gt_boxes], dtype="<f8").reshape(-1, 7)
        chunks.append(_SCENE_ENTRY.pack(int(s.seed), len(boxes)))
        chunks.append(boxes.tobytes())
        chunks.append(np.ascontiguousarray(s.bev.values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))
    side = dict(meta or {})
    side.setdefault("shifts", [None if s.shift_applied is None else asdict(s.shift_applied)
                               for s in scenes])
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def read_scenes(path) -> tuple[list[Scene], dict]:
    """Load a scene container; returns (scenes, sidecar dict or {})."""
    data = Path(path).read_bytes()
    if len(data) < _SCENE_HEADER.size:
        raise FormatError("truncated header")
    magic, version, H, W, C, cs, n = _SCENE_HEADER.unpack_from(data, 0)
    if magic != SCENE_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    side_p = sidecar_path(path)
    meta = json.loads(side_p.read_text()) if side_p.exists() else {}
    shifts = meta.get("shifts") or [None] * n
    off = _SCENE_HEADER.size
    grid_bytes = H * W * C * 4
    scenes = []
    for k in range(n):
        if off + _SCENE_ENTRY.size > len(data):
            raise FormatError(f"truncated at scene {k}")
        seed, nb = _SCENE_ENTRY.unpack_from(data, off)
        off += _SCENE_ENTRY.size
        end = off + nb * 56 + grid_bytes
        if end > len(data):
            raise FormatError(f"truncated at scene {k}")
        boxes = np.frombuffer(data, dtype="<f8", count=nb * 7, offset=off).reshape(nb, 7)
        off += nb * 56
        values = np.frombuffer(data, dtype="<f4", count=H * W * C, offset=off)
        off += grid_bytes
        shift = shifts[k] if k < len(shifts) else None
        scenes.append(Scene(
            gt_boxes=tuple(Box3D.from_array(b) for b in boxes),
            bev=BEVFeature(values.reshape(H, W, C).astype(np.float32), cs),
            shift_applied=None if shift is None else ShiftSpec(**shift),
            seed=int(seed),
        ))
    if off != len(data):
        raise FormatError("trailing bytes after last scene")
    return scenes, meta


def write_params(path, params: Params) -> None:
    vec = np.ascontiguousarray(params.vector, dtype="<f8")
    head = _PARAMS_HEADER.pack(PARAMS_MAGIC, VERSION, params.channels, params.hidden, vec.size)
    Path(path).write_bytes(head + vec.tobytes())


def read_params(path) -> Params:
    data = Path(path).read_bytes()
    if len(data) < _PARAMS_HEADER.size:
        raise FormatError("truncated header")
    magic, version, channels, hidden, n = _PARAMS_HEADER.unpack_from(data, 0)
    if magic != PARAMS_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if n != Params.size(channels, hidden):
        raise FormatError("parameter count does not match the header dims")
    if len(data) != _PARAMS_HEADER.size + 8 * n:
        raise FormatError("payload length mismatch")
    vec = np.frombuffer(data, dtype="<f8", offset=_PARAMS_HEADER.size).copy()
    return Params(vec, channels, hidden)
