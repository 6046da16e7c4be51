"""Multi-channel 3D volumes and the MVOL container.

MVOL layout (little-endian)::

    b"MVOL" | u32 version | u32 channels | u32 m, n, p | f32 spacing x3
    | u16 unit length | unit (UTF-8) | f32 voxels

Voxels are channel-major, and within a channel the first spatial axis
varies fastest.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
MAX_VOXELS = 2**31 - 1
CLINICAL_DIMS = (96, 96, 64)


class VolumeFormatError(ValueError):
    """Malformed MVOL file; ``section`` names the part that failed to parse."""

    def __init__(self, message: str, section: str):
        super().__init__(message)
        self.section = section


@dataclass
class Volume:
    data: np.ndarray  # (channels, m, n, p) float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    unit: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"volume data must be (channels, m, n, p), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite voxels")
        self.data = data
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.unit, dict(self.meta))


def save_volume(v: Volume, path) -> None:
    unit = v.unit.encode("utf-8")
    if len(unit) > 0xFFFF:
        raise ValueError("unit label too long")
    header = MVOL_MAGIC + struct.pack("<I I 3I 3f H", MVOL_VERSION, v.channels, *v.dims, *v.spacing, len(unit))
    # depth-fastest: reverse the spatial axes before a C-order ravel
    payload = np.ascontiguousarray(v.data.transpose(0, 3, 2, 1), dtype="<f4").tobytes()
    Path(path).write_bytes(header + unit + payload)


def _read(raw: bytes, pos: int, n: int, section: str) -> tuple[bytes, int]:
    if pos + n > len(raw):
        raise VolumeFormatError(f"truncated MVOL file: missing {section}", section)
    return raw[pos:pos + n], pos + n


def load_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    magic, pos = _read(raw, 0, 4, "magic")
    if magic != MVOL_MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}, expected {MVOL_MAGIC!r}", "magic")
    head, pos = _read(raw, pos, 4 * 5 + 4 * 3 + 2, "header")
    version, channels, m, n, p, sx, sy, sz, unit_len = struct.unpack("<I I 3I 3f H", head)
    if version != MVOL_VERSION:
        raise VolumeFormatError(f"unsupported MVOL version {version}", "header")
    if min(channels, m, n, p) < 1:
        raise VolumeFormatError(f"non-positive dimension in {(channels, m, n, p)}", "header")
    count = channels * m * n * p
    if count > MAX_VOXELS:
        raise VolumeFormatError(f"dimension overflow: {count} voxels", "header")
    unit, pos = _read(raw, pos, unit_len, "unit label")
    payload, pos = _read(raw, pos, 4 * count, "voxel data")
    if pos != len(raw):
        raise VolumeFormatError(f"{len(raw) - pos} trailing bytes after voxel data", "voxel data")
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, p, n, m).transpose(0, 3, 2, 1)
    return Volume(np.ascontiguousarray(data, dtype=np.float32), (sx, sy, sz), unit.decode("utf-8"))
