"""The .svol volume container: a 3D scalar field with voxel spacing.

Format (little-endian, row-major, W fastest):

    SVOL 1\n
    dims D H W\n
    spacing dz dy dx\n
    dtype f32le\n
    \n
    <D*H*W float32 values>

Spacing values are written with repr(), which round-trips float64 exactly,
so save followed by load reproduces a volume bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, validate_shape


class VolumeFormatError(ValueError):
    """Malformed header, truncated payload, or invalid dimensions."""


@dataclass
class Volume:
    """Normalized intensities [D, H, W] plus mm-per-voxel spacing (dz, dy, dx)."""

    data: Tensor
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.data.shape) != 3:
            raise ValueError(f"volume data must be [D, H, W], got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def save_volume(volume: Volume, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_volume(volume))


def serialize_volume(volume: Volume) -> bytes:
    d, h, w = volume.shape
    dz, dy, dx = volume.spacing
    header = (
        f"SVOL 1\n"
        f"dims {d} {h} {w}\n"
        f"spacing {dz!r} {dy!r} {dx!r}\n"
        f"dtype f32le\n"
        f"\n"
    )
    return header.encode("ascii") + volume.data.data.astype("<f4").tobytes()


def load_volume(path) -> Volume:
    with open(path, "rb") as fh:
        return deserialize_volume(fh.read())


def _header_fields(line: bytes, name: str, count: int, lineno: int) -> list[str]:
    try:
        parts = line.decode("ascii").split()
    except UnicodeDecodeError as err:
        raise VolumeFormatError(f"header line {lineno} is not ASCII") from err
    if len(parts) != count + 1 or parts[0] != name:
        raise VolumeFormatError(
            f"header line {lineno}: expected '{name}' with {count} values, got {line!r}"
        )
    return parts[1:]


def deserialize_volume(buf: bytes) -> Volume:
    lines = buf.split(b"\n", 5)
    if len(lines) < 6:
        raise VolumeFormatError("truncated header (expected 5 header lines)")
    if lines[0] != b"SVOL 1":
        raise VolumeFormatError(f"bad magic line {lines[0]!r} (expected 'SVOL 1')")
    dims_s = _header_fields(lines[1], "dims", 3, 2)
    try:
        dims = tuple(int(v) for v in dims_s)
    except ValueError as err:
        raise VolumeFormatError(f"non-integer dims {dims_s}") from err
    if min(dims) < 1:
        raise VolumeFormatError(f"dims must be >= 1, got {dims}")
    try:
        validate_shape(dims)
    except ValueError as err:
        raise VolumeFormatError(str(err)) from err
    spacing_s = _header_fields(lines[2], "spacing", 3, 3)
    try:
        spacing = tuple(float(v) for v in spacing_s)
    except ValueError as err:
        raise VolumeFormatError(f"non-numeric spacing {spacing_s}") from err
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise VolumeFormatError(f"spacing must be positive and finite, got {spacing}")
    (dtype_s,) = _header_fields(lines[3], "dtype", 1, 4)
    if dtype_s != "f32le":
        raise VolumeFormatError(f"unsupported dtype {dtype_s!r} (only f32le)")
    if lines[4] != b"":
        raise VolumeFormatError("missing blank line between header and payload")
    payload = lines[5]
    expected = dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload is {len(payload)} bytes, expected {expected} for dims {dims}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(dims)
    return Volume(Tensor(data.copy()), spacing)
