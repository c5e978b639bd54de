"""3D volume container and NIfTI-1 single-file I/O.

Only the subset of NIfTI-1 needed for derivative maps is handled: one
3D volume per file (``dim[0]`` of 3, or 4 with a singleton time axis),
optionally gzip-compressed. Orientation fields are ignored.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

PathLike = Union[str, Path]

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
GZIP_PREFIX = b"\x1f\x8b"

# NIfTI datatype code -> numpy type (byte order applied at read time)
DATATYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


class NiftiError(Exception):
    """Base class for NIfTI read/write failures."""


class BadMagic(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedPayload(NiftiError):
    pass


class BadDim(NiftiError):
    pass


class IoFailure(NiftiError, OSError):
    pass


@dataclass(frozen=True)
class Volume3:
    """Immutable 3D grid of float32 voxels indexed ``data[x, y, z]``.

    Non-finite values are rejected; readers are expected to clean them.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Volume3 needs a 3D array with positive dims, got {arr.shape}")
        arr = np.array(arr, dtype=np.float32, copy=True)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Volume3 voxels must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxels(self) -> np.ndarray:
        """Flat voxel array, x varying fastest."""
        return self.data.ravel(order="F")

    @classmethod
    def from_voxels(cls, shape, voxels) -> "Volume3":
        shape = tuple(int(n) for n in shape)
        flat = np.asarray(voxels, dtype=np.float32)
        if flat.size != int(np.prod(shape)):
            raise ValueError(f"{flat.size} voxels do not fill shape {shape}")
        return cls(flat.reshape(shape, order="F"))

    @classmethod
    def zeros(cls, shape) -> "Volume3":
        return cls(np.zeros(shape, dtype=np.float32))

    def __eq__(self, other):
        if not isinstance(other, Volume3):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True)
class NiftiMeta:
    datatype: int
    dim: Tuple[int, ...]
    voxel_sizes: Tuple[float, float, float]
    scl_slope: float
    scl_inter: float
    magic: bytes
    vox_offset: float = float(VOX_OFFSET)
    byteorder: str = "<"


def minmax(vol: Volume3) -> Tuple[float, float]:
    return float(vol.data.min()), float(vol.data.max())


def _read_bytes(path: PathLike) -> bytes:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:2] == GZIP_PREFIX:
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedPayload(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def parse_header(raw: bytes) -> NiftiMeta:
    """Decode the fields of a NIfTI-1 header that the reader relies on."""
    if len(raw) < HEADER_SIZE:
        raise TruncatedPayload(f"header is {len(raw)} bytes, need {HEADER_SIZE}")
    if raw[344:348] != MAGIC:
        raise BadMagic(f"magic {raw[344:348]!r} is not {MAGIC!r}")

    bo = "<"
    dim0 = struct.unpack_from("<h", raw, 40)[0]
    if not 1 <= dim0 <= 7:
        bo = ">"
    dim = struct.unpack_from(bo + "8h", raw, 40)
    if dim[0] not in (3, 4):
        raise BadDim(f"dim[0]={dim[0]}, only 3D volumes are supported")
    if dim[0] == 4 and dim[4] != 1:
        raise BadDim(f"4D file with {dim[4]} time points")
    if min(dim[1:4]) < 1:
        raise BadDim(f"non-positive spatial dims {dim[1:4]}")

    datatype = struct.unpack_from(bo + "h", raw, 70)[0]
    pixdim = struct.unpack_from(bo + "8f", raw, 76)
    vox_offset, slope, inter = struct.unpack_from(bo + "3f", raw, 108)
    return NiftiMeta(
        datatype=datatype,
        dim=tuple(dim),
        voxel_sizes=tuple(float(p) for p in pixdim[1:4]),
        scl_slope=float(slope),
        scl_inter=float(inter),
        magic=raw[344:348],
        vox_offset=float(vox_offset),
        byteorder=bo,
    )


def read_nifti(path: PathLike) -> Tuple[Volume3, NiftiMeta]:
    """Load a single-file NIfTI-1 volume as float32.

    Intensity scaling is applied when ``scl_slope`` is non-zero, and any
    NaN/Inf voxel (before or after scaling) becomes 0.0.

    Raises:
        BadMagic, BadDim, UnsupportedDatatype, TruncatedPayload, IoFailure
    """
    raw = _read_bytes(path)
    meta = parse_header(raw)
    if meta.datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {meta.datatype}")

    shape = tuple(int(n) for n in meta.dim[1:4])
    count = shape[0] * shape[1] * shape[2]
    dtype = np.dtype(DATATYPES[meta.datatype]).newbyteorder(meta.byteorder)
    offset = int(meta.vox_offset)
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise TruncatedPayload(f"{path}: payload has {len(raw) - offset} bytes, header promises {need - offset}")

    values = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    slope, inter = meta.scl_slope, meta.scl_inter
    if slope != 0 and np.isfinite(slope) and not (slope == 1.0 and inter == 0.0):
        values = values.astype(np.float64) * slope + inter
    values = values.astype(np.float32)
    values[~np.isfinite(values)] = 0.0
    return Volume3.from_voxels(shape, values), meta


def build_header(shape, voxel_sizes=(1.0, 1.0, 1.0)) -> bytes:
    """Return the 352-byte float32 header block (header + empty extension flag)."""
    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 16, 32)
    struct.pack_into("<8f", hdr, 76, 1.0, *voxel_sizes, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    hdr[344:348] = MAGIC
    return bytes(hdr)


def write_nifti(vol: Volume3, path: PathLike, gzip: bool = False, voxel_sizes=(1.0, 1.0, 1.0)) -> None:
    """Write ``vol`` as little-endian float32 NIfTI-1, optionally gzipped.

    The gzip stream carries no timestamp, so identical volumes give
    byte-identical files.
    """
    payload = build_header(vol.shape, voxel_sizes) + vol.voxels.astype("<f4").tobytes()
    if gzip:
        payload = _gzip_compress(payload)
    try:
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _gzip_compress(data: bytes) -> bytes:
    return gzip.compress(data, compresslevel=6, mtime=0)
