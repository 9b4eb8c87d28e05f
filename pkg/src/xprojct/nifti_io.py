"""Minimal NIFTI-1 single-file reader/writer (.nii and .nii.gz).

Only the pieces needed for CT interchange are handled: int16, uint16 and
float32 voxels, scl_slope/scl_inter rescaling, and qform/sform orientation
reduced to signed axis codes.
"""
from __future__ import annotations

import gzip
import io
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from ._io import atomic_write_bytes
from .errors import (
    DimensionalityError,
    NiftiParseError,
    PreconditionError,
    UnsupportedFormatError,
)
from .volume import CtVolume, validate_axes

log = logging.getLogger(__name__)

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte extension flag, no extensions

DT_INT16 = 4
DT_FLOAT32 = 16
DT_UINT16 = 512
_DTYPES = {DT_INT16: "i2", DT_FLOAT32: "f4", DT_UINT16: "u2"}
_DTYPE_NAMES = {"int16": DT_INT16, "float32": DT_FLOAT32, "uint16": DT_UINT16}

_GZIP_MAGIC = b"\x1f\x8b"
_OBLIQUE_TOL = 1e-3

# world axes of the NIFTI frame point toward R, A, S
_WORLD_POS = "RAS"
_WORLD_NEG = "LPI"


@dataclass(frozen=True)
class NiftiHeader:
    dims: Tuple[int, ...]
    pixdim: Tuple[float, ...]
    datatype_code: int
    scl_slope: float
    scl_inter: float
    orientation: str
    vox_offset: int
    affine: np.ndarray
    qform_code: int = 0
    sform_code: int = 0
    oblique: bool = False


def _quatern_to_rotation(b: float, c: float, d: float) -> np.ndarray:
    a = 1.0 - (b * b + c * c + d * d)
    if a < 1e-7:
        a = 1.0 / math.sqrt(b * b + c * c + d * d)
        b, c, d = a * b, a * c, a * d
        a = 0.0
    else:
        a = math.sqrt(a)
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def _rotation_to_quatern(r: np.ndarray) -> Tuple[float, float, float]:
    r11, r12, r13 = r[0]
    r21, r22, r23 = r[1]
    r31, r32, r33 = r[2]
    a = r11 + r22 + r33 + 1.0
    if a > 0.5:
        a = 0.5 * math.sqrt(a)
        b = 0.25 * (r32 - r23) / a
        c = 0.25 * (r13 - r31) / a
        d = 0.25 * (r21 - r12) / a
    else:
        xd = 1.0 + r11 - (r22 + r33)
        yd = 1.0 + r22 - (r11 + r33)
        zd = 1.0 + r33 - (r11 + r22)
        if xd > 1.0:
            b = 0.5 * math.sqrt(xd)
            c = 0.25 * (r12 + r21) / b
            d = 0.25 * (r13 + r31) / b
            a = 0.25 * (r32 - r23) / b
        elif yd > 1.0:
            c = 0.5 * math.sqrt(yd)
            b = 0.25 * (r12 + r21) / c
            d = 0.25 * (r23 + r32) / c
            a = 0.25 * (r13 - r31) / c
        else:
            d = 0.5 * math.sqrt(zd)
            b = 0.25 * (r13 + r31) / d
            c = 0.25 * (r23 + r32) / d
            a = 0.25 * (r21 - r12) / d
        if a < 0.0:
            b, c, d = -b, -c, -d
    return b, c, d


def affine_to_axcodes(affine: np.ndarray) -> Tuple[str, bool]:
    """Nearest signed axis permutation of the affine's rotation part.

    Returns the three-letter code and whether the affine is oblique (any
    column deviates from its strongest world axis by more than a small angle,
    or two columns collapse onto the same world axis).
    """
    rot = np.asarray(affine, dtype=np.float64)[:3, :3]
    codes = []
    used = set()
    oblique = False
    for j in range(3):
        col = rot[:, j]
        norm = np.linalg.norm(col)
        if norm == 0:
            return "RAS", True
        k = int(np.argmax(np.abs(col)))
        if abs(col[k]) / norm < math.cos(_OBLIQUE_TOL):
            oblique = True
        if k in used:
            return "RAS", True
        used.add(k)
        codes.append(_WORLD_POS[k] if col[k] > 0 else _WORLD_NEG[k])
    return "".join(codes), oblique


def axcodes_to_affine(axes: str, spacing) -> np.ndarray:
    validate_axes(axes)
    aff = np.eye(4)
    aff[:3, :3] = 0.0
    for j, letter in enumerate(axes.upper()):
        if letter in _WORLD_POS:
            aff[_WORLD_POS.index(letter), j] = spacing[j]
        else:
            aff[_WORLD_NEG.index(letter), j] = -spacing[j]
    return aff


def _decompress(raw: bytes) -> bytes:
    if raw[:2] == _GZIP_MAGIC:
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiParseError(f"corrupt gzip stream: {exc}") from exc
    return raw


def parse_header(buf: bytes) -> Tuple[NiftiHeader, str]:
    """Parse the fixed 348-byte header; returns the header and the byte order."""
    if len(buf) < HEADER_SIZE:
        raise NiftiParseError(f"file too short for a NIFTI-1 header ({len(buf)} bytes)")
    for endian in ("<", ">"):
        if struct.unpack_from(endian + "i", buf, 0)[0] == HEADER_SIZE:
            break
    else:
        raise NiftiParseError("sizeof_hdr is not 348 in either byte order")
    magic = buf[344:348]
    if magic == b"ni1\x00":
        raise UnsupportedFormatError("two-file NIFTI (.hdr/.img) is not supported")
    if magic != b"n+1\x00":
        raise NiftiParseError(f"bad NIFTI-1 magic {magic!r}")

    dim = struct.unpack_from(endian + "8h", buf, 40)
    datatype = struct.unpack_from(endian + "h", buf, 70)[0]
    pixdim = struct.unpack_from(endian + "8f", buf, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(endian + "3f", buf, 108)
    qform_code, sform_code = struct.unpack_from(endian + "2h", buf, 252)
    qb, qc, qd, qx, qy, qz = struct.unpack_from(endian + "6f", buf, 256)
    srow = np.array(struct.unpack_from(endian + "12f", buf, 280), dtype=np.float64).reshape(3, 4)

    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiParseError(f"dim[0]={ndim} outside 1..7")
    dims = tuple(int(d) for d in dim[1 : ndim + 1])
    if any(d < 1 for d in dims):
        raise NiftiParseError(f"non-positive extent in dims {dims}")
    if any(d > 1 for d in dims[3:]):
        raise DimensionalityError(f"only single-volume files are supported, got dims {dims}")
    if datatype not in _DTYPES:
        raise UnsupportedFormatError(f"unsupported NIFTI datatype code {datatype}")
    if vox_offset < HEADER_SIZE:
        raise NiftiParseError(f"vox_offset {vox_offset} < 348")

    spatial = (dims + (1, 1, 1))[:3]
    spacing = tuple(abs(float(p)) if p != 0 else 1.0 for p in pixdim[1:4])

    if qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rot = _quatern_to_rotation(qb, qc, qd)
        affine = np.eye(4)
        affine[:3, :3] = rot * np.array([spacing[0], spacing[1], spacing[2] * qfac])
        affine[:3, 3] = (qx, qy, qz)
    elif sform_code > 0:
        affine = np.eye(4)
        affine[:3, :] = srow
    else:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    codes, oblique = affine_to_axcodes(affine)

    header = NiftiHeader(
        dims=spatial + tuple(dims[3:]),
        pixdim=tuple(float(p) for p in pixdim),
        datatype_code=int(datatype),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        orientation=codes,
        vox_offset=int(vox_offset),
        affine=affine,
        qform_code=int(qform_code),
        sform_code=int(sform_code),
        oblique=oblique,
    )
    return header, endian


def read_nifti(path) -> Tuple[CtVolume, NiftiHeader]:
    """Read a NIFTI-1 volume and convert stored values to Hounsfield units."""
    path = Path(path)
    buf = _decompress(path.read_bytes())
    header, endian = parse_header(buf)
    nx, ny, nz = header.dims[:3]
    dtype = np.dtype(endian + _DTYPES[header.datatype_code])
    count = nx * ny * nz
    need = header.vox_offset + count * dtype.itemsize
    if len(buf) < need:
        raise NiftiParseError(f"truncated voxel data: need {need} bytes, have {len(buf)}")
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=header.vox_offset)
    raw = raw.reshape((nx, ny, nz), order="F")

    slope, inter = header.scl_slope, header.scl_inter
    if slope != 0 and math.isfinite(slope):
        if slope == 1.0 and inter == 0.0:
            hu = raw.astype(np.float32)
        else:
            inter = inter if math.isfinite(inter) else 0.0
            hu = (raw.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        hu = raw.astype(np.float32)
    if not np.all(np.isfinite(hu)):
        raise NiftiParseError("volume contains non-finite voxel values")
    if header.oblique:
        log.warning("%s: oblique affine, orientation reduced to nearest axes %s", path, header.orientation)

    vol = CtVolume(
        voxels=np.ascontiguousarray(hu),
        spacing=tuple(abs(p) if p != 0 else 1.0 for p in header.pixdim[1:4]),
        axes=header.orientation,
        provenance=str(path),
        oblique=header.oblique,
    )
    return vol, header


def encode_nifti(vol: CtVolume, datatype: str = "float32") -> bytes:
    """Serialize a volume to uncompressed NIFTI-1 bytes."""
    if vol.size == 0:
        raise PreconditionError("cannot write an empty volume")
    if datatype not in _DTYPE_NAMES:
        raise UnsupportedFormatError(f"cannot write datatype {datatype!r}")
    code = _DTYPE_NAMES[datatype]
    dtype = np.dtype("<" + _DTYPES[code])
    data = vol.voxels
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        rounded = np.rint(data)
        if rounded.min() < info.min or rounded.max() > info.max:
            raise PreconditionError(f"voxel range does not fit {datatype}")
        data = rounded
    payload = np.asarray(data, dtype=dtype).tobytes(order="F")

    affine = axcodes_to_affine(vol.axes, vol.spacing)
    rot = affine[:3, :3] / np.array(vol.spacing)
    qfac = 1.0
    if np.linalg.det(rot) < 0:
        qfac = -1.0
        rot[:, 2] = -rot[:, 2]
    qb, qc, qd = _rotation_to_quatern(rot)

    hdr = bytearray(VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    nx, ny, nz = vol.shape
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, qfac, *vol.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(VOX_OFFSET), 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: mm
    descrip = vol.provenance.encode("utf-8", "replace")[:79]
    hdr[148 : 148 + len(descrip)] = descrip
    struct.pack_into("<2h", hdr, 252, 1, 1)
    struct.pack_into("<6f", hdr, 256, qb, qc, qd, *affine[:3, 3])
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + payload


def write_nifti(vol: CtVolume, path, datatype: str = "float32") -> None:
    """Write ``vol``; a ``.gz`` suffix selects gzip compression (mtime pinned to 0)."""
    path = Path(path)
    blob = encode_nifti(vol, datatype)
    if path.suffix == ".gz":
        sink = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=sink, mtime=0) as gz:
            gz.write(blob)
        blob = sink.getvalue()
    try:
        atomic_write_bytes(path, blob)
    except OSError as exc:
        raise PreconditionError(f"cannot write {path}: {exc}") from exc


__all__ = [
    "NiftiHeader",
    "affine_to_axcodes",
    "axcodes_to_affine",
    "encode_nifti",
    "parse_header",
    "read_nifti",
    "write_nifti",
]
