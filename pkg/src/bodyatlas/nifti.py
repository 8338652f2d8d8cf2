"""Minimal NIfTI-1 file I/O (.nii and .nii.gz).

Reads uint8/int16/int32/float32/float64 payloads; writes float32 for scalar
volumes and uint8 or int16 for label volumes. The sform is used when valid,
else the qform; if both are absent the grid defaults to identity placement
with a warning. Gzip streams are written with a zeroed mtime so identical
volumes produce byte-identical files.
"""

from __future__ import annotations

import gzip
import struct
import warnings
from pathlib import Path

import numpy as np

from .volume import ImageGrid, LabelVolume, Mask, ScalarVolume


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file."""


_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

_HDR_SIZE = 348
_VOX_OFFSET = 352.0


def _read_bytes(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _quaternion_to_matrix(b: float, c: float, d: float, qfac: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    rot[:, 2] *= -1.0 if qfac < 0 else 1.0
    return rot


def _grid_from_header(h: dict, dims, spacing) -> ImageGrid:
    if h["sform_code"] > 0:
        srow = np.array([h["srow_x"], h["srow_y"], h["srow_z"]])
        mat, origin = srow[:, :3], srow[:, 3]
        sp = np.linalg.norm(mat, axis=0)
        if np.any(sp <= 0):
            raise NiftiError("sform has a zero-length column")
        direction = mat / sp
        spacing = sp
    elif h["qform_code"] > 0:
        qfac = -1.0 if h["pixdim"][0] < 0 else 1.0
        direction = _quaternion_to_matrix(h["quatern_b"], h["quatern_c"], h["quatern_d"], qfac)
        origin = np.array([h["qoffset_x"], h["qoffset_y"], h["qoffset_z"]])
    else:
        warnings.warn("NIfTI file has neither sform nor qform; assuming identity placement")
        direction = np.eye(3)
        origin = np.zeros(3)
    try:
        return ImageGrid(dims=dims, spacing=tuple(spacing), origin=tuple(origin), direction=direction)
    except ValueError as exc:
        raise NiftiError(f"invalid grid in header: {exc}") from exc


def _parse_header(raw: bytes) -> dict:
    if len(raw) < _HDR_SIZE:
        raise NiftiError("file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack("<i", raw[0:4])
    endian = "<"
    if sizeof_hdr != _HDR_SIZE:
        (sizeof_hdr,) = struct.unpack(">i", raw[0:4])
        if sizeof_hdr != _HDR_SIZE:
            raise NiftiError("bad sizeof_hdr; not a NIfTI-1 file")
        endian = ">"
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"bad magic {magic!r}")

    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(endian + "2h", raw[70:74])
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(endian + "f", raw[108:112])
    scl_slope, scl_inter = struct.unpack(endian + "2f", raw[112:120])
    qform_code, sform_code = struct.unpack(endian + "2h", raw[252:256])
    qb, qc, qd, qx, qy, qz = struct.unpack(endian + "6f", raw[256:280])
    srow_x = struct.unpack(endian + "4f", raw[280:296])
    srow_y = struct.unpack(endian + "4f", raw[296:312])
    srow_z = struct.unpack(endian + "4f", raw[312:328])
    return {
        "endian": endian,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset) if vox_offset > 0 else _HDR_SIZE + 4,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern_b": qb,
        "quatern_c": qc,
        "quatern_d": qd,
        "qoffset_x": qx,
        "qoffset_y": qy,
        "qoffset_z": qz,
        "srow_x": srow_x,
        "srow_y": srow_y,
        "srow_z": srow_z,
    }


def _load_array(path) -> tuple[np.ndarray, ImageGrid, dict]:
    path = Path(path)
    raw = _read_bytes(path)
    h = _parse_header(raw)
    ndim = h["dim"][0]
    if ndim < 3 or any(d > 1 for d in h["dim"][4 : ndim + 1]):
        raise NiftiError(f"expected a 3D volume, got dim={h['dim']}")
    dims = tuple(int(d) for d in h["dim"][1:4])
    if h["datatype"] not in _DTYPES:
        raise NiftiError(f"unsupported datatype code {h['datatype']}")
    dtype = np.dtype(_DTYPES[h["datatype"]]).newbyteorder(h["endian"])
    n = int(np.prod(dims))
    start = h["vox_offset"]
    payload = raw[start : start + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise NiftiError("truncated voxel payload")
    data = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F")
    grid = _grid_from_header(h, dims, h["pixdim"][1:4])
    return data, grid, h


def load_scalar(path) -> ScalarVolume:
    """Read a scalar volume; scl_slope/inter are applied when set."""
    data, grid, h = _load_array(path)
    values = np.asarray(data, dtype=np.float64)
    slope, inter = h["scl_slope"], h["scl_inter"]
    if np.isfinite(slope) and slope not in (0.0, 1.0):
        values = values * slope + inter
    elif np.isfinite(inter) and slope == 1.0 and inter != 0.0:
        values = values + inter
    return ScalarVolume(grid, values)


def load_labels(path, label_names: dict[int, str] | None = None) -> LabelVolume:
    data, grid, _ = _load_array(path)
    if not np.issubdtype(data.dtype, np.integer):
        idata = np.round(data)
        if not np.allclose(data, idata):
            raise NiftiError("label file contains non-integer values")
        data = idata.astype(np.int32)
    return LabelVolume(grid, data, label_names or {})


def load_volume(path, kind: str = "scalar"):
    """Load ``path`` as a ``ScalarVolume`` (kind='scalar') or ``LabelVolume``."""
    if kind == "scalar":
        return load_scalar(path)
    if kind == "labels":
        return load_labels(path)
    raise ValueError(f"kind must be 'scalar' or 'labels', got {kind!r}")


def _build_header(grid: ImageGrid, dtype: np.dtype) -> bytes:
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *grid.dims, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, _CODES[np.dtype(dtype)], np.dtype(dtype).itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *grid.spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, _VOX_OFFSET)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope/inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    mat = grid.direction * np.asarray(grid.spacing)
    for row, off in zip(range(3), (280, 296, 312)):
        struct.pack_into("<4f", hdr, off, *mat[row], grid.origin[row])
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def _write(path, grid: ImageGrid, data: np.ndarray):
    path = Path(path)
    body = _build_header(grid, data.dtype) + b"\x00" * 4 + data.tobytes(order="F")
    if path.suffix == ".gz":
        path.write_bytes(gzip.compress(body, mtime=0))
    else:
        path.write_bytes(body)


def save_volume(vol, path):
    """Write a scalar (float32), label (uint8/int16), or mask (uint8) volume."""
    if isinstance(vol, ScalarVolume):
        _write(path, vol.grid, np.asarray(vol.values, dtype=np.float32))
    elif isinstance(vol, LabelVolume):
        hi = int(vol.labels.max(initial=0))
        dtype = np.uint8 if hi < 256 else np.int16
        if hi >= 2**15:
            raise NiftiError(f"label id {hi} exceeds int16 storage range")
        _write(path, vol.grid, np.asarray(vol.labels, dtype=dtype))
    elif isinstance(vol, Mask):
        _write(path, vol.grid, vol.bits.astype(np.uint8))
    else:
        raise TypeError(f"cannot save object of type {type(vol).__name__}")


def save_vector_field(vectors: np.ndarray, grid: ImageGrid, path):
    """Persist a (nx,ny,nz,3) mm vector field as a 4D float32 NIfTI."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if vectors.shape != grid.dims + (3,):
        raise ValueError("vector array shape does not match grid")
    hdr = bytearray(_build_header(grid, np.dtype(np.float32)))
    struct.pack_into("<8h", hdr, 40, 4, *grid.dims, 3, 1, 1, 1)
    body = bytes(hdr) + b"\x00" * 4 + vectors.tobytes(order="F")
    path = Path(path)
    if path.suffix == ".gz":
        path.write_bytes(gzip.compress(body, mtime=0))
    else:
        path.write_bytes(body)


def load_vector_field(path) -> tuple[np.ndarray, ImageGrid]:
    path = Path(path)
    raw = _read_bytes(path)
    h = _parse_header(raw)
    if h["dim"][0] != 4 or h["dim"][4] != 3:
        raise NiftiError("expected a 3-component vector field")
    dims = tuple(int(d) for d in h["dim"][1:4])
    dtype = np.dtype(_DTYPES[h["datatype"]]).newbyteorder(h["endian"])
    n = int(np.prod(dims)) * 3
    start = h["vox_offset"]
    data = np.frombuffer(raw[start : start + n * dtype.itemsize], dtype=dtype)
    if data.size != n:
        raise NiftiError("truncated voxel payload")
    vectors = data.reshape(dims + (3,), order="F").astype(np.float64)
    grid = _grid_from_header(h, dims, h["pixdim"][1:4])
    return vectors, grid
