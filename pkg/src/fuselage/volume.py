"""Volume containers, file I/O and isotropic resampling.

Volumes are stored as 3D numpy arrays indexed ``[i, j, k]`` (x, y, z).  The
linear storage order is x-fastest, which is numpy's Fortran order for an
array of shape ``(nx, ny, nz)``; :func:`linear_index` gives the mapping.
Arrays are made read-only on construction so a volume can be shared between
workers without copying.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import nibabel as nib
import numpy as np
from scipy import ndimage


class VolumeError(ValueError):
    """Invalid volume, grid mismatch or unreadable file."""


_LABEL_DTYPES = (np.uint8, np.int16, np.int32)
_SCALAR_DTYPES = (np.float32, np.float64)
_RAW_DTYPES = {
    "uint8": np.uint8,
    "int16": np.int16,
    "int32": np.int32,
    "float32": np.float32,
    "float64": np.float64,
}


@dataclass(frozen=True)
class GridMeta:
    """Voxel grid: dims, spacing (mm) and origin (mm, center of voxel 0)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise VolumeError("grid meta must be three-dimensional")
        if min(dims) < 1:
            raise VolumeError(f"all dims must be >= 1, got {dims}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise VolumeError(f"all spacings must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def affine(self) -> np.ndarray:
        aff = np.diag([*self.spacing, 1.0])
        aff[:3, 3] = self.origin
        return aff

    def same_grid(self, other: "GridMeta") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-6)
        )


def linear_index(meta: GridMeta, i: int, j: int, k: int) -> int:
    """x-fastest linear index of voxel (i, j, k)."""
    nx, ny, _ = meta.dims
    return i + nx * (j + ny * k)


def _frozen(data: np.ndarray) -> np.ndarray:
    data = np.array(data, copy=True)
    data.flags.writeable = False
    return data


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.meta.dims:
            raise VolumeError(f"data shape {data.shape} != dims {self.meta.dims}")
        if data.dtype not in _SCALAR_DTYPES:
            data = data.astype(np.float64)
        if not np.all(np.isfinite(data)):
            raise VolumeError("scalar volume contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))

    def __eq__(self, other):
        return (
            isinstance(other, ScalarVolume)
            and self.meta == other.meta
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    def with_data(self, data: np.ndarray) -> "ScalarVolume":
        return ScalarVolume(self.meta, data)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    meta: GridMeta
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.meta.dims:
            raise VolumeError(f"data shape {data.shape} != dims {self.meta.dims}")
        if data.dtype.kind not in "iu":
            if data.size and not np.array_equal(data, np.round(data)):
                raise VolumeError("label volume must hold integer values")
            data = data.astype(np.int32)
        if data.size and data.min() < 0:
            raise VolumeError("label IDs must be non-negative")
        object.__setattr__(self, "data", _frozen(data.astype(np.int32, copy=False)))

    def __eq__(self, other):
        return (
            isinstance(other, LabelVolume)
            and self.meta == other.meta
            and np.array_equal(self.data, other.data)
        )

    def labels(self) -> list[int]:
        return [int(v) for v in np.unique(self.data)]

    def with_data(self, data: np.ndarray) -> "LabelVolume":
        return LabelVolume(self.meta, data)


Volume = Union[ScalarVolume, LabelVolume]


def check_same_grid(*vols) -> GridMeta:
    """Raise :class:`VolumeError` unless every volume shares one grid."""
    metas = [v if isinstance(v, GridMeta) else v.meta for v in vols]
    for m in metas[1:]:
        if not metas[0].same_grid(m):
            raise VolumeError(f"grid mismatch: {metas[0]} vs {m}")
    return metas[0]


# ----------------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------------


def _label_storage_dtype(data: np.ndarray):
    hi = int(data.max()) if data.size else 0
    for dt in _LABEL_DTYPES:
        if hi <= np.iinfo(dt).max:
            return dt
    raise VolumeError(f"label ID {hi} exceeds int32")


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(".nii") or path.name.endswith(".nii.gz")


def write_volume(vol: Volume, path) -> None:
    """Write ``vol`` as NIfTI-1 (``.nii``/``.nii.gz``) or raw + JSON sidecar.

    Any other suffix is written as a little-endian raw payload with a
    ``<path>.json`` sidecar holding dims, spacing, origin and dtype.
    """
    path = Path(path)
    meta = vol.meta
    GridMeta(meta.dims, meta.spacing, meta.origin)  # re-validate
    if isinstance(vol, LabelVolume):
        data = vol.data.astype(_label_storage_dtype(vol.data))
        kind = "label"
    else:
        data = vol.data
        kind = "scalar"
    try:
        if _is_nifti(path):
            img = nib.Nifti1Image(data, meta.affine())
            img.header.set_data_dtype(data.dtype)
            img.header.set_zooms(meta.spacing)
            img.header["scl_slope"] = 1.0
            img.header["scl_inter"] = 0.0
            img.header["intent_name"] = kind.encode()
            img.set_qform(meta.affine(), code=1)
            img.set_sform(meta.affine(), code=1)
            nib.save(img, str(path))
        else:
            payload = data.astype(data.dtype.newbyteorder("<")).tobytes(order="F")
            path.write_bytes(payload)
            sidecar = {
                "dims": list(meta.dims),
                "spacing": list(meta.spacing),
                "origin": list(meta.origin),
                "dtype": data.dtype.name,
                "kind": kind,
            }
            Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
    except OSError as exc:
        raise VolumeError(f"cannot write {path}: {exc}") from exc


def _build(meta: GridMeta, data: np.ndarray, kind: str | None) -> Volume:
    if kind is None:
        kind = "label" if data.dtype.kind in "iu" else "scalar"
    if kind == "label":
        return LabelVolume(meta, data)
    return ScalarVolume(meta, data)


def read_volume(path, kind: str | None = None) -> Volume:
    """Read a volume written by :func:`write_volume` (or any NIfTI-1 subset file).

    ``kind`` forces ``"label"`` or ``"scalar"``; by default integer payloads
    become :class:`LabelVolume` and float payloads :class:`ScalarVolume`.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"no such file: {path}")
    if _is_nifti(path):
        return _read_nifti(path, kind)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise VolumeError(f"{path}: not NIfTI and no JSON sidecar")
    try:
        side = json.loads(sidecar_path.read_text())
        meta = GridMeta(tuple(side["dims"]), tuple(side["spacing"]), tuple(side["origin"]))
        dtype = np.dtype(_RAW_DTYPES[side["dtype"]]).newbyteorder("<")
    except (KeyError, json.JSONDecodeError) as exc:
        raise VolumeError(f"bad sidecar {sidecar_path}: {exc}") from exc
    raw = path.read_bytes()
    if len(raw) != meta.size * dtype.itemsize:
        raise VolumeError(
            f"{path}: payload has {len(raw)} bytes, header implies {meta.size * dtype.itemsize}"
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(meta.dims, order="F")
    data = data.astype(dtype.newbyteorder("="))
    return _build(meta, data, kind or side.get("kind"))


def _read_nifti(path: Path, kind: str | None) -> Volume:
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types
        raise VolumeError(f"cannot read {path}: {exc}") from exc
    hdr = img.header
    if hdr["dim"][0] != 3 and not (hdr["dim"][0] == 4 and hdr["dim"][4] == 1):
        raise VolumeError(f"{path}: expected a 3D volume, dim[0]={hdr['dim'][0]}")
    dtype = hdr.get_data_dtype()
    if dtype.type not in (*_LABEL_DTYPES, *_SCALAR_DTYPES):
        raise VolumeError(f"{path}: unsupported datatype {dtype}")
    try:
        raw = np.asarray(img.dataobj.get_unscaled())
    except Exception as exc:
        raise VolumeError(f"{path}: payload does not match header: {exc}") from exc
    raw = raw.reshape(raw.shape[:3])
    slope, inter = hdr.get_slope_inter()
    scaled = slope not in (None, 1.0) or inter not in (None, 0.0)
    if scaled:
        data = raw.astype(np.float64) * (1.0 if slope is None else slope)
        data = data + (0.0 if inter is None else inter)
    else:
        data = raw
    affine = img.affine
    spacing = tuple(float(z) for z in hdr.get_zooms()[:3])
    origin = tuple(float(o) for o in affine[:3, 3])
    meta = GridMeta(tuple(int(d) for d in data.shape), spacing, origin)
    if kind is None:
        intent = bytes(hdr["intent_name"]).rstrip(b"\0").decode(errors="ignore")
        kind = intent if intent in ("label", "scalar") else None
    if kind == "label" and data.dtype.kind == "f":
        data = np.round(data).astype(np.int32)
    return _build(meta, np.ascontiguousarray(data), kind)


# ----------------------------------------------------------------------------
# Resampling
# ----------------------------------------------------------------------------


def resample_isotropic(vol: Volume, target_mm: float = 1.0, mode: str = "trilinear") -> Volume:
    """Resample onto an isotropic grid of spacing ``target_mm``.

    The output grid covers the same physical extent (voxel corners aligned):
    ``dims_out = ceil(dims * spacing / target_mm)``.  ``mode`` is
    ``"trilinear"`` for intensities or ``"nearest"`` (required for labels).
    Samples past the last input voxel center clamp to the edge value.
    """
    if not target_mm > 0:
        raise VolumeError("target spacing must be positive")
    if mode not in ("nearest", "trilinear"):
        raise VolumeError(f"unknown resampling mode {mode!r}")
    if isinstance(vol, LabelVolume) and mode != "nearest":
        raise VolumeError("label volumes must be resampled with mode='nearest'")
    meta = vol.meta
    t = float(target_mm)
    if all(abs(s - t) < 1e-12 for s in meta.spacing):
        return vol
    dims_out = tuple(max(1, math.ceil(d * s / t - 1e-9)) for d, s in zip(meta.dims, meta.spacing))
    origin_out = tuple(o - s / 2 + t / 2 for o, s in zip(meta.origin, meta.spacing))
    out_meta = GridMeta(dims_out, (t, t, t), origin_out)

    # continuous input index of each output voxel center, per axis
    axes = []
    for n_out, n_in, s in zip(dims_out, meta.dims, meta.spacing):
        c = (np.arange(n_out) * t + t / 2 - s / 2) / s
        axes.append(np.clip(c, 0.0, n_in - 1))
    if mode == "nearest":
        idx = [np.clip(np.floor(c + 0.5).astype(np.intp), 0, n - 1) for c, n in zip(axes, meta.dims)]
        data = vol.data[np.ix_(*idx)]
        return type(vol)(out_meta, data)
    coords = np.meshgrid(*axes, indexing="ij")
    src = vol.data.astype(np.float64)
    data = ndimage.map_coordinates(src, coords, order=1, mode="nearest")
    lo, hi = src.min(), src.max()
    return ScalarVolume(out_meta, np.clip(data, lo, hi))
