"""Loading and saving CT volumes and masks.

Two on-disk formats are supported: NIfTI-1 (``.nii``/``.nii.gz``) and a raw
format made of a JSON header (``<stem>.json``) next to a little-endian,
slice-major binary payload (``<stem>.raw``). In memory the first axis is
always the axial (slice) axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class VolumeIOError(Exception):
    """Base class for volume I/O failures."""


class MissingFileError(VolumeIOError, FileNotFoundError):
    pass


class MalformedHeaderError(VolumeIOError):
    pass


class NotThreeDimensionalError(VolumeIOError):
    pass


class ShapeMismatchError(VolumeIOError, ValueError):
    pass


class UnwritablePathError(VolumeIOError, OSError):
    pass


RAW_SUFFIXES = (".raw", ".json")
NIFTI_SUFFIXES = (".nii", ".nii.gz")


def _identity_affine() -> np.ndarray:
    return np.eye(4)


@dataclass(frozen=True, eq=False)
class CTVolume:
    """Intensity grid of shape (D, H, W) with per-axis spacing in mm.

    ``orientation`` is a 4x4 affine carried opaquely so saved files keep the
    geometry of the source.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: np.ndarray = field(default_factory=_identity_affine)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise NotThreeDimensionalError(f"volume must be 3D, got shape {v.shape}")
        if min(v.shape) < 1:
            raise ValueError(f"empty volume shape {v.shape}")
        v = np.ascontiguousarray(v, dtype=np.float32)
        if not np.isfinite(v).all():
            raise ValueError("volume contains non-finite values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        v.flags.writeable = False
        object.__setattr__(self, "voxels", v)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=np.float64))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray) -> "CTVolume":
        return CTVolume(voxels, self.spacing, self.orientation)


def as_mask(mask, shape: Sequence[int] | None = None) -> np.ndarray:
    """Validate a binary mask and return it as uint8."""
    m = np.asarray(mask)
    if shape is not None and m.shape != tuple(shape):
        raise ShapeMismatchError(f"mask shape {m.shape} does not match {tuple(shape)}")
    if m.dtype != bool and m.size and not np.isin(m, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    return m.astype(np.uint8)


def _stem(path: Path) -> Path:
    name = path.name
    for suf in (".nii.gz", ".nii", ".raw", ".json"):
        if name.endswith(suf):
            return path.with_name(name[: -len(suf)])
    return path


def _is_nifti(path: Path) -> bool:
    return path.name.endswith(NIFTI_SUFFIXES)


def _read_raw(path: Path) -> tuple[np.ndarray, tuple, np.ndarray]:
    stem = _stem(path)
    header_path, payload_path = stem.with_suffix(".json"), stem.with_suffix(".raw")
    if not header_path.exists() or not payload_path.exists():
        raise MissingFileError(f"raw volume needs {header_path} and {payload_path}")
    try:
        header = json.loads(header_path.read_text())
        shape = tuple(int(n) for n in header["shape"])
        dtype = np.dtype(header["dtype"]).newbyteorder("<" if header.get("byte_order", "little") == "little" else ">")
        spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))
        affine = np.asarray(header.get("orientation", _identity_affine()), dtype=np.float64)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"bad raw header {header_path}: {exc}") from exc
    if len(shape) != 3:
        raise NotThreeDimensionalError(f"raw header declares {len(shape)}D shape {shape}")
    if affine.shape != (4, 4):
        raise MalformedHeaderError(f"orientation must be 4x4, got {affine.shape}")
    payload = payload_path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise MalformedHeaderError(f"{payload_path} has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return data, spacing, affine


def _write_raw(path: Path, data: np.ndarray, spacing, affine) -> None:
    stem = _stem(path)
    data = np.ascontiguousarray(data)
    le = data.dtype.newbyteorder("<")
    header = {
        "shape": list(data.shape),
        "spacing": [float(s) for s in spacing],
        "dtype": le.str.lstrip("<>=|"),
        "byte_order": "little",
        "orientation": np.asarray(affine, dtype=np.float64).tolist(),
    }
    stem.with_suffix(".raw").write_bytes(data.astype(le, copy=False).tobytes(order="C"))
    stem.with_suffix(".json").write_text(json.dumps(header, indent=1))


def _read_nifti(path: Path) -> tuple[np.ndarray, tuple, np.ndarray]:
    import nibabel as nib

    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of error types
        raise MalformedHeaderError(f"cannot read NIfTI header of {path}: {exc}") from exc
    if len(img.shape) != 3:
        raise NotThreeDimensionalError(f"NIfTI data must be 3D, got shape {img.shape}")
    img = nib.as_closest_canonical(img)
    # canonical RAS storage is (x, y, z); slice axis goes first
    data = np.asarray(img.dataobj).transpose(2, 1, 0)
    zooms = img.header.get_zooms()[:3]
    spacing = (float(zooms[2]), float(zooms[1]), float(zooms[0]))
    return data, spacing, np.asarray(img.affine, dtype=np.float64)


def _write_nifti(path: Path, data: np.ndarray, spacing, affine) -> None:
    import nibabel as nib

    img = nib.Nifti1Image(np.ascontiguousarray(data.transpose(2, 1, 0)), affine)
    img.header.set_zooms((spacing[2], spacing[1], spacing[0]))
    img.header.set_data_dtype(data.dtype)
    nib.save(img, str(path))


def _read(path) -> tuple[np.ndarray, tuple, np.ndarray]:
    path = Path(path)
    if _is_nifti(path):
        if not path.exists():
            raise MissingFileError(f"no such file: {path}")
        return _read_nifti(path)
    return _read_raw(path)


def _write(path, data, spacing, affine) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if _is_nifti(path):
            _write_nifti(path, data, spacing, affine)
        else:
            _write_raw(path, data, spacing, affine)
    except (OSError, PermissionError) as exc:
        raise UnwritablePathError(f"cannot write {path}: {exc}") from exc


def load_volume(path) -> CTVolume:
    """Load a CT volume from NIfTI or raw format as float32."""
    data, spacing, affine = _read(path)
    data = data.astype(np.float32)
    if not np.isfinite(data).all():
        raise MalformedHeaderError(f"{path} contains non-finite intensities")
    return CTVolume(data, spacing, affine)


def save_volume(volume: CTVolume, path) -> None:
    _write(path, volume.voxels, volume.spacing, volume.orientation)


def load_mask(path) -> np.ndarray:
    data, _, _ = _read(path)
    return as_mask(data)


def save_mask(mask, ref: CTVolume, path) -> None:
    """Write ``mask`` as uint8 using the geometry of ``ref``."""
    m = as_mask(mask, ref.shape)
    _write(path, m, ref.spacing, ref.orientation)


def slices(volume: CTVolume | np.ndarray) -> Iterator[np.ndarray]:
    """Yield the axial slices of ``volume`` in ascending order."""
    voxels = volume.voxels if isinstance(volume, CTVolume) else np.asarray(volume)
    for k in range(voxels.shape[0]):
        yield voxels[k]


def stack(slice_list) -> np.ndarray:
    return np.stack(list(slice_list), axis=0)


def volume_path(directory, name: str, fmt: str = "raw") -> Path:
    suffix = ".nii.gz" if fmt == "nifti" else ".raw"
    return Path(directory) / f"{name}{suffix}"
