"""Volume representation, on-disk format, and per-sample preprocessing.

The native format is a raw little-endian float32 payload in depth-major
voxel order plus a JSON sidecar (``<payload path> + ".json"``) holding
shape, voxel spacing, and axis-order annotation. NIfTI files are read
through an optional adapter when nibabel is installed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANONICAL_AXIS_ORDER = "DHW"

# Below this standard deviation a volume is treated as constant; z-scoring
# it would amplify noise or divide by zero, and almost always signals a
# broken upstream preprocessing step.
ZSCORE_STD_FLOOR = 1e-8


class VolumeFormatError(ValueError):
    """Malformed payload, sidecar, or mismatch between the two."""


class DegenerateVolumeError(ValueError):
    """Volume has no intensity variation to normalize."""


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """A 3D scalar field with voxel spacing and axis-order metadata.

    ``data`` is always float32 and C-contiguous, so disk round trips are
    bit-exact. ``axis_order`` names what each axis means; the canonical
    model-facing order is depth-first ("DHW").
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    axis_order: str = CANONICAL_AXIS_ORDER

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if arr.ndim != 3:
            raise VolumeFormatError(f"expected 3D data, got {arr.ndim}D")
        if min(arr.shape) < 1:
            raise VolumeFormatError(f"every axis must have extent >= 1, got {arr.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be three positive values, got {self.spacing}")
        if not np.isfinite(arr).all():
            raise VolumeFormatError("volume contains non-finite values")
        if sorted(self.axis_order) != sorted(CANONICAL_AXIS_ORDER):
            raise VolumeFormatError(f"axis_order must be a permutation of 'DHW', got {self.axis_order!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def _sidecar_path(uri) -> Path:
    return Path(str(uri) + ".json")


def write_volume(v: VolumeGrid, uri) -> None:
    """Persist ``v`` so that read_volume(uri) reproduces it bit-exactly."""
    uri = Path(uri)
    uri.parent.mkdir(parents=True, exist_ok=True)
    payload = v.data.astype("<f4", copy=False).tobytes(order="C")
    uri.write_bytes(payload)
    sidecar = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "axis_order": v.axis_order,
    }
    _sidecar_path(uri).write_text(json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8")


def read_volume(uri) -> VolumeGrid:
    """Load a volume from the native raw format or (optionally) NIfTI."""
    uri = Path(uri)
    if str(uri).endswith(".nii") or str(uri).endswith(".nii.gz"):
        return _read_nifti(uri)
    if not uri.exists():
        raise FileNotFoundError(f"volume payload not found: {uri}")
    sidecar_file = _sidecar_path(uri)
    if not sidecar_file.exists():
        raise FileNotFoundError(f"volume sidecar not found: {sidecar_file}")
    try:
        meta = json.loads(sidecar_file.read_text(encoding="utf-8"))
        shape = tuple(int(n) for n in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
        axis_order = str(meta.get("axis_order", CANONICAL_AXIS_ORDER))
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"malformed sidecar {sidecar_file}: {exc}") from exc
    if len(shape) != 3:
        raise VolumeFormatError(f"sidecar shape must have 3 entries, got {shape}")
    payload = uri.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload length {len(payload)} does not match sidecar shape {shape} ({expected} bytes)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return VolumeGrid(data=data, spacing=spacing, axis_order=axis_order)


def _read_nifti(uri: Path) -> VolumeGrid:
    try:
        import nibabel as nib
    except ImportError as exc:
        raise VolumeFormatError(
            "NIfTI support requires nibabel (pip install brainssl[nifti])"
        ) from exc
    if not uri.exists():
        raise FileNotFoundError(f"volume not found: {uri}")
    img = nib.load(str(uri))
    data = np.asarray(img.get_fdata(), dtype=np.float32)
    if data.ndim != 3:
        raise VolumeFormatError(f"expected a 3D NIfTI volume, got shape {data.shape}")
    zooms = img.header.get_zooms()[:3]
    # NIfTI carries no depth annotation; callers permute via sidecar-style
    # metadata or know their acquisition convention.
    return VolumeGrid(data=data, spacing=tuple(float(z) for z in zooms), axis_order="HWD")


def permute_depth_first(v: VolumeGrid) -> VolumeGrid:
    """Reorder axes so the first dimension is image depth.

    Uses the volume's axis-order annotation; spacing is permuted alongside
    the data and voxel values are untouched.
    """
    order = v.axis_order
    perm = tuple(order.index(a) for a in CANONICAL_AXIS_ORDER)
    data = np.ascontiguousarray(np.transpose(v.data, perm))
    spacing = tuple(v.spacing[i] for i in perm)
    return VolumeGrid(data=data, spacing=spacing, axis_order=CANONICAL_AXIS_ORDER)


def center_crop(v: VolumeGrid, target: tuple[int, int, int]) -> VolumeGrid:
    """Crop a centered window of extent ``target`` (floor offsets for odd remainders)."""
    target = tuple(int(t) for t in target)
    if any(t < 1 for t in target):
        raise ValueError(f"crop target must be >= 1 per axis, got {target}")
    if any(t > s for t, s in zip(target, v.shape)):
        raise ValueError(f"crop target {target} exceeds volume shape {v.shape}")
    offsets = tuple((s - t) // 2 for s, t in zip(v.shape, target))
    sl = tuple(slice(o, o + t) for o, t in zip(offsets, target))
    return VolumeGrid(data=v.data[sl].copy(), spacing=v.spacing, axis_order=v.axis_order)


def zscore_normalize(v: VolumeGrid) -> VolumeGrid:
    """Standardize to zero mean / unit population std over all voxels."""
    data64 = v.data.astype(np.float64)
    mean = data64.mean()
    std = data64.std()
    if std < ZSCORE_STD_FLOOR:
        raise DegenerateVolumeError(f"volume std {std:.3e} below {ZSCORE_STD_FLOOR:.0e}; cannot z-score")
    out = ((data64 - mean) / std).astype(np.float32)
    return VolumeGrid(data=out, spacing=v.spacing, axis_order=v.axis_order)
