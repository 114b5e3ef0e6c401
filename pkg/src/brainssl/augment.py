"""Seeded stochastic 3D transforms and the pre-training augmentation stacks.

Every transform is pure given an explicit numpy Generator: one uniform
draw decides the probability gate, then parameters are drawn in a fixed
order. Pipelines route each transform through its own named substream so
results never depend on execution order (see rng.SeedStream).

Spatial resampling is trilinear. Resizing clamps at the volume border
(constant inputs stay constant); rotation and affine fill with zeros
outside the source grid and act about the volume center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .rng import SeedStream
from .volume import VolumeGrid

# Geometry reference for scaling the stacks to other volume sizes: the
# crop minima and translation ranges below are defined at this shape and
# scale per axis, so smaller desk-scale grids use proportionally smaller
# windows.
REFERENCE_SHAPE = (150, 192, 192)
SIMCLR_MIN_CROP = (30, 40, 40)
SUPERVISED_MIN_CROP = (90, 115, 115)
SUPERVISED_TRANSLATION = 5.0

PIPELINE_NAMES = ("simclr", "mae_pretrain", "supervised", "none")
TRANSFORM_KINDS = (
    "crop_resize",
    "flip_axial",
    "rotate",
    "affine",
    "shift_intensity",
    "adjust_contrast",
    "gaussian_noise",
)

# Depth is axis 0 of the canonical (D, H, W) grid; flip "along the axial
# axis" reverses it. Kept as one constant in case empirical orientation
# of a dataset differs.
AXIAL_AXIS = 0


class AugmentSpecError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)
    p: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        if self.kind not in TRANSFORM_KINDS:
            raise AugmentSpecError(f"unknown transform kind {self.kind!r}")
        if not (0.0 <= self.p <= 1.0):
            raise AugmentSpecError(f"probability {self.p} outside [0, 1]")
        _VALIDATORS[self.kind](self.params, self.p)


@dataclass(frozen=True)
class AugmentSpec:
    transforms: tuple[TransformSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def __len__(self):
        return len(self.transforms)


@dataclass(frozen=True)
class ViewPair:
    view_a: VolumeGrid
    view_b: VolumeGrid
    source_scan_id: str = ""

    def __post_init__(self):
        if self.view_a.shape != self.view_b.shape:
            raise AugmentSpecError(
                f"views disagree on shape: {self.view_a.shape} vs {self.view_b.shape}"
            )


def _require(cond: bool, message: str):
    if not cond:
        raise AugmentSpecError(message)


def _as_triple(value, name: str, integer=False):
    try:
        items = [value] * 3 if np.isscalar(value) else list(value)
    except TypeError:
        raise AugmentSpecError(f"{name} must be a scalar or 3 values, got {value!r}")
    _require(len(items) == 3, f"{name} must have 3 entries, got {items}")
    return tuple(int(x) if integer else float(x) for x in items)


def _validate_crop(params, p):
    _require(set(params) == {"min_size", "out_size"}, f"crop_resize params must be min_size/out_size, got {sorted(params)}")
    ms = _as_triple(params["min_size"], "min_size", integer=True)
    os_ = _as_triple(params["out_size"], "out_size", integer=True)
    _require(all(m >= 1 for m in ms), f"min_size must be >= 1, got {ms}")
    _require(all(o >= 1 for o in os_), f"out_size must be >= 1, got {os_}")
    _require(p == 1.0, "crop_resize must have p=1.0 to keep the output-shape contract")


def _validate_flip(params, p):
    _require(not params, f"flip_axial takes no params, got {sorted(params)}")


def _validate_rotate(params, p):
    _require(set(params) == {"max_deg"}, f"rotate params must be max_deg, got {sorted(params)}")
    _require(0 < float(params["max_deg"]) <= 180, f"max_deg must be in (0, 180], got {params['max_deg']}")


def _validate_affine(params, p):
    _require(
        set(params) == {"rot_range", "scale_range", "trans_range"},
        f"affine params must be rot_range/scale_range/trans_range, got {sorted(params)}",
    )
    rot = _as_triple(params["rot_range"], "rot_range")
    _require(all(r >= 0 for r in rot), f"rot_range must be >= 0, got {rot}")
    sc = float(params["scale_range"])
    _require(0 <= sc < 1, f"scale_range must be in [0, 1), got {sc}")
    tr = _as_triple(params["trans_range"], "trans_range")
    _require(all(t >= 0 for t in tr), f"trans_range must be >= 0, got {tr}")


def _validate_shift(params, p):
    _require(set(params) == {"offset"}, f"shift_intensity params must be offset, got {sorted(params)}")
    _require(float(params["offset"]) >= 0, f"offset must be >= 0, got {params['offset']}")


def _validate_contrast(params, p):
    _require(set(params) == {"gamma_range"}, f"adjust_contrast params must be gamma_range, got {sorted(params)}")
    lo, hi = (float(x) for x in params["gamma_range"])
    _require(0 < lo <= hi, f"gamma_range must satisfy 0 < lo <= hi, got ({lo}, {hi})")


def _validate_noise(params, p):
    _require(set(params) == {"std"}, f"gaussian_noise params must be std, got {sorted(params)}")
    _require(float(params["std"]) >= 0, f"std must be >= 0, got {params['std']}")


_VALIDATORS = {
    "crop_resize": _validate_crop,
    "flip_axial": _validate_flip,
    "rotate": _validate_rotate,
    "affine": _validate_affine,
    "shift_intensity": _validate_shift,
    "adjust_contrast": _validate_contrast,
    "gaussian_noise": _validate_noise,
}


# ---------------------------------------------------------------------------
# deterministic resampling cores


def resize_trilinear(v: VolumeGrid, out_size) -> VolumeGrid:
    """Resize to ``out_size`` (align-corners trilinear; identity when sizes match)."""
    out_size = tuple(int(n) for n in out_size)
    if v.shape == out_size:
        return VolumeGrid(data=v.data.copy(), spacing=v.spacing, axis_order=v.axis_order)
    axes = []
    for n_in, n_out in zip(v.shape, out_size):
        if n_out == 1:
            axes.append(np.array([(n_in - 1) / 2.0]))
        else:
            axes.append(np.linspace(0.0, n_in - 1, n_out))
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    data = ndimage.map_coordinates(v.data, coords, order=1, mode="nearest")
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(v.spacing, v.shape, out_size))
    return VolumeGrid(data=data, spacing=spacing, axis_order=v.axis_order)


def _axis_rotation(axis: int, theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    m = np.eye(3)
    i, j = [k for k in range(3) if k != axis]
    m[i, i], m[i, j] = c, -s
    m[j, i], m[j, j] = s, c
    return m


def _resample_linear_map(v: VolumeGrid, content_matrix: np.ndarray, translation) -> VolumeGrid:
    """Apply out(x) = in(A^-1 (x - c - t) + c) with trilinear sampling, zero fill."""
    center = (np.asarray(v.shape, dtype=np.float64) - 1.0) / 2.0
    t = np.asarray(translation, dtype=np.float64)
    m = np.linalg.inv(content_matrix)
    offset = center - m @ (center + t)
    data = ndimage.affine_transform(v.data, m, offset=offset, order=1, mode="constant", cval=0.0)
    return VolumeGrid(data=data, spacing=v.spacing, axis_order=v.axis_order)


def rotate(v: VolumeGrid, angles_deg) -> VolumeGrid:
    """Rotate about the volume center by one angle per axis (degrees)."""
    angles = _as_triple(angles_deg, "angles_deg")
    matrix = np.eye(3)
    for axis, deg in enumerate(angles):
        matrix = _axis_rotation(axis, math.radians(deg)) @ matrix
    return _resample_linear_map(v, matrix, (0.0, 0.0, 0.0))


def affine(v: VolumeGrid, angles_rad=(0.0, 0.0, 0.0), scales=(1.0, 1.0, 1.0), translation=(0.0, 0.0, 0.0)) -> VolumeGrid:
    """Combined rotation, per-axis scale, and translation about the center."""
    rot = np.eye(3)
    for axis, rad in enumerate(_as_triple(angles_rad, "angles_rad")):
        rot = _axis_rotation(axis, rad) @ rot
    matrix = rot @ np.diag(_as_triple(scales, "scales"))
    return _resample_linear_map(v, matrix, _as_triple(translation, "translation"))


# ---------------------------------------------------------------------------
# gated stochastic transforms


def rand_spatial_crop_resize(v: VolumeGrid, min_size, out_size, rng: np.random.Generator) -> VolumeGrid:
    """Crop a random sub-box (per-axis extent uniform in [min, full]) and resize."""
    min_size = _as_triple(min_size, "min_size", integer=True)
    out_size = _as_triple(out_size, "out_size", integer=True)
    if any(m > s for m, s in zip(min_size, v.shape)):
        raise ValueError(f"min_size {min_size} exceeds volume shape {v.shape}")
    sizes = [int(rng.integers(m, s + 1)) for m, s in zip(min_size, v.shape)]
    starts = [int(rng.integers(0, s - sz + 1)) for s, sz in zip(v.shape, sizes)]
    sl = tuple(slice(st, st + sz) for st, sz in zip(starts, sizes))
    cropped = VolumeGrid(data=v.data[sl].copy(), spacing=v.spacing, axis_order=v.axis_order)
    return resize_trilinear(cropped, out_size)


def rand_flip_axial(v: VolumeGrid, p: float, rng: np.random.Generator) -> VolumeGrid:
    if rng.random() >= p:
        return v
    return VolumeGrid(data=np.flip(v.data, axis=AXIAL_AXIS).copy(), spacing=v.spacing, axis_order=v.axis_order)


def rand_rotate(v: VolumeGrid, max_deg: float, p: float, rng: np.random.Generator) -> VolumeGrid:
    if rng.random() >= p:
        return v
    angles = rng.uniform(-max_deg, max_deg, size=3)
    return rotate(v, angles)


def rand_affine(v: VolumeGrid, rot_range, scale_range, trans_range, p: float, rng: np.random.Generator) -> VolumeGrid:
    if rng.random() >= p:
        return v
    rot = _as_triple(rot_range, "rot_range")
    trans = _as_triple(trans_range, "trans_range")
    angles = [rng.uniform(-r, r) if r > 0 else 0.0 for r in rot]
    scales = 1.0 + rng.uniform(-scale_range, scale_range, size=3) if scale_range > 0 else np.ones(3)
    translation = [rng.uniform(-t, t) if t > 0 else 0.0 for t in trans]
    return affine(v, angles, scales, translation)


def rand_shift_intensity(v: VolumeGrid, offset: float, p: float, rng: np.random.Generator) -> VolumeGrid:
    if rng.random() >= p:
        return v
    delta = rng.uniform(-offset, offset)
    return VolumeGrid(data=v.data + np.float32(delta), spacing=v.spacing, axis_order=v.axis_order)


def rand_adjust_contrast(v: VolumeGrid, gamma_range, p: float, rng: np.random.Generator) -> VolumeGrid:
    if rng.random() >= p:
        return v
    gamma = rng.uniform(float(gamma_range[0]), float(gamma_range[1]))
    lo = float(v.data.min())
    hi = float(v.data.max())
    if hi == lo:
        return v
    u = (v.data.astype(np.float64) - lo) / (hi - lo)
    out = np.power(u, gamma) * (hi - lo) + lo
    return VolumeGrid(data=out, spacing=v.spacing, axis_order=v.axis_order)


def rand_gaussian_noise(v: VolumeGrid, std: float, p: float, rng: np.random.Generator) -> VolumeGrid:
    if rng.random() >= p:
        return v
    if std == 0:
        return v
    noise = rng.normal(0.0, std, size=v.shape)
    return VolumeGrid(data=v.data + noise, spacing=v.spacing, axis_order=v.axis_order)


_APPLIERS = {
    "crop_resize": lambda v, t, rng: rand_spatial_crop_resize(v, t.params["min_size"], t.params["out_size"], rng),
    "flip_axial": lambda v, t, rng: rand_flip_axial(v, t.p, rng),
    "rotate": lambda v, t, rng: rand_rotate(v, t.params["max_deg"], t.p, rng),
    "affine": lambda v, t, rng: rand_affine(
        v, t.params["rot_range"], t.params["scale_range"], t.params["trans_range"], t.p, rng
    ),
    "shift_intensity": lambda v, t, rng: rand_shift_intensity(v, t.params["offset"], t.p, rng),
    "adjust_contrast": lambda v, t, rng: rand_adjust_contrast(v, t.params["gamma_range"], t.p, rng),
    "gaussian_noise": lambda v, t, rng: rand_gaussian_noise(v, t.params["std"], t.p, rng),
}


def apply_spec(v: VolumeGrid, spec: AugmentSpec, stream: SeedStream) -> VolumeGrid:
    """Apply all transforms in order, each on its own named substream."""
    out = v
    for idx, t in enumerate(spec.transforms):
        rng = stream.child(f"t{idx}", t.kind).generator()
        out = _APPLIERS[t.kind](out, t, rng)
    return out


def make_view_pair(v: VolumeGrid, spec: AugmentSpec, stream: SeedStream, source_scan_id: str = "") -> ViewPair:
    """Two independent stochastic applications of ``spec`` to the same volume."""
    return ViewPair(
        view_a=apply_spec(v, spec, stream.child("view_a")),
        view_b=apply_spec(v, spec, stream.child("view_b")),
        source_scan_id=source_scan_id,
    )


# ---------------------------------------------------------------------------
# the named stacks


def _scaled_box(reference_box, out_shape) -> tuple[int, int, int]:
    return tuple(
        max(1, min(axis, round(ref * axis / ref_axis)))
        for ref, axis, ref_axis in zip(reference_box, out_shape, REFERENCE_SHAPE)
    )


def build_pipeline(name: str, out_shape=REFERENCE_SHAPE) -> AugmentSpec:
    """The named augmentation stack, geometry-scaled to ``out_shape``."""
    if name not in PIPELINE_NAMES:
        raise AugmentSpecError(f"unknown pipeline {name!r}; expected one of {PIPELINE_NAMES}")
    out_shape = tuple(int(n) for n in out_shape)
    if name == "none":
        return AugmentSpec()
    if name == "simclr":
        return AugmentSpec(
            (
                TransformSpec("crop_resize", {"min_size": _scaled_box(SIMCLR_MIN_CROP, out_shape), "out_size": out_shape}),
                TransformSpec("flip_axial", p=0.5),
                TransformSpec("rotate", {"max_deg": 45.0}, p=0.5),
                TransformSpec("shift_intensity", {"offset": 0.5}, p=0.8),
                TransformSpec("adjust_contrast", {"gamma_range": (0.5, 1.5)}, p=0.8),
            )
        )
    if name == "mae_pretrain":
        return AugmentSpec(
            (
                TransformSpec("crop_resize", {"min_size": _scaled_box(SIMCLR_MIN_CROP, out_shape), "out_size": out_shape}),
                TransformSpec("flip_axial", p=0.5),
            )
        )
    trans = tuple(SUPERVISED_TRANSLATION * axis / ref for axis, ref in zip(out_shape, REFERENCE_SHAPE))
    return AugmentSpec(
        (
            TransformSpec("crop_resize", {"min_size": _scaled_box(SUPERVISED_MIN_CROP, out_shape), "out_size": out_shape}),
            TransformSpec("flip_axial", p=0.5),
            TransformSpec("affine", {"rot_range": (0.1, 0.1, 0.1), "scale_range": 0.15, "trans_range": trans}, p=0.7),
            TransformSpec("shift_intensity", {"offset": 0.1}, p=0.5),
            TransformSpec("gaussian_noise", {"std": 0.1}, p=0.2),
        )
    )


# ---------------------------------------------------------------------------
# text serialization (one line per transform, for config files)


def _format_value(value):
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(x) for x in value)
    if isinstance(value, float) and value.is_integer():
        return str(value)
    return str(value)


def _parse_value(text: str):
    if "," in text:
        return tuple(_parse_value(x) for x in text.split(","))
    try:
        return int(text)
    except ValueError:
        return float(text)


def spec_to_lines(spec: AugmentSpec) -> list[str]:
    lines = []
    for t in spec.transforms:
        parts = [t.kind]
        for key in sorted(t.params):
            parts.append(f"{key}={_format_value(t.params[key])}")
        parts.append(f"p={_format_value(float(t.p))}")
        lines.append(" ".join(parts))
    return lines


def spec_from_lines(lines) -> AugmentSpec:
    transforms = []
    for line in lines:
        tokens = line.split()
        if not tokens:
            continue
        kind = tokens[0]
        params = {}
        p = 1.0
        for token in tokens[1:]:
            if "=" not in token:
                raise AugmentSpecError(f"expected key=value, got {token!r} in {line!r}")
            key, _, raw = token.partition("=")
            value = _parse_value(raw)
            if key == "p":
                p = float(value)
            else:
                params[key] = value
        transforms.append(TransformSpec(kind, params, p=p))
    return AugmentSpec(tuple(transforms))
