"""Procedural brain-like volumes with planted latent factors.

Each volume is a smooth ellipsoidal "head" whose radius scales with
``size_factor``, an interior structure displaced toward the left or right
half of the width axis by ``asymmetry``, ``lesion_count`` small bright
blobs at random interior sites, and additive Gaussian noise. Factors map
onto manifest labels: size_factor -> age, asymmetry -> sex,
lesion_count -> stroke_scale. Volumes are fully determined by
(factors, noise_seed), so repeat scans of a patient share factors but
carry fresh noise seeds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .manifest import DatasetManifest, PatientRecord, ScanRecord, make_splits, save_manifest
from .rng import SeedStream, derive_seed
from .volume import VolumeGrid, write_volume, zscore_normalize

MIN_DIMS = (16, 16, 16)

HEAD_SEMI_AXES = (0.82, 0.78, 0.74)  # fraction of half-extent at size_factor 1.0
HEAD_EDGE_SHARPNESS = 14.0
STRUCTURE_OFFSET = 0.45  # displacement of the interior structure along width
STRUCTURE_SIGMA = 0.20
STRUCTURE_AMPLITUDE = 1.2
LESION_SIGMA_VOXELS = (2.0, 3.0)
LESION_AMPLITUDE = 0.9
NOISE_STD = 0.20


@dataclass(frozen=True)
class SynthFactors:
    size_factor: float
    asymmetry: int
    lesion_count: int
    noise_seed: int

    def __post_init__(self):
        if not (0.6 <= self.size_factor <= 1.0):
            raise ValueError(f"size_factor must be in [0.6, 1.0], got {self.size_factor}")
        if self.asymmetry not in (0, 1):
            raise ValueError(f"asymmetry must be 0 or 1, got {self.asymmetry}")
        if self.lesion_count < 0:
            raise ValueError(f"lesion_count must be >= 0, got {self.lesion_count}")


def _unit_grid(dims):
    axes = [np.linspace(-1.0, 1.0, n) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def lesion_sites(dims, factors: SynthFactors) -> list[tuple[tuple[float, float, float], float]]:
    """The (center, sigma) of each lesion blob, in unit coordinates.

    Sites are drawn uniformly inside the head interior; deterministic from
    factors.noise_seed. Empty for lesion_count == 0.
    """
    semi = np.array(HEAD_SEMI_AXES) * factors.size_factor
    rng = SeedStream(factors.noise_seed).child("lesions").generator()
    voxel_extent = 2.0 / max(dims)  # one voxel in unit coordinates (coarsest axis)
    sites = []
    for _ in range(factors.lesion_count):
        while True:
            site = rng.uniform(-0.6, 0.6, size=3)
            if np.sqrt(np.sum((site / semi) ** 2)) < 0.75:
                break
        sigma = rng.uniform(*LESION_SIGMA_VOXELS) * voxel_extent
        sites.append((tuple(float(x) for x in site), float(sigma)))
    return sites


def generate_volume(dims, factors: SynthFactors, normalize: bool = True) -> tuple[VolumeGrid, SynthFactors]:
    """Render one volume from its factors; bit-identical per (factors, noise_seed)."""
    dims = tuple(int(n) for n in dims)
    if any(n < m for n, m in zip(dims, MIN_DIMS)):
        raise ValueError(f"dims {dims} too small to place structures (min {MIN_DIMS})")
    stream = SeedStream(factors.noise_seed)
    zz, yy, xx = _unit_grid(dims)

    semi = np.array(HEAD_SEMI_AXES) * factors.size_factor
    r = np.sqrt((zz / semi[0]) ** 2 + (yy / semi[1]) ** 2 + (xx / semi[2]) ** 2)
    head = 1.0 / (1.0 + np.exp(HEAD_EDGE_SHARPNESS * (r - 1.0)))

    side = 1.0 if factors.asymmetry == 1 else -1.0
    cx = side * STRUCTURE_OFFSET * semi[2]
    d2 = (zz**2 + yy**2 + (xx - cx) ** 2) / (2.0 * (STRUCTURE_SIGMA * factors.size_factor) ** 2)
    structure = STRUCTURE_AMPLITUDE * np.exp(-d2)

    lesions = np.zeros(dims)
    for site, sigma in lesion_sites(dims, factors):
        d2 = ((zz - site[0]) ** 2 + (yy - site[1]) ** 2 + (xx - site[2]) ** 2) / (2.0 * sigma**2)
        lesions += LESION_AMPLITUDE * np.exp(-d2)

    noise = stream.child("noise").generator().normal(0.0, NOISE_STD, size=dims)
    data = head + head * structure + lesions + noise
    grid = VolumeGrid(data=data.astype(np.float32))
    if normalize:
        grid = zscore_normalize(grid)
    return grid, factors


def sample_factors(seed: int, patient_id: str, noise_seed: int) -> SynthFactors:
    rng = SeedStream(seed).child("factors", patient_id).generator()
    return SynthFactors(
        size_factor=float(rng.uniform(0.6, 1.0)),
        asymmetry=int(rng.integers(0, 2)),
        lesion_count=int(rng.integers(0, 4)),
        noise_seed=noise_seed,
    )


def generate_dataset(
    n_patients: int,
    scans_per_patient_range: tuple[int, int],
    dims,
    seed: int,
    out_dir,
    split_ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> DatasetManifest:
    """Write volumes + manifest under ``out_dir``; returns the split manifest."""
    if n_patients < 4:
        raise ValueError(f"need at least 4 patients, got {n_patients}")
    lo, hi = (int(x) for x in scans_per_patient_range)
    if not (1 <= lo <= hi):
        raise ValueError(f"invalid scans_per_patient_range {scans_per_patient_range}")
    out_dir = Path(out_dir)
    volume_dir = out_dir / "volumes"
    volume_dir.mkdir(parents=True, exist_ok=True)

    patients = []
    for i in range(n_patients):
        pid = f"p{i:04d}"
        count_rng = SeedStream(seed).child("scan_count", pid).generator()
        n_scans = int(count_rng.integers(lo, hi + 1))
        scans = []
        labels = None
        for s in range(n_scans):
            sid = f"{pid}_s{s}"
            factors = sample_factors(seed, pid, noise_seed=derive_seed(seed, "noise", pid, s))
            grid, _ = generate_volume(dims, factors)
            uri = volume_dir / f"{sid}.raw"
            write_volume(grid, uri)
            scans.append(ScanRecord(scan_id=sid, patient_id=pid, uri=str(uri), dataset_tag="synth"))
            labels = {
                "age": factors.size_factor,
                "sex": factors.asymmetry,
                "stroke_scale": factors.lesion_count,
            }
        patients.append(PatientRecord(patient_id=pid, scans=tuple(scans), labels=labels))

    manifest = DatasetManifest(patients=tuple(patients))
    manifest = make_splits(manifest, split_ratios, seed=derive_seed(seed, "splits"))
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
