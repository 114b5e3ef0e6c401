import numpy as np
import pytest

from brainssl.manifest import DatasetManifest, PatientRecord, ScanRecord
from brainssl.volume import VolumeGrid


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def small_volume(rng):
    return VolumeGrid(rng.normal(size=(16, 16, 16)).astype(np.float32))


@pytest.fixture
def smooth_volume():
    # band-limited: sum of low-frequency sinusoids, suitable for resampling
    # inverse-composition checks
    n = 32
    z, y, x = np.meshgrid(*(np.linspace(0, 2 * np.pi, n),) * 3, indexing="ij")
    data = np.sin(z) * np.cos(y) + 0.5 * np.sin(x + 0.3) + 0.2 * np.cos(z + y)
    return VolumeGrid(data.astype(np.float32))


def toy_manifest(n_patients=10, scans=(1,), labels=None, split=None) -> DatasetManifest:
    patients = []
    for i in range(n_patients):
        pid = f"p{i:03d}"
        scan_list = tuple(
            ScanRecord(scan_id=f"{pid}_s{k}", patient_id=pid, uri=f"/nonexistent/{pid}_{k}.raw")
            for k in range(scans[i % len(scans)])
        )
        patients.append(
            PatientRecord(patient_id=pid, scans=scan_list, labels=(labels(i) if labels else {}))
        )
    manifest = DatasetManifest(patients=tuple(patients))
    if split:
        manifest = manifest.with_split({p.patient_id: split(i) for i, p in enumerate(patients)})
    return manifest
