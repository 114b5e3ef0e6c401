"""Patient-level dataset manifests, split construction, and class balancing.

A manifest is stored as UTF-8 line-delimited JSON, one record per scan:
{patient_id, scan_id, uri, dataset_tag, diagnosis?, age?, sex?,
stroke_scale?, split?}. Labels and split assignment are patient-level;
scan rows of the same patient must agree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .rng import spawn_generator

SPLIT_VALUES = ("train", "val", "test", "pretrain-only")
LABEL_KEYS = ("diagnosis", "age", "sex", "stroke_scale")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    patient_id: str
    uri: str
    dataset_tag: str = ""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    scans: tuple[ScanRecord, ...]
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "scans", tuple(self.scans))
        object.__setattr__(self, "labels", dict(self.labels))
        if len(self.scans) < 1:
            raise ManifestError(f"patient {self.patient_id} has no scans")
        for s in self.scans:
            if s.patient_id != self.patient_id:
                raise ManifestError(f"scan {s.scan_id} belongs to {s.patient_id}, not {self.patient_id}")
        unknown = set(self.labels) - set(LABEL_KEYS)
        if unknown:
            raise ManifestError(f"unknown label keys {sorted(unknown)} for patient {self.patient_id}")
        if "stroke_scale" in self.labels:
            v = self.labels["stroke_scale"]
            if not (0 <= v <= 42):
                raise ManifestError(f"stroke_scale {v} out of [0, 42] for patient {self.patient_id}")
        if "age" in self.labels and not self.labels["age"] > 0:
            raise ManifestError(f"age must be positive, got {self.labels['age']}")


@dataclass(frozen=True)
class DatasetManifest:
    patients: tuple[PatientRecord, ...]
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "patients", tuple(self.patients))
        object.__setattr__(self, "split", dict(self.split))
        ids = [p.patient_id for p in self.patients]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate patient_id in manifest")
        scan_ids = [s.scan_id for p in self.patients for s in p.scans]
        if len(set(scan_ids)) != len(scan_ids):
            raise ManifestError("duplicate scan_id in manifest")
        known = set(ids)
        for pid, value in self.split.items():
            if pid not in known:
                raise ManifestError(f"split assigns unknown patient_id {pid!r}")
            if value not in SPLIT_VALUES:
                raise ManifestError(f"unknown split value {value!r} for patient {pid}")

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(patient_id)

    def patients_in(self, split_value: str) -> tuple[PatientRecord, ...]:
        return tuple(p for p in self.patients if self.split.get(p.patient_id) == split_value)

    def with_split(self, split: dict) -> "DatasetManifest":
        return DatasetManifest(patients=self.patients, split=split)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for p in manifest.patients:
            for s in p.scans:
                row = {
                    "patient_id": p.patient_id,
                    "scan_id": s.scan_id,
                    "uri": s.uri,
                    "dataset_tag": s.dataset_tag,
                }
                for k in LABEL_KEYS:
                    if k in p.labels:
                        row[k] = p.labels[k]
                if p.patient_id in manifest.split:
                    row["split"] = manifest.split[p.patient_id]
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    per_patient: dict[str, list[dict]] = {}
    order: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for req in ("patient_id", "scan_id", "uri"):
                if req not in row:
                    raise ManifestError(f"{path}:{lineno}: missing field {req!r}")
            pid = str(row["patient_id"])
            if pid not in per_patient:
                per_patient[pid] = []
                order.append(pid)
            per_patient[pid].append(row)

    patients = []
    split = {}
    for pid in order:
        rows = per_patient[pid]
        labels = {k: rows[0][k] for k in LABEL_KEYS if k in rows[0]}
        split_value = rows[0].get("split")
        for row in rows[1:]:
            row_labels = {k: row[k] for k in LABEL_KEYS if k in row}
            if row_labels != labels or row.get("split") != split_value:
                raise ManifestError(f"inconsistent labels/split across scans of patient {pid}")
        scans = tuple(
            ScanRecord(
                scan_id=str(r["scan_id"]),
                patient_id=pid,
                uri=str(r["uri"]),
                dataset_tag=str(r.get("dataset_tag", "")),
            )
            for r in rows
        )
        patients.append(PatientRecord(patient_id=pid, scans=scans, labels=labels))
        if split_value is not None:
            split[pid] = split_value
    return DatasetManifest(patients=tuple(patients), split=split)


def _largest_remainder_counts(n: int, ratios) -> list[int]:
    exact = [r * n for r in ratios]
    counts = [int(x) for x in exact]
    remainder = n - sum(counts)
    by_frac = sorted(range(len(ratios)), key=lambda i: (exact[i] - counts[i], -i), reverse=True)
    for i in by_frac[:remainder]:
        counts[i] += 1
    return counts


def make_splits(manifest: DatasetManifest, ratios: tuple[float, float, float], seed: int) -> DatasetManifest:
    """Assign every patient to train/val/test at the given proportions.

    Patient-level, deterministic per seed; each count is within one patient
    of the exact proportion (largest-remainder rounding).
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    if any(r < 0 for r in ratios):
        raise ValueError(f"split ratios must be non-negative, got {ratios}")
    n = len(manifest.patients)
    active = sum(1 for r in ratios if r > 0)
    if n < active:
        raise ManifestError(f"cannot split {n} patients into {active} non-empty classes")
    pids = sorted(p.patient_id for p in manifest.patients)
    rng = spawn_generator(seed, "make_splits")
    perm = rng.permutation(len(pids))
    shuffled = [pids[i] for i in perm]
    counts = _largest_remainder_counts(n, ratios)
    split = {}
    start = 0
    for value, count in zip(("train", "val", "test"), counts):
        for pid in shuffled[start : start + count]:
            split[pid] = value
        start += count
    return manifest.with_split(split)


def binary_label_values(manifest: DatasetManifest, label: str) -> tuple:
    """The two label values present, sorted by string form (second = positive)."""
    values = sorted({str(p.labels[label]) for p in manifest.patients if label in p.labels})
    if len(values) != 2:
        raise ManifestError(f"label {label!r} must take exactly 2 values, found {values}")
    return tuple(values)


def balance_binary_train(manifest: DatasetManifest, label: str, seed: int) -> DatasetManifest:
    """Equalize the two class counts in the training split.

    Excess majority-class patients are demoted to "pretrain-only" (still
    available for self-supervised pre-training, excluded from downstream
    training); val/test keep their natural imbalance.
    """
    missing = [p.patient_id for p in manifest.patients if label not in p.labels]
    if missing:
        raise ManifestError(f"label {label!r} missing for patients {missing[:5]}")
    lo, hi = binary_label_values(manifest, label)
    train = manifest.patients_in("train")
    if not train:
        raise ManifestError("no training split to balance")
    by_class = {lo: [], hi: []}
    for p in sorted(train, key=lambda p: p.patient_id):
        by_class[str(p.labels[label])].append(p.patient_id)
    if not by_class[lo] or not by_class[hi]:
        raise ManifestError(f"class absent from training split for label {label!r}")
    cap = min(len(by_class[lo]), len(by_class[hi]))
    split = dict(manifest.split)
    rng = spawn_generator(seed, "balance_binary_train", label)
    for value in (lo, hi):
        pids = by_class[value]
        keep = rng.permutation(len(pids))[:cap]
        kept = {pids[i] for i in keep}
        for pid in pids:
            if pid not in kept:
                split[pid] = "pretrain-only"
    return manifest.with_split(split)
