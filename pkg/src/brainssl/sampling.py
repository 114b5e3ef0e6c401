"""Patient-level epoch schedules and nested data-fraction subsets.

Each training epoch visits every training patient exactly once, drawing
one of the patient's scans uniformly at random, so patients with many
scans do not overrepresent the data. Fraction subsets are prefixes of a
fixed per-seed priority order, which makes the subsets nested across the
fraction ladder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .manifest import DatasetManifest, ManifestError
from .rng import SeedStream, derive_seed

FRACTION_LADDER = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class EpochSchedule:
    entries: tuple[tuple[str, str], ...]  # (patient_id, scan_id)
    epoch_seed: int

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class FractionSubset:
    fraction: float
    patient_ids: tuple[str, ...]
    parent_seed: int

    def __len__(self):
        return len(self.patient_ids)


def epoch_seed_for(master_seed: int, epoch_index: int) -> int:
    """Per-epoch seed derived from the master seed; no stored state needed."""
    return derive_seed(master_seed, "epoch", epoch_index)


def epoch_schedule(manifest: DatasetManifest, epoch_seed: int) -> EpochSchedule:
    """One uniformly chosen scan per training patient, in shuffled order."""
    train = sorted(manifest.patients_in("train"), key=lambda p: p.patient_id)
    if not train:
        raise ManifestError("training split is empty")
    stream = SeedStream(epoch_seed)
    entries = []
    for p in train:
        if len(p.scans) == 1:
            scan = p.scans[0]
        else:
            rng = stream.child("scan", p.patient_id).generator()
            scan = p.scans[int(rng.integers(0, len(p.scans)))]
        entries.append((p.patient_id, scan.scan_id))
    order = stream.child("order").generator().permutation(len(entries))
    return EpochSchedule(entries=tuple(entries[i] for i in order), epoch_seed=epoch_seed)


def _priority_order(ids: list[str], rng) -> list[str]:
    perm = rng.permutation(len(ids))
    return [ids[i] for i in perm]


def fraction_subset(
    manifest: DatasetManifest,
    fraction: float,
    seed: int,
    stratify_label: str | None = None,
) -> FractionSubset:
    """Patient subset of the training split at the given fraction.

    Subsets under one seed are nested: subset(f1) is a prefix of subset(f2)
    for f1 <= f2. Plain subsets have round(fraction * n) patients. With
    ``stratify_label`` (classification tasks) each class contributes
    floor(fraction * class size) patients, at least one per class.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    train = sorted(manifest.patients_in("train"), key=lambda p: p.patient_id)
    if not train:
        raise ManifestError("training split is empty")
    stream = SeedStream(seed).child("fraction_subset")

    if stratify_label is None:
        ids = [p.patient_id for p in train]
        order = _priority_order(ids, stream.child("plain").generator())
        count = int(fraction * len(ids) + 0.5)
        chosen = order[:count]
    else:
        missing = [p.patient_id for p in train if stratify_label not in p.labels]
        if missing:
            raise ManifestError(f"label {stratify_label!r} missing for patients {missing[:5]}")
        by_class: dict[str, list[str]] = {}
        for p in train:
            by_class.setdefault(str(p.labels[stratify_label]), []).append(p.patient_id)
        chosen = []
        for value in sorted(by_class):
            ids = by_class[value]
            count = int(fraction * len(ids))
            if count < 1:
                raise ManifestError(
                    f"fraction {fraction} leaves no patients of class {value!r} "
                    f"({len(ids)} available)"
                )
            order = _priority_order(ids, stream.child("class", value).generator())
            chosen.extend(order[:count])
    return FractionSubset(fraction=float(fraction), patient_ids=tuple(chosen), parent_seed=seed)


def restrict_train_split(manifest: DatasetManifest, subset: FractionSubset) -> DatasetManifest:
    """Manifest whose train split is reduced to the subset; other splits intact."""
    keep = set(subset.patient_ids)
    split = {}
    for pid, value in manifest.split.items():
        if value == "train" and pid not in keep:
            split[pid] = "pretrain-only"
        else:
            split[pid] = value
    return manifest.with_split(split)


def export_schedule(schedule: EpochSchedule, path) -> None:
    """Line-delimited audit record of one epoch."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for patient_id, scan_id in schedule.entries:
            fh.write(
                json.dumps(
                    {"patient_id": patient_id, "scan_id": scan_id, "epoch_seed": schedule.epoch_seed},
                    sort_keys=True,
                )
                + "\n"
            )
