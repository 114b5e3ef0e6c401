import numpy as np
import pytest
from scipy import stats

from brainssl.manifest import ManifestError
from brainssl.sampling import (
    FRACTION_LADDER,
    epoch_schedule,
    epoch_seed_for,
    export_schedule,
    fraction_subset,
    restrict_train_split,
)

from conftest import toy_manifest


def train_manifest(n=12, scans=(1, 2, 5)):
    return toy_manifest(n, scans=scans, split=lambda i: "train")


class TestEpochSchedule:
    def test_one_entry_per_patient(self):
        m = toy_manifest(3, scans=(1, 2, 5), split=lambda i: "train")
        schedule = epoch_schedule(m, epoch_seed=0)
        assert len(schedule) == 3
        assert {pid for pid, _ in schedule.entries} == {p.patient_id for p in m.patients}

    def test_scan_belongs_to_patient(self):
        m = train_manifest()
        schedule = epoch_schedule(m, epoch_seed=1)
        for pid, sid in schedule.entries:
            assert sid in {s.scan_id for s in m.patient(pid).scans}

    def test_single_scan_patients_seed_independent_content(self):
        m = toy_manifest(6, scans=(1,), split=lambda i: "train")
        a = sorted(epoch_schedule(m, 0).entries)
        b = sorted(epoch_schedule(m, 999).entries)
        assert a == b

    def test_deterministic_per_seed(self):
        m = train_manifest()
        assert epoch_schedule(m, 7).entries == epoch_schedule(m, 7).entries
        assert epoch_schedule(m, 7).entries != epoch_schedule(m, 8).entries

    def test_excludes_val_test(self):
        m = toy_manifest(9, scans=(2,), split=lambda i: ("train", "val", "test")[i % 3])
        schedule = epoch_schedule(m, 0)
        train_ids = {p.patient_id for p in m.patients_in("train")}
        assert {pid for pid, _ in schedule.entries} == train_ids

    def test_empty_train_split(self):
        m = toy_manifest(4, split=lambda i: "val")
        with pytest.raises(ManifestError):
            epoch_schedule(m, 0)

    def test_two_scan_frequency(self):
        m = toy_manifest(1, scans=(2,), split=lambda i: "train")
        trials = 4000
        hits = sum(
            epoch_schedule(m, epoch_seed_for(3, i)).entries[0][1].endswith("_s0")
            for i in range(trials)
        )
        assert abs(hits / trials - 0.5) < 0.02

    def test_scan_choice_uniform_chi_square(self):
        m = toy_manifest(1, scans=(5,), split=lambda i: "train")
        trials = 4000
        counts = np.zeros(5)
        for i in range(trials):
            sid = epoch_schedule(m, epoch_seed_for(11, i)).entries[0][1]
            counts[int(sid[-1])] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_export(self, tmp_path):
        m = train_manifest(4)
        schedule = epoch_schedule(m, 5)
        export_schedule(schedule, tmp_path / "epoch.jsonl")
        lines = (tmp_path / "epoch.jsonl").read_text().splitlines()
        assert len(lines) == 4


class TestEpochSeeds:
    def test_distinct_across_epochs(self):
        seeds = {epoch_seed_for(0, e) for e in range(100)}
        assert len(seeds) == 100

    def test_deterministic(self):
        assert epoch_seed_for(4, 9) == epoch_seed_for(4, 9)


class TestFractionSubset:
    def test_plain_sizes(self):
        m = toy_manifest(100, split=lambda i: "train")
        assert len(fraction_subset(m, 0.2, seed=0)) == 20
        assert len(fraction_subset(m, 1.0, seed=0)) == 100

    def test_nesting_chain(self):
        m = toy_manifest(50, split=lambda i: "train")
        previous = set()
        for f in FRACTION_LADDER:
            current = set(fraction_subset(m, f, seed=3).patient_ids)
            assert previous <= current
            previous = current

    def test_stratified_floor_counts(self):
        # 53 + 53 balanced classes at fraction 0.2 -> 10 per class
        m = toy_manifest(106, labels=lambda i: {"sex": i % 2}, split=lambda i: "train")
        subset = fraction_subset(m, 0.2, seed=1, stratify_label="sex")
        by_class = {0: 0, 1: 0}
        for pid in subset.patient_ids:
            by_class[m.patient(pid).labels["sex"]] += 1
        assert by_class == {0: 10, 1: 10}

    def test_stratified_nesting(self):
        m = toy_manifest(60, labels=lambda i: {"sex": i % 2}, split=lambda i: "train")
        previous = set()
        for f in FRACTION_LADDER:
            current = set(fraction_subset(m, f, seed=5, stratify_label="sex").patient_ids)
            assert previous <= current
            previous = current

    def test_class_exhaustion_rejected(self):
        m = toy_manifest(8, labels=lambda i: {"sex": 1 if i == 0 else 0}, split=lambda i: "train")
        with pytest.raises(ManifestError):
            fraction_subset(m, 0.2, seed=0, stratify_label="sex")

    def test_no_cross_split_leakage(self):
        m = toy_manifest(30, split=lambda i: ("train", "val", "test")[i % 3])
        subset = fraction_subset(m, 0.5, seed=0)
        train_ids = {p.patient_id for p in m.patients_in("train")}
        assert set(subset.patient_ids) <= train_ids

    def test_invalid_fraction(self):
        m = toy_manifest(10, split=lambda i: "train")
        with pytest.raises(ValueError):
            fraction_subset(m, 0.0, seed=0)
        with pytest.raises(ValueError):
            fraction_subset(m, 1.5, seed=0)

    def test_restrict_train_split(self):
        m = toy_manifest(10, split=lambda i: "train" if i < 8 else "val")
        subset = fraction_subset(m, 0.5, seed=2)
        restricted = restrict_train_split(m, subset)
        assert {p.patient_id for p in restricted.patients_in("train")} == set(subset.patient_ids)
        # demoted patients stay available for pre-training
        demoted = [pid for pid, v in restricted.split.items() if v == "pretrain-only"]
        assert len(demoted) == 4
        assert len(restricted.patients_in("val")) == 2
