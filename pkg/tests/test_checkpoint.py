import hashlib

import numpy as np
import pytest

from brainssl.checkpoint import (
    CheckpointError,
    checkpoint_manifest,
    load_checkpoint,
    save_checkpoint,
)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        tensors = {
            "model/conv.weight": rng.normal(size=(4, 1, 3, 3, 3)).astype(np.float32),
            "model/bn.bias": rng.normal(size=4).astype(np.float32),
            "optim/0/step": np.asarray(10.0),
        }
        config = {"kind": "simclr", "encoder": {"widths": [8, 16, 32, 64]}}
        meta = {"epoch": 3, "seed": 0}
        save_checkpoint(tmp_path / "c.ckpt", tensors, config, meta)
        back, cfg, m = load_checkpoint(tmp_path / "c.ckpt")
        assert set(back) == set(tensors)
        for k in tensors:
            assert np.array_equal(back[k], tensors[k])
        assert cfg == config and m == meta

    def test_write_is_byte_deterministic(self, tmp_path, rng):
        tensors = {"w": rng.normal(size=(3, 3)).astype(np.float32)}
        save_checkpoint(tmp_path / "a.ckpt", tensors, {"k": 1}, {"m": 2})
        save_checkpoint(tmp_path / "b.ckpt", tensors, {"k": 1}, {"m": 2})
        assert digest(tmp_path / "a.ckpt") == digest(tmp_path / "b.ckpt")

    def test_manifest_lists_names_and_shapes(self, tmp_path, rng):
        tensors = {"a": np.zeros((2, 5), dtype=np.float32), "b": np.zeros(7, dtype=np.float64)}
        save_checkpoint(tmp_path / "c.ckpt", tensors, {}, {})
        table = checkpoint_manifest(tmp_path / "c.ckpt")
        assert {e["name"]: tuple(e["shape"]) for e in table} == {"a": (2, 5), "b": (7,)}

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_unknown_format_rejected(self, tmp_path):
        import zipfile

        with zipfile.ZipFile(tmp_path / "x.ckpt", "w") as zf:
            zf.writestr("manifest.json", '{"format": "other", "tensors": []}')
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")
