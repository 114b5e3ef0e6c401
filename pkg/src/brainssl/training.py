"""Pre-training loops for the contrastive and masked-autoencoder objectives.

Runs are deterministic given (config, seed, data): epoch schedules and
augmentations draw from named substreams of the master seed, model init
is seeded, and checkpoints are emitted each epoch in the deterministic
container format together with a loss-history CSV.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import PIPELINE_NAMES, AugmentSpec, apply_spec, build_pipeline, make_view_pair, resize_trilinear
from .checkpoint import load_checkpoint, save_checkpoint
from .mae import MaskedAutoencoder3d, ViTConfig, init_mae, sample_mask, torch_patchify
from .manifest import DatasetManifest
from .rng import SeedStream
from .sampling import epoch_schedule, epoch_seed_for
from .simclr import (
    EncoderConfig,
    SimCLRModel,
    init_encoder,
    nt_xent_loss,
    nt_xent_loss_sharded,
)
from .volume import VolumeGrid, read_volume

OBJECTIVES = ("simclr", "mae", "supervised")
SCHEDULES = ("cosine", "constant")


class NumericDivergenceError(RuntimeError):
    """Training hit a non-finite loss; a state dump is written before raising."""


@dataclass(frozen=True)
class TrainConfig:
    objective: str
    epochs: int = 30
    effective_batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    schedule: str = "cosine"
    warmup_epochs: int = 0
    seed: int = 0
    augment: str = "simclr"
    device_count: int = 1
    mask_ratio: float = 0.75

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.objective == "simclr" and self.effective_batch_size < 2:
            raise ValueError("simclr needs an effective batch of >= 2 samples for negatives")
        if self.effective_batch_size < 1:
            raise ValueError(f"effective_batch_size must be >= 1, got {self.effective_batch_size}")
        if self.device_count < 1:
            raise ValueError(f"device_count must be >= 1, got {self.device_count}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.augment not in PIPELINE_NAMES:
            raise ValueError(f"unknown augmentation pipeline {self.augment!r}")
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ValueError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")


class VolumeStore:
    """Loads scan volumes by scan_id, cached in memory, resized to a target
    shape when the stored grid differs (deterministic trilinear)."""

    def __init__(self, manifest: DatasetManifest, target_shape=None):
        self._uris = {s.scan_id: s.uri for p in manifest.patients for s in p.scans}
        self._target = tuple(int(n) for n in target_shape) if target_shape else None
        self._cache: dict[str, VolumeGrid] = {}

    def volume(self, scan_id: str) -> VolumeGrid:
        if scan_id not in self._cache:
            grid = read_volume(self._uris[scan_id])
            if self._target and grid.shape != self._target:
                grid = resize_trilinear(grid, self._target)
            self._cache[scan_id] = grid
        return self._cache[scan_id]


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Cosine decay with linear warmup (or constant), evaluated per step."""
    if config.schedule == "constant":
        return config.learning_rate
    total = max(1, config.epochs * steps_per_epoch)
    warmup = config.warmup_epochs * steps_per_epoch
    if warmup > 0 and step < warmup:
        return config.learning_rate * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * progress))


def _batches(entries, size: int):
    for start in range(0, len(entries), size):
        yield entries[start : start + size]


# ---------------------------------------------------------------------------
# checkpoint bridging


def _model_tensors(model: torch.nn.Module) -> dict:
    return {f"model/{k}": v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def _optimizer_tensors(optimizer: torch.optim.Optimizer) -> tuple[dict, list]:
    tensors = {}
    sd = optimizer.state_dict()
    for pidx, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                tensors[f"optim/{pidx}/{key}"] = value.detach().cpu().numpy().copy()
            else:
                tensors[f"optim/{pidx}/{key}"] = np.asarray(value)
    return tensors, sd["param_groups"]


def _restore_model(model: torch.nn.Module, tensors: dict) -> None:
    state = {}
    for key, arr in tensors.items():
        if key.startswith("model/"):
            state[key[len("model/") :]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)


def _restore_optimizer(optimizer: torch.optim.Optimizer, tensors: dict, param_groups: list) -> None:
    state: dict[int, dict] = {}
    for key, arr in tensors.items():
        if not key.startswith("optim/"):
            continue
        _, pidx, name = key.split("/", 2)
        state.setdefault(int(pidx), {})[name] = torch.from_numpy(arr.copy())
    optimizer.load_state_dict({"state": state, "param_groups": param_groups})


def save_model_checkpoint(path, model, kind: str, config: dict, meta: dict, optimizer=None) -> Path:
    tensors = _model_tensors(model)
    meta = dict(meta)
    if optimizer is not None:
        opt_tensors, param_groups = _optimizer_tensors(optimizer)
        tensors.update(opt_tensors)
        meta["optimizer_param_groups"] = param_groups
    save_checkpoint(path, tensors, {"kind": kind, **config}, meta)
    return Path(path)


def load_model_checkpoint(path):
    """Rebuild the pre-trained model from a checkpoint.

    Returns (model, kind, config, meta); kind is "simclr" or "mae".
    """
    tensors, config, meta = load_checkpoint(path)
    kind = config.get("kind")
    if kind == "simclr":
        encoder_config = EncoderConfig(**config["encoder"])
        model = SimCLRModel(encoder_config)
    elif kind == "mae":
        vit_config = ViTConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in config["vit"].items()})
        model = MaskedAutoencoder3d(vit_config)
    else:
        raise ValueError(f"checkpoint {path} has unknown kind {kind!r}")
    _restore_model(model, tensors)
    model.eval()
    return model, kind, config, meta


# ---------------------------------------------------------------------------
# loss history


def _write_loss_history(path: Path, rows: list[dict], fieldnames: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def read_loss_history(path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _check_finite_loss(loss: torch.Tensor, dump_path, model, kind, config, meta, optimizer):
    if torch.isfinite(loss).all():
        return
    save_model_checkpoint(dump_path, model, kind, config, {**meta, "diverged": True}, optimizer)
    raise NumericDivergenceError(f"non-finite loss; state dumped to {dump_path}")


# ---------------------------------------------------------------------------
# pre-training loops


def pretrain_simclr(
    config: TrainConfig,
    encoder_config: EncoderConfig,
    manifest: DatasetManifest,
    out_dir,
    resume_from=None,
    augment_spec: AugmentSpec | None = None,
) -> Path:
    """Contrastive pre-training; checkpoints each epoch, returns the last path."""
    if config.objective != "simclr":
        raise ValueError(f"objective must be 'simclr', got {config.objective!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = init_encoder(encoder_config, config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    cfg_dict = {"encoder": asdict(encoder_config), "train": asdict(config)}
    tau = encoder_config.temperature
    spec = augment_spec or build_pipeline(config.augment, out_shape=encoder_config.input_shape)
    store = VolumeStore(manifest)
    n_train = len(manifest.patients_in("train"))
    steps_per_epoch = max(1, n_train // config.effective_batch_size)

    start_epoch = 1
    step_index = 0
    history: list[dict] = []
    if resume_from is not None:
        tensors, _, meta = load_checkpoint(resume_from)
        _restore_model(model, tensors)
        _restore_optimizer(optimizer, tensors, meta["optimizer_param_groups"])
        start_epoch = int(meta["epoch"]) + 1
        step_index = int(meta["steps_completed"])
        history = [dict(r) for r in read_loss_history(out_dir / "loss_history.csv")] if (out_dir / "loss_history.csv").exists() else []

    last_path = None
    for epoch in range(start_epoch, config.epochs + 1):
        schedule = epoch_schedule(manifest, epoch_seed_for(config.seed, epoch))
        model.train()
        for batch in _batches(schedule.entries, config.effective_batch_size):
            if len(batch) < 2:
                continue  # a lone sample has no negatives
            views_a, views_b = [], []
            for pid, sid in batch:
                pair = make_view_pair(
                    store.volume(sid), spec, SeedStream(config.seed).child("aug", f"e{epoch}", sid), sid
                )
                views_a.append(pair.view_a.data)
                views_b.append(pair.view_b.data)
            x = torch.from_numpy(np.stack(views_a + views_b)).unsqueeze(1)
            for group in optimizer.param_groups:
                group["lr"] = lr_at(config, step_index, steps_per_epoch)
            optimizer.zero_grad()
            _, z = model(x)
            if config.device_count > 1:
                loss = nt_xent_loss_sharded(z, tau, config.device_count)
            else:
                loss = nt_xent_loss(z, tau)
            meta_now = {"epoch": epoch, "seed": config.seed, "temperature": tau,
                        "objective": "simclr", "steps_completed": step_index}
            _check_finite_loss(loss, out_dir / "diverged_dump.ckpt", model, "simclr", cfg_dict, meta_now, optimizer)
            loss.backward()
            optimizer.step()
            history.append({"epoch": epoch, "step": step_index, "loss": f"{loss.item():.8f}"})
            step_index += 1
        last_path = save_model_checkpoint(
            out_dir / f"checkpoint_epoch_{epoch:04d}.ckpt",
            model,
            "simclr",
            cfg_dict,
            {"epoch": epoch, "seed": config.seed, "temperature": tau,
             "objective": "simclr", "steps_completed": step_index},
            optimizer,
        )
        _write_loss_history(out_dir / "loss_history.csv", history, ["epoch", "step", "loss"])
    return last_path


def pretrain_mae(
    config: TrainConfig,
    vit_config: ViTConfig,
    manifest: DatasetManifest,
    out_dir,
    resume_from=None,
    augment_spec: AugmentSpec | None = None,
) -> Path:
    """Masked-autoencoder pre-training with per-sample random masks."""
    if config.objective != "mae":
        raise ValueError(f"objective must be 'mae', got {config.objective!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    model = init_mae(vit_config, config.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    cfg_dict = {"vit": asdict(vit_config), "train": asdict(config)}
    layout = vit_config.layout
    spec = augment_spec or build_pipeline(config.augment, out_shape=vit_config.input_shape)
    store = VolumeStore(manifest)
    n_train = len(manifest.patients_in("train"))
    steps_per_epoch = max(1, n_train // config.effective_batch_size)

    start_epoch = 1
    step_index = 0
    history: list[dict] = []
    if resume_from is not None:
        tensors, _, meta = load_checkpoint(resume_from)
        _restore_model(model, tensors)
        _restore_optimizer(optimizer, tensors, meta["optimizer_param_groups"])
        start_epoch = int(meta["epoch"]) + 1
        step_index = int(meta["steps_completed"])
        history = [dict(r) for r in read_loss_history(out_dir / "loss_history.csv")] if (out_dir / "loss_history.csv").exists() else []

    n_masked_expected = int(np.floor(config.mask_ratio * layout.num_patches + 0.5))
    last_path = None
    for epoch in range(start_epoch, config.epochs + 1):
        schedule = epoch_schedule(manifest, epoch_seed_for(config.seed, epoch))
        model.train()
        for batch in _batches(schedule.entries, config.effective_batch_size):
            views = []
            masked_rows = []
            visible_rows = []
            for pid, sid in batch:
                view = apply_spec(
                    store.volume(sid), spec, SeedStream(config.seed).child("aug", f"e{epoch}", sid)
                )
                mask = sample_mask(
                    layout.num_patches,
                    config.mask_ratio,
                    SeedStream(config.seed).child("mask", f"e{epoch}", sid).generator(),
                )
                assert len(mask.masked) == n_masked_expected
                views.append(view.data)
                masked_rows.append(mask.masked)
                visible_rows.append(mask.visible)
            x = torch.from_numpy(np.stack(views))
            patches = torch_patchify(x, layout.patch_dims)
            visible = torch.tensor(visible_rows, dtype=torch.long)
            masked = torch.tensor(masked_rows, dtype=torch.long)
            for group in optimizer.param_groups:
                group["lr"] = lr_at(config, step_index, steps_per_epoch)
            optimizer.zero_grad()
            pred = model(patches, visible)
            take = masked[..., None].expand(-1, -1, patches.shape[-1])
            diff = torch.gather(pred, 1, take) - torch.gather(patches, 1, take)
            loss = (diff**2).sum(dim=-1).mean()
            meta_now = {"epoch": epoch, "seed": config.seed, "objective": "mae",
                        "mask_ratio": config.mask_ratio, "steps_completed": step_index}
            _check_finite_loss(loss, out_dir / "diverged_dump.ckpt", model, "mae", cfg_dict, meta_now, optimizer)
            loss.backward()
            optimizer.step()
            history.append(
                {
                    "epoch": epoch,
                    "step": step_index,
                    "loss": f"{loss.item():.8f}",
                    "masked": len(masked_rows[0]),
                    "visible": len(visible_rows[0]),
                }
            )
            step_index += 1
        last_path = save_model_checkpoint(
            out_dir / f"checkpoint_epoch_{epoch:04d}.ckpt",
            model,
            "mae",
            cfg_dict,
            {"epoch": epoch, "seed": config.seed, "objective": "mae",
             "mask_ratio": config.mask_ratio, "steps_completed": step_index},
            optimizer,
        )
        _write_loss_history(
            out_dir / "loss_history.csv", history, ["epoch", "step", "loss", "masked", "visible"]
        )
    return last_path
