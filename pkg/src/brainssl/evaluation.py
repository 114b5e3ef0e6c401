"""Downstream evaluation: linear probing, fine-tuning, supervised baselines,
metrics, and multi-seed report aggregation.

Probing freezes the encoder (audited by a parameter checksum before and
after) and trains a single linear head on cached features with no
augmentation. Fine-tuning trains everything; the augmentation stack
follows the pre-training objective: none after contrastive pre-training,
the supervised stack after masked-autoencoder pre-training. Head training
epochs are capped at 100; supervised baselines default to 300 epochs.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .augment import apply_spec, build_pipeline
from .mae import MaskedAutoencoder3d, ViTConfig, init_mae, torch_patchify
from .manifest import DatasetManifest, ManifestError, binary_label_values
from .rng import SeedStream, derive_seed
from .sampling import FRACTION_LADDER, epoch_schedule, epoch_seed_for, fraction_subset
from .simclr import EncoderConfig, SimCLRModel, init_encoder, parameter_checksum
from .training import TrainConfig, VolumeStore, load_model_checkpoint, lr_at, save_model_checkpoint

HEAD_EPOCH_CAP = 100

TASK_KINDS = ("binary_classification", "regression")


class FrozenEncoderError(RuntimeError):
    """Encoder parameters changed during an operation that must not touch them."""


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative, ties
    counted one half; identical to the O(n^2) pairwise count."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length 1D, got {s.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def mean_abs_err(pred, target) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1 or p.size == 0:
        raise ValueError(f"pred and target must be equal-length non-empty 1D, got {p.shape} and {t.shape}")
    return float(np.abs(p - t).mean())


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class DownstreamTask:
    name: str
    kind: str
    label: str
    clamp: tuple | None = None  # evaluation-time clamp for bounded targets

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.clamp is not None:
            object.__setattr__(self, "clamp", (float(self.clamp[0]), float(self.clamp[1])))

    @property
    def metric(self) -> str:
        return "auc" if self.kind == "binary_classification" else "mean_abs_err"


BUILTIN_TASKS = {
    "synthetic-asymmetry": DownstreamTask("synthetic-asymmetry", "binary_classification", "sex"),
    "synthetic-size": DownstreamTask("synthetic-size", "regression", "age"),
    "synthetic-lesions": DownstreamTask("synthetic-lesions", "regression", "stroke_scale", clamp=(0, 42)),
    "stroke-scale": DownstreamTask("stroke-scale", "regression", "stroke_scale", clamp=(0, 42)),
    "alzheimers": DownstreamTask("alzheimers", "binary_classification", "diagnosis"),
    "sex": DownstreamTask("sex", "binary_classification", "sex"),
    "age": DownstreamTask("age", "regression", "age"),
}


def get_task(name: str) -> DownstreamTask:
    if name not in BUILTIN_TASKS:
        raise KeyError(f"unknown task {name!r}; known: {sorted(BUILTIN_TASKS)}")
    return BUILTIN_TASKS[name]


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class EvalReport:
    task: str
    mode: str  # LP | FT | supervised
    model: str
    metric: str
    seeds: tuple[int, ...]
    values: tuple[float, ...]
    mean: float
    std: float | None
    config_hash: str = ""
    encoder_checksum: str | None = None
    runtime_s: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "extra", dict(self.extra))
        if len(self.values) != len(self.seeds) or not self.values:
            raise ValueError("need one value per seed, at least one")
        if not (min(self.values) - 1e-12 <= self.mean <= max(self.values) + 1e-12):
            raise ValueError(f"mean {self.mean} outside value range")
        if self.std is None and len(self.values) > 1:
            raise ValueError("std required for multi-run reports")

    @classmethod
    def single(cls, task, mode, model, metric, seed, value, **kwargs):
        return cls(
            task=task, mode=mode, model=model, metric=metric,
            seeds=(seed,), values=(value,), mean=float(value), std=None, **kwargs,
        )

    def to_record(self, include_runtime: bool = False) -> dict:
        record = {
            "task": self.task,
            "mode": self.mode,
            "model": self.model,
            "metric": self.metric,
            "seeds": list(self.seeds),
            "values": list(self.values),
            "mean": self.mean,
            "std": self.std,
            "config_hash": self.config_hash,
            "encoder_checksum": self.encoder_checksum,
            "extra": self.extra,
        }
        if include_runtime:
            record["runtime_s"] = self.runtime_s
        return record

    @classmethod
    def from_record(cls, record: dict) -> "EvalReport":
        return cls(
            task=record["task"],
            mode=record["mode"],
            model=record["model"],
            metric=record["metric"],
            seeds=tuple(record["seeds"]),
            values=tuple(record["values"]),
            mean=record["mean"],
            std=record["std"],
            config_hash=record.get("config_hash", ""),
            encoder_checksum=record.get("encoder_checksum"),
            runtime_s=record.get("runtime_s"),
            extra=record.get("extra", {}),
        )


def aggregate_runs(reports: list[EvalReport], force: bool = False) -> EvalReport:
    """Mean and sample standard deviation over per-seed metric values."""
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if (r.task, r.mode, r.metric, r.model) != (first.task, first.mode, first.metric, first.model):
            raise ValueError(
                f"cannot aggregate mixed reports: {(r.task, r.mode, r.model)} vs "
                f"{(first.task, first.mode, first.model)}"
            )
        if r.config_hash != first.config_hash and not force:
            raise ValueError("config hashes differ across reports (pass force=True to override)")
    seeds = tuple(s for r in reports for s in r.seeds)
    values = tuple(v for r in reports for v in r.values)
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) > 1 else None
    runtimes = [r.runtime_s for r in reports if r.runtime_s is not None]
    return EvalReport(
        task=first.task, mode=first.mode, model=first.model, metric=first.metric,
        seeds=seeds, values=values, mean=mean, std=std,
        config_hash=first.config_hash,
        runtime_s=sum(runtimes) if runtimes else None,
    )


def save_reports(reports: list[EvalReport], path, include_runtime: bool = False) -> None:
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(include_runtime=include_runtime), sort_keys=True) + "\n")


def load_reports(path) -> list[EvalReport]:
    import json

    with Path(path).open("r", encoding="utf-8") as fh:
        return [EvalReport.from_record(json.loads(line)) for line in fh if line.strip()]


def render_report_table(reports: list[EvalReport]) -> str:
    """Model x task grid of "mean +/- std" cells (LP/FT suffixed rows)."""
    if not reports:
        raise ValueError("no reports to render")
    tasks = sorted({(r.task, r.metric) for r in reports})
    rows = sorted({_row_label(r) for r in reports})
    cells = {}
    for r in reports:
        key = (_row_label(r), (r.task, r.metric))
        cells[key] = f"{r.mean:.3f} ± {r.std:.3f}" if r.std is not None else f"{r.mean:.3f}"
    headers = ["Model/Task"] + [f"{t} ({m})" for t, m in tasks]
    table = [headers]
    for row in rows:
        table.append([row] + [cells.get((row, t), "-") for t in tasks])
    widths = [max(len(line[i]) for line in table) for i in range(len(headers))]
    lines = []
    for i, line in enumerate(table):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _row_label(r: EvalReport) -> str:
    return r.model if r.mode == "supervised" else f"{r.model}-{r.mode}"


# ---------------------------------------------------------------------------
# encoder bundles (architecture-agnostic feature extraction)


class EncoderBundle:
    """Wraps a backbone so probing/fine-tuning are architecture-agnostic."""

    def __init__(self, model, kind: str, model_name: str, input_shape, objective: str):
        self.model = model
        self.kind = kind  # simclr | mae
        self.model_name = model_name
        self.input_shape = tuple(int(n) for n in input_shape)
        self.objective = objective  # what pre-training produced this encoder

    @property
    def encoder_module(self) -> torch.nn.Module:
        return self.model.encoder if self.kind == "simclr" else self.model

    @property
    def embed_dim(self) -> int:
        if self.kind == "simclr":
            return self.model.config.embed_dim
        return self.model.config.embed_dim

    def features_torch(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable features for a (B, 1, d, h, w) batch."""
        if self.kind == "simclr":
            return self.model.encoder(x)
        patches = torch_patchify(x, self.model.config.patch_dims)
        return self.model.encode_features(patches)

    def features_numpy(self, volumes: np.ndarray, batch_size: int = 8) -> np.ndarray:
        self.model.eval()
        chunks = []
        with torch.no_grad():
            for start in range(0, volumes.shape[0], batch_size):
                x = torch.from_numpy(volumes[start : start + batch_size]).unsqueeze(1)
                chunks.append(self.features_torch(x).numpy())
        return np.concatenate(chunks, axis=0)


def bundle_from_checkpoint(path) -> EncoderBundle:
    model, kind, config, meta = load_model_checkpoint(path)
    if kind == "simclr":
        input_shape = tuple(config["encoder"]["input_shape"])
        model_name = config["encoder"].get("architecture", "resnet18_3d")
    else:
        input_shape = tuple(config["vit"]["input_shape"])
        model_name = config["vit"].get("variant", "vit_tiny")
    return EncoderBundle(model, kind, model_name, input_shape, meta.get("objective", kind))


def bundle_from_config(model_config, seed: int) -> EncoderBundle:
    """Randomly initialized bundle (untrained baseline / supervised start)."""
    if isinstance(model_config, EncoderConfig):
        return EncoderBundle(
            init_encoder(model_config, seed), "simclr", model_config.architecture,
            model_config.input_shape, "random-init",
        )
    if isinstance(model_config, ViTConfig):
        return EncoderBundle(
            init_mae(model_config, seed), "mae", model_config.variant,
            model_config.input_shape, "random-init",
        )
    raise TypeError(f"unsupported model config type {type(model_config)!r}")


def save_random_init_checkpoint(model_config, seed: int, path) -> Path:
    """Persist an untrained encoder so it can be probed like any checkpoint."""
    bundle = bundle_from_config(model_config, seed)
    if bundle.kind == "simclr":
        cfg = {"encoder": asdict(model_config)}
    else:
        cfg = {"vit": asdict(model_config)}
    return save_model_checkpoint(
        path, bundle.model, bundle.kind, cfg,
        {"epoch": 0, "seed": seed, "objective": "random-init", "steps_completed": 0},
    )


# ---------------------------------------------------------------------------
# label plumbing


def _patient_target(patient, task: DownstreamTask, positive_value=None) -> float:
    if task.label not in patient.labels:
        raise ManifestError(f"label {task.label!r} missing for patient {patient.patient_id}")
    raw = patient.labels[task.label]
    if task.kind == "binary_classification":
        return 1.0 if str(raw) == positive_value else 0.0
    return float(raw)


def _split_arrays(manifest, split, task, store, bundle, positive_value):
    """Features and targets for one split (first scan per patient)."""
    patients = sorted(manifest.patients_in(split), key=lambda p: p.patient_id)
    if not patients:
        raise ManifestError(f"split {split!r} is empty")
    volumes = np.stack([store.volume(p.scans[0].scan_id).data for p in patients])
    targets = np.array([_patient_target(p, task, positive_value) for p in patients])
    features = bundle.features_numpy(volumes)
    return features, targets


def _positive_value(manifest, task) -> str | None:
    if task.kind != "binary_classification":
        return None
    return binary_label_values(manifest, task.label)[1]


def _metric_value(task: DownstreamTask, scores: np.ndarray, targets: np.ndarray) -> float:
    if task.kind == "binary_classification":
        return auc(scores, targets.astype(int))
    if task.clamp is not None:
        scores = np.clip(scores, task.clamp[0], task.clamp[1])
    return mean_abs_err(scores, targets)


# ---------------------------------------------------------------------------
# linear head on cached features


def _fit_linear_head(features, targets, task, cfg: "EvalRunConfig", seed: int):
    """Full-batch Adam on per-feature standardized inputs; returns
    (head, mean, std). Standardization is an affine map absorbable into the
    linear head, so the model stays a single linear layer; with zero
    training epochs the untrained head scores raw features (mean 0, std 1).
    """
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "head"))
        head = torch.nn.Linear(features.shape[1], 1)
    epochs = min(cfg.epochs, HEAD_EPOCH_CAP)
    zero_mean = np.zeros(features.shape[1], dtype=np.float64)
    unit_std = np.ones(features.shape[1], dtype=np.float64)
    if epochs == 0:
        return head, zero_mean, unit_std
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std < 1e-8, 1.0, std)
    x = torch.from_numpy(((features - mean) / std).astype(np.float32))
    y = torch.from_numpy(targets.astype(np.float32))[:, None]
    loss_fn = torch.nn.BCEWithLogitsLoss() if task.kind == "binary_classification" else torch.nn.MSELoss()
    opt = torch.optim.Adam(head.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    head.train()
    for _ in range(epochs):
        opt.zero_grad()
        loss_fn(head(x), y).backward()
        opt.step()
    head.eval()
    return head, mean, std


def _head_scores(head, features, mean=None, std=None) -> np.ndarray:
    if mean is not None:
        features = (features - mean) / std
    with torch.no_grad():
        return head(torch.from_numpy(features.astype(np.float32))).numpy()[:, 0]


@dataclass(frozen=True)
class EvalRunConfig:
    epochs: int = 100
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int = 8

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def linear_probe(
    checkpoint,
    task: DownstreamTask,
    cfg: EvalRunConfig,
    manifest: DatasetManifest,
    seed: int = 0,
    config_hash: str = "",
) -> EvalReport:
    """Frozen-encoder evaluation: cached features + one linear head, no
    augmentation. The encoder checksum is asserted unchanged."""
    t0 = time.time()
    bundle = checkpoint if isinstance(checkpoint, EncoderBundle) else bundle_from_checkpoint(checkpoint)
    bundle.model.eval()
    for p in bundle.model.parameters():
        p.requires_grad_(False)
    checksum_before = parameter_checksum(bundle.model)

    positive = _positive_value(manifest, task)
    store = VolumeStore(manifest, target_shape=bundle.input_shape)
    train_x, train_y = _split_arrays(manifest, "train", task, store, bundle, positive)
    val_x, val_y = _split_arrays(manifest, "val", task, store, bundle, positive)
    test_x, test_y = _split_arrays(manifest, "test", task, store, bundle, positive)

    head, mean, std = _fit_linear_head(train_x, train_y, task, cfg, seed)

    checksum_after = parameter_checksum(bundle.model)
    if checksum_before != checksum_after:
        raise FrozenEncoderError("encoder parameters changed during linear probing")

    val_metric = _metric_value(task, _head_scores(head, val_x, mean, std), val_y)
    test_metric = _metric_value(task, _head_scores(head, test_x, mean, std), test_y)
    return EvalReport.single(
        task=task.name, mode="LP", model=bundle.model_name, metric=task.metric,
        seed=seed, value=test_metric, config_hash=config_hash,
        encoder_checksum=checksum_after, runtime_s=time.time() - t0,
        extra={"val_metric": val_metric, "head_epochs": min(cfg.epochs, HEAD_EPOCH_CAP),
               "objective": bundle.objective},
    )


# ---------------------------------------------------------------------------
# end-to-end trained evaluation (fine-tune / supervised)


def _train_labeled_encoder(bundle, head, manifest, task, cfg, spec, seed, positive, epochs):
    """Shared mini-batch trainer over (encoder, head) with per-sample
    augmentation substreams; one scan per patient per epoch."""
    store = VolumeStore(manifest, target_shape=bundle.input_shape)
    params = [p for p in bundle.model.parameters() if p.requires_grad] + list(head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    loss_fn = torch.nn.BCEWithLogitsLoss() if task.kind == "binary_classification" else torch.nn.MSELoss()
    patients = {p.patient_id: p for p in manifest.patients}
    n_train = len(manifest.patients_in("train"))
    steps_per_epoch = max(1, n_train // cfg.batch_size)
    train_cfg = TrainConfig(
        objective="supervised", epochs=max(1, epochs), effective_batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay, augment="none", seed=seed,
    )
    step = 0
    for epoch in range(1, epochs + 1):
        schedule = epoch_schedule(manifest, epoch_seed_for(derive_seed(seed, "labeled"), epoch))
        bundle.model.train()
        head.train()
        for batch in _chunks(schedule.entries, cfg.batch_size):
            views = []
            targets = []
            for pid, sid in batch:
                view = apply_spec(store.volume(sid), spec, SeedStream(seed).child("aug", f"e{epoch}", sid))
                views.append(view.data)
                targets.append(_patient_target(patients[pid], task, positive))
            x = torch.from_numpy(np.stack(views)).unsqueeze(1)
            y = torch.tensor(targets, dtype=torch.float32)[:, None]
            for group in opt.param_groups:
                group["lr"] = lr_at(train_cfg, step, steps_per_epoch)
            opt.zero_grad()
            loss = loss_fn(head(bundle.features_torch(x)), y)
            if not torch.isfinite(loss):
                raise FloatingPointError("non-finite loss during labeled training")
            loss.backward()
            opt.step()
            step += 1
    bundle.model.eval()
    head.eval()


def _chunks(entries, size):
    for start in range(0, len(entries), size):
        yield entries[start : start + size]


def _evaluate_trained(bundle, head, manifest, task, positive):
    store = VolumeStore(manifest, target_shape=bundle.input_shape)
    metrics = {}
    for split in ("val", "test"):
        patients = sorted(manifest.patients_in(split), key=lambda p: p.patient_id)
        volumes = np.stack([store.volume(p.scans[0].scan_id).data for p in patients])
        targets = np.array([_patient_target(p, task, positive) for p in patients])
        features = bundle.features_numpy(volumes)
        scores = _head_scores(head, features)
        metrics[split] = _metric_value(task, scores, targets)
    return metrics


def finetune(
    checkpoint,
    task: DownstreamTask,
    cfg: EvalRunConfig,
    manifest: DatasetManifest,
    seed: int = 0,
    config_hash: str = "",
) -> EvalReport:
    """All-parameters fine-tuning with a fresh task head, capped at 100 epochs.

    Augmentation follows the pre-training objective: none for contrastive
    checkpoints, the supervised stack for masked-autoencoder checkpoints.
    """
    t0 = time.time()
    bundle = checkpoint if isinstance(checkpoint, EncoderBundle) else bundle_from_checkpoint(checkpoint)
    for p in bundle.model.parameters():
        p.requires_grad_(True)
    pipeline = "none" if bundle.objective in ("simclr", "random-init") else "supervised"
    spec = build_pipeline(pipeline, out_shape=bundle.input_shape)
    positive = _positive_value(manifest, task)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "head"))
        head = torch.nn.Linear(bundle.embed_dim, 1)
    epochs = min(cfg.epochs, HEAD_EPOCH_CAP)
    if epochs > 0 and cfg.learning_rate > 0:
        _train_labeled_encoder(bundle, head, manifest, task, cfg, spec, seed, positive, epochs)
    metrics = _evaluate_trained(bundle, head, manifest, task, positive)
    return EvalReport.single(
        task=task.name, mode="FT", model=bundle.model_name, metric=task.metric,
        seed=seed, value=metrics["test"], config_hash=config_hash,
        runtime_s=time.time() - t0,
        extra={"val_metric": metrics["val"], "epochs": epochs, "augment": pipeline,
               "objective": bundle.objective},
    )


def train_supervised(
    model_config,
    task: DownstreamTask,
    cfg: EvalRunConfig,
    manifest: DatasetManifest,
    seed: int = 0,
    epochs: int = 300,
    config_hash: str = "",
) -> EvalReport:
    """From-scratch baseline with the supervised augmentation stack."""
    t0 = time.time()
    bundle = bundle_from_config(model_config, seed)
    for p in bundle.model.parameters():
        p.requires_grad_(True)
    spec = build_pipeline("supervised", out_shape=bundle.input_shape)
    positive = _positive_value(manifest, task)
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, "head"))
        head = torch.nn.Linear(bundle.embed_dim, 1)
    if epochs > 0 and cfg.learning_rate > 0:
        _train_labeled_encoder(bundle, head, manifest, task, cfg, spec, seed, positive, epochs)
    metrics = _evaluate_trained(bundle, head, manifest, task, positive)
    return EvalReport.single(
        task=task.name, mode="supervised", model=bundle.model_name, metric=task.metric,
        seed=seed, value=metrics["test"], config_hash=config_hash,
        runtime_s=time.time() - t0,
        extra={"val_metric": metrics["val"], "epochs": epochs, "augment": "supervised"},
    )


# ---------------------------------------------------------------------------
# data-fraction sweep


def run_fraction_sweep(
    checkpoint,
    tasks: list[DownstreamTask],
    cfg: EvalRunConfig,
    manifest: DatasetManifest,
    seed: int = 0,
    fractions=FRACTION_LADDER,
    mode: str = "lp",
    config_hash: str = "",
) -> list[dict]:
    """Metric vs training-data fraction; identical val/test sets across
    all ladder points. Rows: {task, fraction, metric, value, seed}."""
    from .sampling import restrict_train_split

    if mode not in ("lp", "ft"):
        raise ValueError(f"sweep mode must be lp or ft, got {mode!r}")
    bundle = checkpoint if isinstance(checkpoint, EncoderBundle) else bundle_from_checkpoint(checkpoint)
    rows = []
    for task in tasks:
        stratify = task.label if task.kind == "binary_classification" else None
        for fraction in fractions:
            subset = fraction_subset(manifest, fraction, seed, stratify_label=stratify)
            restricted = restrict_train_split(manifest, subset)
            if mode == "lp":
                report = linear_probe(bundle, task, cfg, restricted, seed, config_hash)
            else:
                report = finetune(bundle, task, cfg, restricted, seed, config_hash)
            rows.append(
                {
                    "task": task.name,
                    "fraction": fraction,
                    "metric": task.metric,
                    "value": report.values[0],
                    "seed": seed,
                }
            )
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    import csv

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["task", "fraction", "metric", "value", "seed"])
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {
                    "task": row["task"],
                    "fraction": f"{row['fraction']:.1f}",
                    "metric": row["metric"],
                    "value": f"{row['value']:.6f}",
                    "seed": row["seed"],
                }
            )


def plot_sweep(rows: list[dict], path) -> None:
    """Convenience rendering of the sweep; the CSV is the contract."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    tasks = sorted({r["task"] for r in rows})
    for task in tasks:
        pts = sorted((r["fraction"], r["value"]) for r in rows if r["task"] == task)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=task)
    ax.set_xlabel("fraction of training data")
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
