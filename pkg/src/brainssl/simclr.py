"""Contrastive model and objective: encoder, projection head, NT-Xent.

Projections are laid out as a (2N, dim) matrix where rows i and i + N are
the two views of sample i. The loss for one direction is

    L(i, j) = -log( exp(sim(z_i, z_j)/tau) / sum_{k != i} exp(sim(z_i, z_k)/tau) )

with cosine similarity, and the total is the mean over pairs of
(L(i,j) + L(j,i)) / 2, which equals the row mean of the 2N cross-entropy
terms. Logits are max-subtracted inside log-softmax before exponentiation.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .resnet3d import MIN_INPUT_AXIS, ProjectionHead, ResNet3d
from .volume import VolumeGrid

ARCHITECTURES = ("resnet18_3d",)


class NumericError(RuntimeError):
    """Non-finite values where finite ones are required."""


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "resnet18_3d"
    widths: tuple = (64, 128, 256, 512)
    input_shape: tuple = (150, 192, 192)
    projection_dim: int = 64
    projection_hidden: int | None = None  # defaults to the embedding width
    projection_layers: int = 2
    projection_bias: bool = True
    temperature: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be 4 positive stage widths, got {self.widths}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.projection_dim < 1:
            raise ValueError(f"projection_dim must be >= 1, got {self.projection_dim}")
        if self.projection_layers not in (1, 2):
            raise ValueError(f"projection_layers must be 1 or 2, got {self.projection_layers}")
        if len(self.input_shape) != 3 or min(self.input_shape) < MIN_INPUT_AXIS:
            raise ValueError(
                f"input shape {self.input_shape} too small for 5 stride-2 downsamplings "
                f"(every axis must be >= {MIN_INPUT_AXIS})"
            )

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    @property
    def hidden_dim(self) -> int:
        return self.projection_hidden if self.projection_hidden is not None else self.embed_dim


class SimCLRModel(torch.nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.encoder = ResNet3d(widths=config.widths)
        self.projector = ProjectionHead(
            config.embed_dim,
            config.hidden_dim,
            config.projection_dim,
            layers=config.projection_layers,
            bias=config.projection_bias,
        )

    def forward(self, x):
        h = self.encoder(x)
        return h, self.projector(h)


def init_encoder(config: EncoderConfig, seed: int) -> SimCLRModel:
    """Build the model with deterministic initialization for ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SimCLRModel(config)
    model.eval()
    return model


def _as_batch_array(volumes) -> np.ndarray:
    if isinstance(volumes, np.ndarray):
        arr = volumes
    else:
        arr = np.stack([v.data if isinstance(v, VolumeGrid) else np.asarray(v) for v in volumes])
    if arr.ndim != 4:
        raise ValueError(f"expected a batch shaped (B, d, h, w), got {arr.shape}")
    return np.ascontiguousarray(arr, dtype=np.float32)


def encode(model: SimCLRModel, volumes, batch_size: int = 8) -> np.ndarray:
    """Embeddings h = f(x) in eval mode; raises NumericError on non-finite output."""
    arr = _as_batch_array(volumes)
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, arr.shape[0], batch_size):
            chunk = torch.from_numpy(arr[start : start + batch_size]).unsqueeze(1)
            h = model.encoder(chunk)
            if not torch.isfinite(h).all():
                raise NumericError("encoder produced non-finite activations")
            outputs.append(h.numpy())
    return np.concatenate(outputs, axis=0)


def project(model: SimCLRModel, h) -> np.ndarray:
    """Map embeddings through the projection head; output dim is config.projection_dim."""
    h = np.asarray(h, dtype=np.float32)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != model.config.embed_dim:
        raise ValueError(f"expected embeddings of dim {model.config.embed_dim}, got shape {h.shape}")
    model.eval()
    with torch.no_grad():
        z = model.projector(torch.from_numpy(h)).numpy()
    return z[0] if squeeze else z


def cosine_sim(z_a, z_b) -> float:
    a = np.asarray(z_a, dtype=np.float64).ravel()
    b = np.asarray(z_b, dtype=np.float64).ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero-norm input")
    return float(a @ b / (na * nb))


def _check_projection_batch(z: torch.Tensor, tau: float):
    if z.ndim != 2:
        raise ValueError(f"projections must be 2D (2N, dim), got shape {tuple(z.shape)}")
    two_n = z.shape[0]
    if two_n < 2 or two_n % 2 != 0:
        raise ValueError(f"need an even number >= 2 of projections, got {two_n}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    norms = torch.linalg.vector_norm(z.detach(), dim=1)
    if (norms == 0).any():
        raise ValueError("zero-norm projection in batch")


def _nt_xent_rows(z: torch.Tensor, rows: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-row NT-Xent terms for the given query rows against all 2N keys."""
    two_n = z.shape[0]
    n = two_n // 2
    z = z / torch.linalg.vector_norm(z, dim=1, keepdim=True)
    logits = (z[rows] @ z.T) / tau
    logits = logits.masked_fill(
        torch.nn.functional.one_hot(rows, num_classes=two_n).bool(), float("-inf")
    )
    targets = (rows + n) % two_n
    return F.cross_entropy(logits, targets, reduction="none")


def nt_xent_loss(projections, tau: float):
    """Mean NT-Xent loss over all positive pairs.

    Accepts a torch tensor (returns a differentiable scalar tensor) or any
    array-like (computed in float64, returns a float).
    """
    if isinstance(projections, torch.Tensor):
        z = projections
        _check_projection_batch(z, tau)
        rows = torch.arange(z.shape[0], device=z.device)
        return _nt_xent_rows(z, rows, tau).mean()
    z = torch.from_numpy(np.asarray(projections, dtype=np.float64))
    _check_projection_batch(z, tau)
    rows = torch.arange(z.shape[0])
    return float(_nt_xent_rows(z, rows, tau).mean())


def nt_xent_loss_sharded(projections, tau: float, num_workers: int):
    """NT-Xent computed as data-parallel replicas would: each worker owns a
    slice of the pairs but sees every projection in the denominator. The
    combined value matches nt_xent_loss up to summation order.
    """
    if num_workers < 1:
        raise ValueError(f"num_workers must be >= 1, got {num_workers}")
    is_torch = isinstance(projections, torch.Tensor)
    z = projections if is_torch else torch.from_numpy(np.asarray(projections, dtype=np.float64))
    _check_projection_batch(z, tau)
    two_n = z.shape[0]
    n = two_n // 2
    if num_workers > n:
        raise ValueError(f"cannot shard {n} pairs across {num_workers} workers")
    pair_shards = [t for t in torch.tensor_split(torch.arange(n), num_workers) if len(t)]
    total = None
    for pairs in pair_shards:
        rows = torch.cat([pairs, pairs + n])
        worker_loss = _nt_xent_rows(z, rows, tau).mean()
        weighted = worker_loss * (len(rows) / two_n)
        total = weighted if total is None else total + weighted
    return total if is_torch else float(total)


def nt_xent_grad_check(projections, tau: float, step: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference
    gradients of the loss w.r.t. every projection coordinate (float64)."""
    z0 = np.asarray(projections, dtype=np.float64)
    z = torch.from_numpy(z0.copy()).requires_grad_(True)
    loss = nt_xent_loss(z, tau)
    loss.backward()
    analytic = z.grad.numpy().copy()

    fd = np.zeros_like(z0)
    for idx in np.ndindex(z0.shape):
        plus = z0.copy()
        plus[idx] += step
        minus = z0.copy()
        minus[idx] -= step
        fd[idx] = (nt_xent_loss(plus, tau) - nt_xent_loss(minus, tau)) / (2 * step)

    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(analytic - fd).max() / scale)


def parameter_checksum(model: torch.nn.Module) -> str:
    """Digest of all parameters and buffers; used to audit frozen encoders."""
    h = hashlib.blake2b(digest_size=16)
    state = model.state_dict()
    for name in sorted(state):
        h.update(name.encode("utf-8"))
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()
