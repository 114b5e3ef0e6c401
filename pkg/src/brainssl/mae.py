"""Masked autoencoder over 3D patch grids.

Volumes are split into non-overlapping patches in depth-major order. A
random subset of patch indices is masked; the transformer encoder sees
only the visible tokens, and the decoder reconstructs every position in
voxel space from encoded visible tokens plus a shared learned mask token.
The objective is the mean over masked patches of the squared L2 distance
between predicted and original patches:

    loss = (1/|M|) * sum_{i in M} ||pred_i - patch_i||^2

By default the squared norm is summed over a patch's voxels (the loss is
normalized by |M| only); pass per_voxel=True for the voxel-mean variant
when cross-checking against implementations that average over voxels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .vit3d import TransformerStack
from .volume import VolumeGrid

VIT_VARIANTS = ("vit_tiny",)


class PatchError(ValueError):
    pass


@dataclass(frozen=True)
class PatchLayout:
    volume_shape: tuple[int, int, int]
    patch_dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(n) for n in self.volume_shape))
        object.__setattr__(self, "patch_dims", tuple(int(n) for n in self.patch_dims))
        if any(p < 1 for p in self.patch_dims):
            raise PatchError(f"patch dims must be >= 1, got {self.patch_dims}")
        if any(s % p != 0 for s, p in zip(self.volume_shape, self.patch_dims)):
            raise PatchError(
                f"volume shape {self.volume_shape} not divisible by patch dims {self.patch_dims}"
            )

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return tuple(s // p for s, p in zip(self.volume_shape, self.patch_dims))

    @property
    def num_patches(self) -> int:
        return int(np.prod(self.grid_dims))

    @property
    def patch_voxels(self) -> int:
        return int(np.prod(self.patch_dims))


def _volume_array(v) -> np.ndarray:
    return v.data if isinstance(v, VolumeGrid) else np.asarray(v)


def patchify(v, patch_dims) -> np.ndarray:
    """(num_patches, patch_voxels) array in depth-major patch order."""
    data = _volume_array(v)
    layout = PatchLayout(data.shape, patch_dims)
    gd, gh, gw = layout.grid_dims
    pd, ph, pw = layout.patch_dims
    blocks = data.reshape(gd, pd, gh, ph, gw, pw).transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(blocks.reshape(layout.num_patches, layout.patch_voxels))


def torch_patchify(x: torch.Tensor, patch_dims) -> torch.Tensor:
    """Batched patchify: (B, d, h, w) or (B, 1, d, h, w) -> (B, P, L).

    Same depth-major ordering as patchify; differentiable.
    """
    if x.ndim == 5:
        x = x.squeeze(1)
    if x.ndim != 4:
        raise PatchError(f"expected a batch of volumes, got shape {tuple(x.shape)}")
    layout = PatchLayout(tuple(x.shape[1:]), patch_dims)
    gd, gh, gw = layout.grid_dims
    pd, ph, pw = layout.patch_dims
    blocks = x.reshape(x.shape[0], gd, pd, gh, ph, gw, pw).permute(0, 1, 3, 5, 2, 4, 6)
    return blocks.reshape(x.shape[0], layout.num_patches, layout.patch_voxels)


def unpatchify(patches, layout: PatchLayout) -> np.ndarray:
    """Exact inverse of patchify for the given layout."""
    patches = np.asarray(patches)
    if patches.shape != (layout.num_patches, layout.patch_voxels):
        raise PatchError(
            f"expected {(layout.num_patches, layout.patch_voxels)} patches, got {patches.shape}"
        )
    gd, gh, gw = layout.grid_dims
    pd, ph, pw = layout.patch_dims
    blocks = patches.reshape(gd, gh, gw, pd, ph, pw).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(blocks.reshape(layout.volume_shape))


@dataclass(frozen=True)
class MaskSet:
    masked: tuple[int, ...]
    num_patches: int
    ratio: float

    def __post_init__(self):
        masked = tuple(sorted(int(i) for i in self.masked))
        object.__setattr__(self, "masked", masked)
        if len(set(masked)) != len(masked):
            raise PatchError("duplicate masked indices")
        if masked and (masked[0] < 0 or masked[-1] >= self.num_patches):
            raise PatchError(f"masked indices out of [0, {self.num_patches})")

    @property
    def visible(self) -> tuple[int, ...]:
        masked = set(self.masked)
        return tuple(i for i in range(self.num_patches) if i not in masked)


def sample_mask(num_patches: int, ratio: float, rng: np.random.Generator) -> MaskSet:
    """Uniform random mask of round(ratio * num_patches) indices."""
    if not (0.0 <= ratio <= 1.0):
        raise ValueError(f"mask ratio must be in [0, 1], got {ratio}")
    count = int(np.floor(ratio * num_patches + 0.5))
    masked = rng.permutation(num_patches)[:count]
    return MaskSet(masked=tuple(int(i) for i in masked), num_patches=num_patches, ratio=ratio)


def sinusoidal_pos_embed(layout: PatchLayout, dim: int) -> np.ndarray:
    """Fixed per-patch position code: the embedding splits into three equal
    axis groups, each a 1D sine/cosine code of that axis' patch coordinate."""
    if dim % 6 != 0:
        raise ValueError(f"embedding dim must be divisible by 6 (3 axes x sin/cos), got {dim}")
    group = dim // 3
    half = group // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half, dtype=np.float64) / half))
    gd, gh, gw = layout.grid_dims
    coords = np.stack(np.meshgrid(np.arange(gd), np.arange(gh), np.arange(gw), indexing="ij"))
    coords = coords.reshape(3, -1)
    parts = []
    for axis in range(3):
        angles = coords[axis][:, None] * freqs[None, :]
        parts.append(np.sin(angles))
        parts.append(np.cos(angles))
    return np.concatenate(parts, axis=1).astype(np.float32)


def _padded_pos_table(layout: PatchLayout, dim: int) -> np.ndarray:
    """Position table for any dim: sinusoidal on the largest multiple of 6,
    zero-padded on the remaining channels."""
    usable = dim - dim % 6
    table = np.zeros((layout.num_patches, dim), dtype=np.float32)
    if usable:
        table[:, :usable] = sinusoidal_pos_embed(layout, usable)
    return table


@dataclass(frozen=True)
class ViTConfig:
    variant: str = "vit_tiny"
    embed_dim: int = 192
    depth: int = 12
    num_heads: int = 3
    decoder_embed_dim: int = 512
    decoder_depth: int = 8
    decoder_heads: int = 16
    patch_dims: tuple = (25, 16, 16)
    input_shape: tuple = (150, 192, 192)
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "patch_dims", tuple(int(n) for n in self.patch_dims))
        object.__setattr__(self, "input_shape", tuple(int(n) for n in self.input_shape))
        if self.variant not in VIT_VARIANTS:
            raise ValueError(f"unknown ViT variant {self.variant!r}")
        if self.depth < 1 or self.decoder_depth < 1:
            raise ValueError("transformer depths must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if self.decoder_embed_dim % self.decoder_heads != 0:
            raise ValueError(
                f"decoder_embed_dim {self.decoder_embed_dim} not divisible by {self.decoder_heads} heads"
            )
        PatchLayout(self.input_shape, self.patch_dims)

    @property
    def layout(self) -> PatchLayout:
        return PatchLayout(self.input_shape, self.patch_dims)


class MaskedAutoencoder3d(nn.Module):
    def __init__(self, config: ViTConfig):
        super().__init__()
        self.config = config
        layout = config.layout
        self.layout = layout
        self.patch_embed = nn.Linear(layout.patch_voxels, config.embed_dim)
        self.register_buffer(
            "pos_embed", torch.from_numpy(_padded_pos_table(layout, config.embed_dim))
        )
        self.encoder = TransformerStack(config.embed_dim, config.depth, config.num_heads, config.mlp_ratio)
        self.decoder_embed = nn.Linear(config.embed_dim, config.decoder_embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(config.decoder_embed_dim))
        self.register_buffer(
            "decoder_pos_embed", torch.from_numpy(_padded_pos_table(layout, config.decoder_embed_dim))
        )
        self.decoder = TransformerStack(
            config.decoder_embed_dim, config.decoder_depth, config.decoder_heads, config.mlp_ratio
        )
        self.decoder_pred = nn.Linear(config.decoder_embed_dim, layout.patch_voxels)
        nn.init.normal_(self.mask_token, std=0.02)

    def encode_visible(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Encode only the visible tokens. patches: (B, P, L); visible: (B, V)."""
        tokens = self.patch_embed(patches) + self.pos_embed[None]
        idx = visible[..., None].expand(-1, -1, tokens.shape[-1])
        return self.encoder(torch.gather(tokens, 1, idx))

    def decode_all(self, encoded: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Reconstruct every position from encoded visible tokens + mask tokens."""
        b = encoded.shape[0]
        p = self.layout.num_patches
        dec = self.decoder_embed(encoded)
        full = self.mask_token.expand(b, p, -1).clone()
        idx = visible[..., None].expand(-1, -1, dec.shape[-1])
        full = full.scatter(1, idx, dec)
        full = full + self.decoder_pos_embed[None]
        return self.decoder_pred(self.decoder(full))

    def forward(self, patches: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        return self.decode_all(self.encode_visible(patches, visible), visible)

    def encode_features(self, patches: torch.Tensor) -> torch.Tensor:
        """Mask-free full-sequence features for downstream heads: mean-pooled
        encoder output, (B, embed_dim)."""
        tokens = self.patch_embed(patches) + self.pos_embed[None]
        return self.encoder(tokens).mean(dim=1)


def init_mae(config: ViTConfig, seed: int) -> MaskedAutoencoder3d:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MaskedAutoencoder3d(config)
    model.eval()
    return model


def mae_forward(model: MaskedAutoencoder3d, v, mask: MaskSet) -> np.ndarray:
    """Predicted patches (num_patches, patch_voxels) for one volume."""
    layout = model.layout
    if mask.num_patches != layout.num_patches:
        raise PatchError(f"mask covers {mask.num_patches} patches, layout has {layout.num_patches}")
    patches = patchify(v, layout.patch_dims).astype(np.float32)
    visible = torch.tensor(mask.visible, dtype=torch.long)[None]
    model.eval()
    with torch.no_grad():
        pred = model(torch.from_numpy(patches)[None], visible)
    if not torch.isfinite(pred).all():
        raise FloatingPointError("MAE forward produced non-finite values")
    return pred[0].numpy()


def _masked_indices(masked) -> np.ndarray:
    if isinstance(masked, MaskSet):
        idx = np.asarray(masked.masked, dtype=np.int64)
    else:
        idx = np.asarray(masked, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("mask set is empty; the loss is undefined")
    return idx


def _mae_loss_torch(pred: torch.Tensor, target: torch.Tensor, idx: torch.Tensor, per_voxel: bool):
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    diff = pred.index_select(-2, idx) - target.index_select(-2, idx)
    per_patch = (diff**2).sum(dim=-1)
    if per_voxel:
        per_patch = per_patch / pred.shape[-1]
    return per_patch.mean()


def mae_loss(pred, target, masked, per_voxel: bool = False):
    """Masked reconstruction loss; unmasked positions never affect the value.

    Accepts torch tensors (differentiable) or array-likes (float64, returns
    float). Shapes are (P, L) or (B, P, L).
    """
    idx = _masked_indices(masked)
    if isinstance(pred, torch.Tensor):
        return _mae_loss_torch(pred, target, torch.from_numpy(idx), per_voxel)
    pred64 = torch.from_numpy(np.asarray(pred, dtype=np.float64))
    target64 = torch.from_numpy(np.asarray(target, dtype=np.float64))
    return float(_mae_loss_torch(pred64, target64, torch.from_numpy(idx), per_voxel))


def mae_loss_grad_check(pred, target, masked, step: float = 1e-5, per_voxel: bool = False) -> float:
    """Max relative error between analytic and central finite-difference
    gradients of mae_loss w.r.t. the predictions (float64)."""
    p0 = np.asarray(pred, dtype=np.float64)
    t0 = np.asarray(target, dtype=np.float64)
    p = torch.from_numpy(p0.copy()).requires_grad_(True)
    loss = mae_loss(p, torch.from_numpy(t0), masked, per_voxel=per_voxel)
    loss.backward()
    analytic = p.grad.numpy().copy()

    fd = np.zeros_like(p0)
    for idx in np.ndindex(p0.shape):
        plus = p0.copy()
        plus[idx] += step
        minus = p0.copy()
        minus[idx] -= step
        fd[idx] = (
            mae_loss(plus, t0, masked, per_voxel=per_voxel)
            - mae_loss(minus, t0, masked, per_voxel=per_voxel)
        ) / (2 * step)

    scale = max(np.abs(analytic).max(), np.abs(fd).max(), 1e-12)
    return float(np.abs(analytic - fd).max() / scale)
