import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainssl.mae import (
    MaskedAutoencoder3d,
    MaskSet,
    PatchError,
    PatchLayout,
    ViTConfig,
    init_mae,
    mae_forward,
    mae_loss,
    mae_loss_grad_check,
    patchify,
    sample_mask,
    sinusoidal_pos_embed,
    torch_patchify,
    unpatchify,
)
from brainssl.rng import spawn_generator

DESK_VIT = ViTConfig(
    input_shape=(32, 32, 32),
    patch_dims=(8, 8, 8),
    decoder_embed_dim=96,
    decoder_depth=2,
    decoder_heads=3,
)


class TestPatchLayout:
    def test_paper_geometry(self):
        layout = PatchLayout((150, 192, 192), (25, 16, 16))
        assert layout.grid_dims == (6, 12, 12)
        assert layout.num_patches == 864
        assert layout.patch_voxels == 25 * 16 * 16

    def test_divisibility_required(self):
        with pytest.raises(PatchError):
            PatchLayout((150, 192, 192), (25, 16, 17))


class TestPatchify:
    def test_small_count(self, rng):
        v = rng.normal(size=(50, 32, 32)).astype(np.float32)
        patches = patchify(v, (25, 16, 16))
        assert patches.shape == (8, 25 * 16 * 16)

    def test_roundtrip_exact(self, rng):
        v = rng.normal(size=(32, 32, 32)).astype(np.float32)
        layout = PatchLayout((32, 32, 32), (8, 8, 8))
        assert np.array_equal(unpatchify(patchify(v, (8, 8, 8)), layout), v)

    def test_single_patch_layout_is_reshape(self, rng):
        v = rng.normal(size=(4, 4, 4)).astype(np.float32)
        patches = patchify(v, (4, 4, 4))
        assert patches.shape == (1, 64)
        assert np.array_equal(patches[0], v.ravel())

    def test_depth_major_ordering(self):
        v = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
        patches = patchify(v, (1, 1, 1))
        assert np.array_equal(patches.ravel(), v.ravel())

    def test_permuted_patches_detected_by_roundtrip(self, rng):
        v = rng.normal(size=(16, 16, 16)).astype(np.float32)
        layout = PatchLayout((16, 16, 16), (8, 8, 8))
        patches = patchify(v, (8, 8, 8))
        swapped = patches[::-1].copy()
        assert not np.array_equal(unpatchify(swapped, layout), v)

    def test_count_mismatch_rejected(self, rng):
        layout = PatchLayout((16, 16, 16), (8, 8, 8))
        with pytest.raises(PatchError):
            unpatchify(np.zeros((7, 512)), layout)

    def test_torch_matches_numpy(self, rng):
        v = rng.normal(size=(2, 16, 16, 16)).astype(np.float32)
        t = torch_patchify(torch.from_numpy(v), (8, 8, 8)).numpy()
        for b in range(2):
            assert np.array_equal(t[b], patchify(v[b], (8, 8, 8)))


class TestMasking:
    def test_paper_counts(self):
        m = sample_mask(864, 0.75, spawn_generator(0, "m"))
        assert len(m.masked) == 648
        assert len(m.visible) == 216

    def test_ratio_zero(self):
        m = sample_mask(100, 0.0, spawn_generator(0, "m"))
        assert m.masked == ()
        assert len(m.visible) == 100

    def test_partition_invariant(self):
        for i in range(50):
            m = sample_mask(60, 0.4, spawn_generator(1, "mask", i))
            masked, visible = set(m.masked), set(m.visible)
            assert masked | visible == set(range(60))
            assert masked & visible == set()

    def test_per_index_frequency(self):
        trials = 2000
        counts = np.zeros(40)
        for i in range(trials):
            m = sample_mask(40, 0.75, spawn_generator(2, "freq", i))
            counts[list(m.masked)] += 1
        freq = counts / trials
        assert np.abs(freq - 0.75).max() < 0.05

    def test_out_of_range_indices_rejected(self):
        with pytest.raises(PatchError):
            MaskSet(masked=(0, 99), num_patches=10, ratio=0.2)


class TestPosEmbed:
    def test_origin_row(self):
        layout = PatchLayout((32, 32, 32), (8, 8, 8))
        table = sinusoidal_pos_embed(layout, 192)
        row = table[0]
        group = 192 // 3
        half = group // 2
        for axis in range(3):
            sin_part = row[axis * group : axis * group + half]
            cos_part = row[axis * group + half : (axis + 1) * group]
            np.testing.assert_array_equal(sin_part, 0.0)
            np.testing.assert_array_equal(cos_part, 1.0)

    def test_deterministic(self):
        layout = PatchLayout((32, 32, 32), (8, 8, 8))
        a = sinusoidal_pos_embed(layout, 48)
        b = sinusoidal_pos_embed(layout, 48)
        assert np.array_equal(a, b)

    def test_all_864_rows_distinct(self):
        layout = PatchLayout((150, 192, 192), (25, 16, 16))
        table = sinusoidal_pos_embed(layout, 192)
        assert len(np.unique(table, axis=0)) == 864

    def test_dim_not_divisible_rejected(self):
        layout = PatchLayout((32, 32, 32), (8, 8, 8))
        with pytest.raises(ValueError):
            sinusoidal_pos_embed(layout, 64)


class TestViTConfig:
    def test_tiny_defaults(self):
        cfg = ViTConfig()
        assert (cfg.embed_dim, cfg.depth, cfg.num_heads) == (192, 12, 3)
        assert (cfg.decoder_embed_dim, cfg.decoder_depth) == (512, 8)
        assert cfg.patch_dims == (25, 16, 16)

    def test_heads_divide_dim(self):
        with pytest.raises(ValueError):
            ViTConfig(embed_dim=100, num_heads=3)

    def test_input_divisibility(self):
        with pytest.raises(PatchError):
            ViTConfig(input_shape=(30, 32, 32), patch_dims=(8, 8, 8))


class TestMAEForward:
    def test_output_covers_all_positions(self, rng):
        model = init_mae(DESK_VIT, seed=0)
        v = rng.normal(size=(32, 32, 32)).astype(np.float32)
        mask = sample_mask(64, 0.75, spawn_generator(0, "m"))
        pred = mae_forward(model, v, mask)
        assert pred.shape == (64, 512)

    def test_ratio_zero_no_mask_tokens(self, rng):
        model = init_mae(DESK_VIT, seed=0)
        v = rng.normal(size=(32, 32, 32)).astype(np.float32)
        mask = sample_mask(64, 0.0, spawn_generator(0, "m"))
        pred = mae_forward(model, v, mask)
        assert pred.shape == (64, 512)

    def test_visible_token_count_paper_geometry(self):
        # encoder input length is 216 for the published mask arithmetic
        cfg = ViTConfig(decoder_embed_dim=96, decoder_depth=1, decoder_heads=3)
        model = init_mae(cfg, seed=0)
        mask = sample_mask(864, 0.75, spawn_generator(3, "m"))
        patches = torch.zeros(1, 864, cfg.layout.patch_voxels)
        visible = torch.tensor(mask.visible, dtype=torch.long)[None]
        with torch.no_grad():
            encoded = model.encode_visible(patches, visible)
        assert encoded.shape == (1, 216, 192)

    def test_encoder_cost_scales_with_visible_tokens(self):
        # coarse wall-time assertion: full-sequence encoding must cost more
        # than 2x the 75%-masked encoding
        cfg = ViTConfig(
            input_shape=(64, 64, 64), patch_dims=(8, 8, 8),
            decoder_embed_dim=96, decoder_depth=1, decoder_heads=3,
        )
        model = init_mae(cfg, seed=0)
        p = cfg.layout.num_patches
        patches = torch.zeros(1, p, cfg.layout.patch_voxels)
        masked = sample_mask(p, 0.75, spawn_generator(0, "t"))
        full = sample_mask(p, 0.0, spawn_generator(0, "t"))

        def encode_time(mask):
            visible = torch.tensor(mask.visible, dtype=torch.long)[None]
            times = []
            with torch.no_grad():
                model.encode_visible(patches, visible)  # warmup
                for _ in range(3):
                    t0 = time.perf_counter()
                    model.encode_visible(patches, visible)
                    times.append(time.perf_counter() - t0)
            return min(times)

        assert encode_time(full) > 2.0 * encode_time(masked)


class TestMAELoss:
    def test_perfect_prediction_zero(self, rng):
        target = rng.normal(size=(8, 27))
        mask = MaskSet(masked=(0, 3, 5), num_patches=8, ratio=0.375)
        assert mae_loss(target.copy(), target, mask) == 0.0

    def test_all_ones_analytic(self):
        # zero predictions against all-ones patches of length L give loss L
        L = 27
        target = np.ones((8, L))
        pred = np.zeros((8, L))
        mask = MaskSet(masked=(1, 2, 6), num_patches=8, ratio=0.375)
        assert mae_loss(pred, target, mask) == pytest.approx(L)

    def test_unmasked_perturbation_bit_identical(self, rng):
        pred = rng.normal(size=(10, 16))
        target = rng.normal(size=(10, 16))
        mask = MaskSet(masked=(0, 4, 9), num_patches=10, ratio=0.3)
        base = mae_loss(pred, target, mask)
        perturbed = pred.copy()
        for idx in set(range(10)) - set(mask.masked):
            perturbed[idx] += rng.normal(size=16) * 100
        assert mae_loss(perturbed, target, mask) == base

    def test_doubling_masked_count_same_errors_invariant(self, rng):
        err = rng.normal(size=16)
        target = np.zeros((8, 16))
        pred = np.zeros((8, 16))
        pred[0] = err
        pred[1] = err
        small = mae_loss(pred, target, MaskSet(masked=(0,), num_patches=8, ratio=0.125))
        big = mae_loss(pred, target, MaskSet(masked=(0, 1), num_patches=8, ratio=0.25))
        assert big == pytest.approx(small, rel=1e-12)

    def test_per_voxel_variant(self, rng):
        pred = rng.normal(size=(6, 8))
        target = rng.normal(size=(6, 8))
        mask = MaskSet(masked=(2, 3), num_patches=6, ratio=1 / 3)
        assert mae_loss(pred, target, mask, per_voxel=True) == pytest.approx(
            mae_loss(pred, target, mask) / 8
        )

    def test_empty_mask_rejected(self, rng):
        with pytest.raises(ValueError):
            mae_loss(rng.normal(size=(4, 8)), rng.normal(size=(4, 8)), MaskSet((), 4, 0.0))

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            mae_loss(rng.normal(size=(4, 8)), rng.normal(size=(4, 9)), MaskSet((0,), 4, 0.25))

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_grad_check(self, seed):
        rng = np.random.default_rng(seed)
        pred = rng.normal(size=(6, 9))
        target = rng.normal(size=(6, 9))
        mask = MaskSet(masked=tuple(rng.permutation(6)[:3]), num_patches=6, ratio=0.5)
        assert mae_loss_grad_check(pred, target, mask) <= 1e-4

    def test_gradient_zero_at_unmasked(self, rng):
        pred = torch.from_numpy(rng.normal(size=(8, 12))).requires_grad_(True)
        target = torch.from_numpy(rng.normal(size=(8, 12)))
        mask = MaskSet(masked=(1, 5), num_patches=8, ratio=0.25)
        mae_loss(pred, target, mask).backward()
        grad = pred.grad.numpy()
        for idx in set(range(8)) - {1, 5}:
            np.testing.assert_array_equal(grad[idx], 0.0)
        assert np.abs(grad[[1, 5]]).max() > 0
