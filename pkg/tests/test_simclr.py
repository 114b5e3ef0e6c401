import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainssl.resnet3d import feature_map_trace
from brainssl.simclr import (
    EncoderConfig,
    NumericError,
    cosine_sim,
    encode,
    init_encoder,
    nt_xent_grad_check,
    nt_xent_loss,
    nt_xent_loss_sharded,
    parameter_checksum,
    project,
)

from oracles import nt_xent_oracle, nt_xent_pair_term

SMALL = EncoderConfig(widths=(8, 16, 32, 64), input_shape=(32, 32, 32))


class TestEncoderConfig:
    def test_temperature_positive(self):
        with pytest.raises(ValueError):
            EncoderConfig(temperature=0.0)

    def test_input_too_small_for_downsampling(self):
        with pytest.raises(ValueError, match="downsampl"):
            EncoderConfig(input_shape=(31, 64, 64))

    def test_defaults_match_published_topology(self):
        cfg = EncoderConfig()
        assert cfg.widths == (64, 128, 256, 512)
        assert cfg.embed_dim == 512
        assert cfg.projection_dim == 64
        assert cfg.input_shape == (150, 192, 192)


class TestEncoderInit:
    def test_same_seed_identical_parameters(self):
        a = init_encoder(SMALL, seed=3)
        b = init_encoder(SMALL, seed=3)
        assert parameter_checksum(a) == parameter_checksum(b)

    def test_different_seed_differs(self):
        a = init_encoder(SMALL, seed=3)
        b = init_encoder(SMALL, seed=4)
        assert parameter_checksum(a) != parameter_checksum(b)

    def test_batch_shape_contract(self, rng):
        model = init_encoder(SMALL, seed=0)
        batch = rng.normal(size=(3, 32, 32, 32)).astype(np.float32)
        h = encode(model, batch)
        assert h.shape == (3, 64)
        z = project(model, h)
        assert z.shape == (3, 64)

    def test_feature_map_trace_paper_shape(self):
        # (150, 192, 192) through five stride-2 stages ends at (5, 6, 6)
        trace = feature_map_trace((150, 192, 192))
        assert trace[0] == (75, 96, 96)
        assert trace[-1] == (5, 6, 6)

    def test_trace_matches_real_forward(self):
        model = init_encoder(SMALL, seed=0)
        x = torch.zeros(1, 1, 40, 48, 64)
        feats = model.encoder.conv1(x)
        assert tuple(feats.shape[2:]) == feature_map_trace((40, 48, 64))[0]
        # end-to-end spatial collapse: embedding comes out at widths[-1]
        h = encode(model, np.zeros((1, 40, 48, 64), dtype=np.float32))
        assert h.shape == (1, 64)

    def test_full_width_embedding_is_512(self):
        cfg = EncoderConfig(input_shape=(32, 64, 64))
        model = init_encoder(cfg, seed=0)
        h = encode(model, np.zeros((1, 32, 64, 64), dtype=np.float32))
        assert h.shape == (1, 512)


class TestEncode:
    def test_zero_parameters_zero_embedding(self, rng):
        model = init_encoder(SMALL, seed=0)
        with torch.no_grad():
            for p in model.parameters():
                p.zero_()
        h = encode(model, rng.normal(size=(2, 32, 32, 32)).astype(np.float32))
        np.testing.assert_array_equal(h, 0.0)

    def test_eval_repeatable(self, rng):
        model = init_encoder(SMALL, seed=0)
        x = rng.normal(size=(2, 32, 32, 32)).astype(np.float32)
        np.testing.assert_array_equal(encode(model, x), encode(model, x))

    def test_batch_permutation_equivariance(self, rng):
        model = init_encoder(SMALL, seed=0)
        x = rng.normal(size=(4, 32, 32, 32)).astype(np.float32)
        h = encode(model, x)
        perm = [2, 0, 3, 1]
        h_perm = encode(model, x[perm])
        np.testing.assert_allclose(h_perm, h[perm], rtol=1e-5, atol=1e-6)

    def test_nonfinite_activations_raise(self, rng):
        model = init_encoder(SMALL, seed=0)
        with torch.no_grad():
            model.encoder.conv1.weight.fill_(float("nan"))
        with pytest.raises(NumericError):
            encode(model, rng.normal(size=(1, 32, 32, 32)).astype(np.float32))


class TestProject:
    def test_output_dim_64(self, rng):
        model = init_encoder(SMALL, seed=0)
        z = project(model, rng.normal(size=(5, 64)).astype(np.float32))
        assert z.shape == (5, 64)

    def test_dimension_mismatch(self, rng):
        model = init_encoder(SMALL, seed=0)
        with pytest.raises(ValueError):
            project(model, rng.normal(size=(5, 65)).astype(np.float32))

    def test_single_linear_biasfree_head_is_linear(self, rng):
        cfg = EncoderConfig(
            widths=(8, 16, 32, 64), input_shape=(32, 32, 32),
            projection_layers=1, projection_bias=False,
        )
        model = init_encoder(cfg, seed=0)
        h = rng.normal(size=(3, 64)).astype(np.float32)
        np.testing.assert_allclose(project(model, 2 * h), 2 * project(model, h), rtol=1e-5)

    def test_deterministic(self, rng):
        model = init_encoder(SMALL, seed=0)
        h = rng.normal(size=(2, 64)).astype(np.float32)
        np.testing.assert_array_equal(project(model, h), project(model, h))


class TestCosineSim:
    def test_self_similarity(self, rng):
        z = rng.normal(size=5)
        assert cosine_sim(z, z) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert cosine_sim((1, 0), (0, 1)) == pytest.approx(0.0)

    def test_analytic_value(self):
        assert cosine_sim((1, 1), (1, 0)) == pytest.approx(1 / math.sqrt(2), abs=1e-9)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            cosine_sim((0, 0), (1, 0))


class TestNTXent:
    def test_single_pair_is_zero(self, rng):
        for tau in (0.1, 0.5, 1.0):
            z = rng.normal(size=(2, 6))
            assert nt_xent_loss(z, tau) == pytest.approx(0.0, abs=1e-12)

    def test_identical_projections_ln_2n_minus_1(self):
        for n in (2, 3, 5):
            z = np.tile(np.array([1.0, 2.0, -1.0]), (2 * n, 1))
            for tau in (0.1, 0.5, 1.0):
                assert nt_xent_loss(z, tau) == pytest.approx(math.log(2 * n - 1), abs=1e-9)

    def test_frozen_oracle_instance(self):
        # N=3 pairs of seeded unit vectors in 4 dims, tau=0.5; expected value
        # computed by the explicit-loop oracle
        rng = np.random.default_rng(2024)
        z = rng.normal(size=(6, 4))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        expected = nt_xent_oracle(z, 0.5)
        assert nt_xent_loss(z, 0.5) == pytest.approx(expected, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(
        n=st.integers(1, 8),
        dim=st.integers(2, 16),
        tau=st.sampled_from((0.1, 0.5, 1.0)),
        seed=st.integers(0, 10_000),
    )
    def test_matches_oracle(self, n, dim, tau, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2 * n, dim))
        assert nt_xent_loss(z, tau) == pytest.approx(nt_xent_oracle(z, tau), abs=1e-6)

    def test_rescaling_single_vector_invariance(self, rng):
        z = rng.normal(size=(8, 5))
        base = nt_xent_loss(z, 0.5)
        for c in (1e-3, 0.5, 7.0, 1e3):
            scaled = z.copy()
            scaled[3] *= c
            assert nt_xent_loss(scaled, 0.5) == pytest.approx(base, abs=1e-9)

    def test_pair_permutation_invariance(self, rng):
        n = 5
        z = rng.normal(size=(2 * n, 4))
        perm = np.random.default_rng(1).permutation(n)
        z_perm = np.concatenate([z[:n][perm], z[n:][perm]])
        assert nt_xent_loss(z_perm, 0.5) == pytest.approx(nt_xent_loss(z, 0.5), abs=1e-12)

    def test_positive_similarity_monotonicity(self):
        # z_i fixed, z_j = cos(a) z_i + sin(a) u with u orthogonal to every
        # other vector: all other similarities stay fixed while sim(i, j)
        # decreases as a grows, so L(i, j) must strictly increase
        dim = 8
        z_i = np.zeros(dim)
        z_i[0] = 1.0
        u = np.zeros(dim)
        u[1] = 1.0
        others = []
        for k in range(4):
            v = np.zeros(dim)
            v[2 + k] = 1.0
            others.append(v)
        losses = []
        for alpha in (0.0, 0.3, 0.6, 0.9, 1.2):
            z_j = math.cos(alpha) * z_i + math.sin(alpha) * u
            z = np.stack([z_i, others[0], others[1], z_j, others[2], others[3]])
            losses.append(nt_xent_pair_term([list(r) for r in z], 0.5, 0, 3))
        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_zero_norm_rejected(self, rng):
        z = rng.normal(size=(4, 3))
        z[1] = 0.0
        with pytest.raises(ValueError):
            nt_xent_loss(z, 0.5)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            nt_xent_loss(np.zeros((0, 4)), 0.5)


class TestSharding:
    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(2, 12),
        workers=st.integers(1, 12),
        seed=st.integers(0, 1000),
    )
    def test_sharded_equals_full(self, n, workers, seed):
        if workers > n:
            workers = n
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(2 * n, 6))
        full = nt_xent_loss(z, 0.5)
        sharded = nt_xent_loss_sharded(z, 0.5, workers)
        assert sharded == pytest.approx(full, abs=1e-9)

    def test_effective_batch_72_twelve_workers(self, rng):
        z = rng.normal(size=(144, 16))
        assert nt_xent_loss_sharded(z, 0.5, 12) == pytest.approx(nt_xent_loss(z, 0.5), abs=1e-9)

    def test_too_many_workers(self, rng):
        with pytest.raises(ValueError):
            nt_xent_loss_sharded(rng.normal(size=(4, 3)), 0.5, 5)


class TestGradCheck:
    def test_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            z = rng.normal(size=(8, 5))
            assert nt_xent_grad_check(z, 0.5) <= 1e-4

    def test_unrelated_tensor_gets_no_gradient(self, rng):
        z = torch.from_numpy(rng.normal(size=(4, 3))).requires_grad_(True)
        w = torch.from_numpy(rng.normal(size=(4, 3))).requires_grad_(True)
        nt_xent_loss(z, 0.5).backward()
        assert w.grad is None

    def test_high_temperature_kills_gradients(self, rng):
        z = torch.from_numpy(rng.normal(size=(8, 4))).requires_grad_(True)
        nt_xent_loss(z, 1e6).backward()
        assert float(z.grad.abs().max()) < 1e-6
