"""Contrastive projection and symmetric NCE loss oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wsodkit import contrastive, numkit
from wsodkit.contrastive import (
    RHO_MAX,
    RHO_MIN,
    EmbeddingBatch,
    ProjectionParams,
    nce_chain,
    nce_loss,
    pool_features,
    project,
    similarity,
)
from wsodkit.errors import ShapeError, WsodkitError


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def make_proj(rng, feat_dim=4, proj_dim=3, scale=0.5, rho_init=0.1):
    return ProjectionParams.create(rng, feat_dim, proj_dim, scale, rho_init)


class TestPoolProject:
    def test_pool_is_row_mean(self):
        pooled = pool_features(np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert pooled.tolist() == [2.0, 3.0]

    def test_pool_rejects_empty_and_1d(self):
        with pytest.raises(ShapeError):
            pool_features(np.empty((0, 4)))
        with pytest.raises(ShapeError):
            pool_features(np.ones(4))

    def test_project_three_four_five(self, rng):
        proj = make_proj(rng, feat_dim=2, proj_dim=2)
        proj.w.value[:] = np.eye(2)
        proj.b.value[:] = 0.0
        z = project(np.array([3.0, 4.0]), proj)
        assert np.allclose(z, [[0.6, 0.8]], atol=1e-12)

    def test_project_rows_unit_norm(self, rng):
        proj = make_proj(rng, feat_dim=5, proj_dim=3)
        z = project(rng.standard_normal((4, 5)), proj)
        assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)

    def test_project_zero_norm_rejected(self, rng):
        proj = make_proj(rng, feat_dim=2, proj_dim=2)
        proj.w.value[:] = 0.0
        proj.b.value[:] = 0.0
        with pytest.raises(WsodkitError):
            project(np.array([1.0, 1.0]), proj)


class TestSimilarity:
    def test_unit_dot_over_rho(self):
        v = np.array([0.6, 0.8])
        assert similarity(v, v, 0.5) == pytest.approx(2.0, abs=1e-12)

    def test_orthogonal_is_zero(self):
        assert similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.1) == 0.0

    def test_vector_shape_enforced(self):
        with pytest.raises(ShapeError):
            similarity(np.ones((2, 2)), np.ones((2, 2)), 1.0)


class TestNceLoss:
    def test_single_pair_standard_zero(self):
        batch = EmbeddingBatch(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
        assert nce_loss(batch, rho=0.1) == pytest.approx(0.0, abs=1e-12)

    def test_single_pair_include_positive_log2(self):
        batch = EmbeddingBatch(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]]))
        got = nce_loss(batch, rho=0.1, include_positive=True)
        assert got == pytest.approx(math.log(2.0), abs=1e-12)

    def test_all_equal_embeddings_log2(self):
        e = np.array([[1.0, 0.0], [1.0, 0.0]])
        batch = EmbeddingBatch(e, e.copy())
        assert nce_loss(batch, rho=0.3) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_identity_similarity_oracle(self):
        # Positive pairs at similarity 1/rho with rho=1, cross pairs at 0:
        # each anchor contributes log(1 + e^-1).
        e = np.eye(2)
        batch = EmbeddingBatch(e, e.copy())
        got = nce_loss(batch, rho=1.0)
        assert got == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)
        assert got == pytest.approx(0.31326168751822286, abs=1e-12)

    def test_literal_two_direction_oracle(self, rng):
        b = EmbeddingBatch(unit_rows(rng, 3, 4), unit_rows(rng, 3, 4))
        rho = 0.25
        s = (b.rgb @ b.depth.T) / rho
        per_anchor = []
        for mat in (s, s.T):
            for i in range(3):
                per_anchor.append(
                    math.log(np.exp(mat[i]).sum()) - mat[i, i]
                )
        oracle = 0.5 * (np.mean(per_anchor[:3]) + np.mean(per_anchor[3:]))
        assert nce_loss(b, rho) == pytest.approx(oracle, abs=1e-10)

    def test_swap_symmetry(self, rng):
        b = EmbeddingBatch(unit_rows(rng, 4, 3), unit_rows(rng, 4, 3))
        swapped = EmbeddingBatch(b.depth, b.rgb)
        assert nce_loss(b, 0.2) == pytest.approx(nce_loss(swapped, 0.2), abs=1e-12)

    def test_include_positive_dominates(self, rng):
        b = EmbeddingBatch(unit_rows(rng, 3, 5), unit_rows(rng, 3, 5))
        assert nce_loss(b, 0.5, include_positive=True) >= nce_loss(b, 0.5)

    def test_non_unit_rows_rejected(self):
        with pytest.raises(WsodkitError):
            EmbeddingBatch(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0]]))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            EmbeddingBatch(np.eye(2), np.eye(3))

    @given(st.integers(1, 5), st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_standard_loss_nonnegative(self, n, seed):
        r = np.random.default_rng(seed)
        b = EmbeddingBatch(unit_rows(r, n, 4), unit_rows(r, n, 4))
        assert nce_loss(b, 0.1) >= -1e-12
        # Doubling the positive term in the denominator floors the loss
        # at log 2.
        assert nce_loss(b, 0.1, include_positive=True) >= math.log(2.0) - 1e-12


class TestNceChain:
    def test_matches_loss_on_projected_batch(self, rng):
        proj = make_proj(rng, feat_dim=6, proj_dim=4)
        pooled_r = rng.standard_normal((3, 6))
        pooled_d = rng.standard_normal((3, 6))
        got = nce_chain(pooled_r, pooled_d, proj)
        batch = EmbeddingBatch(project(pooled_r, proj), project(pooled_d, proj))
        assert got == pytest.approx(
            nce_loss(batch, float(proj.rho.value[0])), abs=1e-12
        )

    @pytest.mark.parametrize("include_positive", [False, True])
    @pytest.mark.parametrize("batch_size", [1, 2, 4])
    def test_gradients_finite_difference(self, rng, batch_size, include_positive):
        proj = make_proj(rng, feat_dim=5, proj_dim=3, rho_init=0.37)
        pooled_r = rng.standard_normal((batch_size, 5))
        pooled_d = rng.standard_normal((batch_size, 5))

        def f():
            for p in proj.params():
                p.zero_grad()
            return nce_chain(
                pooled_r, pooled_d, proj,
                include_positive=include_positive, grad_scale=1.0,
            )

        assert numkit.grad_check(f, proj.params()) < 1e-6

    def test_grad_scale_zero_accumulates_nothing(self, rng):
        proj = make_proj(rng)
        for p in proj.params():
            p.zero_grad()
        nce_chain(rng.standard_normal((2, 4)), rng.standard_normal((2, 4)), proj)
        assert all(not p.grad.any() for p in proj.params())

    def test_shape_mismatch(self, rng):
        proj = make_proj(rng)
        with pytest.raises(ShapeError):
            nce_chain(np.ones((2, 4)), np.ones((3, 4)), proj)


class TestRho:
    def test_clamp_bounds(self, rng):
        proj = make_proj(rng)
        proj.rho.value[:] = 5.0
        proj.clamp_rho()
        assert proj.rho.value[0] == RHO_MAX
        proj.rho.value[:] = 1e-6
        proj.clamp_rho()
        assert proj.rho.value[0] == RHO_MIN

    def test_clamp_leaves_interior_alone(self, rng):
        proj = make_proj(rng, rho_init=0.42)
        proj.clamp_rho()
        assert proj.rho.value[0] == pytest.approx(0.42, abs=0)
