"""User/item decoupling: head allocation, the mixing mask, leakage
freedom, and the shared-user-state serving path."""

import dataclasses

import numpy as np
import pytest

import mixformer as mx

from conftest import random_request


def decoupled_setup(seed, n_heads=4, head_dim=16, n_blocks=2, seq_len=5,
                    d_user=None, d_item=None):
    rng = np.random.default_rng(seed)
    schema = mx.FeatureSchema(
        nonseq_fields=(
            mx.FeatureField("uid", "user", 11, d_user or 5),
            mx.FeatureField("iid", "item", 13, d_item or 7),
        ),
        action_fields=(mx.ActionField("aid", 13, 3),),
        max_seq_len=max(seq_len, 1),
    )
    n_u, n_g = mx.allocate_heads(schema.d_ns_user, schema.d_ns_item, n_heads)
    cfg = mx.ModelConfig(
        n_heads=n_heads, head_dim=head_dim, n_blocks=n_blocks,
        max_seq_len=max(seq_len, 1),
        decoupling=mx.DecoupleConfig(True, n_u, n_g),
    )
    store = mx.init_parameters(schema, cfg, seed=seed)
    t = seq_len
    req = mx.Request(
        user_id=1,
        user_nonseq=[int(rng.integers(11))],
        actions=rng.integers(0, 13, (t, 1)),
        candidates=rng.integers(0, 13, (4, 1)),
    )
    return schema, cfg, store, req, rng


class TestAllocateHeads:
    def test_proportional_split(self):
        assert mx.allocate_heads(60, 40, 16) == (10, 6)

    def test_each_side_keeps_a_head(self):
        assert mx.allocate_heads(1, 1000, 4) == (1, 3)
        assert mx.allocate_heads(1000, 1, 4) == (3, 1)

    def test_two_heads_minimum(self):
        with pytest.raises(mx.ConfigError):
            mx.allocate_heads(5, 5, 1)

    def test_sides_always_sum(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            du, dg = int(rng.integers(1, 500)), int(rng.integers(1, 500))
            n = int(rng.integers(2, 33))
            u, g = mx.allocate_heads(du, dg, n)
            assert u + g == n and u >= 1 and g >= 1


class TestBuildMask:
    def test_exhaustive_small_sweep(self):
        # entry [i, j] must be 0 exactly when i is a user head and j
        # falls inside an item head's chunk
        for n in range(1, 9):
            for n_u in range(0, n + 1):
                for chunk in (1, 2, 3):
                    dim = n * chunk
                    mask = mx.build_mask(n, n_u, dim)
                    assert mask.shape == (n, dim)
                    for i in range(n):
                        for j in range(dim):
                            expected = 0.0 if (i < n_u and j >= n_u * chunk) else 1.0
                            assert mask[i, j] == expected, (n, n_u, chunk, i, j)

    def test_no_user_heads_means_all_ones(self):
        np.testing.assert_array_equal(mx.build_mask(4, 0, 8), np.ones((4, 8)))

    def test_indivisible_rejected(self):
        with pytest.raises(mx.ShapeError):
            mx.build_mask(3, 1, 8)


class TestMaskedMixing:
    def test_hand_case(self):
        x = np.array([[1.0, 2, 3, 4], [5, 6, 7, 8]])
        mask = mx.build_mask(2, 1, 4)
        out = mx.head_mixing_masked(x, mask).data
        np.testing.assert_array_equal(out, [[1, 2, 0, 0], [3, 4, 7, 8]])

    def test_item_rows_keep_user_chunks(self):
        # item heads still read user chunks; only user heads are cut off
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 8))
        out = mx.head_mixing_masked(x, mx.build_mask(4, 2, 8)).data
        full = mx.head_mixing(x).data
        np.testing.assert_array_equal(out[2:], full[2:])
        np.testing.assert_array_equal(out[:2, :4], full[:2, :4])
        np.testing.assert_array_equal(out[:2, 4:], np.zeros((2, 4)))


class TestItemIndependence:
    def test_user_rows_blind_to_candidate_swap(self):
        # every layer's user-head activations must ignore the candidate
        for seed in range(5):
            schema, cfg, store, req, rng = decoupled_setup(seed)
            st = mx.compute_shared_user_state(req, store)
            other = dataclasses.replace(
                req, candidates=(req.candidates + 3) % 13
            )
            st2 = mx.compute_shared_user_state(other, store)
            np.testing.assert_array_equal(st.e_user, st2.e_user)
            for a, b in zip(st.layers, st2.layers):
                np.testing.assert_array_equal(a.out_user, b.out_user)
                np.testing.assert_array_equal(a.keys, b.keys)
                np.testing.assert_array_equal(a.values, b.values)

    def test_item_table_perturbation_leaves_user_heads(self):
        schema, cfg, store, req, rng = decoupled_setup(3)
        st = mx.compute_shared_user_state(req, store)
        store.tables["iid"].weight.data[...] += rng.standard_normal(
            store.tables["iid"].weight.data.shape
        )
        st2 = mx.compute_shared_user_state(req, store)
        for a, b in zip(st.layers, st2.layers):
            np.testing.assert_array_equal(a.out_user, b.out_user)


class TestRlbForward:
    def test_matches_reference_path(self):
        for seed in range(8):
            t = [0, 3, 7][seed % 3]
            schema, cfg, store, req, rng = decoupled_setup(seed, seq_len=t)
            per = np.stack(
                [mx.forward_decoupled(req, k, store) for k in range(req.n_candidates)]
            )
            rlb = mx.rlb_forward(req, store)
            np.testing.assert_allclose(rlb, per, rtol=1e-9, atol=1e-12)

    def test_requires_decoupling(self, tiny_schema, tiny_config):
        store = mx.init_parameters(tiny_schema, tiny_config, seed=0)
        req = random_request(tiny_schema, np.random.default_rng(0))
        with pytest.raises(mx.ConfigError):
            mx.rlb_forward(req, store)
        with pytest.raises(mx.ConfigError):
            mx.forward_decoupled(req, 0, store)
        with pytest.raises(mx.ConfigError):
            mx.compute_shared_user_state(req, store)

    def test_post_ln_variant_also_matches(self):
        schema, cfg, store, req, rng = decoupled_setup(11)
        cfg = dataclasses.replace(cfg, ablations=mx.AblationFlags(post_ln=True))
        store = mx.init_parameters(schema, cfg, seed=11)
        per = np.stack(
            [mx.forward_decoupled(req, k, store) for k in range(req.n_candidates)]
        )
        np.testing.assert_allclose(mx.rlb_forward(req, store), per, rtol=1e-9)


class TestDegenerateMask:
    def test_all_ones_mask_reproduces_base_model(self, tiny_schema, tiny_config):
        # an all-ones mask multiplies bit-identically, so the masked
        # forward must equal the plain forward exactly
        rng = np.random.default_rng(13)
        store = mx.init_parameters(tiny_schema, tiny_config, seed=2)
        mask = mx.build_mask(tiny_config.n_heads, 0, tiny_config.head_dim)
        for _ in range(5):
            req = random_request(tiny_schema, rng)
            for k in range(req.n_candidates):
                a = mx.forward(req, k, store)
                b = mx.forward(req, k, store, mask=mask)
                np.testing.assert_array_equal(a, b)
