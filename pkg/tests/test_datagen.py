"""Synthetic generator: planted signal, oracle ceiling, determinism."""

import math
from dataclasses import replace

import numpy as np
import pytest

import mixformer as mx
from mixformer.datagen import (
    GeneratorSpec,
    baseline_score,
    generate,
    make_schema,
    split_holdout,
    tune_noise_temperature,
)

SMALL = dict(
    n_users=300,
    n_items=80,
    n_clusters=8,
    seq_len_min=8,
    seq_len_max=12,
    n_requests=900,
    candidates_per_request=4,
    seed=3,
)


@pytest.fixture(scope="module")
def small_data():
    return generate(GeneratorSpec(**SMALL))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------- schema


class TestSchema:
    def test_fields_cover_both_sides_and_actions(self):
        schema = make_schema(GeneratorSpec(**SMALL))
        names = [f.name for f in schema.nonseq_fields]
        assert names == ["user_id", "user_segment", "item_id", "item_cluster"]
        assert [f.side for f in schema.nonseq_fields] == [
            "user", "context", "item", "item",
        ]
        assert [f.name for f in schema.action_fields] == [
            "item_id", "action_type", "recency_bucket",
        ]
        assert schema.max_seq_len == SMALL["seq_len_max"]

    def test_vocab_sizes_track_spec(self):
        spec = GeneratorSpec(**SMALL)
        schema = make_schema(spec)
        by_name = {f.name: f for f in schema.nonseq_fields}
        assert by_name["user_id"].vocab_size == spec.n_users
        assert by_name["item_id"].vocab_size == spec.n_items
        assert by_name["item_cluster"].vocab_size == spec.n_clusters

    def test_generated_requests_validate(self, small_data):
        schema = small_data.dataset.schema
        for r in small_data.dataset.requests[:50]:
            r.validate(schema)


# ------------------------------------------------------------ validation


class TestSpecValidation:
    @pytest.mark.parametrize(
        "bad",
        [
            dict(n_items=1),
            dict(latent_dim=1),
            dict(seq_len_min=5, seq_len_max=3),
            dict(seq_len_min=-1),
            dict(candidates_per_request=0),
            dict(noise_temperature=0.0),
            dict(affinity_mix=1.5),
            dict(n_tasks=3),
        ],
    )
    def test_bad_spec_rejected(self, bad):
        with pytest.raises(mx.ConfigError):
            GeneratorSpec(**{**SMALL, **bad})


# ------------------------------------------------------------ zero signal


@pytest.fixture(scope="module")
def flat():
    spec = GeneratorSpec(**{**SMALL, "n_requests": 1500}, w_inter=0.0, w_seq=0.0)
    return spec, generate(spec)


class TestZeroSignal:
    def test_label_marginal_matches_bias(self, flat):
        spec, data = flat
        labels = np.concatenate([r.labels for r in data.dataset.requests])
        n = labels.shape[0]
        for task, bias in enumerate([spec.bias, spec.bias_second_task]):
            p = sigmoid(bias)
            bound = 4.0 * math.sqrt(p * (1.0 - p) / n)
            assert abs(labels[:, task].mean() - p) < bound

    def test_oracle_probs_constant_and_auc_half(self, flat):
        spec, data = flat
        probs = np.concatenate(data.oracle)
        np.testing.assert_array_equal(probs[:, 0], sigmoid(spec.bias))
        assert data.oracle_auc(0) == 0.5
        assert data.oracle_auc(1) == 0.5

    def test_baseline_sits_at_chance(self, flat):
        _, data = flat
        train, holdout = split_holdout(data, 0.2)
        summary = baseline_score(train, holdout, seed=0, epochs=1, batch_size=512)
        assert 0.48 <= summary.auc[0] <= 0.52


# ------------------------------------------------------------ determinism


class TestDeterminism:
    def test_same_seed_byte_identical_files(self, tmp_path):
        spec = GeneratorSpec(**SMALL)
        paths = []
        for tag in ("a", "b"):
            data = generate(spec)
            ds_path = tmp_path / f"{tag}.bin"
            or_path = tmp_path / f"{tag}.csv"
            mx.write_dataset(str(ds_path), data.dataset)
            mx.write_oracle(str(or_path), data.oracle)
            paths.append((ds_path, or_path))
        assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
        assert paths[0][1].read_bytes() == paths[1][1].read_bytes()

    def test_different_seed_changes_labels(self):
        a = generate(GeneratorSpec(**SMALL))
        b = generate(GeneratorSpec(**{**SMALL, "seed": SMALL["seed"] + 1}))
        la = np.concatenate([r.labels for r in a.dataset.requests])
        lb = np.concatenate([r.labels for r in b.dataset.requests])
        assert not np.array_equal(la, lb)

    def test_prefix_of_requests_is_stable(self, small_data):
        """Shrinking n_requests must not disturb the earlier requests:
        every request draws from its own spawned seed."""
        short = generate(GeneratorSpec(**{**SMALL, "n_requests": 5}))
        for r_small, r_big in zip(short.dataset.requests, small_data.dataset.requests):
            assert r_small.user_id == r_big.user_id
            np.testing.assert_array_equal(r_small.user_nonseq, r_big.user_nonseq)
            np.testing.assert_array_equal(r_small.actions, r_big.actions)
            np.testing.assert_array_equal(r_small.candidates, r_big.candidates)
            np.testing.assert_array_equal(r_small.labels, r_big.labels)
        for o_small, o_big in zip(short.oracle, small_data.oracle):
            np.testing.assert_array_equal(o_small, o_big)


# ---------------------------------------------------------- corpus shape


class TestCorpusShape:
    def test_seq_lengths_span_the_configured_range(self, small_data):
        lens = np.array([r.seq_len for r in small_data.dataset.requests])
        assert lens.min() >= SMALL["seq_len_min"]
        assert lens.max() <= SMALL["seq_len_max"]
        assert lens.min() == SMALL["seq_len_min"]
        assert lens.max() == SMALL["seq_len_max"]

    def test_empty_sequences_supported(self):
        spec = GeneratorSpec(**{**SMALL, "seq_len_min": 0, "seq_len_max": 0,
                                "n_requests": 40})
        data = generate(spec)
        for r in data.dataset.requests:
            assert r.seq_len == 0
            assert r.actions.shape == (0, 3)

    def test_recency_buckets_grow_logarithmically(self, small_data):
        from mixformer.datagen import N_RECENCY_BUCKETS

        for r in small_data.dataset.requests[:10]:
            ages = np.arange(r.seq_len)
            expected = np.minimum(
                np.log2(ages + 1).astype(np.int64), N_RECENCY_BUCKETS - 1
            )
            np.testing.assert_array_equal(r.actions[:, 2], expected)

    def test_candidate_clusters_consistent(self, small_data):
        clusters = small_data.item_clusters
        for r in small_data.dataset.requests[:50]:
            np.testing.assert_array_equal(
                r.candidates[:, 1], clusters[r.candidates[:, 0]]
            )

    def test_oracle_shapes_and_range(self, small_data):
        for r, probs in zip(small_data.dataset.requests, small_data.oracle):
            assert probs.shape == (r.n_candidates, 2)
            assert np.all((probs > 0.0) & (probs < 1.0))
            assert set(np.unique(r.labels)) <= {0.0, 1.0}

    def test_single_task_supported(self):
        spec = GeneratorSpec(**{**SMALL, "n_requests": 30}, n_tasks=1)
        data = generate(spec)
        for r, probs in zip(data.dataset.requests, data.oracle):
            assert r.labels.shape == (spec.candidates_per_request, 1)
            assert probs.shape == (spec.candidates_per_request, 1)

    def test_tasks_anticorrelated(self, small_data):
        probs = np.concatenate(small_data.oracle)
        assert np.corrcoef(probs[:, 0], probs[:, 1])[0, 1] < -0.9


# -------------------------------------------------------------- planted signal


class TestPlantedSignal:
    def test_match_contribution_is_capped(self):
        spec = GeneratorSpec(
            **{**SMALL, "n_items": 60, "n_clusters": 6},
            w_inter=0.0,
            w_seq=1.0,
            cluster_spread=0.05,
        )
        data = generate(spec)
        probs = np.concatenate(data.oracle)[:, 0]
        ceiling = sigmoid(spec.w_seq * spec.match_cap / spec.noise_temperature
                          + spec.bias)
        floor = sigmoid(spec.bias)
        assert probs.max() <= ceiling + 1e-12
        assert probs.min() >= floor - 1e-12
        assert probs.max() > floor + 1e-9  # some sequence matches actually fire

    def test_oracle_dominates_partial_scorers(self, small_data):
        """Scoring by the true probabilities beats scoring by either
        signal component alone (up to sampling slack)."""
        from mixformer.trainer import auc

        labels = np.concatenate(
            [r.labels[:, 0] for r in small_data.dataset.requests]
        )
        oracle = np.concatenate([m[:, 0] for m in small_data.oracle])
        users = small_data.user_latents
        items = small_data.item_latents
        dots = np.concatenate(
            [
                items[r.candidates[:, 0]] @ users[r.user_id]
                for r in small_data.dataset.requests
            ]
        )
        rng = np.random.default_rng(0)
        oracle_auc = auc(oracle, labels)
        assert auc(dots, labels) <= oracle_auc + 0.01
        assert auc(rng.random(labels.size), labels) <= oracle_auc + 0.01
        assert oracle_auc > 0.6

    def test_interaction_only_baseline_below_oracle(self):
        spec = GeneratorSpec(**{**SMALL, "n_requests": 1200}, w_seq=0.0)
        data = generate(spec)
        train, holdout = split_holdout(data, 0.2)
        summary = baseline_score(train, holdout, seed=0, epochs=3, batch_size=256)
        assert summary.auc[0] < data.oracle_auc(0)

    def test_sequence_heavy_blinds_the_baseline(self):
        spec = GeneratorSpec(
            **{**SMALL, "n_items": 60, "n_clusters": 6, "n_requests": 1200},
            w_inter=0.0,
            w_seq=1.5,
            cluster_spread=0.05,
        )
        data = generate(spec)
        assert data.oracle_auc(0) > 0.7
        train, holdout = split_holdout(data, 0.2)
        summary = baseline_score(train, holdout, seed=0, epochs=3, batch_size=256)
        assert summary.auc[0] < 0.58


# ---------------------------------------------------------- temperature


class TestTemperatureTuning:
    def test_lands_in_band_and_reproduces(self):
        spec = GeneratorSpec(**SMALL)
        tuned, achieved = tune_noise_temperature(spec, (0.84, 0.86))
        assert 0.84 <= achieved <= 0.86
        assert tuned.noise_temperature != spec.noise_temperature
        regenerated = generate(tuned)
        assert regenerated.oracle_auc(0) == achieved

    def test_zero_signal_cannot_bracket(self):
        spec = GeneratorSpec(**{**SMALL, "n_requests": 200},
                             w_inter=0.0, w_seq=0.0)
        with pytest.raises(mx.DataError):
            tune_noise_temperature(spec, (0.84, 0.86))

    def test_bad_band_rejected(self):
        spec = GeneratorSpec(**SMALL)
        with pytest.raises(mx.ConfigError):
            tune_noise_temperature(spec, (0.86, 0.84))


# -------------------------------------------------------------- holdout


class TestSplitHoldout:
    def test_sizes_and_order(self, small_data):
        train, holdout = split_holdout(small_data, 0.25)
        n = len(small_data.dataset.requests)
        assert len(train.requests) + len(holdout) == n
        assert len(holdout) == n - int(n * 0.75)
        assert train.requests[0] is small_data.dataset.requests[0]
        assert holdout[-1] is small_data.dataset.requests[-1]

    def test_fraction_validated(self, small_data):
        for bad in (0.0, 1.0, -0.2, 300):
            with pytest.raises(mx.ConfigError):
                split_holdout(small_data, bad)

    def test_tiny_corpus_still_splits(self):
        data = generate(GeneratorSpec(**{**SMALL, "n_requests": 2}))
        train, holdout = split_holdout(data, 0.9)
        assert len(train.requests) >= 1
        assert len(holdout) >= 1
