"""Synthetic impression generator with a known Bayes oracle.

Users and items live on the unit sphere; items are drawn around cluster
centers so that same-cluster pairs have high cosine similarity.  Each
request samples a user, an affinity-biased action sequence, and K
candidates (an affinity/uniform mixture).  Labels are Bernoulli draws
from

    p = sigmoid((w_inter * <u, v> + w_seq * match(seq, v)) / temperature + bias)

where match counts sequence items whose cosine similarity to the
candidate exceeds a threshold, capped.  The second task uses the
negated signal with its own bias, so the tasks are anticorrelated.
True probabilities are kept, which gives an exact oracle ceiling; the
noise temperature can be bisected until the oracle AUC lands in a
target band.  Label draws reuse one set of uniforms across temperature
values, so the bisection objective is smooth.

Per-request randomness comes from spawned seed sequences, making every
request reproducible independently of generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError
from .features import (
    ActionField,
    Dataset,
    EmbeddingTable,
    FeatureField,
    FeatureSchema,
    Request,
    stack_requests,
)
from .trainer import MetricSummary, Optimizer, OptimizerConfig, auc, logloss, uauc

N_ACTION_TYPES = 4
N_RECENCY_BUCKETS = 8
N_USER_SEGMENTS = 32


@dataclass(frozen=True)
class GeneratorSpec:
    """Knobs for the synthetic world; defaults give a desk-scale corpus."""

    n_users: int = 50_000
    n_items: int = 5_000
    n_clusters: int = 50
    latent_dim: int = 16
    cluster_spread: float = 0.08
    seq_len_min: int = 64
    seq_len_max: int = 64
    n_requests: int = 125_000
    candidates_per_request: int = 8
    w_inter: float = 2.5
    w_seq: float = 0.6
    bias: float = -1.0
    bias_second_task: float = -1.5
    noise_temperature: float = 1.0
    match_threshold: float = 0.8
    match_cap: int = 10
    affinity_sharpness: float = 6.0
    affinity_mix: float = 0.5
    n_tasks: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_users < 1 or self.n_items < 2 or self.n_requests < 1:
            raise ConfigError("generator needs users, >= 2 items, and requests")
        if self.n_clusters < 1 or self.latent_dim < 2:
            raise ConfigError("n_clusters >= 1 and latent_dim >= 2 required")
        if not 0 <= self.seq_len_min <= self.seq_len_max:
            raise ConfigError("need 0 <= seq_len_min <= seq_len_max")
        if self.candidates_per_request < 1:
            raise ConfigError("candidates_per_request must be >= 1")
        if self.noise_temperature <= 0:
            raise ConfigError("noise_temperature must be positive")
        if not 0.0 <= self.affinity_mix <= 1.0:
            raise ConfigError("affinity_mix must lie in [0, 1]")
        if self.n_tasks not in (1, 2):
            raise ConfigError("generator supports 1 or 2 tasks")


def make_schema(spec: GeneratorSpec) -> FeatureSchema:
    return FeatureSchema(
        nonseq_fields=(
            FeatureField("user_id", "user", spec.n_users, 16),
            FeatureField("user_segment", "context", N_USER_SEGMENTS, 4),
            FeatureField("item_id", "item", spec.n_items, 16),
            FeatureField("item_cluster", "item", spec.n_clusters, 4),
        ),
        action_fields=(
            ActionField("item_id", spec.n_items, 16),
            ActionField("action_type", N_ACTION_TYPES, 2),
            ActionField("recency_bucket", N_RECENCY_BUCKETS, 2),
        ),
        max_seq_len=spec.seq_len_max,
    )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


@dataclass
class _Skeleton:
    """Everything drawn before the temperature enters: ids, signals, and
    the label uniforms."""

    spec: GeneratorSpec
    schema: FeatureSchema
    user_latents: np.ndarray
    item_latents: np.ndarray
    item_clusters: np.ndarray
    user_segments: np.ndarray
    users: np.ndarray  # (n_requests,)
    sequences: list[np.ndarray]  # item ids, (T_i,)
    action_types: list[np.ndarray]
    candidates: np.ndarray  # (n_requests, K)
    dot: np.ndarray  # (n_requests, K)
    match: np.ndarray  # (n_requests, K)
    label_u01: np.ndarray  # (n_requests, K, n_tasks)


def _build_skeleton(spec: GeneratorSpec) -> _Skeleton:
    root = np.random.SeedSequence(spec.seed)
    world_ss, label_ss, requests_ss = root.spawn(3)
    world = np.random.default_rng(world_ss)

    centers = _unit_rows(world.normal(size=(spec.n_clusters, spec.latent_dim)))
    clusters = world.integers(spec.n_clusters, size=spec.n_items)
    items = _unit_rows(
        centers[clusters]
        + spec.cluster_spread * world.normal(size=(spec.n_items, spec.latent_dim))
    )
    users = _unit_rows(world.normal(size=(spec.n_users, spec.latent_dim)))
    segments = world.integers(N_USER_SEGMENTS, size=spec.n_users)

    k = spec.candidates_per_request
    req_ss = requests_ss.spawn(spec.n_requests)
    req_users = np.empty(spec.n_requests, dtype=np.int64)
    sequences: list[np.ndarray] = []
    action_types: list[np.ndarray] = []
    cand = np.empty((spec.n_requests, k), dtype=np.int64)
    dot = np.empty((spec.n_requests, k))
    match = np.empty((spec.n_requests, k))

    for i in range(spec.n_requests):
        rng = np.random.default_rng(req_ss[i])
        uid = int(rng.integers(spec.n_users))
        req_users[i] = uid
        u = users[uid]
        logits = spec.affinity_sharpness * (items @ u)
        logits -= logits.max()
        p = np.exp(logits)
        p /= p.sum()
        t = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        seq = rng.choice(spec.n_items, size=t, replace=True, p=p)
        sequences.append(seq.astype(np.int64))
        action_types.append(rng.integers(N_ACTION_TYPES, size=t).astype(np.int64))
        from_affinity = rng.random(k) < spec.affinity_mix
        c = np.where(
            from_affinity,
            rng.choice(spec.n_items, size=k, replace=True, p=p),
            rng.integers(spec.n_items, size=k),
        )
        cand[i] = c
        dot[i] = items[c] @ u
        if t:
            cos = items[seq] @ items[c].T  # (T, K), all unit rows
            match[i] = np.minimum(
                (cos > spec.match_threshold).sum(axis=0), spec.match_cap
            )
        else:
            match[i] = 0.0

    label_rng = np.random.default_rng(label_ss)
    u01 = label_rng.random((spec.n_requests, k, spec.n_tasks))
    return _Skeleton(
        spec=spec,
        schema=make_schema(spec),
        user_latents=users,
        item_latents=items,
        item_clusters=clusters,
        user_segments=segments,
        users=req_users,
        sequences=sequences,
        action_types=action_types,
        candidates=cand,
        dot=dot,
        match=match,
        label_u01=u01,
    )


def _probs(skel: _Skeleton, temperature: float) -> np.ndarray:
    """(n_requests, K, n_tasks) true label probabilities."""
    spec = skel.spec
    signal = (spec.w_inter * skel.dot + spec.w_seq * skel.match) / temperature
    cols = [1.0 / (1.0 + np.exp(-(signal + spec.bias)))]
    if spec.n_tasks == 2:
        cols.append(1.0 / (1.0 + np.exp(-(-signal + spec.bias_second_task))))
    return np.stack(cols, axis=-1)


def _recency_buckets(t: int) -> np.ndarray:
    # most recent action first; bucket grows logarithmically with age
    ages = np.arange(t)
    return np.minimum(np.log2(ages + 1).astype(np.int64), N_RECENCY_BUCKETS - 1)


@dataclass
class SyntheticData:
    dataset: Dataset
    oracle: list[np.ndarray]  # per request (K, n_tasks) true probabilities
    user_latents: np.ndarray
    item_latents: np.ndarray
    item_clusters: np.ndarray

    def oracle_auc(self, task: int = 0) -> float:
        p = np.concatenate([m[:, task] for m in self.oracle])
        y = np.concatenate([r.labels[:, task] for r in self.dataset.requests])
        return auc(p, y)


def generate(spec: GeneratorSpec) -> SyntheticData:
    """Draw the full corpus at the spec's noise temperature."""
    skel = _build_skeleton(spec)
    return _realize(skel, spec.noise_temperature)


def _realize(skel: _Skeleton, temperature: float) -> SyntheticData:
    spec = skel.spec
    probs = _probs(skel, temperature)
    labels = (skel.label_u01 < probs).astype(np.float64)
    requests: list[Request] = []
    oracle: list[np.ndarray] = []
    for i in range(spec.n_requests):
        uid = int(skel.users[i])
        seq = skel.sequences[i]
        t = seq.size
        actions = np.stack(
            [seq, skel.action_types[i], _recency_buckets(t)], axis=1
        ) if t else np.zeros((0, 3), dtype=np.int64)
        cands = np.stack(
            [skel.candidates[i], skel.item_clusters[skel.candidates[i]]], axis=1
        )
        requests.append(
            Request(
                user_id=uid,
                user_nonseq=np.array([uid, skel.user_segments[uid]], dtype=np.int64),
                actions=actions,
                candidates=cands,
                labels=labels[i],
            )
        )
        oracle.append(probs[i])
    return SyntheticData(
        dataset=Dataset(schema=skel.schema, requests=requests),
        oracle=oracle,
        user_latents=skel.user_latents,
        item_latents=skel.item_latents,
        item_clusters=skel.item_clusters,
    )


def tune_noise_temperature(
    spec: GeneratorSpec,
    target: tuple[float, float] = (0.84, 0.86),
    lo: float = 0.05,
    hi: float = 100.0,
    max_iter: int = 60,
) -> tuple[GeneratorSpec, float]:
    """Bisect the temperature until the oracle AUC of task 0 lands in
    target.  Returns the adjusted spec and the achieved oracle AUC."""
    if not 0.5 < target[0] < target[1] < 1.0:
        raise ConfigError("target band must satisfy 0.5 < lo < hi < 1.0")
    skel = _build_skeleton(spec)
    mid = (target[0] + target[1]) / 2.0

    def oracle_auc(temp: float) -> float:
        probs = _probs(skel, temp)
        labels = skel.label_u01[..., 0] < probs[..., 0]
        return auc(probs[..., 0].ravel(), labels.ravel().astype(np.float64))

    a_lo, a_hi = oracle_auc(lo), oracle_auc(hi)
    if not (a_hi <= mid <= a_lo):
        raise DataError(
            f"oracle AUC range [{a_hi:.3f}, {a_lo:.3f}] cannot bracket {mid:.3f}; "
            "adjust signal weights"
        )
    t_lo, t_hi = lo, hi
    best_t, best_a = lo, a_lo
    for _ in range(max_iter):
        t = math.sqrt(t_lo * t_hi)  # bisect in log space
        a = oracle_auc(t)
        if abs(a - mid) < abs(best_a - mid):
            best_t, best_a = t, a
        if target[0] <= a <= target[1]:
            return replace(spec, noise_temperature=t), a
        if a > mid:
            t_lo = t
        else:
            t_hi = t
    if target[0] <= best_a <= target[1]:
        return replace(spec, noise_temperature=best_t), best_a
    raise DataError(f"temperature search ended at oracle AUC {best_a:.4f}, outside target")


# ----------------------------------------------------------------------
# Baseline: logistic model on concatenated mean-pooled embeddings.  No
# attention and no multiplicative interactions, so it can only exploit
# additive per-field structure; planted bilinear or sequence-match
# signal is invisible to it beyond marginal effects.
# ----------------------------------------------------------------------


def _baseline_logits(
    batch, tables: dict[str, EmbeddingTable], linear: ad.Tensor, bias: ad.Tensor,
    schema: FeatureSchema,
) -> ad.Tensor:
    b, k = batch.n_requests, batch.n_candidates
    user_parts = [
        tables[f.name].lookup(batch.user_nonseq[:, j])
        for j, f in enumerate(schema.user_fields())
    ]
    item_parts = [
        tables[f.name].lookup(batch.candidates[:, :, j])
        for j, f in enumerate(schema.item_fields())
    ]
    if batch.seq_len:
        act_parts = [
            tables[f"action:{f.name}"].lookup(batch.actions[:, :, j])
            for j, f in enumerate(schema.action_fields)
        ]
        pooled = ad.mean(ad.concat(act_parts, axis=-1), axis=1)
    else:
        pooled = ad.Tensor(np.zeros((b, schema.action_dim)))
    user = ad.concat(user_parts + [pooled], axis=-1)
    width_u = user.shape[-1]
    user = ad.broadcast_to(user.reshape((b, 1, width_u)), (b, k, width_u))
    feats = ad.concat([user, ad.concat(item_parts, axis=-1)], axis=-1)
    return ad.add(ad.matmul(feats, ad.swapaxes(linear, -1, -2)), bias)


def baseline_score(
    train: Dataset,
    holdout: Sequence[Request],
    seed: int = 0,
    epochs: int = 2,
    batch_size: int = 1024,
    optimizer_config: OptimizerConfig | None = None,
) -> MetricSummary:
    """Train the pooled logistic baseline and evaluate it on a holdout."""
    from .features import make_tables
    from .trainer import plan_batches

    schema = train.schema
    n_tasks = train.requests[0].labels.shape[1]
    rng = np.random.default_rng(seed)
    tables = make_tables(schema, rng)
    width = schema.d_ns + schema.action_dim
    linear = ad.Tensor(rng.normal(0.0, 0.01, size=(n_tasks, width)), requires_grad=True)
    bias = ad.Tensor(np.zeros(n_tasks), requires_grad=True)
    dense = {"linear": linear, "bias": bias}
    opt = Optimizer(dense, tables, optimizer_config)

    for epoch in range(epochs):
        for batch_idx in plan_batches(train.requests, batch_size, seed, epoch):
            batch = stack_requests([train.requests[i] for i in batch_idx])
            opt.zero_grad()
            logits = _baseline_logits(batch, tables, linear, bias, schema)
            losses = ad.bce_with_logits(logits, batch.labels)
            loss = ad.mean(ad.sum_(losses, axis=-1))
            loss.backward()
            opt.step()

    probs: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    users: list[np.ndarray] = []
    groups: dict[tuple[int, int], list[int]] = {}
    for i, r in enumerate(holdout):
        groups.setdefault((r.seq_len, r.n_candidates), []).append(i)
    with ad.no_grad():
        for key in sorted(groups):
            idx = groups[key]
            per = max(1, 4096 // key[1])
            for lo_i in range(0, len(idx), per):
                sel = idx[lo_i : lo_i + per]
                batch = stack_requests([holdout[i] for i in sel])
                z = _baseline_logits(batch, tables, linear, bias, schema).data
                p = 1.0 / (1.0 + np.exp(-z))
                probs.append(p.reshape(-1, n_tasks))
                labels.append(batch.labels.reshape(-1, n_tasks))
                users.append(np.repeat(batch.user_ids, batch.n_candidates))
    p = np.concatenate(probs)
    y = np.concatenate(labels)
    u = np.concatenate(users)
    return MetricSummary(
        auc=[auc(p[:, t], y[:, t]) for t in range(n_tasks)],
        uauc=[uauc(p[:, t], y[:, t], u) for t in range(n_tasks)],
        logloss=[logloss(p[:, t], y[:, t]) for t in range(n_tasks)],
        n_impressions=int(p.shape[0]),
        n_users=int(np.unique(u).size),
    )


def split_holdout(
    data: SyntheticData, holdout_fraction: float = 0.1
) -> tuple[Dataset, list[Request]]:
    """Deterministic tail split; requests are i.i.d. by construction."""
    if not 0.0 < holdout_fraction < 1.0:
        raise ConfigError("holdout_fraction must lie in (0, 1)")
    n = len(data.dataset.requests)
    cut = max(1, int(n * (1.0 - holdout_fraction)))
    if cut >= n:
        cut = n - 1
    train = Dataset(schema=data.dataset.schema, requests=data.dataset.requests[:cut])
    return train, data.dataset.requests[cut:]
