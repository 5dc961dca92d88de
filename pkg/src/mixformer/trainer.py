"""Multi-task training loop, optimizers, and ranking metrics.

Dense weights use RMSProp; embedding tables use Adagrad applied only to
rows touched by the batch, with the accumulator stored on the table.
The per-impression loss is the sum over tasks of binary cross-entropy
on logits, averaged over the batch.  Batching is by impressions:
requests are grouped by (sequence length, candidate count) so stacks
are rectangular, shuffled deterministically per epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from .blocks import (
    ModelConfig,
    ParameterStore,
    batched_forward,
    batched_forward_tensor,
    init_parameters,
)
from .errors import ConfigError, MetricError, NumericError
from .features import Dataset, EmbeddingTable, Request, RequestBatch, stack_requests


@dataclass
class OptimizerConfig:
    lr_dense: float = 0.01
    rms_decay: float = 0.9
    rms_eps: float = 1e-8
    lr_sparse: float = 0.05
    adagrad_eps: float = 1e-10

    def __post_init__(self) -> None:
        if self.lr_dense < 0 or self.lr_sparse < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 < self.rms_decay < 1.0:
            raise ConfigError("rms_decay must lie in (0, 1)")


class Optimizer:
    """RMSProp for dense tensors, row-sparse Adagrad for tables."""

    def __init__(
        self,
        dense: dict[str, ad.Tensor],
        tables: dict[str, EmbeddingTable],
        config: OptimizerConfig | None = None,
    ):
        self.dense = dense
        self.tables = tables
        self.config = config or OptimizerConfig()
        self.rms_acc: dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in dense.items()
        }

    def step(self) -> None:
        c = self.config
        for name, t in self.dense.items():
            g = t.grad
            if g is None:
                continue
            acc = self.rms_acc[name]
            acc *= c.rms_decay
            acc += (1.0 - c.rms_decay) * g * g
            t.data = t.data - c.lr_dense * g / np.sqrt(acc + c.rms_eps)
        for table in self.tables.values():
            g = table.weight.grad
            if g is None:
                continue
            rows = np.flatnonzero(np.any(g != 0.0, axis=1))
            if rows.size == 0:
                continue
            gr = g[rows]
            table.adagrad_acc[rows] += gr * gr
            table.weight.data[rows] -= (
                c.lr_sparse * gr / np.sqrt(table.adagrad_acc[rows] + c.adagrad_eps)
            )

    def zero_grad(self) -> None:
        for t in self.dense.values():
            t.grad = None
        for table in self.tables.values():
            table.weight.grad = None


def batch_loss(batch: RequestBatch, store: ParameterStore, mask=None) -> ad.Tensor:
    """Mean over impressions of summed per-task BCE; scalar tensor."""
    if batch.labels is None:
        raise ConfigError("training batches need labels")
    logits = batched_forward_tensor(batch, store, mask)
    losses = ad.bce_with_logits(logits, batch.labels)
    per_impression = ad.sum_(losses, axis=-1)
    return ad.mean(per_impression)


def plan_batches(
    requests: Sequence[Request], batch_size: int, seed: int, epoch: int
) -> list[list[int]]:
    """Deterministic epoch plan: indices grouped by (seq_len, K), chunked
    to roughly batch_size impressions, order shuffled."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    rng = np.random.default_rng([seed, epoch])
    groups: dict[tuple[int, int], list[int]] = {}
    for i, r in enumerate(requests):
        groups.setdefault((r.seq_len, r.n_candidates), []).append(i)
    batches: list[list[int]] = []
    for key in sorted(groups):
        idx = np.array(groups[key])
        rng.shuffle(idx)
        per = max(1, batch_size // key[1])
        for lo in range(0, len(idx), per):
            batches.append([int(j) for j in idx[lo : lo + per]])
    order = np.arange(len(batches))
    rng.shuffle(order)
    return [batches[i] for i in order]


def train_epoch(
    dataset: Dataset,
    store: ParameterStore,
    optimizer: Optimizer,
    batch_size: int = 256,
    epoch: int = 0,
    seed: int = 0,
    mask=None,
    start_step: int = 0,
    max_steps: int | None = None,
) -> list[float]:
    """One pass over the dataset; returns the per-step loss curve.

    start_step skips already-consumed batches of this epoch's plan, so a
    resumed run retraces the interrupted one exactly.
    """
    plan = plan_batches(dataset.requests, batch_size, seed, epoch)
    losses: list[float] = []
    for step, batch_idx in enumerate(plan):
        if step < start_step:
            continue
        if max_steps is not None and len(losses) >= max_steps:
            break
        batch = stack_requests([dataset.requests[i] for i in batch_idx])
        optimizer.zero_grad()
        loss = batch_loss(batch, store, mask)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at epoch {epoch} step {step}")
        loss.backward()
        optimizer.step()
        losses.append(value)
    return losses


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the tie-aware rank-sum identity."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape or scores.size == 0:
        raise MetricError("auc needs equal-length, non-empty scores and labels")
    if not np.all(np.isfinite(scores)):
        raise NumericError("auc received non-finite scores")
    pos = labels > 0.5
    n_pos = int(pos.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auc is undefined with a single class")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def uauc(
    scores: np.ndarray,
    labels: np.ndarray,
    user_ids: np.ndarray,
    weighted: bool = False,
) -> float:
    """Mean per-user AUC over users with both classes.

    weighted=True weights each user by their impression count."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    user_ids = np.asarray(user_ids).ravel()
    if not (scores.shape == labels.shape == user_ids.shape):
        raise MetricError("uauc needs aligned scores, labels, user_ids")
    vals: list[float] = []
    weights: list[float] = []
    for uid in np.unique(user_ids):
        sel = user_ids == uid
        sub_labels = labels[sel]
        if sub_labels.min() > 0.5 or sub_labels.max() < 0.5:
            continue
        vals.append(auc(scores[sel], sub_labels))
        weights.append(float(sel.sum()))
    if not vals:
        raise MetricError("no user has both classes; uauc undefined")
    if weighted:
        w = np.array(weights)
        return float(np.average(np.array(vals), weights=w))
    return float(np.mean(vals))


def logloss(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64).ravel()
    if not np.all(np.isfinite(probs)):
        raise NumericError("logloss received non-finite probabilities")
    p = np.clip(probs, 1e-12, 1.0 - 1e-12)
    y = np.asarray(labels, dtype=np.float64).ravel()
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


@dataclass
class MetricSummary:
    auc: list[float]
    uauc: list[float]
    logloss: list[float]
    n_impressions: int
    n_users: int


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def predict(
    requests: Sequence[Request],
    store: ParameterStore,
    mask=None,
    batch_size: int = 4096,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scores for every impression: (probs, labels, user_ids), each with
    impressions flattened in request order."""
    probs: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    users: list[np.ndarray] = []
    groups: dict[tuple[int, int], list[int]] = {}
    for i, r in enumerate(requests):
        groups.setdefault((r.seq_len, r.n_candidates), []).append(i)
    chunks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
    for key in sorted(groups):
        idx = groups[key]
        per = max(1, batch_size // key[1])
        for lo in range(0, len(idx), per):
            sel = idx[lo : lo + per]
            batch = stack_requests([requests[i] for i in sel])
            logits = batched_forward(batch, store, mask)
            p = _sigmoid(logits)
            k = batch.n_candidates
            order = np.repeat(np.array(sel), k)
            chunks.append(
                (
                    order,
                    p.reshape(-1, p.shape[-1]),
                    batch.labels.reshape(-1, p.shape[-1])
                    if batch.labels is not None
                    else np.full((len(sel) * k, p.shape[-1]), np.nan),
                    np.repeat(batch.user_ids, k),
                )
            )
    all_order = np.concatenate([c[0] for c in chunks])
    resort = np.argsort(all_order, kind="stable")
    p = np.concatenate([c[1] for c in chunks])[resort]
    y = np.concatenate([c[2] for c in chunks])[resort]
    u = np.concatenate([c[3] for c in chunks])[resort]
    return p, y, u


def evaluate(
    requests: Sequence[Request], store: ParameterStore, mask=None
) -> MetricSummary:
    p, y, u = predict(requests, store, mask)
    n_tasks = p.shape[1]
    return MetricSummary(
        auc=[auc(p[:, t], y[:, t]) for t in range(n_tasks)],
        uauc=[uauc(p[:, t], y[:, t], u) for t in range(n_tasks)],
        logloss=[logloss(p[:, t], y[:, t]) for t in range(n_tasks)],
        n_impressions=int(p.shape[0]),
        n_users=int(np.unique(u).size),
    )


@dataclass
class FitResult:
    losses: list[float]
    metrics: MetricSummary | None
    store: ParameterStore
    optimizer: Optimizer


def fit(
    dataset: Dataset,
    config: ModelConfig,
    seed: int = 0,
    epochs: int = 1,
    batch_size: int = 256,
    optimizer_config: OptimizerConfig | None = None,
    holdout: Sequence[Request] | None = None,
    mask=None,
    max_steps: int | None = None,
) -> FitResult:
    """Initialize, train, and optionally evaluate in one call."""
    store = init_parameters(dataset.schema, config, seed)
    opt = Optimizer(store.dense, store.tables, optimizer_config)
    losses: list[float] = []
    for epoch in range(epochs):
        remaining = None if max_steps is None else max_steps - len(losses)
        if remaining is not None and remaining <= 0:
            break
        losses.extend(
            train_epoch(
                dataset,
                store,
                opt,
                batch_size=batch_size,
                epoch=epoch,
                seed=seed,
                mask=mask,
                max_steps=remaining,
            )
        )
    metrics = evaluate(holdout, store, mask) if holdout else None
    return FitResult(losses=losses, metrics=metrics, store=store, optimizer=opt)


ABLATION_NAMES = (
    "wo_hm",
    "hm_to_sa",
    "wo_qm_ffn",
    "shared_seq_ffn",
    "shared_of_ffn",
    "post_ln",
)


def apply_ablation(config: ModelConfig, name: str) -> ModelConfig:
    if name not in ABLATION_NAMES:
        raise ConfigError(f"unknown ablation '{name}'")
    return replace(config, ablations=replace(config.ablations, **{name: True}))


def config_diff(a: ModelConfig, b: ModelConfig) -> dict[str, tuple]:
    """Flat map of leaf fields that differ between two configs."""
    from dataclasses import asdict

    def flatten(d: dict, prefix: str = "") -> dict:
        out: dict = {}
        for k, v in d.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict):
                out.update(flatten(v, key + "."))
            else:
                out[key] = v
        return out

    fa, fb = flatten(asdict(a)), flatten(asdict(b))
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k]}


@dataclass
class AblationResult:
    name: str
    base: MetricSummary
    variant: MetricSummary
    variant_losses: list[float]
    delta_auc: list[float]
    changed_fields: dict[str, tuple]


def run_ablation(
    name: str,
    base_config: ModelConfig,
    dataset: Dataset,
    holdout: Sequence[Request],
    base_metrics: MetricSummary,
    seed: int = 0,
    epochs: int = 1,
    batch_size: int = 256,
    optimizer_config: OptimizerConfig | None = None,
    max_steps: int | None = None,
) -> AblationResult:
    """Train one single-switch variant and report metric deltas vs base."""
    variant_cfg = apply_ablation(base_config, name)
    result = fit(
        dataset,
        variant_cfg,
        seed=seed,
        epochs=epochs,
        batch_size=batch_size,
        optimizer_config=optimizer_config,
        holdout=holdout,
        max_steps=max_steps,
    )
    delta = [v - b for v, b in zip(result.metrics.auc, base_metrics.auc)]
    return AblationResult(
        name=name,
        base=base_metrics,
        variant=result.metrics,
        variant_losses=result.losses,
        delta_auc=delta,
        changed_fields=config_diff(base_config, variant_cfg),
    )
