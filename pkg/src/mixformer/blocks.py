"""The stacked interaction blocks and full forward passes.

Each block applies three residual sublayers to an (n_heads, head_dim)
state: a query mixer (parameter-free head mixing plus per-head gated
FFNs), cross attention from per-head queries onto the user's action
sequence, and an output fusion of per-head gated FFNs.  Keys and values
are projected per block from the raw sequence embedding, so they depend
only on the request, never on the candidate.

Default normalization is rms_norm applied before each sublayer; the
post_ln ablation switches to gain-only layer_norm applied after the
residual add.  All shape work tolerates arbitrary leading batch axes,
so the same code serves single-candidate scoring, batched training, and
the decoupled serving path.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, ShapeError
from .features import (
    Dataset,
    EmbeddingTable,
    FeatureSchema,
    HeadLayout,
    Request,
    RequestBatch,
    embed_actions,
    embed_actions_batch,
    embed_nonseq,
    embed_nonseq_batch,
    head_layout,
    make_tables,
    split_heads,
)
from .mathcore import glorot_uniform


@dataclass(frozen=True)
class AblationFlags:
    """Single-switch model variants; all default off."""

    wo_hm: bool = False
    hm_to_sa: bool = False
    wo_qm_ffn: bool = False
    shared_seq_ffn: bool = False
    shared_of_ffn: bool = False
    post_ln: bool = False


@dataclass(frozen=True)
class DecoupleConfig:
    """Head allocation between candidate-independent and item sides."""

    enabled: bool = False
    n_user_heads: int = 0
    n_item_heads: int = 0


@dataclass(frozen=True)
class ModelConfig:
    n_heads: int
    head_dim: int
    n_blocks: int
    max_seq_len: int
    expansion_ratio: float = 2.0
    seq_expansion_ratio: float | None = None
    n_tasks: int = 2
    task_hidden: int | None = None
    norm_eps: float = 1e-6
    ablations: AblationFlags = field(default_factory=AblationFlags)
    decoupling: DecoupleConfig = field(default_factory=DecoupleConfig)

    def __post_init__(self) -> None:
        if self.n_heads < 1 or self.head_dim < 1 or self.n_blocks < 1:
            raise ConfigError("n_heads, head_dim, n_blocks must be >= 1")
        if self.head_dim % self.n_heads != 0:
            raise ConfigError(
                f"head_dim {self.head_dim} must be divisible by n_heads "
                f"{self.n_heads} for head mixing"
            )
        if self.max_seq_len < 0 or self.n_tasks < 1:
            raise ConfigError("max_seq_len must be >= 0 and n_tasks >= 1")
        if self.expansion_ratio <= 0:
            raise ConfigError("expansion_ratio must be positive")
        if self.seq_expansion_ratio is not None and self.seq_expansion_ratio <= 0:
            raise ConfigError("seq_expansion_ratio must be positive")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be >= 0")
        d = self.decoupling
        if d.enabled:
            if d.n_user_heads < 0 or d.n_item_heads < 1:
                raise ConfigError("decoupling needs n_item_heads >= 1, n_user_heads >= 0")
            if d.n_user_heads + d.n_item_heads != self.n_heads:
                raise ConfigError("user and item heads must sum to n_heads")
            if self.ablations.hm_to_sa:
                raise ConfigError(
                    "hm_to_sa mixes all heads through attention and cannot "
                    "preserve user/item decoupling"
                )

    @property
    def model_width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def ffn_hidden(self) -> int:
        return max(1, round(self.expansion_ratio * self.head_dim))

    @property
    def seq_ffn_hidden(self) -> int:
        ratio = (
            self.seq_expansion_ratio
            if self.seq_expansion_ratio is not None
            else self.expansion_ratio
        )
        return max(1, round(ratio * self.model_width))

    @property
    def task_hidden_dim(self) -> int:
        return self.task_hidden if self.task_hidden is not None else self.head_dim


def config_to_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    if "ablations" in d and isinstance(d["ablations"], dict):
        d["ablations"] = AblationFlags(**d["ablations"])
    if "decoupling" in d and isinstance(d["decoupling"], dict):
        d["decoupling"] = DecoupleConfig(**d["decoupling"])
    try:
        return ModelConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


@dataclass
class BlockParams:
    """Parameter views for one block; entries are None when an ablation
    removes the corresponding sublayer."""

    qm_norm: ad.Tensor | None
    qm_gate: ad.Tensor | None
    qm_up: ad.Tensor | None
    qm_down: ad.Tensor | None
    sa_query: ad.Tensor | None
    sa_key: ad.Tensor | None
    sa_value: ad.Tensor | None
    seq_norm: ad.Tensor
    seq_gate: ad.Tensor
    seq_up: ad.Tensor
    seq_down: ad.Tensor
    key_proj: ad.Tensor
    value_proj: ad.Tensor
    of_norm: ad.Tensor
    of_gate: ad.Tensor
    of_up: ad.Tensor
    of_down: ad.Tensor


class ParameterStore:
    """All trainable state plus the config and schema it was built for.

    Dense tensors live in an insertion-ordered dict; that order is the
    canonical serialization order for checkpoints and optimizer state.
    """

    def __init__(self, config: ModelConfig, schema: FeatureSchema, seed: int):
        self.config = config
        self.schema = schema
        self.seed = seed
        n_user = config.decoupling.n_user_heads if config.decoupling.enabled else 0
        self.layout: HeadLayout = head_layout(schema, config.n_heads, n_user)
        self.dense: dict[str, ad.Tensor] = {}
        self.tables: dict[str, EmbeddingTable] = {}

    def add(self, name: str, array: np.ndarray) -> ad.Tensor:
        if name in self.dense:
            raise ConfigError(f"duplicate parameter name {name}")
        t = ad.Tensor(array, requires_grad=True)
        self.dense[name] = t
        return t

    @property
    def n_dense_params(self) -> int:
        return sum(t.size for t in self.dense.values())

    def zero_grad(self) -> None:
        for t in self.dense.values():
            t.grad = None
        for tab in self.tables.values():
            tab.weight.grad = None

    def _seq_prefix(self, block: int) -> str:
        return "seq_shared" if self.config.ablations.shared_seq_ffn else f"block{block}.seq"

    def block(self, index: int) -> BlockParams:
        cfg = self.config
        flags = cfg.ablations
        d = self.dense
        pre = f"block{index}"
        sp = self._seq_prefix(index)

        def get(name: str) -> ad.Tensor | None:
            return d.get(name)

        return BlockParams(
            qm_norm=get(f"{pre}.qm.norm"),
            qm_gate=get(f"{pre}.qm.ffn.gate"),
            qm_up=get(f"{pre}.qm.ffn.up"),
            qm_down=get(f"{pre}.qm.ffn.down"),
            sa_query=get(f"{pre}.qm.sa.query"),
            sa_key=get(f"{pre}.qm.sa.key"),
            sa_value=get(f"{pre}.qm.sa.value"),
            seq_norm=d[f"{sp}.norm"],
            seq_gate=d[f"{sp}.ffn.gate"],
            seq_up=d[f"{sp}.ffn.up"],
            seq_down=d[f"{sp}.ffn.down"],
            key_proj=d[f"{pre}.kv.key"],
            value_proj=d[f"{pre}.kv.value"],
            of_norm=d[f"{pre}.of.norm"],
            of_gate=d[f"{pre}.of.ffn.gate"],
            of_up=d[f"{pre}.of.ffn.up"],
            of_down=d[f"{pre}.of.ffn.down"],
        )


def init_parameters(schema: FeatureSchema, config: ModelConfig, seed: int) -> ParameterStore:
    """Build all tables and dense weights with seeded Glorot-uniform init.

    Creation order is fixed: embedding tables, head projections, the
    sequence input projection, then per-block parameters, then task
    heads.  Norm gains start at 1.
    """
    store = ParameterStore(config, schema, seed)
    rng = np.random.default_rng(seed)
    store.tables = make_tables(schema, rng)

    n, dim = config.n_heads, config.head_dim
    width = store.layout.slice_width
    nd = config.model_width
    h = config.ffn_hidden
    hs = config.seq_ffn_hidden
    a = schema.action_dim
    flags = config.ablations

    store.add("split.proj", glorot_uniform(rng, (n, dim, width), width, dim))
    store.add("seq.input_proj", glorot_uniform(rng, (nd, a), a, nd))

    def add_headwise_ffn(prefix: str, n_stacks: int) -> None:
        store.add(f"{prefix}.gate", glorot_uniform(rng, (n_stacks, h, dim), dim, h))
        store.add(f"{prefix}.up", glorot_uniform(rng, (n_stacks, h, dim), dim, h))
        store.add(f"{prefix}.down", glorot_uniform(rng, (n_stacks, dim, h), h, dim))

    if flags.shared_seq_ffn:
        store.add("seq_shared.norm", np.ones(nd))
        store.add("seq_shared.ffn.gate", glorot_uniform(rng, (hs, nd), nd, hs))
        store.add("seq_shared.ffn.up", glorot_uniform(rng, (hs, nd), nd, hs))
        store.add("seq_shared.ffn.down", glorot_uniform(rng, (nd, hs), hs, nd))

    for l in range(config.n_blocks):
        pre = f"block{l}"
        if not (flags.wo_hm and flags.wo_qm_ffn):
            store.add(f"{pre}.qm.norm", np.ones(dim))
        if flags.hm_to_sa:
            store.add(f"{pre}.qm.sa.query", glorot_uniform(rng, (dim, dim), dim, dim))
            store.add(f"{pre}.qm.sa.key", glorot_uniform(rng, (dim, dim), dim, dim))
            store.add(f"{pre}.qm.sa.value", glorot_uniform(rng, (dim, dim), dim, dim))
        if not flags.wo_qm_ffn:
            add_headwise_ffn(f"{pre}.qm.ffn", n)
        if not flags.shared_seq_ffn:
            store.add(f"{pre}.seq.norm", np.ones(nd))
            store.add(f"{pre}.seq.ffn.gate", glorot_uniform(rng, (hs, nd), nd, hs))
            store.add(f"{pre}.seq.ffn.up", glorot_uniform(rng, (hs, nd), nd, hs))
            store.add(f"{pre}.seq.ffn.down", glorot_uniform(rng, (nd, hs), hs, nd))
        store.add(f"{pre}.kv.key", glorot_uniform(rng, (n, dim, dim), dim, dim))
        store.add(f"{pre}.kv.value", glorot_uniform(rng, (n, dim, dim), dim, dim))
        store.add(f"{pre}.of.norm", np.ones(dim))
        add_headwise_ffn(f"{pre}.of.ffn", 1 if flags.shared_of_ffn else n)

    th = config.task_hidden_dim
    store.add("task.hidden", glorot_uniform(rng, (config.n_tasks, th, nd), nd, th))
    store.add("task.out", glorot_uniform(rng, (config.n_tasks, 1, th), th, 1))
    return store


# ----------------------------------------------------------------------
# Sublayers
# ----------------------------------------------------------------------


def head_mixing(x) -> ad.Tensor:
    """Parameter-free mixing: output row i, chunk j = input row j, chunk i.

    x is (..., n_heads, head_dim) with head_dim divisible by n_heads.
    An involution; costs zero FLOPs.
    """
    x = ad.as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("head_mixing input must be at least 2-d")
    n, dim = x.shape[-2], x.shape[-1]
    if dim % n != 0:
        raise ShapeError(f"head_dim {dim} not divisible by n_heads {n}")
    chunk = dim // n
    lead = x.shape[:-2]
    return (
        x.reshape(lead + (n, n, chunk))
        .swapaxes(-3, -2)
        .reshape(lead + (n, dim))
    )


def _norm(x: ad.Tensor, scale: ad.Tensor, cfg: ModelConfig) -> ad.Tensor:
    if cfg.ablations.post_ln:
        return ad.layer_norm(x, scale, cfg.norm_eps)
    return ad.rms_norm(x, scale, cfg.norm_eps)


def _sublayer(x: ad.Tensor, scale: ad.Tensor, cfg: ModelConfig, fn) -> ad.Tensor:
    """Residual wrapper: pre-norm 'x + fn(norm(x))' or post-norm
    'norm(x + fn(x))' depending on the post_ln flag."""
    if cfg.ablations.post_ln:
        return _norm(ad.add(fn(x), x), scale, cfg)
    return ad.add(fn(_norm(x, scale, cfg)), x)


def _col(x: ad.Tensor) -> ad.Tensor:
    return x.reshape(x.shape + (1,))


def _headwise_ffn(x: ad.Tensor, gate: ad.Tensor, up: ad.Tensor, down: ad.Tensor) -> ad.Tensor:
    # x (..., n, dim); gate/up (n or 1, hidden, dim); down (n or 1, dim, hidden)
    col = _col(x)
    hidden = ad.mul(ad.swish(ad.matmul(gate, col)), ad.matmul(up, col))
    return ad.matmul(down, hidden).reshape(x.shape)


def _flat_ffn(x: ad.Tensor, gate: ad.Tensor, up: ad.Tensor, down: ad.Tensor) -> ad.Tensor:
    # x (..., t, width); weights are plain matrices
    gt = ad.swapaxes(gate, -1, -2)
    ut = ad.swapaxes(up, -1, -2)
    dt = ad.swapaxes(down, -1, -2)
    hidden = ad.mul(ad.swish(ad.matmul(x, gt)), ad.matmul(x, ut))
    return ad.matmul(hidden, dt)


def _single_head_sa(x: ad.Tensor, bp: BlockParams, cfg: ModelConfig) -> ad.Tensor:
    """Ablation substitute for head mixing: one self-attention pass over
    the n_heads rows with learned D x D projections."""
    q = ad.matmul(x, ad.swapaxes(bp.sa_query, -1, -2))
    k = ad.matmul(x, ad.swapaxes(bp.sa_key, -1, -2))
    v = ad.matmul(x, ad.swapaxes(bp.sa_value, -1, -2))
    scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(cfg.head_dim))
    return ad.matmul(ad.softmax(scores), v)


def query_mixer(x, bp: BlockParams, cfg: ModelConfig, mask: np.ndarray | None = None) -> ad.Tensor:
    """Head mixing then per-head gated FFNs, each with its own residual."""
    x = ad.as_tensor(x)
    flags = cfg.ablations
    if not flags.wo_hm:
        if flags.hm_to_sa:
            mix = lambda xn: _single_head_sa(xn, bp, cfg)
        elif mask is not None:
            mask_c = ad.Tensor(mask)
            mix = lambda xn: ad.mul(head_mixing(xn), mask_c)
        else:
            mix = head_mixing
        p = _sublayer(x, bp.qm_norm, cfg, mix)
    else:
        p = x
    if flags.wo_qm_ffn:
        return p
    return _sublayer(
        p, bp.qm_norm, cfg, lambda pn: _headwise_ffn(pn, bp.qm_gate, bp.qm_up, bp.qm_down)
    )


def project_actions(s, bp: BlockParams, cfg: ModelConfig) -> tuple[ad.Tensor, ad.Tensor]:
    """Per-block keys and values from the raw sequence embedding.

    s is (..., t, n_heads*head_dim).  The gated FFN plus residual reads
    the raw embedding at every block, then each head's slice is
    projected by that block's key/value matrices.  Returns two
    (..., n_heads, t, head_dim) tensors.
    """
    s = ad.as_tensor(s)
    h = _sublayer(
        s, bp.seq_norm, cfg, lambda sn: _flat_ffn(sn, bp.seq_gate, bp.seq_up, bp.seq_down)
    )
    lead = h.shape[:-2]
    t = h.shape[-2]
    heads = h.reshape(lead + (t, cfg.n_heads, cfg.head_dim)).swapaxes(-3, -2)
    keys = ad.matmul(heads, ad.swapaxes(bp.key_proj, -1, -2))
    values = ad.matmul(heads, ad.swapaxes(bp.value_proj, -1, -2))
    return keys, values


def cross_attention(q, keys, values) -> ad.Tensor:
    """Per-head dot-product attention onto the sequence, residual from q.

    q is (..., n_heads, head_dim); keys/values are (..., n_heads, t,
    head_dim) with broadcast-compatible leading axes.  An empty or
    absent sequence returns q unchanged.
    """
    q = ad.as_tensor(q)
    if keys is None:
        return q
    keys = ad.as_tensor(keys)
    values = ad.as_tensor(values)
    t = keys.shape[-2]
    if t == 0:
        return q
    dim = q.shape[-1]
    if keys.shape[-1] != dim or values.shape[-1] != dim or values.shape[-2] != t:
        raise ShapeError("keys/values do not match query head width")
    scores = ad.mul(ad.matmul(keys, _col(q)), 1.0 / math.sqrt(dim))
    flat = scores.reshape(scores.shape[:-1])
    weights = _col(ad.softmax(flat))
    ctx = ad.matmul(ad.swapaxes(values, -1, -2), weights)
    return ad.add(ctx.reshape(q.shape), q)


def output_fusion(z, bp: BlockParams, cfg: ModelConfig) -> ad.Tensor:
    """Per-head gated FFNs with residual on the attended state."""
    z = ad.as_tensor(z)
    return _sublayer(
        z, bp.of_norm, cfg, lambda zn: _headwise_ffn(zn, bp.of_gate, bp.of_up, bp.of_down)
    )


def mixformer_block(
    x,
    bp: BlockParams,
    cfg: ModelConfig,
    seq: ad.Tensor | None = None,
    kv: tuple[ad.Tensor, ad.Tensor] | None = None,
    mask: np.ndarray | None = None,
) -> ad.Tensor:
    """One full block.  Pass either the raw sequence embedding (keys and
    values are projected here) or precomputed kv."""
    if kv is None and seq is not None:
        kv = project_actions(seq, bp, cfg)
    q = query_mixer(x, bp, cfg, mask)
    z = cross_attention(q, kv[0], kv[1]) if kv is not None else cross_attention(q, None, None)
    return output_fusion(z, bp, cfg)


def task_logits(flat: ad.Tensor, store: ParameterStore) -> ad.Tensor:
    """Per-task MLP heads on the flattened stack output: (..., n_tasks)."""
    w1 = store.dense["task.hidden"]
    w2 = store.dense["task.out"]
    lead = flat.shape[:-1]
    x = flat.reshape(lead + (1, flat.shape[-1], 1))
    hidden = ad.swish(ad.matmul(w1, x))
    out = ad.matmul(w2, hidden)
    return out.reshape(lead + (store.config.n_tasks,))


def _sequence_embedding(
    actions: ad.Tensor | None, store: ParameterStore
) -> ad.Tensor | None:
    if actions is None:
        return None
    proj_t = ad.swapaxes(store.dense["seq.input_proj"], -1, -2)
    return ad.matmul(actions, proj_t)


def forward_tensor(
    request: Request,
    candidate_index: int,
    store: ParameterStore,
    mask: np.ndarray | None = None,
) -> ad.Tensor:
    """Logits tensor for one candidate; differentiable w.r.t. all params."""
    cfg, schema = store.config, store.schema
    request.validate(schema)
    e = embed_nonseq(request, candidate_index, store.tables, schema)
    x = split_heads(e, store.dense["split.proj"], store.layout)
    s = _sequence_embedding(embed_actions(request, store.tables, schema), store)
    for l in range(cfg.n_blocks):
        x = mixformer_block(x, store.block(l), cfg, seq=s, mask=mask)
    return task_logits(x.reshape((cfg.model_width,)), store)


def forward(
    request: Request,
    candidate_index: int,
    store: ParameterStore,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """Score one candidate of one request: returns (n_tasks,) logits."""
    with ad.no_grad():
        return forward_tensor(request, candidate_index, store, mask).data


def batched_forward_tensor(
    batch: RequestBatch, store: ParameterStore, mask: np.ndarray | None = None
) -> ad.Tensor:
    """(B, K, n_tasks) logits for a stacked batch.

    Keys and values are computed once per request per block and
    broadcast over candidates, which is exact because they never depend
    on the candidate.
    """
    cfg, schema = store.config, store.schema
    b, k = batch.n_requests, batch.n_candidates
    e = embed_nonseq_batch(batch, store.tables, schema)
    x = split_heads(e, store.dense["split.proj"], store.layout)
    s = _sequence_embedding(embed_actions_batch(batch, store.tables, schema), store)
    for l in range(cfg.n_blocks):
        bp = store.block(l)
        kv = None
        if s is not None:
            keys, values = project_actions(s, bp, cfg)
            t = keys.shape[-2]
            keys = keys.reshape((b, 1, cfg.n_heads, t, cfg.head_dim))
            values = values.reshape((b, 1, cfg.n_heads, t, cfg.head_dim))
            kv = (keys, values)
        x = mixformer_block(x, bp, cfg, kv=kv, mask=mask)
    return task_logits(x.reshape((b, k, cfg.model_width)), store)


def batched_forward(
    batch: RequestBatch, store: ParameterStore, mask: np.ndarray | None = None
) -> np.ndarray:
    with ad.no_grad():
        return batched_forward_tensor(batch, store, mask).data


# ----------------------------------------------------------------------
# Checkpoints: config + schema + every array, byte-stable.
# ----------------------------------------------------------------------

_CK_MAGIC = b"MXCK"
_CK_VERSION = 1


def _schema_to_dict(schema: FeatureSchema) -> dict:
    return {
        "max_seq_len": schema.max_seq_len,
        "nonseq": [
            [f.name, f.side, f.vocab_size, f.dim] for f in schema.nonseq_fields
        ],
        "action": [[f.name, f.vocab_size, f.dim] for f in schema.action_fields],
    }


def _schema_from_dict(d: dict) -> FeatureSchema:
    from .features import ActionField, FeatureField

    return FeatureSchema(
        tuple(FeatureField(n, s, v, dim) for n, s, v, dim in d["nonseq"]),
        tuple(ActionField(n, v, dim) for n, v, dim in d["action"]),
        d["max_seq_len"],
    )


def _write_array(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def _read_array(blob: bytes, off: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<B", blob, off)
    off += 1
    shape = struct.unpack_from(f"<{ndim}I", blob, off)
    off += 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
    off += 8 * count
    return arr.copy(), off


def save_checkpoint(
    path: str,
    store: ParameterStore,
    dense_opt: dict[str, np.ndarray] | None = None,
    extra: dict | None = None,
) -> None:
    """Serialize parameters, table state, and optionally optimizer state.

    dense_opt maps dense parameter names to their RMSProp accumulators;
    the Adagrad accumulators travel with their tables.  extra must be
    JSON-serializable (step counters and the like).
    """
    header = {
        "config": config_to_dict(store.config),
        "schema": _schema_to_dict(store.schema),
        "seed": store.seed,
        "dense": list(store.dense.keys()),
        "tables": list(store.tables.keys()),
        "has_opt": dense_opt is not None,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CK_MAGIC)
        fh.write(struct.pack("<II", _CK_VERSION, len(hb)))
        fh.write(hb)
        for name in header["dense"]:
            _write_array(fh, store.dense[name].data)
        for name in header["tables"]:
            _write_array(fh, store.tables[name].weight.data)
            _write_array(fh, store.tables[name].adagrad_acc)
        if dense_opt is not None:
            for name in header["dense"]:
                _write_array(fh, dense_opt[name])


def load_checkpoint(path: str) -> tuple[ParameterStore, dict[str, np.ndarray] | None, dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot open checkpoint file: {exc}") from exc
    if blob[:4] != _CK_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != _CK_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode())
    cfg = config_from_dict(header["config"])
    schema = _schema_from_dict(header["schema"])
    store = init_parameters(schema, cfg, header["seed"])
    if list(store.dense.keys()) != header["dense"] or list(store.tables.keys()) != header["tables"]:
        raise DataError(f"{path}: parameter inventory mismatch")
    off = 12 + hlen
    for name in header["dense"]:
        arr, off = _read_array(blob, off)
        if arr.shape != store.dense[name].data.shape:
            raise DataError(f"{path}: shape mismatch for {name}")
        store.dense[name].data = arr
    for name in header["tables"]:
        w, off = _read_array(blob, off)
        acc, off = _read_array(blob, off)
        tab = store.tables[name]
        if w.shape != tab.weight.data.shape:
            raise DataError(f"{path}: shape mismatch for table {name}")
        tab.weight.data = w
        tab.adagrad_acc = acc
    dense_opt = None
    if header["has_opt"]:
        dense_opt = {}
        for name in header["dense"]:
            arr, off = _read_array(blob, off)
            dense_opt[name] = arr
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes")
    return store, dense_opt, header["extra"]
