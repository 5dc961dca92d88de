"""Feature schema, embedding tables, request containers, and dataset files.

A schema declares non-sequential fields (tagged user / context / item)
and the per-action fields of the behavior sequence.  Non-sequential
embeddings are concatenated user-and-context first, then item, so the
user prefix of the vector is candidate-independent.  The concatenation
is zero-padded and sliced into n_heads equal pieces; when user heads are
allocated, each side is padded separately so no head slice straddles the
user/item boundary.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError, VocabError

_SIDES = ("user", "context", "item")


@dataclass(frozen=True)
class FeatureField:
    """One non-sequential categorical feature."""

    name: str
    side: str
    vocab_size: int
    dim: int

    def __post_init__(self) -> None:
        if self.side not in _SIDES:
            raise DataError(f"field {self.name}: side must be one of {_SIDES}")
        if self.vocab_size < 1 or self.dim < 1:
            raise DataError(f"field {self.name}: vocab_size and dim must be >= 1")


@dataclass(frozen=True)
class ActionField:
    """One categorical attribute of a sequence action."""

    name: str
    vocab_size: int
    dim: int

    def __post_init__(self) -> None:
        if self.vocab_size < 1 or self.dim < 1:
            raise DataError(f"action field {self.name}: vocab_size and dim must be >= 1")


@dataclass(frozen=True)
class FeatureSchema:
    nonseq_fields: tuple[FeatureField, ...]
    action_fields: tuple[ActionField, ...]
    max_seq_len: int

    def __post_init__(self) -> None:
        if not self.nonseq_fields:
            raise DataError("schema needs at least one non-sequential field")
        if not self.action_fields:
            raise DataError("schema needs at least one action field")
        if self.max_seq_len < 0:
            raise DataError("max_seq_len must be >= 0")
        names = [f.name for f in self.nonseq_fields]
        if len(set(names)) != len(names):
            raise DataError("duplicate non-sequential field names")
        names = [f.name for f in self.action_fields]
        if len(set(names)) != len(names):
            raise DataError("duplicate action field names")

    def user_fields(self) -> tuple[FeatureField, ...]:
        """User and context fields, in schema order."""
        return tuple(f for f in self.nonseq_fields if f.side != "item")

    def item_fields(self) -> tuple[FeatureField, ...]:
        return tuple(f for f in self.nonseq_fields if f.side == "item")

    @property
    def d_ns_user(self) -> int:
        return sum(f.dim for f in self.user_fields())

    @property
    def d_ns_item(self) -> int:
        return sum(f.dim for f in self.item_fields())

    @property
    def d_ns(self) -> int:
        return self.d_ns_user + self.d_ns_item

    @property
    def action_dim(self) -> int:
        return sum(f.dim for f in self.action_fields)


class EmbeddingTable:
    """A (vocab, dim) trainable table plus its Adagrad accumulator."""

    def __init__(self, name: str, weight: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        if weight.ndim != 2:
            raise ShapeError(f"table {name}: weight must be 2-d")
        self.name = name
        self.weight = ad.Tensor(weight, requires_grad=True)
        self.adagrad_acc = np.zeros_like(weight)

    @property
    def vocab_size(self) -> int:
        return self.weight.data.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.data.shape[1]

    def lookup(self, ids: np.ndarray) -> ad.Tensor:
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabError(
                f"table {self.name}: id out of range [0, {self.vocab_size})"
            )
        return ad.embedding(self.weight, ids)


def make_tables(
    schema: FeatureSchema, rng: np.random.Generator, init_scale: float = 0.1
) -> dict[str, EmbeddingTable]:
    """One table per field; action tables are keyed 'action:<name>'."""
    tables: dict[str, EmbeddingTable] = {}
    for f in schema.nonseq_fields:
        tables[f.name] = EmbeddingTable(
            f.name, rng.normal(0.0, init_scale, size=(f.vocab_size, f.dim))
        )
    for f in schema.action_fields:
        key = f"action:{f.name}"
        tables[key] = EmbeddingTable(
            key, rng.normal(0.0, init_scale, size=(f.vocab_size, f.dim))
        )
    return tables


@dataclass
class Request:
    """One scoring request: a user, their recent actions, K candidates.

    user_nonseq holds ids for user-and-context fields in schema order;
    actions is (T, n_action_fields); candidates is (K, n_item_fields);
    labels, when present, is (K, n_tasks) in {0, 1}.
    """

    user_id: int
    user_nonseq: np.ndarray
    actions: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.user_nonseq = np.asarray(self.user_nonseq, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.candidates = np.asarray(self.candidates, dtype=np.int64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)

    @property
    def seq_len(self) -> int:
        return self.actions.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[0]

    def validate(self, schema: FeatureSchema) -> None:
        if self.user_nonseq.shape != (len(schema.user_fields()),):
            raise DataError("user_nonseq length does not match schema")
        if self.actions.ndim != 2 or self.actions.shape[1] != len(schema.action_fields):
            raise DataError("actions must be (T, n_action_fields)")
        if self.actions.shape[0] > schema.max_seq_len:
            raise DataError(
                f"sequence length {self.actions.shape[0]} exceeds max {schema.max_seq_len}"
            )
        if (
            self.candidates.ndim != 2
            or self.candidates.shape[0] < 1
            or self.candidates.shape[1] != len(schema.item_fields())
        ):
            raise DataError("candidates must be (K >= 1, n_item_fields)")
        for ids, fields in (
            (self.user_nonseq.reshape(1, -1), schema.user_fields()),
            (self.candidates, schema.item_fields()),
            (self.actions, schema.action_fields),
        ):
            for j, f in enumerate(fields):
                col = ids[:, j]
                if col.size and (col.min() < 0 or col.max() >= f.vocab_size):
                    raise VocabError(f"field {f.name}: id out of range")


@dataclass
class Dataset:
    schema: FeatureSchema
    requests: list[Request]

    @property
    def n_impressions(self) -> int:
        return sum(r.n_candidates for r in self.requests)


@dataclass(frozen=True)
class HeadLayout:
    """How the non-sequential concat is padded and sliced into heads.

    Without user heads the whole vector is tail-padded to n_heads *
    slice_width.  With user heads the user segment is padded to
    n_user_heads * slice_width and the item segment to the remaining
    heads, so the boundary between sides falls exactly on a head edge.
    """

    n_heads: int
    n_user_heads: int
    slice_width: int
    user_width: int
    item_width: int
    user_pad: int
    tail_pad: int

    @property
    def padded_width(self) -> int:
        return self.n_heads * self.slice_width


def head_layout(
    schema: FeatureSchema, n_heads: int, n_user_heads: int = 0
) -> HeadLayout:
    if n_heads < 1:
        raise ShapeError("n_heads must be >= 1")
    if not 0 <= n_user_heads <= n_heads:
        raise ShapeError("n_user_heads must lie in [0, n_heads]")
    d_u, d_g = schema.d_ns_user, schema.d_ns_item
    if n_user_heads == 0:
        width = math.ceil((d_u + d_g) / n_heads)
        return HeadLayout(
            n_heads=n_heads,
            n_user_heads=0,
            slice_width=width,
            user_width=d_u,
            item_width=d_g,
            user_pad=0,
            tail_pad=n_heads * width - (d_u + d_g),
        )
    n_g = n_heads - n_user_heads
    if n_g == 0:
        raise ShapeError("at least one item head is required")
    width = max(math.ceil(d_u / n_user_heads), math.ceil(d_g / n_g), 1)
    return HeadLayout(
        n_heads=n_heads,
        n_user_heads=n_user_heads,
        slice_width=width,
        user_width=d_u,
        item_width=d_g,
        user_pad=n_user_heads * width - d_u,
        tail_pad=n_g * width - d_g,
    )


def pad_for_heads(e_ns: ad.Tensor, layout: HeadLayout) -> ad.Tensor:
    """Insert the layout's zero padding; works on any leading batch dims."""
    if e_ns.shape[-1] != layout.user_width + layout.item_width:
        raise ShapeError(
            f"expected concat width {layout.user_width + layout.item_width}, "
            f"got {e_ns.shape[-1]}"
        )
    lead = e_ns.shape[:-1]
    parts: list[ad.Tensor] = []
    if layout.user_pad == 0 and layout.tail_pad == 0:
        return e_ns
    if layout.user_pad:
        u = e_ns[..., : layout.user_width]
        g = e_ns[..., layout.user_width :]
        parts = [u, ad.Tensor(np.zeros(lead + (layout.user_pad,))), g]
    else:
        parts = [e_ns]
    if layout.tail_pad:
        parts.append(ad.Tensor(np.zeros(lead + (layout.tail_pad,))))
    return ad.concat(parts, axis=-1)


def split_heads(e_ns, projections, layout: HeadLayout) -> ad.Tensor:
    """Pad, slice into n_heads pieces, and project each into model width.

    projections is a stacked (n_heads, model_dim, slice_width) tensor;
    output is (..., n_heads, model_dim).
    """
    e_ns = ad.as_tensor(e_ns)
    projections = ad.as_tensor(projections)
    n, model_dim, width = projections.shape
    if n != layout.n_heads or width != layout.slice_width:
        raise ShapeError(
            f"projections {projections.shape} do not match layout "
            f"(n_heads={layout.n_heads}, slice_width={layout.slice_width})"
        )
    padded = pad_for_heads(e_ns, layout)
    lead = padded.shape[:-1]
    sliced = padded.reshape(lead + (n, width, 1))
    out = ad.matmul(projections, sliced)
    return out.reshape(lead + (n, model_dim))


def embed_nonseq(
    request: Request,
    candidate_index: int,
    tables: dict[str, EmbeddingTable],
    schema: FeatureSchema,
) -> ad.Tensor:
    """Concatenated non-sequential embedding for one candidate: user
    and context fields first, then item fields."""
    if not 0 <= candidate_index < request.n_candidates:
        raise DataError(f"candidate index {candidate_index} out of range")
    parts: list[ad.Tensor] = []
    for j, f in enumerate(schema.user_fields()):
        parts.append(tables[f.name].lookup(request.user_nonseq[j]))
    cand = request.candidates[candidate_index]
    for j, f in enumerate(schema.item_fields()):
        parts.append(tables[f.name].lookup(cand[j]))
    return ad.concat(parts, axis=-1)


def embed_actions(
    request: Request, tables: dict[str, EmbeddingTable], schema: FeatureSchema
) -> ad.Tensor | None:
    """(T, action_dim) concat of per-action field embeddings; None if T=0."""
    if request.seq_len == 0:
        return None
    parts = [
        tables[f"action:{f.name}"].lookup(request.actions[:, j])
        for j, f in enumerate(schema.action_fields)
    ]
    return ad.concat(parts, axis=-1)


@dataclass
class RequestBatch:
    """Requests of equal sequence length and candidate count, stacked."""

    user_ids: np.ndarray
    user_nonseq: np.ndarray
    actions: np.ndarray
    candidates: np.ndarray
    labels: np.ndarray | None

    @property
    def n_requests(self) -> int:
        return self.user_nonseq.shape[0]

    @property
    def n_candidates(self) -> int:
        return self.candidates.shape[1]

    @property
    def seq_len(self) -> int:
        return self.actions.shape[1]


def stack_requests(requests: Sequence[Request]) -> RequestBatch:
    if not requests:
        raise DataError("cannot stack an empty request list")
    t = requests[0].seq_len
    k = requests[0].n_candidates
    for r in requests:
        if r.seq_len != t or r.n_candidates != k:
            raise DataError("stacked requests must share seq_len and n_candidates")
    labels = None
    if all(r.labels is not None for r in requests):
        labels = np.stack([r.labels for r in requests])
    return RequestBatch(
        user_ids=np.array([r.user_id for r in requests], dtype=np.int64),
        user_nonseq=np.stack([r.user_nonseq for r in requests]),
        actions=np.stack([r.actions for r in requests]),
        candidates=np.stack([r.candidates for r in requests]),
        labels=labels,
    )


def embed_nonseq_batch(
    batch: RequestBatch, tables: dict[str, EmbeddingTable], schema: FeatureSchema
) -> ad.Tensor:
    """(B, K, d_ns) non-sequential concat for a stacked batch."""
    b, k = batch.n_requests, batch.n_candidates
    user_parts = [
        tables[f.name].lookup(batch.user_nonseq[:, j])
        for j, f in enumerate(schema.user_fields())
    ]
    item_parts = [
        tables[f.name].lookup(batch.candidates[:, :, j])
        for j, f in enumerate(schema.item_fields())
    ]
    user = ad.concat(user_parts, axis=-1) if user_parts else None
    item = ad.concat(item_parts, axis=-1) if item_parts else None
    if user is None:
        return item
    user = ad.broadcast_to(user.reshape((b, 1, schema.d_ns_user)), (b, k, schema.d_ns_user))
    if item is None:
        return user
    return ad.concat([user, item], axis=-1)


def embed_actions_batch(
    batch: RequestBatch, tables: dict[str, EmbeddingTable], schema: FeatureSchema
) -> ad.Tensor | None:
    if batch.seq_len == 0:
        return None
    parts = [
        tables[f"action:{f.name}"].lookup(batch.actions[:, :, j])
        for j, f in enumerate(schema.action_fields)
    ]
    return ad.concat(parts, axis=-1)


# ----------------------------------------------------------------------
# File formats.  The schema is a small line-oriented text file; the
# dataset is length-prefixed little-endian binary; oracle probabilities
# ride in a CSV sidecar at full float64 precision.
# ----------------------------------------------------------------------

_MAGIC = b"MXDS"
_VERSION = 1


def write_schema(path: str, schema: FeatureSchema) -> None:
    lines = [f"maxseqlen {schema.max_seq_len}"]
    for f in schema.nonseq_fields:
        lines.append(f"nonseq {f.name} {f.side} {f.vocab_size} {f.dim}")
    for f in schema.action_fields:
        lines.append(f"action {f.name} {f.vocab_size} {f.dim}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_schema(path: str) -> FeatureSchema:
    nonseq: list[FeatureField] = []
    actions: list[ActionField] = []
    max_seq_len = None
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot open schema file: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            try:
                if parts[0] == "maxseqlen":
                    max_seq_len = int(parts[1])
                elif parts[0] == "nonseq":
                    nonseq.append(
                        FeatureField(parts[1], parts[2], int(parts[3]), int(parts[4]))
                    )
                elif parts[0] == "action":
                    actions.append(ActionField(parts[1], int(parts[2]), int(parts[3])))
                else:
                    raise DataError(f"{path}:{lineno}: unknown record '{parts[0]}'")
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed schema line") from exc
    if max_seq_len is None:
        raise DataError(f"{path}: missing maxseqlen")
    return FeatureSchema(tuple(nonseq), tuple(actions), max_seq_len)


def write_dataset(path: str, dataset: Dataset) -> None:
    schema = dataset.schema
    n_user = len(schema.user_fields())
    n_item = len(schema.item_fields())
    n_act = len(schema.action_fields)
    has_labels = all(r.labels is not None for r in dataset.requests)
    n_tasks = dataset.requests[0].labels.shape[1] if has_labels and dataset.requests else 0
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(
            struct.pack(
                "<IIHHHHB",
                _VERSION,
                len(dataset.requests),
                n_user,
                n_act,
                n_item,
                n_tasks,
                1 if has_labels else 0,
            )
        )
        for r in dataset.requests:
            fh.write(struct.pack("<IHH", r.user_id, r.n_candidates, r.seq_len))
            fh.write(r.user_nonseq.astype("<u4").tobytes())
            fh.write(r.actions.astype("<u4").tobytes())
            fh.write(r.candidates.astype("<u4").tobytes())
            if has_labels:
                fh.write(r.labels.astype("<u1").tobytes())


def read_dataset(path: str, schema: FeatureSchema) -> Dataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot open dataset file: {exc}") from exc
    if blob[:4] != _MAGIC:
        raise DataError(f"{path}: not a dataset file")
    header_fmt = "<IIHHHHB"
    header_end = 4 + struct.calcsize(header_fmt)
    try:
        version, n_requests, n_user, n_act, n_item, n_tasks, has_labels = struct.unpack(
            header_fmt, blob[4:header_end]
        )
    except struct.error as exc:
        raise DataError(f"{path}: truncated header") from exc
    if version != _VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if (
        n_user != len(schema.user_fields())
        or n_act != len(schema.action_fields)
        or n_item != len(schema.item_fields())
    ):
        raise DataError(f"{path}: field counts do not match schema")
    off = header_end
    requests: list[Request] = []
    for _ in range(n_requests):
        try:
            user_id, k, t = struct.unpack_from("<IHH", blob, off)
        except struct.error as exc:
            raise DataError(f"{path}: truncated record") from exc
        off += 8
        need = 4 * (n_user + t * n_act + k * n_item) + (k * n_tasks if has_labels else 0)
        if off + need > len(blob):
            raise DataError(f"{path}: truncated record body")
        user_ns = np.frombuffer(blob, dtype="<u4", count=n_user, offset=off)
        off += 4 * n_user
        acts = np.frombuffer(blob, dtype="<u4", count=t * n_act, offset=off)
        off += 4 * t * n_act
        cands = np.frombuffer(blob, dtype="<u4", count=k * n_item, offset=off)
        off += 4 * k * n_item
        labels = None
        if has_labels:
            labels = np.frombuffer(blob, dtype="<u1", count=k * n_tasks, offset=off)
            labels = labels.reshape(k, n_tasks).astype(np.float64)
            off += k * n_tasks
        req = Request(
            user_id=int(user_id),
            user_nonseq=user_ns.astype(np.int64),
            actions=acts.astype(np.int64).reshape(t, n_act),
            candidates=cands.astype(np.int64).reshape(k, n_item),
            labels=labels,
        )
        req.validate(schema)
        requests.append(req)
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after last record")
    return Dataset(schema=schema, requests=requests)


def write_oracle(path: str, probs: Sequence[np.ndarray]) -> None:
    """CSV of true click probabilities: request, candidate, then one
    column per task, printed at full precision."""
    with open(path, "w") as fh:
        n_tasks = probs[0].shape[1] if len(probs) else 0
        header = "request,candidate," + ",".join(f"p{t}" for t in range(n_tasks))
        fh.write(header + "\n")
        for i, mat in enumerate(probs):
            for k in range(mat.shape[0]):
                vals = ",".join("%.17g" % v for v in mat[k])
                fh.write(f"{i},{k},{vals}\n")


def read_oracle(path: str) -> list[np.ndarray]:
    rows: dict[int, dict[int, list[float]]] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot open oracle file: {exc}") from exc
    with fh:
        header = fh.readline()
        if not header.startswith("request,candidate"):
            raise DataError(f"{path}: not an oracle file")
        for raw in fh:
            parts = raw.strip().split(",")
            if len(parts) < 3:
                raise DataError(f"{path}: malformed oracle row")
            i, k = int(parts[0]), int(parts[1])
            rows.setdefault(i, {})[k] = [float(v) for v in parts[2:]]
    out: list[np.ndarray] = []
    for i in range(len(rows)):
        if i not in rows:
            raise DataError(f"{path}: missing request {i}")
        ks = rows[i]
        mat = np.array([ks[k] for k in range(len(ks))], dtype=np.float64)
        out.append(mat)
    return out
