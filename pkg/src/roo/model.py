"""Reference forward kernels over jagged request batches.

Every architecture here computes user-side (RO) work once per request row
and item-side (NRO) work once per impression row, with the fanout index
duplicating RO results where impression-level processing would. The
impression-mode oracle runs the same kernels on the expanded batch, so the
two paths are comparable output-for-output.

Kernels are forward-only, pure, and deterministic: parameters initialize
from a single seed, f64 math throughout (embedding tables store f32 rows),
softmax with max subtraction, reductions in ascending position order.
A single causal-attention block plus a two-layer feed-forward stands in for
heavier sequential encoders; there are no residual connections, so a
one-token sequence encodes to ffn(attention_output(token)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .batcher import BatchConfig, JaggedBatch, KeyedJagged, build_expanded_batch, fanout, truncate_and_mask
from .schema import FeatureRegistry, RequestSample

# Counter key for target item-id lookups (real feature ids are >= 1).
ITEM_KEY = 0


@dataclass
class Counters:
    """FLOP and fetch accounting for one forward run.

    flops counts multiply-adds as 2 (bias adds and pooling adds as 1 per
    element); ro_flops is the subset attributable to request-only inputs.
    rows_ro / rows_nro count embedding rows fetched per feature id.
    """

    flops: int = 0
    ro_flops: int = 0
    rows_ro: dict[int, int] = field(default_factory=dict)
    rows_nro: dict[int, int] = field(default_factory=dict)
    empty_history_rows: int = 0
    run_id: str | None = None

    def add_flops(self, count: int, ro: bool) -> None:
        count = int(count)
        self.flops += count
        if ro:
            self.ro_flops += count

    def add_matmul(self, m: int, k: int, n: int, ro: bool) -> None:
        self.add_flops(2 * m * k * n, ro)

    def add_affine(self, m: int, k: int, n: int, ro: bool) -> None:
        self.add_flops(2 * m * k * n + m * n, ro)

    def count_rows(self, fid: int, rows: int, ro: bool) -> None:
        bucket = self.rows_ro if ro else self.rows_nro
        bucket[fid] = bucket.get(fid, 0) + int(rows)

    def merge(self, other: "Counters") -> None:
        self.flops += other.flops
        self.ro_flops += other.ro_flops
        for fid, n in other.rows_ro.items():
            self.rows_ro[fid] = self.rows_ro.get(fid, 0) + n
        for fid, n in other.rows_nro.items():
            self.rows_nro[fid] = self.rows_nro.get(fid, 0) + n
        self.empty_history_rows += other.empty_history_rows

    def total_rows_ro(self) -> int:
        return sum(self.rows_ro.values())

    def total_rows_nro(self) -> int:
        return sum(self.rows_nro.values())

    def to_dict(self) -> dict:
        return {
            "flops": self.flops,
            "ro_flops": self.ro_flops,
            "rows_ro": {str(k): v for k, v in sorted(self.rows_ro.items())},
            "rows_nro": {str(k): v for k, v in sorted(self.rows_nro.items())},
            "empty_history_rows": self.empty_history_rows,
            "run_id": self.run_id,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Counters":
        return cls(
            flops=int(obj["flops"]),
            ro_flops=int(obj["ro_flops"]),
            rows_ro={int(k): int(v) for k, v in obj["rows_ro"].items()},
            rows_nro={int(k): int(v) for k, v in obj["rows_nro"].items()},
            empty_history_rows=int(obj["empty_history_rows"]),
            run_id=obj.get("run_id"),
        )


@dataclass(frozen=True)
class EmbeddingTable:
    """Seeded deterministic id -> vector map; row 0 is the padding row."""

    num_rows: int
    dim: int
    weights: np.ndarray  # f32 [num_rows, dim]
    seed: int

    @classmethod
    def create(cls, num_rows: int, dim: int, seed: int) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(dim)
        weights = rng.uniform(-bound, bound, size=(num_rows, dim)).astype(np.float32)
        weights[0, :] = 0.0
        return cls(num_rows=num_rows, dim=dim, weights=weights, seed=seed)

    def lookup(self, ids: np.ndarray) -> np.ndarray:
        """Rows for ids (id mod num_rows), as f64. id 0 yields zeros."""
        idx = (np.asarray(ids, dtype=np.uint64) % self.num_rows).astype(np.int64)
        return self.weights[idx].astype(np.float64)


@dataclass(frozen=True)
class Affine:
    w: np.ndarray  # [k, n]
    b: np.ndarray  # [n]


@dataclass(frozen=True)
class LceParams:
    """Two-stage linear compression of stacked user-feature embeddings.

    Stage one mixes the n_in feature slots down to n_out per embedding
    channel; stage two projects each compressed slot from d_in to d_out.
    """

    n_in: int
    n_out: int
    d_in: int
    d_out: int
    w: np.ndarray  # [n_in, n_out]
    b: np.ndarray  # [1, n_out]
    w_proj: np.ndarray  # [d_in, d_out]
    b_proj: np.ndarray  # [1, d_out]


@dataclass(frozen=True)
class SeqEncoderParams:
    d: int
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray  # [d, 4d]
    b1: np.ndarray
    w2: np.ndarray  # [4d, d]
    b2: np.ndarray


@dataclass(frozen=True)
class MultiTaskHead:
    """Per-task affine maps from the interaction representation to one logit."""

    tasks: tuple[str, ...]
    heads: dict[str, Affine]

    def apply(self, rep: np.ndarray, counters: "Counters") -> np.ndarray:
        """Logits [rows, n_tasks], columns in task order."""
        return np.column_stack(
            [apply_affine(rep, self.heads[task], counters, ro=False)[:, 0] for task in self.tasks]
        )


@dataclass(frozen=True)
class ModelFeatures:
    """Which registry feature ids feed which model input."""

    user_arch_fids: tuple[int, ...]
    history_item_fid: int
    history_action_fid: int
    history_context_fid: int


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    n_max: int = 32
    lce_n_out: int = 4
    lce_d_out: int = 8
    hidden: int = 32
    rows_main: int = 4096
    rows_action: int = 64
    rows_context: int = 64
    user_tower: str = "user_arch"  # "user_arch" | "seq"
    seed: int = 1


@dataclass(frozen=True)
class ModelParams:
    config: ModelConfig
    features: ModelFeatures
    item_table: EmbeddingTable
    action_table: EmbeddingTable
    context_table: EmbeddingTable
    lce: LceParams
    user_proj: Affine  # [n_out*d_out -> d]
    seq: SeqEncoderParams
    item_mlp: tuple[Affine, Affine]  # d -> hidden -> d
    interaction: tuple[Affine, Affine]
    heads: MultiTaskHead
    tasks: tuple[str, ...]


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _affine(rng: np.random.Generator, k: int, n: int) -> Affine:
    return Affine(w=_uniform(rng, k, (k, n)), b=_uniform(rng, k, (n,)))


def init_model_params(
    config: ModelConfig,
    features: ModelFeatures,
    registry: FeatureRegistry,
    tasks: tuple[str, ...] = ("consumption", "engagement"),
) -> ModelParams:
    """Build every parameter deterministically from config.seed.

    Draw order is fixed; changing it changes every golden output.
    """
    rng = np.random.default_rng(config.seed)
    d = config.d
    seeds = [int(rng.integers(0, 2**63)) for _ in range(3)]
    item_table = EmbeddingTable.create(config.rows_main, d, seeds[0])
    action_table = EmbeddingTable.create(config.rows_action, d, seeds[1])
    context_table = EmbeddingTable.create(config.rows_context, d, seeds[2])

    n_in = len(features.user_arch_fids)
    lce = LceParams(
        n_in=n_in,
        n_out=config.lce_n_out,
        d_in=d,
        d_out=config.lce_d_out,
        w=_uniform(rng, n_in, (n_in, config.lce_n_out)),
        b=_uniform(rng, n_in, (1, config.lce_n_out)),
        w_proj=_uniform(rng, d, (d, config.lce_d_out)),
        b_proj=_uniform(rng, d, (1, config.lce_d_out)),
    )
    user_proj = _affine(rng, config.lce_n_out * config.lce_d_out, d)
    seq = SeqEncoderParams(
        d=d,
        wq=_uniform(rng, d, (d, d)),
        wk=_uniform(rng, d, (d, d)),
        wv=_uniform(rng, d, (d, d)),
        wo=_uniform(rng, d, (d, d)),
        w1=_uniform(rng, d, (d, 4 * d)),
        b1=_uniform(rng, d, (4 * d,)),
        w2=_uniform(rng, 4 * d, (4 * d, d)),
        b2=_uniform(rng, 4 * d, (d,)),
    )
    item_mlp = (_affine(rng, d, config.hidden), _affine(rng, config.hidden, d))
    interaction_in = (
        config.lce_n_out * config.lce_d_out
        + d  # per-target sequence encoding
        + d  # target item embedding
        + d * len(registry.nro_idlist_ids())
        + len(registry.nro_dense_ids())
        + len(registry.ro_dense_ids())
    )
    interaction = (
        _affine(rng, interaction_in, config.hidden),
        _affine(rng, config.hidden, config.hidden),
    )
    ordered_tasks = tuple(sorted(tasks))
    heads = MultiTaskHead(
        tasks=ordered_tasks,
        heads={task: _affine(rng, config.hidden, 1) for task in ordered_tasks},
    )
    return ModelParams(
        config=config,
        features=features,
        item_table=item_table,
        action_table=action_table,
        context_table=context_table,
        lce=lce,
        user_proj=user_proj,
        seq=seq,
        item_mlp=item_mlp,
        interaction=interaction,
        heads=heads,
        tasks=ordered_tasks,
    )


# --- elementary kernels -----------------------------------------------------


def apply_affine(x: np.ndarray, p: Affine, counters: Counters, ro: bool) -> np.ndarray:
    out = x @ p.w + p.b
    counters.add_affine(x.shape[0], x.shape[1], p.w.shape[1], ro)
    return out


def lookup_pooled(
    table: EmbeddingTable, kj: KeyedJagged, fid: int, counters: Counters, ro: bool
) -> np.ndarray:
    """Sum-pool embeddings over each row's ids; zero vector for empty rows.

    Every id in the batch counts as one row fetched, so in a request batch
    each RO list is fetched once per request, not once per impression.
    """
    if fid not in kj.keys:
        side = "RO" if ro else "NRO"
        raise ValueError(f"feature id {fid} is not in the batch's {side} id-list keys")
    lens = kj.lengths[fid]
    values = kj.values[fid]
    n = len(lens)
    out = np.zeros((n, table.dim), dtype=np.float64)
    emb = table.lookup(values)
    off = 0
    for i in range(n):
        ln = int(lens[i])
        if ln:
            out[i] = emb[off : off + ln].sum(axis=0)
        off += ln
    counters.count_rows(fid, len(values), ro)
    counters.add_flops(len(values) * table.dim, ro)  # pooling adds
    return out


def lookup_ro(
    table: EmbeddingTable, batch: JaggedBatch, fid: int, counters: Counters
) -> np.ndarray:
    """Pooled RO id-list embeddings, one row per request."""
    return lookup_pooled(table, batch.ro_idlist, fid, counters, ro=True)


def lce_compress(x: np.ndarray, p: LceParams, counters: Counters, ro: bool = True) -> np.ndarray:
    """[B, d_in, n_in] -> [B, d_in, n_out]: mix feature slots linearly."""
    b, d_in, n_in = x.shape
    if (d_in, n_in) != (p.d_in, p.n_in):
        raise ValueError(f"input is [{b},{d_in},{n_in}], params expect d_in={p.d_in}, n_in={p.n_in}")
    g = x.reshape(b * d_in, n_in)
    y = g @ p.w + p.b
    counters.add_affine(b * d_in, n_in, p.n_out, ro)
    return y.reshape(b, d_in, p.n_out)


def lce_project(y: np.ndarray, p: LceParams, counters: Counters, ro: bool = True) -> np.ndarray:
    """[B, d_in, n_out] -> [B, n_out, d_out]: project each compressed slot."""
    b, d_in, n_out = y.shape
    if (d_in, n_out) != (p.d_in, p.n_out):
        raise ValueError(f"input is [{b},{d_in},{n_out}], params expect d_in={p.d_in}, n_out={p.n_out}")
    g = y.transpose(0, 2, 1).reshape(b * n_out, d_in)
    z = g @ p.w_proj + p.b_proj
    counters.add_affine(b * n_out, d_in, p.d_out, ro)
    return z.reshape(b, n_out, p.d_out)


def user_arch_forward(x: np.ndarray, p: LceParams, counters: Counters) -> np.ndarray:
    """Compress then project stacked user-feature embeddings."""
    return lce_project(lce_compress(x, p, counters), p, counters)


# --- sequence encoder --------------------------------------------------------


def _project_kv(
    tokens: np.ndarray, p: SeqEncoderParams, counters: Counters, ro: bool
) -> tuple[np.ndarray, np.ndarray]:
    k = tokens @ p.wk
    v = tokens @ p.wv
    counters.add_matmul(tokens.shape[0], p.d, p.d, ro)
    counters.add_matmul(tokens.shape[0], p.d, p.d, ro)
    return k, v


def _attend(
    q_token: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    p: SeqEncoderParams,
    counters: Counters,
    ro: bool,
) -> np.ndarray:
    """Single-query attention over the given key rows (ascending position)."""
    q = q_token @ p.wq
    counters.add_matmul(1, p.d, p.d, ro)
    scores = keys @ q / math.sqrt(p.d)
    counters.add_matmul(keys.shape[0], p.d, 1, ro)
    scores -= scores.max()
    w = np.exp(scores)
    w /= w.sum()
    ctx = w @ values
    counters.add_matmul(1, keys.shape[0], p.d, ro)
    out = ctx @ p.wo
    counters.add_matmul(1, p.d, p.d, ro)
    return out


def _ffn(x: np.ndarray, p: SeqEncoderParams, counters: Counters, ro: bool) -> np.ndarray:
    rows = x.shape[0] if x.ndim == 2 else 1
    h = np.maximum(x @ p.w1 + p.b1, 0.0)
    counters.add_affine(rows, p.d, 4 * p.d, ro)
    out = h @ p.w2 + p.b2
    counters.add_affine(rows, 4 * p.d, p.d, ro)
    return out


def build_history_tokens(
    batch: JaggedBatch, params: ModelParams, counters: Counters
) -> tuple[np.ndarray, np.ndarray]:
    """Embed each row's user history as item + action + context vectors.

    Returns tokens [rows, n_max, d] and the valid mask; sequences keep their
    most recent n_max entries, left-padded. The three history lists must be
    aligned per row.
    """
    f = params.features
    n_max = params.config.n_max
    kj = batch.ro_idlist
    rows = batch.b_ro
    ids = np.zeros((rows, n_max), dtype=np.uint64)
    acts = np.zeros((rows, n_max), dtype=np.uint64)
    ctxs = np.zeros((rows, n_max), dtype=np.uint64)
    valid = np.zeros((rows, n_max), dtype=bool)
    for i in range(rows):
        items = kj.row(f.history_item_fid, i)
        actions = kj.row(f.history_action_fid, i)
        contexts = kj.row(f.history_context_fid, i)
        if not (len(items) == len(actions) == len(contexts)):
            raise ValueError(
                f"history lists misaligned on row {i}: "
                f"{len(items)} items, {len(actions)} actions, {len(contexts)} contexts"
            )
        ids[i], valid[i] = truncate_and_mask(items, n_max)
        acts[i], _ = truncate_and_mask(actions, n_max)
        ctxs[i], _ = truncate_and_mask(contexts, n_max)
    tokens = (
        params.item_table.lookup(ids)
        + params.action_table.lookup(acts)
        + params.context_table.lookup(ctxs)
    )
    n_real = int(valid.sum())
    counters.count_rows(f.history_item_fid, n_real, ro=True)
    counters.count_rows(f.history_action_fid, n_real, ro=True)
    counters.count_rows(f.history_context_fid, n_real, ro=True)
    counters.add_flops(2 * n_real * params.config.d, ro=True)  # token sums
    return tokens, valid


def seq_encode_retrieval(
    tokens: np.ndarray,
    valid: np.ndarray,
    p: SeqEncoderParams,
    counters: Counters,
) -> np.ndarray:
    """Encode each row's history; output at the last valid position.

    Rows with no valid history encode to zero and bump the warning counter.
    """
    rows = tokens.shape[0]
    out = np.zeros((rows, p.d), dtype=np.float64)
    for i in range(rows):
        toks = tokens[i][valid[i]]
        if len(toks) == 0:
            counters.empty_history_rows += 1
            continue
        keys, vals = _project_kv(toks, p, counters, ro=True)
        attn = _attend(toks[-1], keys, vals, p, counters, ro=True)
        out[i] = _ffn(attn, p, counters, ro=True)
    return out


def seq_encode_ranking(
    tokens: np.ndarray,
    valid: np.ndarray,
    target_tokens: np.ndarray,
    impressions_per_sample: np.ndarray,
    p: SeqEncoderParams,
    counters: Counters,
) -> np.ndarray:
    """Per-target encodings: each target attends to the row's history and to
    itself, never to sibling targets.

    History key/value projections are computed once per request and shared
    across its targets; that sharing is the amortization the request batch
    layout buys.
    """
    rows = tokens.shape[0]
    if len(impressions_per_sample) != rows:
        raise ValueError("impressions_per_sample does not match history rows")
    b_nro = int(impressions_per_sample.sum())
    out = np.zeros((b_nro, p.d), dtype=np.float64)
    j = 0
    for i in range(rows):
        m = int(impressions_per_sample[i])
        if m == 0:
            raise ValueError(f"request row {i} has no targets")
        toks = tokens[i][valid[i]]
        k_hist, v_hist = _project_kv(toks, p, counters, ro=True)
        for _ in range(m):
            tgt = target_tokens[j]
            k_t = tgt @ p.wk
            v_t = tgt @ p.wv
            counters.add_matmul(1, p.d, p.d, ro=False)
            counters.add_matmul(1, p.d, p.d, ro=False)
            keys = np.vstack([k_hist, k_t[None, :]])
            vals = np.vstack([v_hist, v_t[None, :]])
            attn = _attend(tgt, keys, vals, p, counters, ro=False)
            out[j] = _ffn(attn, p, counters, ro=False)
            j += 1
    return out


# --- architectures ------------------------------------------------------------


def _user_arch_stack(batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    """Pooled embeddings of the user-arch features, stacked [b_ro, d, n_in]."""
    cols = [
        lookup_ro(params.item_table, batch, fid, counters)
        for fid in params.features.user_arch_fids
    ]
    if not cols:
        return np.zeros((batch.b_ro, params.config.d, 0), dtype=np.float64)
    return np.stack(cols, axis=2)


def user_tower(batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    """One d-vector per request row."""
    if params.config.user_tower == "user_arch":
        x = _user_arch_stack(batch, params, counters)
        y = user_arch_forward(x, params.lce, counters)
        flat = y.reshape(batch.b_ro, params.lce.n_out * params.lce.d_out)
        return apply_affine(flat, params.user_proj, counters, ro=True)
    tokens, valid = build_history_tokens(batch, params, counters)
    return seq_encode_retrieval(tokens, valid, params.seq, counters)


def _target_embeddings(batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    counters.count_rows(ITEM_KEY, batch.b_nro, ro=False)
    return params.item_table.lookup(batch.item_ids)


def two_tower_forward(batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    """Dot-product score per impression; user tower runs once per request."""
    u = user_tower(batch, params, counters)
    item_emb = _target_embeddings(batch, params, counters)
    h = np.maximum(apply_affine(item_emb, params.item_mlp[0], counters, ro=False), 0.0)
    item_vec = apply_affine(h, params.item_mlp[1], counters, ro=False)
    row_map = fanout(batch).row_map
    scores = np.sum(u[row_map] * item_vec, axis=1)
    counters.add_matmul(batch.b_nro, params.config.d, 1, ro=False)
    return scores


def retrieval_forward(batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    """Per-impression user representation from the history encoder."""
    tokens, valid = build_history_tokens(batch, params, counters)
    u = seq_encode_retrieval(tokens, valid, params.seq, counters)
    return u[fanout(batch).row_map]


def ranking_forward(batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    """Per-target sequence encodings."""
    tokens, valid = build_history_tokens(batch, params, counters)
    targets = _target_embeddings(batch, params, counters)
    return seq_encode_ranking(
        tokens, valid, targets, batch.impressions_per_sample, params.seq, counters
    )


def lsr_forward(batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    """Late-stage ranking logits [b_nro, n_tasks].

    Interaction input, in order: fanned-out user-arch output, per-target
    sequence encoding, target item embedding, pooled NRO id-list embeddings,
    NRO dense, fanned-out RO dense.
    """
    x = _user_arch_stack(batch, params, counters)
    ua = user_arch_forward(x, params.lce, counters).reshape(
        batch.b_ro, params.lce.n_out * params.lce.d_out
    )
    tokens, valid = build_history_tokens(batch, params, counters)
    targets = _target_embeddings(batch, params, counters)
    seq_out = seq_encode_ranking(
        tokens, valid, targets, batch.impressions_per_sample, params.seq, counters
    )
    row_map = fanout(batch).row_map
    pooled_nro = [
        lookup_pooled(params.item_table, batch.nro_idlist, fid, counters, ro=False)
        for fid in batch.nro_idlist.keys
    ]
    parts = [ua[row_map], seq_out, targets]
    parts.extend(pooled_nro)
    parts.append(batch.nro_dense.astype(np.float64))
    parts.append(batch.ro_dense.astype(np.float64)[row_map])
    z = np.concatenate(parts, axis=1)
    h = np.maximum(apply_affine(z, params.interaction[0], counters, ro=False), 0.0)
    rep = apply_affine(h, params.interaction[1], counters, ro=False)
    return params.heads.apply(rep, counters)


ARCHITECTURES = ("two_tower", "retrieval", "ranking", "lsr")


def forward(arch: str, batch: JaggedBatch, params: ModelParams, counters: Counters) -> np.ndarray:
    """Run one architecture; outputs align with the batch's NRO rows."""
    if arch == "two_tower":
        return two_tower_forward(batch, params, counters)
    if arch == "retrieval":
        return retrieval_forward(batch, params, counters)
    if arch == "ranking":
        return ranking_forward(batch, params, counters)
    if arch == "lsr":
        return lsr_forward(batch, params, counters)
    raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


def expanded_forward_oracle(
    samples: list[RequestSample],
    params: ModelParams,
    registry: FeatureRegistry,
    bconfig: BatchConfig,
    arch: str,
    run_id: str | None = None,
) -> tuple[np.ndarray, Counters]:
    """Impression-mode reference: expand, duplicate RO features per
    impression, run the same kernels. Output rows align positionally with
    the request batch's NRO rows."""
    batch = build_expanded_batch(samples, registry, bconfig)
    counters = Counters(run_id=run_id)
    out = forward(arch, batch, params, counters)
    return out, counters


def max_relative_difference(a: np.ndarray, b: np.ndarray, floor: float = 1e-9) -> float:
    """max |a - b| / max(|b|, floor); zero for identical arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))
