"""Mini-batch construction from request samples.

The RO side holds one row per request (batch size b_ro); the NRO side is
flattened along the candidate dimension (batch size b_nro), sample-major
then item order. impressions_per_sample links the two sides, and the fanout
index is the row map that duplicates RO-side rows the way impression-level
processing would.

All transforms here are pure; batches are treated as immutable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schema import (
    FeatureMeta,
    FeatureRegistry,
    RequestSample,
    ValidationError,
    expand_request_sample,
    validate_request_sample,
)

PAD_ID = 0  # reserved sentinel; real ids are >= 1


@dataclass(frozen=True)
class BatchConfig:
    """Label materialization and sequence policy.

    task_labels maps task name to the label id whose presence makes the
    task's 0/1 target. duration_values optionally maps a task to
    {label id: float value}, turning it into a float target (value of the
    matched bucket, 0.0 when none). dedup_keep fixes which duplicate
    survives in dedup_ids.
    """

    task_labels: dict[str, int] = field(default_factory=lambda: {"engagement": 1, "consumption": 2})
    duration_values: dict[str, dict[int, float]] = field(default_factory=dict)
    dedup_keep: str = "first"

    def task_names(self) -> list[str]:
        return sorted(self.task_labels)


@dataclass(frozen=True)
class KeyedJagged:
    """Per-key jagged id lists over one logical batch dimension."""

    keys: tuple[int, ...]
    lengths: dict[int, np.ndarray]  # per key, u32 [num_rows]
    values: dict[int, np.ndarray]  # per key, u64 [sum(lengths)]

    def num_rows(self) -> int:
        if not self.keys:
            return 0
        return len(self.lengths[self.keys[0]])

    def row(self, fid: int, i: int) -> np.ndarray:
        lens = self.lengths[fid]
        start = int(lens[:i].sum())
        return self.values[fid][start : start + int(lens[i])]

    def rows(self, fid: int) -> list[np.ndarray]:
        lens = self.lengths[fid]
        offsets = np.concatenate([[0], np.cumsum(lens)]).astype(int)
        return [self.values[fid][offsets[i] : offsets[i + 1]] for i in range(len(lens))]


@dataclass(frozen=True)
class JaggedBatch:
    b_ro: int
    b_nro: int
    impressions_per_sample: np.ndarray  # u32 [b_ro], entries >= 1
    ro_dense: np.ndarray  # f32 [b_ro, n_ro_dense]
    ro_idlist: KeyedJagged  # b_ro rows
    nro_dense: np.ndarray  # f32 [b_nro, n_nro_dense]
    nro_idlist: KeyedJagged  # b_nro rows
    labels: dict[str, np.ndarray]  # per task, f32 [b_nro]
    request_ids: np.ndarray  # u64 [b_ro]
    item_ids: np.ndarray  # u64 [b_nro], the target item per NRO row

    def to_debug_dict(self) -> dict:
        """JSON-friendly dump for golden tests."""

        def kj(k: KeyedJagged) -> dict:
            return {
                str(fid): {
                    "lengths": k.lengths[fid].tolist(),
                    "values": k.values[fid].tolist(),
                }
                for fid in k.keys
            }

        return {
            "b_ro": self.b_ro,
            "b_nro": self.b_nro,
            "impressions_per_sample": self.impressions_per_sample.tolist(),
            "ro_dense": self.ro_dense.tolist(),
            "ro_idlist": kj(self.ro_idlist),
            "nro_dense": self.nro_dense.tolist(),
            "nro_idlist": kj(self.nro_idlist),
            "labels": {t: v.tolist() for t, v in sorted(self.labels.items())},
            "request_ids": self.request_ids.tolist(),
            "item_ids": self.item_ids.tolist(),
        }


@dataclass(frozen=True)
class FanoutIndex:
    """row_map[j] = RO row owning NRO row j; non-decreasing."""

    row_map: np.ndarray  # u32 [b_nro]


def _keyed_jagged(fids: list[int], rows_per_fid: dict[int, list[list[int]]]) -> KeyedJagged:
    lengths = {}
    values = {}
    for fid in fids:
        rows = rows_per_fid[fid]
        lengths[fid] = np.asarray([len(r) for r in rows], dtype=np.uint32)
        flat = [x for r in rows for x in r]
        values[fid] = np.asarray(flat, dtype=np.uint64)
    return KeyedJagged(keys=tuple(fids), lengths=lengths, values=values)


def _task_labels(
    config: BatchConfig, conversions_flat: list[list[int]]
) -> dict[str, np.ndarray]:
    labels = {}
    for task in config.task_names():
        label_id = config.task_labels[task]
        buckets = config.duration_values.get(task)
        if buckets:
            col = []
            for conv in conversions_flat:
                hit = 0.0
                for lid in conv:
                    if lid in buckets:
                        hit = buckets[lid]
                        break
                col.append(hit)
            labels[task] = np.asarray(col, dtype=np.float32)
        else:
            labels[task] = np.asarray(
                [1.0 if label_id in conv else 0.0 for conv in conversions_flat],
                dtype=np.float32,
            )
    return labels


def build_batch(
    samples: list[RequestSample], registry: FeatureRegistry, config: BatchConfig
) -> JaggedBatch:
    """Assemble one mini-batch; RO features appear exactly once per sample."""
    if not samples:
        raise ValueError("build_batch requires a nonempty sample list")
    violations = [v for s in samples for v in validate_request_sample(s, registry)]
    if violations:
        raise ValidationError(violations)

    b_ro = len(samples)
    ips = np.asarray([len(s.items) for s in samples], dtype=np.uint32)
    b_nro = int(ips.sum())

    rod_fids = registry.ro_dense_ids()
    roi_fids = registry.ro_idlist_ids()
    nrod_fids = registry.nro_dense_ids()
    nroi_fids = registry.nro_idlist_ids()

    ro_dense = np.asarray(
        [[s.ro_dense.get(fid, 0.0) for fid in rod_fids] for s in samples],
        dtype=np.float32,
    ).reshape(b_ro, len(rod_fids))
    ro_idlist = _keyed_jagged(
        roi_fids, {fid: [list(s.ro_idlist.get(fid, [])) for s in samples] for fid in roi_fids}
    )

    nro_dense_rows = []
    nroi_rows: dict[int, list[list[int]]] = {fid: [] for fid in nroi_fids}
    conversions_flat: list[list[int]] = []
    item_ids: list[int] = []
    for s in samples:
        for i, item in enumerate(s.items):
            nro_dense_rows.append([s.nro_dense.get(fid, [0.0] * len(s.items))[i] for fid in nrod_fids])
            for fid in nroi_fids:
                lists = s.nro_idlist.get(fid)
                nroi_rows[fid].append(list(lists[i]) if lists is not None else [])
            conversions_flat.append(s.conversions[i])
            item_ids.append(item)
    nro_dense = np.asarray(nro_dense_rows, dtype=np.float32).reshape(b_nro, len(nrod_fids))
    nro_idlist = _keyed_jagged(nroi_fids, nroi_rows)

    return JaggedBatch(
        b_ro=b_ro,
        b_nro=b_nro,
        impressions_per_sample=ips,
        ro_dense=ro_dense,
        ro_idlist=ro_idlist,
        nro_dense=nro_dense,
        nro_idlist=nro_idlist,
        labels=_task_labels(config, conversions_flat),
        request_ids=np.asarray([s.request_id for s in samples], dtype=np.uint64),
        item_ids=np.asarray(item_ids, dtype=np.uint64),
    )


def build_expanded_batch(
    samples: list[RequestSample], registry: FeatureRegistry, config: BatchConfig
) -> JaggedBatch:
    """Impression-level batch of the same data: every impression becomes its
    own single-item row, RO features duplicated. b_ro == b_nro by
    construction."""
    singletons = []
    for s in samples:
        for i, imp in enumerate(expand_request_sample(s, registry)):
            singletons.append(
                RequestSample(
                    request_id=s.request_id,
                    user_id=s.user_id,
                    items=[imp.item_id],
                    conversions=[list(imp.conversions)],
                    ro_dense=s.ro_dense,
                    ro_idlist=s.ro_idlist,
                    nro_dense={fid: [vals[i]] for fid, vals in s.nro_dense.items()},
                    nro_idlist={fid: [list(lists[i])] for fid, lists in s.nro_idlist.items()},
                )
            )
    return build_batch(singletons, registry, config)


def fanout(batch: JaggedBatch) -> FanoutIndex:
    """The unique non-decreasing b_nro -> b_ro row map whose value counts
    equal impressions_per_sample."""
    row_map = np.repeat(
        np.arange(batch.b_ro, dtype=np.uint32), batch.impressions_per_sample
    )
    return FanoutIndex(row_map=row_map)


def merge_sequences(
    idlists: KeyedJagged,
    order: list[int],
    timestamps: KeyedJagged | None = None,
) -> list[np.ndarray]:
    """Merge several id-list features into one sequence per row.

    Without timestamps: concatenation in the given feature order. With
    timestamps (same jagged shape, per-id times): ascending time, stable
    within ties.
    """
    for fid in order:
        if fid not in idlists.keys:
            raise ValueError(f"unknown feature id {fid} in merge order")
    n = idlists.num_rows()
    out = []
    for i in range(n):
        parts = [idlists.row(fid, i) for fid in order]
        merged = np.concatenate(parts) if parts else np.asarray([], dtype=np.uint64)
        if timestamps is not None:
            times = np.concatenate([timestamps.row(fid, i) for fid in order])
            if len(times) != len(merged):
                raise ValueError(f"timestamp row {i} does not align with ids")
            merged = merged[np.argsort(times, kind="stable")]
        out.append(merged.astype(np.uint64))
    return out


def dedup_ids(seq) -> np.ndarray:
    """Drop repeated ids, keeping the first occurrence; order preserved."""
    arr = np.asarray(seq, dtype=np.uint64)
    if arr.size == 0:
        return arr
    _, first_idx = np.unique(arr, return_index=True)
    return arr[np.sort(first_idx)]


def normalize_dense(matrix: np.ndarray, params: list[FeatureMeta]) -> np.ndarray:
    """Per-column clamp then standardize: (clip(x, lo, hi) - mean) / std."""
    if matrix.shape[1] != len(params):
        raise ValueError(f"{len(params)} params for {matrix.shape[1]} columns")
    out = np.empty_like(matrix, dtype=np.float64)
    for j, meta in enumerate(params):
        if meta.std <= 0:
            raise ValueError(f"column {j}: std must be positive, got {meta.std}")
        col = np.clip(matrix[:, j].astype(np.float64), meta.clamp_lo, meta.clamp_hi)
        out[:, j] = (col - meta.mean) / meta.std
    return out


def truncate_and_mask(seq, n_max: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep the most recent n_max entries (suffix), left-padding with the
    sentinel id; mask is True on real positions."""
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    arr = np.asarray(seq, dtype=np.uint64)
    kept = arr[-n_max:] if arr.size > n_max else arr
    pad = n_max - len(kept)
    out = np.full(n_max, PAD_ID, dtype=np.uint64)
    mask = np.zeros(n_max, dtype=bool)
    if len(kept):
        out[pad:] = kept
        mask[pad:] = True
    return out, mask
