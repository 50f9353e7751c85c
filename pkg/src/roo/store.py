"""Feature-flattened columnar on-disk format for request samples.

Layout (little-endian throughout):

    magic "ROO1" | u8 level | u8 version | u16 reserved
    column payloads, back to back
    footer: compact JSON column directory {name: [offset, nbytes, dtype]}
    u32 footer length | u32 CRC32 over everything before it

``level`` 0 holds request samples, 1 holds the impression-level rendering of
the same data with identical primitive encodings (u32 lengths, f32 dense
values, u64 ids), so byte ratios between the two reflect duplication only.
No compression codec is applied. Jagged columns store a lengths array plus a
flat values array; NRO columns share the impressions_per_sample column as
their outer lengths.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .schema import (
    FeatureRegistry,
    ImpressionSample,
    RequestSample,
    ValidationError,
    expand_request_sample,
    validate_request_sample,
)

MAGIC = b"ROO1"
VERSION = 1
LEVEL_REQUEST = 0
LEVEL_IMPRESSION = 1

_HEADER_LEN = 8
_TRAILER_LEN = 8  # footer_len + crc


class StoreError(Exception):
    """Base error for block encoding and decoding."""


class BadMagicError(StoreError):
    pass


class TruncatedFileError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


class MixedRegistryError(StoreError):
    """Samples in one block disagree on which features exist or where."""


@dataclass(frozen=True)
class WriteSummary:
    path: str
    sample_count: int
    bytes_written: int


@dataclass(frozen=True)
class ColumnarBlock:
    """Parsed container: column arrays plus the footer directory.

    For request-level blocks, NRO columns share impressions_per_sample as
    their outer lengths; check() verifies every jagged column reconstructs
    against it exactly.
    """

    level: int
    sample_count: int
    total_impressions: int
    feature_ids: dict[str, list[int]]
    columns: dict[str, np.ndarray]

    def column(self, name: str) -> np.ndarray:
        return self.columns[name]

    def check(self) -> None:
        n = self.sample_count
        m = self.total_impressions
        if self.level == LEVEL_REQUEST:
            ips = self.columns["impressions_per_sample"]
            if len(ips) != n:
                raise StoreError(f"impressions_per_sample has {len(ips)} rows, expected {n}")
            if int(ips.sum()) != m:
                raise StoreError(
                    f"impressions_per_sample sums to {int(ips.sum())}, footer says {m}"
                )
        for name, arr in self.columns.items():
            prefix = name.split("/", 1)[0]
            expected = {
                "request_id": m if self.level == LEVEL_IMPRESSION else n,
                "user_id": n,
                "impressions_per_sample": n,
                "item_id": m,
                "conv_len": m,
                "ro_dense": n,
                "ro_idlist_len": n,
                "nro_dense": m,
                "nro_idlist_len": m,
                "dense": m,
                "idlist_len": m,
                "idscore_len": m,
            }.get(prefix)
            if expected is not None and len(arr) != expected:
                raise StoreError(f"column {name} has {len(arr)} rows, expected {expected}")
        for len_prefix, val_prefix in (
            ("ro_idlist_len", "ro_idlist_val"),
            ("nro_idlist_len", "nro_idlist_val"),
            ("idlist_len", "idlist_val"),
            ("conv_len", "conv_val"),
        ):
            for name, arr in self.columns.items():
                if not name.startswith(len_prefix):
                    continue
                suffix = name[len(len_prefix):]
                values = self.columns.get(val_prefix + suffix)
                if values is None or int(arr.sum()) != len(values):
                    raise StoreError(f"jagged column {name} does not reconstruct its values")


@dataclass(frozen=True)
class FootprintReport:
    """Byte comparison of one corpus stored request-level vs impression-level."""

    roo_bytes: int
    impression_bytes: int
    ro_byte_share: float
    mean_impressions_per_request: float
    implied_volume_increase: float

    def to_dict(self) -> dict:
        return {
            "roo_bytes": self.roo_bytes,
            "impression_bytes": self.impression_bytes,
            "ro_byte_share": self.ro_byte_share,
            "mean_impressions_per_request": self.mean_impressions_per_request,
            "implied_volume_increase": self.implied_volume_increase,
        }


@dataclass(frozen=True)
class IOReport:
    roo_io_bytes: int
    impression_io_bytes: int


def _u64(values: Iterable[int]) -> np.ndarray:
    return np.asarray(list(values), dtype="<u8")


def _u32(values: Iterable[int]) -> np.ndarray:
    return np.asarray(list(values), dtype="<u4")


def _f32(values: Iterable[float]) -> np.ndarray:
    return np.asarray(list(values), dtype="<f4")


class _BlockWriter:
    def __init__(self, level: int):
        self.level = level
        self.parts: list[bytes] = [
            MAGIC + bytes([level, VERSION, 0, 0]),
        ]
        self.columns: dict[str, list] = {}
        self.offset = _HEADER_LEN

    def add(self, name: str, arr: np.ndarray) -> None:
        raw = arr.tobytes()
        self.columns[name] = [self.offset, len(raw), arr.dtype.str]
        self.parts.append(raw)
        self.offset += len(raw)

    def finish(self, meta: dict) -> bytes:
        footer = dict(meta)
        footer["columns"] = self.columns
        footer_raw = json.dumps(footer, sort_keys=True, separators=(",", ":")).encode()
        self.parts.append(footer_raw)
        self.parts.append(len(footer_raw).to_bytes(4, "little"))
        body = b"".join(self.parts)
        crc = zlib.crc32(body)
        return body + crc.to_bytes(4, "little")


def parse_block(data: bytes, expect_level: int | None = None) -> ColumnarBlock:
    if len(data) < _HEADER_LEN + _TRAILER_LEN:
        raise TruncatedFileError(f"block is {len(data)} bytes, shorter than any valid block")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    stored_crc = int.from_bytes(data[-4:], "little")
    actual_crc = zlib.crc32(data[:-4])
    if stored_crc != actual_crc:
        raise ChecksumError(f"CRC mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}")
    footer_len = int.from_bytes(data[-8:-4], "little")
    footer_end = len(data) - _TRAILER_LEN
    footer_start = footer_end - footer_len
    if footer_start < _HEADER_LEN:
        raise TruncatedFileError("footer length exceeds block size")
    try:
        footer = json.loads(data[footer_start:footer_end])
    except json.JSONDecodeError as exc:
        raise TruncatedFileError(f"unreadable footer: {exc}") from exc
    level = data[4]
    if expect_level is not None and level != expect_level:
        kind = "request" if expect_level == LEVEL_REQUEST else "impression"
        raise StoreError(f"block level {level} is not a {kind}-level block")
    columns = {}
    for name, (off, nbytes, dtype) in footer["columns"].items():
        if off + nbytes > footer_start:
            raise TruncatedFileError(f"column {name} extends past the data section")
        columns[name] = np.frombuffer(
            data, dtype=dtype, count=nbytes // np.dtype(dtype).itemsize, offset=off
        )
    block = ColumnarBlock(
        level=level,
        sample_count=footer["sample_count"],
        total_impressions=footer["total_impressions"],
        feature_ids=footer.get("feature_ids", {}),
        columns=columns,
    )
    block.check()
    return block


def _consistent_fids(samples: Sequence[RequestSample]) -> dict[str, list[int]]:
    groups = {}
    for attr in ("ro_dense", "ro_idlist", "nro_dense", "nro_idlist"):
        first = frozenset(getattr(samples[0], attr))
        for s in samples[1:]:
            fids = frozenset(getattr(s, attr))
            if fids != first:
                diff = sorted(fids ^ first)
                raise MixedRegistryError(
                    f"samples disagree on {attr} feature ids (differing ids {diff}); "
                    "blocks require one registry"
                )
        groups[attr] = sorted(first)
    overlap = set(groups["ro_dense"]) & set(groups["nro_dense"]) | set(
        groups["ro_idlist"]
    ) & set(groups["nro_idlist"])
    if overlap:
        raise MixedRegistryError(f"feature ids {sorted(overlap)} appear as both RO and NRO")
    return groups


def encode_request_block(samples: Sequence[RequestSample]) -> bytes:
    w = _BlockWriter(LEVEL_REQUEST)
    n = len(samples)
    total_items = sum(len(s.items) for s in samples)
    if n:
        groups = _consistent_fids(samples)
    else:
        groups = {a: [] for a in ("ro_dense", "ro_idlist", "nro_dense", "nro_idlist")}

    w.add("request_id", _u64(s.request_id for s in samples))
    w.add("user_id", _u64(s.user_id for s in samples))
    w.add("impressions_per_sample", _u32(len(s.items) for s in samples))
    w.add("item_id", _u64(i for s in samples for i in s.items))
    w.add("conv_len", _u32(len(c) for s in samples for c in s.conversions))
    w.add("conv_val", _u32(x for s in samples for c in s.conversions for x in c))
    for fid in groups["ro_dense"]:
        w.add(f"ro_dense/{fid}", _f32(s.ro_dense[fid] for s in samples))
    for fid in groups["ro_idlist"]:
        w.add(f"ro_idlist_len/{fid}", _u32(len(s.ro_idlist[fid]) for s in samples))
        w.add(f"ro_idlist_val/{fid}", _u64(x for s in samples for x in s.ro_idlist[fid]))
    for fid in groups["nro_dense"]:
        w.add(f"nro_dense/{fid}", _f32(v for s in samples for v in s.nro_dense[fid]))
    for fid in groups["nro_idlist"]:
        w.add(
            f"nro_idlist_len/{fid}",
            _u32(len(ids) for s in samples for ids in s.nro_idlist[fid]),
        )
        w.add(
            f"nro_idlist_val/{fid}",
            _u64(x for s in samples for ids in s.nro_idlist[fid] for x in ids),
        )
    return w.finish(
        {
            "level": "request",
            "sample_count": n,
            "total_impressions": total_items,
            "feature_ids": groups,
        }
    )


def decode_request_block(data: bytes) -> list[RequestSample]:
    block = parse_block(data, expect_level=LEVEL_REQUEST)
    n = block.sample_count
    groups = block.feature_ids

    request_ids = block.column("request_id")
    user_ids = block.column("user_id")
    ips = block.column("impressions_per_sample")
    items = block.column("item_id")
    conv_len = block.column("conv_len")
    conv_val = block.column("conv_val")

    ro_dense_cols = {fid: block.column(f"ro_dense/{fid}") for fid in groups["ro_dense"]}
    ro_idlist_cols = {
        fid: (block.column(f"ro_idlist_len/{fid}"), block.column(f"ro_idlist_val/{fid}"))
        for fid in groups["ro_idlist"]
    }
    nro_dense_cols = {fid: block.column(f"nro_dense/{fid}") for fid in groups["nro_dense"]}
    nro_idlist_cols = {
        fid: (block.column(f"nro_idlist_len/{fid}"), block.column(f"nro_idlist_val/{fid}"))
        for fid in groups["nro_idlist"]
    }

    item_off = 0
    conv_off = 0
    ro_val_off = {fid: 0 for fid in ro_idlist_cols}
    nro_val_off = {fid: 0 for fid in nro_idlist_cols}
    out = []
    conv_starts = np.concatenate([[0], np.cumsum(conv_len)]).astype(int)
    conv_row = 0
    for i in range(n):
        k = int(ips[i])
        my_items = [int(x) for x in items[item_off : item_off + k]]
        conversions = []
        for _ in range(k):
            lo, hi = conv_starts[conv_row], conv_starts[conv_row + 1]
            conversions.append([int(x) for x in conv_val[lo:hi]])
            conv_row += 1
        ro_dense = {int(fid): float(col[i]) for fid, col in sorted(ro_dense_cols.items(), key=lambda kv: int(kv[0]))}
        ro_idlist = {}
        for fid, (lens, vals) in sorted(ro_idlist_cols.items(), key=lambda kv: int(kv[0])):
            ln = int(lens[i])
            off = ro_val_off[fid]
            ro_idlist[int(fid)] = [int(x) for x in vals[off : off + ln]]
            ro_val_off[fid] = off + ln
        nro_dense = {
            int(fid): [float(x) for x in col[item_off : item_off + k]]
            for fid, col in sorted(nro_dense_cols.items(), key=lambda kv: int(kv[0]))
        }
        nro_idlist = {}
        for fid, (lens, vals) in sorted(nro_idlist_cols.items(), key=lambda kv: int(kv[0])):
            rows = []
            off = nro_val_off[fid]
            for j in range(k):
                ln = int(lens[item_off + j])
                rows.append([int(x) for x in vals[off : off + ln]])
                off += ln
            nro_val_off[fid] = off
            nro_idlist[int(fid)] = rows
        out.append(
            RequestSample(
                request_id=int(request_ids[i]),
                user_id=int(user_ids[i]),
                items=my_items,
                conversions=conversions,
                ro_dense=ro_dense,
                ro_idlist=ro_idlist,
                nro_dense=nro_dense,
                nro_idlist=nro_idlist,
            )
        )
        item_off += k
        conv_off += k
    return out


def encode_impression_block(samples: Sequence[ImpressionSample]) -> bytes:
    w = _BlockWriter(LEVEL_IMPRESSION)
    m = len(samples)
    if m:
        dense_fids = sorted(samples[0].dense_features)
        idlist_fids = sorted(samples[0].idlist_features)
        idscore_fids = sorted(samples[0].idscorelist_features)
        for s in samples[1:]:
            if (
                sorted(s.dense_features) != dense_fids
                or sorted(s.idlist_features) != idlist_fids
                or sorted(s.idscorelist_features) != idscore_fids
            ):
                raise MixedRegistryError(
                    "impression samples disagree on feature ids; blocks require one registry"
                )
    else:
        dense_fids, idlist_fids, idscore_fids = [], [], []

    w.add("request_id", _u64(s.request_id for s in samples))
    w.add("item_id", _u64(s.item_id for s in samples))
    w.add("conv_len", _u32(len(s.conversions) for s in samples))
    w.add("conv_val", _u32(x for s in samples for x in s.conversions))
    for fid in dense_fids:
        w.add(f"dense/{fid}", _f32(s.dense_features[fid] for s in samples))
    for fid in idlist_fids:
        w.add(f"idlist_len/{fid}", _u32(len(s.idlist_features[fid]) for s in samples))
        w.add(f"idlist_val/{fid}", _u64(x for s in samples for x in s.idlist_features[fid]))
    for fid in idscore_fids:
        w.add(f"idscore_len/{fid}", _u32(len(s.idscorelist_features[fid]) for s in samples))
        w.add(
            f"idscore_key/{fid}",
            _u64(k for s in samples for k in sorted(s.idscorelist_features[fid])),
        )
        w.add(
            f"idscore_val/{fid}",
            _f32(
                s.idscorelist_features[fid][k]
                for s in samples
                for k in sorted(s.idscorelist_features[fid])
            ),
        )
    return w.finish({"level": "impression", "sample_count": m, "total_impressions": m})


def decode_impression_block(data: bytes) -> list[ImpressionSample]:
    block = parse_block(data, expect_level=LEVEL_IMPRESSION)
    m = block.sample_count
    names = block.columns
    dense_fids = sorted(int(n.split("/", 1)[1]) for n in names if n.startswith("dense/"))
    idlist_fids = sorted(int(n.split("/", 1)[1]) for n in names if n.startswith("idlist_len/"))
    idscore_fids = sorted(int(n.split("/", 1)[1]) for n in names if n.startswith("idscore_len/"))

    request_ids = block.column("request_id")
    item_ids = block.column("item_id")
    conv_len = block.column("conv_len")
    conv_val = block.column("conv_val")
    conv_starts = np.concatenate([[0], np.cumsum(conv_len)]).astype(int)

    dense_cols = {fid: block.column(f"dense/{fid}") for fid in dense_fids}
    idlist_cols = {
        fid: (block.column(f"idlist_len/{fid}"), block.column(f"idlist_val/{fid}"))
        for fid in idlist_fids
    }
    idscore_cols = {
        fid: (
            block.column(f"idscore_len/{fid}"),
            block.column(f"idscore_key/{fid}"),
            block.column(f"idscore_val/{fid}"),
        )
        for fid in idscore_fids
    }

    idlist_off = {fid: 0 for fid in idlist_fids}
    idscore_off = {fid: 0 for fid in idscore_fids}
    out = []
    for i in range(m):
        lo, hi = conv_starts[i], conv_starts[i + 1]
        dense = {fid: float(col[i]) for fid, col in dense_cols.items()}
        idlist = {}
        for fid, (lens, vals) in idlist_cols.items():
            ln = int(lens[i])
            off = idlist_off[fid]
            idlist[fid] = [int(x) for x in vals[off : off + ln]]
            idlist_off[fid] = off + ln
        idscore = {}
        for fid, (lens, keys, vals) in idscore_cols.items():
            ln = int(lens[i])
            off = idscore_off[fid]
            idscore[fid] = {
                int(keys[off + j]): float(vals[off + j]) for j in range(ln)
            }
            idscore_off[fid] = off + ln
        out.append(
            ImpressionSample(
                request_id=int(request_ids[i]),
                item_id=int(item_ids[i]),
                conversions=[int(x) for x in conv_val[lo:hi]],
                dense_features=dense,
                idlist_features=idlist,
                idscorelist_features=idscore,
            )
        )
    return out


# --- file IO ---------------------------------------------------------------


def write_block(
    samples: Sequence[RequestSample],
    path: str | os.PathLike,
    registry: FeatureRegistry | None = None,
) -> WriteSummary:
    """Serialize request samples to ``path``; byte-deterministic."""
    if registry is not None:
        violations = [v for s in samples for v in validate_request_sample(s, registry)]
        if violations:
            raise ValidationError(violations)
    data = encode_request_block(samples)
    with open(path, "wb") as f:
        f.write(data)
    return WriteSummary(path=str(path), sample_count=len(samples), bytes_written=len(data))


def read_block(path: str | os.PathLike) -> list[RequestSample]:
    with open(path, "rb") as f:
        return decode_request_block(f.read())


def write_impression_block(
    samples: Sequence[ImpressionSample], path: str | os.PathLike
) -> WriteSummary:
    data = encode_impression_block(samples)
    with open(path, "wb") as f:
        f.write(data)
    return WriteSummary(path=str(path), sample_count=len(samples), bytes_written=len(data))


def read_impression_block(path: str | os.PathLike) -> list[ImpressionSample]:
    with open(path, "rb") as f:
        return decode_impression_block(f.read())


# --- byte accounting --------------------------------------------------------


def request_payload_bytes(sample: RequestSample) -> tuple[int, int]:
    """(u, v_total): RO bytes stored once per request, and summed per-item
    NRO bytes, under this format's primitive encodings."""
    u = 8  # request id
    u += 4 * len(sample.ro_dense)
    for ids in sample.ro_idlist.values():
        u += 4 + 8 * len(ids)
    v_total = 0
    for i in range(len(sample.items)):
        v = 8  # item id
        v += 4 + 4 * len(sample.conversions[i])
        v += 4 * len(sample.nro_dense)
        for lists in sample.nro_idlist.values():
            v += 4 + 8 * len(lists[i])
        v_total += v
    return u, v_total


def measure_footprint(samples: Sequence[RequestSample]) -> FootprintReport:
    """Compare this corpus stored request-level vs expanded impression-level."""
    if not samples:
        raise ValueError("measure_footprint requires a nonempty corpus")
    roo_bytes = len(encode_request_block(samples))
    expanded = [imp for s in samples for imp in expand_request_sample(s)]
    impression_bytes = len(encode_impression_block(expanded))
    u_sum = 0
    v_sum = 0
    total_items = 0
    for s in samples:
        u, v = request_payload_bytes(s)
        u_sum += u
        v_sum += v
        total_items += len(s.items)
    return FootprintReport(
        roo_bytes=roo_bytes,
        impression_bytes=impression_bytes,
        ro_byte_share=u_sum / (u_sum + v_sum),
        mean_impressions_per_request=total_items / len(samples),
        implied_volume_increase=impression_bytes / roo_bytes - 1.0,
    )


def expand_block(path: str | os.PathLike) -> tuple[list[ImpressionSample], IOReport]:
    """Read a request block and expand it to impression samples in memory.

    The report compares the bytes actually read against what an
    impression-level file of the same data would require.
    """
    with open(path, "rb") as f:
        data = f.read()
    samples = decode_request_block(data)
    expanded = [imp for s in samples for imp in expand_request_sample(s)]
    impression_io = len(encode_impression_block(expanded))
    return expanded, IOReport(roo_io_bytes=len(data), impression_io_bytes=impression_io)
