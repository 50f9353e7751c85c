"""Request-level and impression-level training sample schemas.

A request groups all impressions served for one user query. Request-only
(RO) features are identical across those impressions and appear exactly once
per request sample; non-request-only (NRO) features and labels are arrays
aligned with the impression item list. The flat impression-level schema is
kept alongside as the backward-compatibility and oracle format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

FeatureId = int
LabelId = int

_GROUPS = ("ro_dense", "ro_idlist", "nro_dense", "nro_idlist")


class ValidationError(ValueError):
    """A sample or event failed validation; carries every violation found."""

    def __init__(self, violations: Iterable[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations) or "validation failed")


@dataclass(frozen=True)
class FeatureMeta:
    """Per-feature metadata consumed by batching and model kernels."""

    dim: int = 0
    mean: float = 0.0
    std: float = 1.0
    clamp_lo: float = float("-inf")
    clamp_hi: float = float("inf")
    max_len: int = 0


@dataclass(frozen=True)
class FeatureRegistry:
    """Partition of the feature id space into RO/NRO, dense/id-list groups.

    The four groups must be pairwise disjoint; every feature id appearing in
    a sample must be registered in the matching group.
    """

    ro_dense: dict[FeatureId, FeatureMeta] = field(default_factory=dict)
    ro_idlist: dict[FeatureId, FeatureMeta] = field(default_factory=dict)
    nro_dense: dict[FeatureId, FeatureMeta] = field(default_factory=dict)
    nro_idlist: dict[FeatureId, FeatureMeta] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: dict[FeatureId, str] = {}
        for group in _GROUPS:
            for fid in getattr(self, group):
                if fid in seen:
                    raise ValueError(
                        f"feature id {fid} registered in both {seen[fid]} and {group}"
                    )
                seen[fid] = group

    def group_of(self, fid: FeatureId) -> str | None:
        for group in _GROUPS:
            if fid in getattr(self, group):
                return group
        return None

    def ro_dense_ids(self) -> list[FeatureId]:
        return sorted(self.ro_dense)

    def ro_idlist_ids(self) -> list[FeatureId]:
        return sorted(self.ro_idlist)

    def nro_dense_ids(self) -> list[FeatureId]:
        return sorted(self.nro_dense)

    def nro_idlist_ids(self) -> list[FeatureId]:
        return sorted(self.nro_idlist)


@dataclass(frozen=True)
class ImpressionSample:
    """One flat training sample: a single item shown for a request.

    User-side and item-side features live together in the same maps; the
    registry is what tells them apart.
    """

    request_id: int
    item_id: int
    conversions: list[LabelId]
    dense_features: dict[FeatureId, float]
    idlist_features: dict[FeatureId, list[int]]
    idscorelist_features: dict[FeatureId, dict[int, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class RequestSample:
    """One request-level training sample.

    RO features are stored once; NRO features hold one entry per item, in
    the same order as ``items`` (first-seen order at the joiner).
    """

    request_id: int
    user_id: int
    items: list[int]
    conversions: list[list[LabelId]]
    ro_dense: dict[FeatureId, float]
    ro_idlist: dict[FeatureId, list[int]]
    nro_dense: dict[FeatureId, list[float]]
    nro_idlist: dict[FeatureId, list[list[int]]]


def _check_sorted_labels(labels: list[int]) -> bool:
    return all(labels[i] < labels[i + 1] for i in range(len(labels) - 1))


def _structural_violations(sample: RequestSample) -> list[str]:
    rid = sample.request_id
    out: list[str] = []
    n = len(sample.items)
    if n == 0:
        out.append(f"request {rid}: items is empty")
    if len(set(sample.items)) != n:
        out.append(f"request {rid}: duplicate item ids in items")
    if len(sample.conversions) != n:
        out.append(
            f"request {rid}: conversions has length {len(sample.conversions)}, "
            f"items has length {n}"
        )
    for i, labels in enumerate(sample.conversions):
        if not _check_sorted_labels(labels):
            out.append(
                f"request {rid}: conversions[{i}] not sorted ascending without duplicates"
            )
    for fid, values in sample.nro_dense.items():
        if len(values) != n:
            out.append(
                f"request {rid}: nro_dense[{fid}] has length {len(values)}, "
                f"items has length {n}"
            )
    for fid, lists in sample.nro_idlist.items():
        if len(lists) != n:
            out.append(
                f"request {rid}: nro_idlist[{fid}] has length {len(lists)}, "
                f"items has length {n}"
            )
    return out


def validate_request_sample(
    sample: RequestSample, registry: FeatureRegistry
) -> list[str]:
    """Return all invariant violations for ``sample``; empty means valid.

    Violations are data, not failures: this never raises on any
    structurally well-formed input.
    """
    rid = sample.request_id
    out = _structural_violations(sample)
    for attr, group in (
        ("ro_dense", "ro_dense"),
        ("ro_idlist", "ro_idlist"),
        ("nro_dense", "nro_dense"),
        ("nro_idlist", "nro_idlist"),
    ):
        registered = getattr(registry, group)
        for fid in getattr(sample, attr):
            if fid not in registered:
                actual = registry.group_of(fid)
                if actual is None:
                    out.append(f"request {rid}: {attr} uses unregistered feature id {fid}")
                else:
                    out.append(
                        f"request {rid}: {attr} uses feature id {fid} registered as {actual}"
                    )
    return out


def validate_impression_sample(
    sample: ImpressionSample, registry: FeatureRegistry
) -> list[str]:
    """Violations for a flat sample. Id-score-list features carry no
    registry group and are skipped."""
    rid = sample.request_id
    out: list[str] = []
    if not _check_sorted_labels(sample.conversions):
        out.append(f"request {rid}: conversions not sorted ascending without duplicates")
    for fid in sample.dense_features:
        if fid not in registry.ro_dense and fid not in registry.nro_dense:
            out.append(f"request {rid}: dense_features uses non-dense feature id {fid}")
    for fid in sample.idlist_features:
        if fid not in registry.ro_idlist and fid not in registry.nro_idlist:
            out.append(f"request {rid}: idlist_features uses non-idlist feature id {fid}")
    return out


def expand_request_sample(
    sample: RequestSample, registry: FeatureRegistry | None = None
) -> list[ImpressionSample]:
    """Expand one request sample into its per-impression flat samples.

    RO features are copied verbatim into every output; NRO features and
    conversions are sliced at the item index. Output order follows
    ``sample.items``.

    Raises:
        ValidationError: if the sample violates its invariants (registry
            membership is only checked when a registry is supplied).
    """
    violations = (
        validate_request_sample(sample, registry)
        if registry is not None
        else _structural_violations(sample)
    )
    if violations:
        raise ValidationError(violations)

    out = []
    for i, item in enumerate(sample.items):
        dense = dict(sample.ro_dense)
        for fid, values in sample.nro_dense.items():
            dense[fid] = values[i]
        idlist = {fid: list(ids) for fid, ids in sample.ro_idlist.items()}
        for fid, lists in sample.nro_idlist.items():
            idlist[fid] = list(lists[i])
        out.append(
            ImpressionSample(
                request_id=sample.request_id,
                item_id=item,
                conversions=list(sample.conversions[i]),
                dense_features=dense,
                idlist_features=idlist,
            )
        )
    return out


def group_impressions(
    impressions: Iterable[ImpressionSample],
    registry: FeatureRegistry,
    user_ids: Mapping[int, int] | None = None,
) -> list[RequestSample]:
    """Regroup flat samples into request samples, the inverse of expansion.

    Impressions carry no user id, so ``user_ids`` maps request_id to
    user_id out of band (0 when absent). Requests and items keep first-seen
    order. The single RO copy is taken from the first impression of each
    request; any later impression disagreeing on RO content is a violation.
    """
    user_ids = user_ids or {}
    by_request: dict[int, list[ImpressionSample]] = {}
    for imp in impressions:
        if imp.idscorelist_features:
            raise ValidationError(
                [
                    f"request {imp.request_id}: id-score-list features cannot be "
                    "regrouped to request level"
                ]
            )
        by_request.setdefault(imp.request_id, []).append(imp)

    out = []
    for rid, group in by_request.items():
        ro_dense: dict[int, float] = {}
        ro_idlist: dict[int, list[int]] = {}
        nro_dense: dict[int, list[float]] = {}
        nro_idlist: dict[int, list[list[int]]] = {}
        items: list[int] = []
        conversions: list[list[int]] = []
        violations: list[str] = []
        for imp in group:
            idx = len(items)
            items.append(imp.item_id)
            conversions.append(list(imp.conversions))
            for fid, value in imp.dense_features.items():
                if fid in registry.ro_dense:
                    if idx == 0:
                        ro_dense[fid] = value
                    elif ro_dense.get(fid) != value:
                        violations.append(
                            f"request {rid}: RO dense feature {fid} differs across impressions"
                        )
                elif fid in registry.nro_dense:
                    nro_dense.setdefault(fid, []).append(value)
                else:
                    violations.append(
                        f"request {rid}: dense feature {fid} not registered as dense"
                    )
            for fid, ids in imp.idlist_features.items():
                if fid in registry.ro_idlist:
                    if idx == 0:
                        ro_idlist[fid] = list(ids)
                    elif ro_idlist.get(fid) != list(ids):
                        violations.append(
                            f"request {rid}: RO idlist feature {fid} differs across impressions"
                        )
                elif fid in registry.nro_idlist:
                    nro_idlist.setdefault(fid, []).append(list(ids))
                else:
                    violations.append(
                        f"request {rid}: idlist feature {fid} not registered as idlist"
                    )
        if violations:
            raise ValidationError(violations)
        sample = RequestSample(
            request_id=rid,
            user_id=int(user_ids.get(rid, 0)),
            items=items,
            conversions=conversions,
            ro_dense=ro_dense,
            ro_idlist=ro_idlist,
            nro_dense=nro_dense,
            nro_idlist=nro_idlist,
        )
        mismatched = _structural_violations(sample)
        if mismatched:
            raise ValidationError(mismatched)
        out.append(sample)
    return out


# --- JSON-lines encoding -------------------------------------------------
#
# One sample per line, field names exactly as in the dataclasses, feature
# maps keyed by the decimal feature id in ascending numeric order. Floats
# serialize as shortest round-trip decimals (json default).


def _fmap(d: Mapping[int, object]) -> dict[str, object]:
    return {str(fid): d[fid] for fid in sorted(d)}


def _imap(d: Mapping[str, object]) -> dict[int, object]:
    return {int(fid): v for fid, v in d.items()}


def request_sample_to_json(sample: RequestSample) -> str:
    obj = {
        "request_id": sample.request_id,
        "user_id": sample.user_id,
        "items": sample.items,
        "conversions": sample.conversions,
        "ro_dense": _fmap(sample.ro_dense),
        "ro_idlist": _fmap(sample.ro_idlist),
        "nro_dense": _fmap(sample.nro_dense),
        "nro_idlist": _fmap(sample.nro_idlist),
    }
    return json.dumps(obj, separators=(",", ":"))


def request_sample_from_json(line: str) -> RequestSample:
    obj = json.loads(line)
    return RequestSample(
        request_id=int(obj["request_id"]),
        user_id=int(obj["user_id"]),
        items=[int(x) for x in obj["items"]],
        conversions=[[int(x) for x in labels] for labels in obj["conversions"]],
        ro_dense={int(k): float(v) for k, v in obj["ro_dense"].items()},
        ro_idlist={int(k): [int(x) for x in v] for k, v in obj["ro_idlist"].items()},
        nro_dense={int(k): [float(x) for x in v] for k, v in obj["nro_dense"].items()},
        nro_idlist={
            int(k): [[int(x) for x in inner] for inner in v]
            for k, v in obj["nro_idlist"].items()
        },
    )


def impression_sample_to_json(sample: ImpressionSample) -> str:
    obj = {
        "request_id": sample.request_id,
        "item_id": sample.item_id,
        "conversions": sample.conversions,
        "dense_features": _fmap(sample.dense_features),
        "idlist_features": _fmap(sample.idlist_features),
        "idscorelist_features": {
            str(fid): _fmap(scores)
            for fid, scores in sorted(sample.idscorelist_features.items())
        },
    }
    return json.dumps(obj, separators=(",", ":"))


def impression_sample_from_json(line: str) -> ImpressionSample:
    obj = json.loads(line)
    return ImpressionSample(
        request_id=int(obj["request_id"]),
        item_id=int(obj["item_id"]),
        conversions=[int(x) for x in obj["conversions"]],
        dense_features={int(k): float(v) for k, v in obj["dense_features"].items()},
        idlist_features={
            int(k): [int(x) for x in v] for k, v in obj["idlist_features"].items()
        },
        idscorelist_features={
            int(k): {int(i): float(s) for i, s in scores.items()}
            for k, scores in obj.get("idscorelist_features", {}).items()
        },
    )
