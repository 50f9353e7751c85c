"""Streaming request-level event-feature join.

Buffers user-item interaction events keyed by (user, request) and publishes
one RequestSample per request when its join window closes. A window closes
on any of:

  * a new request id arriving for the same user (each user has at most one
    open window),
  * the impression count reaching the engagement threshold,
  * the expected item count being reached (dynamic trigger, when enabled),
  * the fixed time window expiring (``tick``),
  * end of stream (``drain``).

The join record keeps a single copy of RO features no matter how many
impressions the request accumulates. Conversions for items that were never
impressed in the user's open window are dropped and counted as late.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .schema import RequestSample


class JoinerError(ValueError):
    """Malformed event or configuration."""


@dataclass(frozen=True)
class FeaturePayload:
    """Feature maps riding on an impression event."""

    dense: dict[int, float] = field(default_factory=dict)
    idlist: dict[int, list[int]] = field(default_factory=dict)


@dataclass(frozen=True)
class Event:
    """One logged user-item interaction.

    Impressions carry feature payloads and no labels; conversions carry at
    least one label and no payloads. ``expected_items`` is the declared
    impression count of the request, used only by the dynamic close trigger.
    """

    event_time: int
    user_id: int
    request_id: int
    item_id: int
    kind: str  # "impression" | "conversion"
    item_labels: list[int] = field(default_factory=list)
    ro_payload: FeaturePayload | None = None
    nro_payload: FeaturePayload | None = None
    expected_items: int | None = None


def validate_event(e: Event) -> None:
    if e.kind not in ("impression", "conversion"):
        raise JoinerError(f"event kind must be impression or conversion, got {e.kind!r}")
    if e.event_time < 0:
        raise JoinerError(f"event_time must be non-negative, got {e.event_time}")
    if e.kind == "impression":
        if e.item_labels:
            raise JoinerError(
                f"impression event (request {e.request_id}, item {e.item_id}) carries labels"
            )
        if e.ro_payload is None or e.nro_payload is None:
            raise JoinerError(
                f"impression event (request {e.request_id}, item {e.item_id}) "
                "is missing feature payloads"
            )
    else:
        if not e.item_labels:
            raise JoinerError(
                f"conversion event (request {e.request_id}, item {e.item_id}) has no labels"
            )
        if e.ro_payload is not None or e.nro_payload is not None:
            raise JoinerError(
                f"conversion event (request {e.request_id}, item {e.item_id}) "
                "carries feature payloads"
            )


@dataclass
class JoinerConfig:
    """Join window policy.

    window_ms: fixed-time window length T.
    engagement_threshold: impressions that force a close.
    dynamic_trigger: close once the event's declared expected item count
        is reached.
    late_event_policy: only "drop" is supported; closed windows never reopen.
    """

    window_ms: int
    engagement_threshold: int = 1_000_000
    dynamic_trigger: bool = False
    late_event_policy: str = "drop"

    def __post_init__(self) -> None:
        if self.window_ms <= 0:
            raise JoinerError(f"window_ms must be positive, got {self.window_ms}")
        if self.engagement_threshold < 1:
            raise JoinerError(
                f"engagement_threshold must be >= 1, got {self.engagement_threshold}"
            )
        if self.late_event_policy != "drop":
            raise JoinerError(f"unsupported late_event_policy {self.late_event_policy!r}")


@dataclass
class JoinerMetrics:
    samples_published: int = 0
    late_events_dropped: int = 0
    mean_close_latency_ms: float = 0.0
    mean_intra_request_gap_ms: float = 0.0
    mean_landing_latency_ms: float = 0.0


class RequestJoinRecord:
    """Open join window for one (user, request) pair.

    RO features are stored exactly once; NRO features are keyed by item.
    """

    __slots__ = (
        "user_id",
        "request_id",
        "items",
        "conversions",
        "ro_dense",
        "ro_idlist",
        "nro_dense",
        "nro_idlist",
        "open_time",
        "first_event_time",
        "last_event_time",
        "last_item_time",
        "expected_items",
    )

    def __init__(self, e: Event):
        self.user_id = e.user_id
        self.request_id = e.request_id
        self.items: dict[int, None] = {e.item_id: None}  # insertion-ordered set
        self.conversions: dict[int, set[int]] = {}
        self.ro_dense = dict(e.ro_payload.dense)
        self.ro_idlist = {fid: list(ids) for fid, ids in e.ro_payload.idlist.items()}
        self.nro_dense: dict[int, dict[int, float]] = {e.item_id: dict(e.nro_payload.dense)}
        self.nro_idlist: dict[int, dict[int, list[int]]] = {
            e.item_id: {fid: list(ids) for fid, ids in e.nro_payload.idlist.items()}
        }
        self.open_time = e.event_time
        self.first_event_time = e.event_time
        self.last_event_time = e.event_time
        self.last_item_time = e.event_time
        self.expected_items = e.expected_items

    def add_impression(self, e: Event) -> None:
        self.items[e.item_id] = None
        self.nro_dense[e.item_id] = dict(e.nro_payload.dense)
        self.nro_idlist[e.item_id] = {
            fid: list(ids) for fid, ids in e.nro_payload.idlist.items()
        }
        self.last_item_time = max(self.last_item_time, e.event_time)

    def ro_payload_bytes(self) -> int:
        """Bytes the single RO copy occupies under the columnar encoding."""
        total = 4 * len(self.ro_dense)
        for ids in self.ro_idlist.values():
            total += 4 + 8 * len(ids)
        return total


class RequestJoiner:
    """Single-writer join state; shard by user_id to parallelize."""

    def __init__(self, config: JoinerConfig):
        self.config = config
        self._open: dict[int, RequestJoinRecord] = {}
        self._published = 0
        self._late_dropped = 0
        self._close_latency_sum = 0.0
        self._gap_sum = 0.0
        self._landing_sum = 0.0

    def ingest_event(self, e: Event) -> list[RequestSample]:
        """Feed one event; returns the samples it caused to publish (0..2).

        Events per user must arrive in non-decreasing event_time across
        requests; within a request arbitrary interleaving is fine.
        """
        validate_event(e)
        published: list[RequestSample] = []
        rec = self._open.get(e.user_id)

        if e.kind == "conversion":
            if (
                rec is None
                or rec.request_id != e.request_id
                or e.item_id not in rec.items
            ):
                # Late or orphan: the item was never impressed in the open
                # window, and closed windows never reopen.
                self._late_dropped += 1
            else:
                rec.conversions.setdefault(e.item_id, set()).update(e.item_labels)
                rec.last_event_time = max(rec.last_event_time, e.event_time)
            return published

        if rec is not None and rec.request_id != e.request_id:
            published.append(self._close(rec, close_time=e.event_time))
            del self._open[e.user_id]
            rec = None

        if rec is None:
            rec = RequestJoinRecord(e)
            self._open[e.user_id] = rec
        elif e.item_id in rec.items:
            # Duplicate impression: nothing new to merge.
            rec.last_event_time = max(rec.last_event_time, e.event_time)
        else:
            rec.add_impression(e)
            rec.last_event_time = max(rec.last_event_time, e.event_time)

        if len(rec.items) >= self.config.engagement_threshold or (
            self.config.dynamic_trigger
            and rec.expected_items is not None
            and len(rec.items) >= rec.expected_items
        ):
            published.append(self._close(rec, close_time=e.event_time))
            del self._open[e.user_id]

        return published

    def tick(self, now_ms: int) -> list[RequestSample]:
        """Close every window whose deadline has passed.

        Windows close at open_time + window_ms regardless of how far
        ``now_ms`` has advanced, so timer closes are watermark-exact.
        """
        expired = [
            rec
            for rec in self._open.values()
            if rec.open_time + self.config.window_ms <= now_ms
        ]
        expired.sort(key=lambda r: (r.open_time, r.user_id, r.request_id))
        out = []
        for rec in expired:
            out.append(self._close(rec, close_time=rec.open_time + self.config.window_ms))
            del self._open[rec.user_id]
        return out

    def drain(self) -> list[RequestSample]:
        """Close all remaining windows at their deadlines; state empties."""
        remaining = sorted(
            self._open.values(), key=lambda r: (r.open_time, r.user_id, r.request_id)
        )
        out = [
            self._close(rec, close_time=rec.open_time + self.config.window_ms)
            for rec in remaining
        ]
        self._open.clear()
        return out

    def open_windows(self) -> int:
        return len(self._open)

    def metrics(self) -> JoinerMetrics:
        n = self._published
        return JoinerMetrics(
            samples_published=n,
            late_events_dropped=self._late_dropped,
            mean_close_latency_ms=self._close_latency_sum / n if n else 0.0,
            mean_intra_request_gap_ms=self._gap_sum / n if n else 0.0,
            mean_landing_latency_ms=self._landing_sum / n if n else 0.0,
        )

    def _close(self, rec: RequestJoinRecord, close_time: int) -> RequestSample:
        items = list(rec.items)
        conversions = [sorted(rec.conversions.get(item, ())) for item in items]

        nro_dense_fids = sorted({fid for m in rec.nro_dense.values() for fid in m})
        nro_idlist_fids = sorted({fid for m in rec.nro_idlist.values() for fid in m})
        # Items missing a feature another item carries get a neutral fill so
        # every NRO column stays aligned with the item list.
        nro_dense = {
            fid: [rec.nro_dense[item].get(fid, 0.0) for item in items]
            for fid in nro_dense_fids
        }
        nro_idlist = {
            fid: [rec.nro_idlist[item].get(fid, []) for item in items]
            for fid in nro_idlist_fids
        }

        self._published += 1
        self._close_latency_sum += close_time - rec.first_event_time
        self._landing_sum += close_time - rec.open_time
        self._gap_sum += rec.last_item_time - rec.first_event_time

        return RequestSample(
            request_id=rec.request_id,
            user_id=rec.user_id,
            items=items,
            conversions=conversions,
            ro_dense=dict(rec.ro_dense),
            ro_idlist={fid: list(ids) for fid, ids in rec.ro_idlist.items()},
            nro_dense=nro_dense,
            nro_idlist=nro_idlist,
        )


# --- JSON-lines event encoding -------------------------------------------


def _payload_obj(p: FeaturePayload) -> dict:
    return {
        "dense": {str(fid): p.dense[fid] for fid in sorted(p.dense)},
        "idlist": {str(fid): p.idlist[fid] for fid in sorted(p.idlist)},
    }


def event_to_json(e: Event) -> str:
    obj: dict = {
        "event_time": e.event_time,
        "user_id": e.user_id,
        "request_id": e.request_id,
        "item_id": e.item_id,
        "kind": e.kind,
        "item_labels": e.item_labels,
        "ro_payload": _payload_obj(e.ro_payload) if e.ro_payload else None,
        "nro_payload": _payload_obj(e.nro_payload) if e.nro_payload else None,
    }
    if e.expected_items is not None:
        obj["expected_items"] = e.expected_items
    return json.dumps(obj, separators=(",", ":"))


def _payload_from_obj(obj: dict | None) -> FeaturePayload | None:
    if obj is None:
        return None
    return FeaturePayload(
        dense={int(k): float(v) for k, v in obj["dense"].items()},
        idlist={int(k): [int(x) for x in v] for k, v in obj["idlist"].items()},
    )


def event_from_json(line: str) -> Event:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise JoinerError(f"malformed event line: {exc}") from exc
    return Event(
        event_time=int(obj["event_time"]),
        user_id=int(obj["user_id"]),
        request_id=int(obj["request_id"]),
        item_id=int(obj["item_id"]),
        kind=str(obj["kind"]),
        item_labels=[int(x) for x in obj["item_labels"]],
        ro_payload=_payload_from_obj(obj.get("ro_payload")),
        nro_payload=_payload_from_obj(obj.get("nro_payload")),
        expected_items=(
            int(obj["expected_items"]) if obj.get("expected_items") is not None else None
        ),
    )
