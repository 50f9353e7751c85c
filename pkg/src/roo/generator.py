"""Deterministic synthetic event streams and sample corpora.

One seed fully determines the stream. Event-arrival jitter models log
propagation delay and is bounded well inside the join window; requests of
one user are spaced far enough apart that their events never interleave,
which is the ordering contract the joiner expects. Loss draws come from a
dedicated substream, so the stream generated with loss_rate p is an exact
subsequence of the loss-free stream for the same seed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .joiner import Event, FeaturePayload, event_to_json
from .model import ModelFeatures
from .schema import FeatureMeta, FeatureRegistry, RequestSample

# Feature id layout; the groups must stay disjoint.
RO_DENSE_BASE = 1
USER_ARCH_BASE = 101
HISTORY_ITEM_FID = 151
HISTORY_ACTION_FID = 152
HISTORY_CONTEXT_FID = 153
NRO_DENSE_BASE = 201
NRO_IDLIST_BASE = 301

_LOSS_SALT = 0x1055
_PAYLOAD_SALT = 0xFEED


@dataclass
class GeneratorConfig:
    seed: int = 1
    num_users: int = 50
    requests_per_user: int = 20
    # ("fixed", k) | ("uniform", lo, hi) inclusive | ("categorical", {k: p})
    impressions_per_request: tuple = ("uniform", 4, 7)
    conversion_rates: dict[int, float] = field(default_factory=lambda: {1: 0.3, 2: 0.1})
    window_ms: int = 600_000
    jitter_max_ms: int = 420_000
    conversion_delay_max_ms: int = 60_000
    request_gap_ms: int = 0  # 0 -> window + jitter + conversion delay + 1000
    user_stagger_ms: int = 1_000
    n_ro_dense: int = 8
    n_user_arch: int = 2
    user_arch_len: int = 8
    history_len: tuple = ("fixed", 24)  # ("fixed", n) | ("uniform", lo, hi)
    n_nro_dense: int = 4
    n_nro_idlist: int = 1
    nro_idlist_len: int = 2
    item_universe: int = 100_000
    n_actions: int = 8
    n_contexts: int = 8
    loss_rate: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError(f"loss_rate must be in [0, 1], got {self.loss_rate}")
        for label, rate in self.conversion_rates.items():
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"conversion rate for label {label} must be in [0, 1], got {rate}")
        _validate_dist(self.impressions_per_request, "impressions_per_request", minimum=1)
        _validate_dist(self.history_len, "history_len", minimum=0)
        if self.request_gap_ms == 0:
            self.request_gap_ms = (
                self.window_ms + self.jitter_max_ms + self.conversion_delay_max_ms + 1_000
            )
        if self.request_gap_ms <= self.jitter_max_ms + self.conversion_delay_max_ms:
            raise ValueError(
                "request_gap_ms must exceed jitter_max_ms + conversion_delay_max_ms "
                "or events of one user's requests would interleave"
            )

    def stream_id(self) -> str:
        """Identity of the logical pre-loss stream; loss filters it, it does
        not change what the stream is."""
        core = asdict(self)
        core.pop("loss_rate")
        raw = json.dumps(core, sort_keys=True, default=str).encode()
        return hashlib.sha256(raw).hexdigest()[:16]


def _validate_dist(dist: tuple, name: str, minimum: int) -> None:
    kind = dist[0]
    if kind == "fixed":
        if int(dist[1]) < minimum:
            raise ValueError(f"{name}: fixed value must be >= {minimum}")
    elif kind == "uniform":
        lo, hi = int(dist[1]), int(dist[2])
        if lo < minimum or hi < lo:
            raise ValueError(f"{name}: need {minimum} <= lo <= hi, got [{lo}, {hi}]")
    elif kind == "categorical":
        probs = dist[1]
        if not probs or any(int(k) < minimum for k in probs):
            raise ValueError(f"{name}: categorical support must be >= {minimum}")
        if abs(sum(probs.values()) - 1.0) > 1e-9:
            raise ValueError(f"{name}: categorical probabilities must sum to 1")
    else:
        raise ValueError(f"{name}: unknown distribution kind {kind!r}")


def _draw(dist: tuple, rng: np.random.Generator) -> int:
    kind = dist[0]
    if kind == "fixed":
        return int(dist[1])
    if kind == "uniform":
        return int(rng.integers(int(dist[1]), int(dist[2]) + 1))
    cum = 0.0
    x = rng.random()
    items = sorted(dist[1].items())
    for value, p in items:
        cum += p
        if x < cum:
            return int(value)
    return int(items[-1][0])


def dist_mean(dist: tuple) -> float:
    kind = dist[0]
    if kind == "fixed":
        return float(dist[1])
    if kind == "uniform":
        return (int(dist[1]) + int(dist[2])) / 2.0
    return sum(int(k) * p for k, p in dist[1].items())


def make_registry(config: GeneratorConfig) -> FeatureRegistry:
    meta = FeatureMeta()
    ro_idlist = {USER_ARCH_BASE + i: FeatureMeta(max_len=config.user_arch_len) for i in range(config.n_user_arch)}
    ro_idlist[HISTORY_ITEM_FID] = meta
    ro_idlist[HISTORY_ACTION_FID] = meta
    ro_idlist[HISTORY_CONTEXT_FID] = meta
    return FeatureRegistry(
        ro_dense={RO_DENSE_BASE + i: meta for i in range(config.n_ro_dense)},
        ro_idlist=ro_idlist,
        nro_dense={NRO_DENSE_BASE + i: meta for i in range(config.n_nro_dense)},
        nro_idlist={NRO_IDLIST_BASE + i: meta for i in range(config.n_nro_idlist)},
    )


def model_features(config: GeneratorConfig) -> ModelFeatures:
    return ModelFeatures(
        user_arch_fids=tuple(USER_ARCH_BASE + i for i in range(config.n_user_arch)),
        history_item_fid=HISTORY_ITEM_FID,
        history_action_fid=HISTORY_ACTION_FID,
        history_context_fid=HISTORY_CONTEXT_FID,
    )


def _f32(x: float) -> float:
    return float(np.float32(x))


def _draw_ids(rng: np.random.Generator, count: int, upper: int) -> list[int]:
    return [int(x) for x in rng.integers(1, upper, size=count)]


def _draw_distinct_ids(rng: np.random.Generator, count: int, upper: int) -> list[int]:
    if count > upper - 1:
        raise ValueError(f"cannot draw {count} distinct ids from [1, {upper})")
    seen: dict[int, None] = {}
    while len(seen) < count:
        for x in rng.integers(1, upper, size=count - len(seen)):
            seen.setdefault(int(x), None)
    return list(seen)


def _ro_payload(config: GeneratorConfig, rng: np.random.Generator) -> FeaturePayload:
    dense = {
        RO_DENSE_BASE + i: _f32(rng.random()) for i in range(config.n_ro_dense)
    }
    idlist = {
        USER_ARCH_BASE + i: _draw_ids(rng, config.user_arch_len, config.item_universe)
        for i in range(config.n_user_arch)
    }
    h = _draw(config.history_len, rng)
    idlist[HISTORY_ITEM_FID] = _draw_ids(rng, h, config.item_universe)
    idlist[HISTORY_ACTION_FID] = _draw_ids(rng, h, config.n_actions + 1)
    idlist[HISTORY_CONTEXT_FID] = _draw_ids(rng, h, config.n_contexts + 1)
    return FeaturePayload(dense=dense, idlist=idlist)


def _nro_payload(config: GeneratorConfig, rng: np.random.Generator) -> FeaturePayload:
    dense = {NRO_DENSE_BASE + i: _f32(rng.random()) for i in range(config.n_nro_dense)}
    idlist = {
        NRO_IDLIST_BASE + i: _draw_ids(rng, config.nro_idlist_len, config.item_universe)
        for i in range(config.n_nro_idlist)
    }
    return FeaturePayload(dense=dense, idlist=idlist)


@dataclass(frozen=True)
class GenerateSummary:
    path: str
    stream_id: str
    content_sha256: str
    num_events: int
    num_requests: int
    num_impressions: int
    num_conversions: int
    loss_rate: float


def generate_raw_events(config: GeneratorConfig) -> list[Event]:
    """The full pre-loss event list, globally sorted by arrival time."""
    rng = np.random.default_rng(config.seed)
    events: list[Event] = []
    rid = 0
    for u in range(1, config.num_users + 1):
        for r in range(config.requests_per_user):
            rid += 1
            t0 = u * config.user_stagger_ms + r * config.request_gap_ms
            k = _draw(config.impressions_per_request, rng)
            items = _draw_distinct_ids(rng, k, config.item_universe)
            ro = _ro_payload(config, rng)
            for item in items:
                arrival = t0 + int(rng.integers(0, config.jitter_max_ms + 1))
                nro = _nro_payload(config, rng)
                events.append(
                    Event(
                        event_time=arrival,
                        user_id=u,
                        request_id=rid,
                        item_id=item,
                        kind="impression",
                        ro_payload=ro,
                        nro_payload=nro,
                        expected_items=k,
                    )
                )
                for label in sorted(config.conversion_rates):
                    if rng.random() < config.conversion_rates[label]:
                        delay = int(rng.integers(0, config.conversion_delay_max_ms + 1))
                        events.append(
                            Event(
                                event_time=arrival + delay,
                                user_id=u,
                                request_id=rid,
                                item_id=item,
                                kind="conversion",
                                item_labels=[label],
                            )
                        )
    events.sort(
        key=lambda e: (
            e.event_time,
            e.user_id,
            e.request_id,
            0 if e.kind == "impression" else 1,
            e.item_id,
            e.item_labels,
        )
    )
    return events


def apply_loss(events: list[Event], config: GeneratorConfig) -> list[Event]:
    """Drop events i.i.d. with loss_rate, using a dedicated substream."""
    if config.loss_rate == 0.0:
        return events
    rng = np.random.default_rng([config.seed, _LOSS_SALT])
    keep = rng.random(len(events)) >= config.loss_rate
    return [e for e, k in zip(events, keep) if k]


def generate_events(config: GeneratorConfig, path: str | os.PathLike) -> GenerateSummary:
    """Write the stream as JSON-lines plus a ``<path>.meta.json`` sidecar."""
    events = apply_loss(generate_raw_events(config), config)
    digest = hashlib.sha256()
    n_imp = 0
    n_conv = 0
    requests = set()
    with open(path, "w", encoding="utf-8") as f:
        for e in events:
            line = event_to_json(e)
            f.write(line + "\n")
            digest.update(line.encode())
            digest.update(b"\n")
            if e.kind == "impression":
                n_imp += 1
                requests.add(e.request_id)
            else:
                n_conv += 1
    summary = GenerateSummary(
        path=str(path),
        stream_id=config.stream_id(),
        content_sha256=digest.hexdigest(),
        num_events=len(events),
        num_requests=len(requests),
        num_impressions=n_imp,
        num_conversions=n_conv,
        loss_rate=config.loss_rate,
    )
    with open(str(path) + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(asdict(summary), f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def synthesize_request_samples(config: GeneratorConfig, count: int) -> list[RequestSample]:
    """Request samples drawn directly from the payload model, bypassing the
    joiner; handy for storage and model corpora."""
    rng = np.random.default_rng([config.seed, _PAYLOAD_SALT])
    out = []
    for i in range(count):
        k = _draw(config.impressions_per_request, rng)
        items = _draw_distinct_ids(rng, k, config.item_universe)
        ro = _ro_payload(config, rng)
        nro = [_nro_payload(config, rng) for _ in items]
        conversions = []
        for _ in items:
            labels = [
                label
                for label in sorted(config.conversion_rates)
                if rng.random() < config.conversion_rates[label]
            ]
            conversions.append(labels)
        out.append(
            RequestSample(
                request_id=i + 1,
                user_id=(i % config.num_users) + 1,
                items=items,
                conversions=conversions,
                ro_dense=ro.dense,
                ro_idlist=ro.idlist,
                nro_dense={
                    fid: [p.dense[fid] for p in nro]
                    for fid in sorted(nro[0].dense)
                },
                nro_idlist={
                    fid: [p.idlist[fid] for p in nro]
                    for fid in sorted(nro[0].idlist)
                },
            )
        )
    return out


def expected_payload_bytes(config: GeneratorConfig) -> tuple[float, float]:
    """(u, v): bytes one request's RO copy and one item's NRO slice occupy
    in the columnar encodings. Conversion labels enter v in expectation, so
    the pair is exact only when every rate is 0 or 1 and lengths are fixed."""
    if config.history_len[0] != "fixed":
        raise ValueError("expected_payload_bytes requires a fixed history length")
    h = int(config.history_len[1])
    u = 8.0  # request id
    u += 4 * config.n_ro_dense
    u += config.n_user_arch * (4 + 8 * config.user_arch_len)
    u += 3 * (4 + 8 * h)  # history items, actions, contexts
    v = 8.0  # item id
    v += 4 + 4 * sum(config.conversion_rates.values())
    v += 4 * config.n_nro_dense
    v += config.n_nro_idlist * (4 + 8 * config.nro_idlist_len)
    return u, v


def predicted_volume_increase(config: GeneratorConfig) -> float:
    """Analytic impression/request byte ratio minus one: k(u+v)/(u+kv) - 1."""
    u, v = expected_payload_bytes(config)
    k = dist_mean(config.impressions_per_request)
    return k * (u + v) / (u + k * v) - 1.0
