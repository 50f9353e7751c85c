"""End-to-end runs: join, store, batch, forward, audit, report.

A run consumes one event stream in either mode and leaves a self-describing
directory behind:

    manifest.json            mode, stream identity, counts, config echo
    samples.blk              request-level block (roo mode)
    impressions.blk          impression-level block (impression mode)
    metrics.json             joiner metrics
    footprint.json           storage comparison (roo mode)
    outputs/<arch>.npy       forward outputs, one row per impression
    outputs/request_ids.npy  impression row keys
    outputs/item_ids.npy
    counters/<arch>.json     forward-pass counters, tagged with the stream id

Same seed and configs give byte-identical run directories. The impression
mode uses a reference per-(request, item) joiner with the same fixed time
window, which is the ground-truth side for quality audits.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import store
from .batcher import build_batch
from .config import RunSettings
from .cost import CostReport, measure_run
from .generator import make_registry, model_features
from .joiner import Event, JoinerConfig, RequestJoiner, event_from_json, validate_event
from .model import Counters, forward, init_model_params
from .schema import ImpressionSample, RequestSample, expand_request_sample


def sig6(x: float) -> float:
    """Fixed 6-significant-digit rendering for report stability."""
    return float(f"{x:.6g}")


class _ImpressionWindow:
    __slots__ = ("user_id", "request_id", "item_id", "open_time", "labels", "dense", "idlist")

    def __init__(self, e: Event):
        self.user_id = e.user_id
        self.request_id = e.request_id
        self.item_id = e.item_id
        self.open_time = e.event_time
        self.labels: set[int] = set()
        self.dense = dict(e.ro_payload.dense)
        self.dense.update(e.nro_payload.dense)
        self.idlist = {fid: list(ids) for fid, ids in e.ro_payload.idlist.items()}
        self.idlist.update({fid: list(ids) for fid, ids in e.nro_payload.idlist.items()})

    def to_sample(self) -> ImpressionSample:
        return ImpressionSample(
            request_id=self.request_id,
            item_id=self.item_id,
            conversions=sorted(self.labels),
            dense_features=self.dense,
            idlist_features=self.idlist,
        )


class ImpressionJoiner:
    """Reference joiner: one window per (request, item), fixed time close.

    User features ride on every impression event, so every published sample
    carries its own copy; that duplication is what the request-level joiner
    removes.
    """

    def __init__(self, config: JoinerConfig):
        self.window_ms = config.window_ms
        self._open: dict[tuple[int, int], _ImpressionWindow] = {}
        self.published = 0
        self.late_dropped = 0

    def ingest_event(self, e: Event) -> list[ImpressionSample]:
        validate_event(e)
        key = (e.request_id, e.item_id)
        if e.kind == "impression":
            if key not in self._open:
                self._open[key] = _ImpressionWindow(e)
            return []
        win = self._open.get(key)
        if win is None:
            self.late_dropped += 1
        else:
            win.labels.update(e.item_labels)
        return []

    def _close_sorted(self, windows: list[_ImpressionWindow]) -> list[ImpressionSample]:
        windows.sort(key=lambda w: (w.open_time, w.user_id, w.request_id, w.item_id))
        out = []
        for w in windows:
            out.append(w.to_sample())
            del self._open[(w.request_id, w.item_id)]
            self.published += 1
        return out

    def tick(self, now_ms: int) -> list[ImpressionSample]:
        expired = [w for w in self._open.values() if w.open_time + self.window_ms <= now_ms]
        return self._close_sorted(expired)

    def drain(self) -> list[ImpressionSample]:
        return self._close_sorted(list(self._open.values()))


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _read_events(path: str):
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line:
                yield event_from_json(line)


def _stream_meta(events_path: str) -> dict:
    meta_path = str(events_path) + ".meta.json"
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as f:
            return json.load(f)
    return {}


@dataclass
class RunResult:
    out_dir: str
    mode: str
    stream_id: str
    sample_count: int
    impression_count: int


def _singleton(sample: ImpressionSample, user_id: int, registry) -> RequestSample:
    dense_ro = {}
    dense_nro = {}
    for fid, v in sample.dense_features.items():
        (dense_ro if fid in registry.ro_dense else dense_nro)[fid] = v
    idlist_ro = {}
    idlist_nro = {}
    for fid, ids in sample.idlist_features.items():
        if fid in registry.ro_idlist:
            idlist_ro[fid] = list(ids)
        else:
            idlist_nro[fid] = [list(ids)]
    return RequestSample(
        request_id=sample.request_id,
        user_id=user_id,
        items=[sample.item_id],
        conversions=[list(sample.conversions)],
        ro_dense=dense_ro,
        ro_idlist=idlist_ro,
        nro_dense={fid: [v] for fid, v in dense_nro.items()},
        nro_idlist=idlist_nro,
    )


def _write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def join_stage(events_path: str, mode: str, settings: RunSettings, out_dir: str) -> dict:
    """Join one stream and persist the block, metrics, and manifest."""
    if mode not in ("roo", "impression"):
        raise ValueError(f"mode must be roo or impression, got {mode!r}")
    os.makedirs(out_dir, exist_ok=True)
    registry = make_registry(settings.generator)
    meta = _stream_meta(events_path)
    stream_id = meta.get("stream_id", "")
    content_hash = _hash_file(events_path)

    if mode == "roo":
        joiner = RequestJoiner(settings.joiner)
        samples: list[RequestSample] = []
        for e in _read_events(events_path):
            samples.extend(joiner.tick(e.event_time))
            samples.extend(joiner.ingest_event(e))
        samples.extend(joiner.drain())
        metrics = asdict(joiner.metrics())
        store.write_block(samples, os.path.join(out_dir, "samples.blk"), registry)
        if samples:
            _write_json(
                os.path.join(out_dir, "footprint.json"),
                store.measure_footprint(samples).to_dict(),
            )
        sample_count = len(samples)
        impression_count = sum(len(s.items) for s in samples)
    else:
        ijoiner = ImpressionJoiner(settings.joiner)
        impressions: list[ImpressionSample] = []
        for e in _read_events(events_path):
            impressions.extend(ijoiner.tick(e.event_time))
            impressions.extend(ijoiner.ingest_event(e))
        impressions.extend(ijoiner.drain())
        metrics = {
            "samples_published": ijoiner.published,
            "late_events_dropped": ijoiner.late_dropped,
        }
        store.write_impression_block(impressions, os.path.join(out_dir, "impressions.blk"))
        sample_count = len(impressions)
        impression_count = len(impressions)

    _write_json(os.path.join(out_dir, "metrics.json"), metrics)
    manifest = {
        "mode": mode,
        "stream_id": stream_id,
        "content_sha256": content_hash,
        "events_path": str(events_path),
        "sample_count": sample_count,
        "impression_count": impression_count,
        "joiner": asdict(settings.joiner),
        "seed": settings.seed,
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _load_run_samples(out_dir: str, mode: str, registry) -> list[RequestSample]:
    if mode == "roo":
        return store.read_block(os.path.join(out_dir, "samples.blk"))
    impressions = store.read_impression_block(os.path.join(out_dir, "impressions.blk"))
    return [_singleton(s, 0, registry) for s in impressions]


def forward_stage(out_dir: str, settings: RunSettings) -> dict:
    """Batch the joined samples and run every configured architecture."""
    manifest = _manifest(out_dir)
    mode = manifest["mode"]
    os.makedirs(os.path.join(out_dir, "outputs"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "counters"), exist_ok=True)

    registry = make_registry(settings.generator)
    features = model_features(settings.generator)
    params = init_model_params(
        settings.model, features, registry, tasks=tuple(settings.batch.task_names())
    )
    samples = _load_run_samples(out_dir, mode, registry)

    arch_counters = {a: Counters(run_id=manifest["stream_id"]) for a in settings.archs}
    outputs: dict[str, list[np.ndarray]] = {a: [] for a in settings.archs}
    key_request: list[np.ndarray] = []
    key_item: list[np.ndarray] = []
    b_ro_total = 0
    b_nro_total = 0
    for start in range(0, len(samples), settings.batch_size):
        chunk = samples[start : start + settings.batch_size]
        batch = build_batch(chunk, registry, settings.batch)
        b_ro_total += batch.b_ro
        b_nro_total += batch.b_nro
        row_map = np.repeat(np.arange(batch.b_ro), batch.impressions_per_sample)
        key_request.append(batch.request_ids[row_map])
        key_item.append(batch.item_ids)
        for arch in settings.archs:
            outputs[arch].append(forward(arch, batch, params, arch_counters[arch]))

    def _cat(parts: list[np.ndarray]) -> np.ndarray:
        return np.concatenate(parts) if parts else np.zeros(0)

    np.save(
        os.path.join(out_dir, "outputs", "request_ids.npy"),
        _cat(key_request).astype(np.uint64),
    )
    np.save(os.path.join(out_dir, "outputs", "item_ids.npy"), _cat(key_item).astype(np.uint64))
    for arch in settings.archs:
        np.save(os.path.join(out_dir, "outputs", f"{arch}.npy"), _cat(outputs[arch]))
        _write_json(
            os.path.join(out_dir, "counters", f"{arch}.json"),
            arch_counters[arch].to_dict(),
        )

    manifest.update(
        {
            "b_ro_total": b_ro_total,
            "b_nro_total": b_nro_total,
            "archs": list(settings.archs),
            "batch_size": settings.batch_size,
            "model": asdict(settings.model),
        }
    )
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def run_pipeline(events_path: str, mode: str, settings: RunSettings, out_dir: str) -> RunResult:
    """Join, store, batch, and forward one stream in the given mode."""
    manifest = join_stage(events_path, mode, settings, out_dir)
    manifest = forward_stage(out_dir, settings)
    return RunResult(
        out_dir=out_dir,
        mode=mode,
        stream_id=manifest["stream_id"],
        sample_count=manifest["sample_count"],
        impression_count=manifest["impression_count"],
    )


# --- quality audit ----------------------------------------------------------


@dataclass(frozen=True)
class AuditReport:
    """Join-output parity between a request-level run and the impression
    oracle over the same logical stream."""

    mismatch_rate: dict[int, float]  # per label
    triples_compared: dict[int, int]
    sample_coverage: float
    feature_coverage: float
    pairs_roo: int
    pairs_impression: int
    pairs_both: int

    def to_dict(self) -> dict:
        return {
            "mismatch_rate": {str(k): v for k, v in sorted(self.mismatch_rate.items())},
            "triples_compared": {str(k): v for k, v in sorted(self.triples_compared.items())},
            "sample_coverage": self.sample_coverage,
            "feature_coverage": self.feature_coverage,
            "pairs_roo": self.pairs_roo,
            "pairs_impression": self.pairs_impression,
            "pairs_both": self.pairs_both,
        }


def _manifest(run_dir: str) -> dict:
    with open(os.path.join(run_dir, "manifest.json"), "r", encoding="utf-8") as f:
        return json.load(f)


def _label_map(samples: list[ImpressionSample]) -> tuple[dict, dict]:
    labels = {}
    fids = {}
    for s in samples:
        key = (s.request_id, s.item_id)
        labels[key] = set(s.conversions)
        fids[key] = set(s.dense_features) | set(s.idlist_features)
    return labels, fids


def audit(run_roo_dir: str, run_impression_dir: str) -> AuditReport:
    """Compare joined outputs; label mismatch is scored over (request, item)
    pairs present on both sides so item-level coverage gaps are reported
    separately, as coverage."""
    ma = _manifest(run_roo_dir)
    mb = _manifest(run_impression_dir)
    if ma["mode"] != "roo" or mb["mode"] != "impression":
        raise ValueError("audit expects (roo run, impression run), in that order")
    if ma["stream_id"] != mb["stream_id"] or not ma["stream_id"]:
        raise ValueError(
            f"mismatched stream ids: {ma['stream_id']!r} vs {mb['stream_id']!r}"
        )

    roo_samples = store.read_block(os.path.join(run_roo_dir, "samples.blk"))
    expanded = [imp for s in roo_samples for imp in expand_request_sample(s)]
    oracle = store.read_impression_block(os.path.join(run_impression_dir, "impressions.blk"))

    labels_a, fids_a = _label_map(expanded)
    labels_b, fids_b = _label_map(oracle)
    pairs_a = set(labels_a)
    pairs_b = set(labels_b)
    both = pairs_a & pairs_b
    union = pairs_a | pairs_b
    sample_coverage = len(both) / len(union) if union else 1.0

    fid_triples_a = {(k, fid) for k in pairs_a for fid in fids_a[k]}
    fid_triples_b = {(k, fid) for k in pairs_b for fid in fids_b[k]}
    fid_union = fid_triples_a | fid_triples_b
    feature_coverage = (
        len(fid_triples_a & fid_triples_b) / len(fid_union) if fid_union else 1.0
    )

    all_labels = {l for s in labels_a.values() for l in s} | {
        l for s in labels_b.values() for l in s
    }
    mismatch_rate = {}
    triples_compared = {}
    for label in sorted(all_labels):
        total = 0
        mismatched = 0
        for key in both:
            in_a = label in labels_a[key]
            in_b = label in labels_b[key]
            if in_a or in_b:
                total += 1
                if in_a != in_b:
                    mismatched += 1
        mismatch_rate[label] = mismatched / total if total else 0.0
        triples_compared[label] = total
    return AuditReport(
        mismatch_rate=mismatch_rate,
        triples_compared=triples_compared,
        sample_coverage=sample_coverage,
        feature_coverage=feature_coverage,
        pairs_roo=len(pairs_a),
        pairs_impression=len(pairs_b),
        pairs_both=len(both),
    )


# --- consolidated report ------------------------------------------------------


def _load_json(path: str):
    if os.path.exists(path):
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    return None


def cost_report_from_runs(run_roo_dir: str, run_impression_dir: str, arch: str) -> CostReport:
    ma = _manifest(run_roo_dir)
    roo = Counters.from_dict(
        _load_json(os.path.join(run_roo_dir, "counters", f"{arch}.json"))
    )
    imp = Counters.from_dict(
        _load_json(os.path.join(run_impression_dir, "counters", f"{arch}.json"))
    )
    return measure_run(
        roo, imp, b_ro=ma["b_ro_total"], b_nro=ma["b_nro_total"], d=ma["model"]["d"]
    )


def build_report(run_dirs: list[str]) -> dict:
    """Aggregate prior per-run artifacts verbatim; no recomputation.

    Cost sections appear for each (roo, impression) run pair sharing a
    stream id; audit sections are picked up from audit.json files left in
    run directories.
    """
    runs = []
    by_stream: dict[str, dict[str, str]] = {}
    for d in run_dirs:
        m = _manifest(d)
        runs.append(
            {
                "dir": d,
                "mode": m["mode"],
                "stream_id": m["stream_id"],
                "sample_count": m["sample_count"],
                "impression_count": m["impression_count"],
            }
        )
        by_stream.setdefault(m["stream_id"], {})[m["mode"]] = d

    footprint = "absent"
    latency = []
    audits = []
    costs = []
    for d in run_dirs:
        m = _manifest(d)
        fp = _load_json(os.path.join(d, "footprint.json"))
        if fp is not None and footprint == "absent":
            footprint = {k: sig6(v) if isinstance(v, float) else v for k, v in fp.items()}
        metrics = _load_json(os.path.join(d, "metrics.json"))
        if metrics is not None:
            latency.append(
                {
                    "dir": d,
                    "mode": m["mode"],
                    **{
                        k: sig6(v) if isinstance(v, float) else v
                        for k, v in metrics.items()
                    },
                }
            )
        audit_obj = _load_json(os.path.join(d, "audit.json"))
        if audit_obj is not None:
            audits.append({"dir": d, **audit_obj})

    for stream_id, modes in sorted(by_stream.items()):
        if "roo" in modes and "impression" in modes:
            ma = _manifest(modes["roo"])
            for arch in ma["archs"]:
                try:
                    report = cost_report_from_runs(modes["roo"], modes["impression"], arch)
                except (FileNotFoundError, TypeError):
                    continue
                entry = {"stream_id": stream_id, "arch": arch}
                entry.update(
                    {
                        k: sig6(v) if isinstance(v, float) else v
                        for k, v in report.to_dict().items()
                    }
                )
                costs.append(entry)

    return {
        "runs": runs,
        "footprint": footprint,
        "cost": costs if costs else "absent",
        "audit": audits if audits else "absent",
        "latency": latency if latency else "absent",
    }


def render_report_table(report: dict) -> str:
    """Human-readable rendering of the consolidated report."""
    lines = []

    def section(title: str):
        lines.append(title)
        lines.append("-" * len(title))

    section("runs")
    for r in report["runs"]:
        lines.append(
            f"  {r['mode']:<11} samples={r['sample_count']:<8} "
            f"impressions={r['impression_count']:<8} stream={r['stream_id']} ({r['dir']})"
        )
    lines.append("")
    section("footprint")
    if report["footprint"] == "absent":
        lines.append("  absent")
    else:
        for k, v in report["footprint"].items():
            lines.append(f"  {k:<32} {v}")
    lines.append("")
    section("cost")
    if report["cost"] == "absent":
        lines.append("  absent")
    else:
        for c in report["cost"]:
            lines.append(
                f"  {c['arch']:<10} savings_ratio={c['savings_ratio']:<10} "
                f"flops {c['impression_flops']} vs {c['roo_flops']} "
                f"rows {c['rows_fetched_impression']} vs {c['rows_fetched_roo']}"
            )
    lines.append("")
    section("audit")
    if report["audit"] == "absent":
        lines.append("  absent")
    else:
        for a in report["audit"]:
            rates = ", ".join(f"label {k}: {v:.6f}" for k, v in a["mismatch_rate"].items())
            lines.append(f"  {a['dir']}: {rates or 'no labels'}")
            lines.append(
                f"    sample_coverage={a['sample_coverage']:.6f} "
                f"feature_coverage={a['feature_coverage']:.6f}"
            )
    lines.append("")
    section("latency")
    if report["latency"] == "absent":
        lines.append("  absent")
    else:
        for m in report["latency"]:
            mean = m.get("mean_landing_latency_ms", "n/a")
            lines.append(
                f"  {m['mode']:<11} published={m.get('samples_published', 0):<8} "
                f"late={m.get('late_events_dropped', 0):<6} mean_landing_ms={mean}"
            )
    return "\n".join(lines) + "\n"
