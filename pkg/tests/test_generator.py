import json

import pytest

from roo.generator import (
    GeneratorConfig,
    apply_loss,
    dist_mean,
    expected_payload_bytes,
    generate_events,
    generate_raw_events,
    make_registry,
    synthesize_request_samples,
)
from roo.joiner import event_to_json
from roo.schema import validate_request_sample
from roo.store import request_payload_bytes


class TestConfig:
    def test_invalid_loss_rate(self):
        with pytest.raises(ValueError):
            GeneratorConfig(loss_rate=1.5)

    def test_invalid_rate(self):
        with pytest.raises(ValueError):
            GeneratorConfig(conversion_rates={1: -0.1})

    def test_invalid_distribution(self):
        with pytest.raises(ValueError):
            GeneratorConfig(impressions_per_request=("uniform", 5, 4))
        with pytest.raises(ValueError):
            GeneratorConfig(impressions_per_request=("categorical", {4: 0.5}))
        with pytest.raises(ValueError):
            GeneratorConfig(impressions_per_request=("fixed", 0))

    def test_gap_must_exceed_delays(self):
        with pytest.raises(ValueError):
            GeneratorConfig(request_gap_ms=100, jitter_max_ms=400)

    def test_stream_id_ignores_loss(self):
        a = GeneratorConfig(seed=3, loss_rate=0.0)
        b = GeneratorConfig(seed=3, loss_rate=0.01)
        c = GeneratorConfig(seed=4)
        assert a.stream_id() == b.stream_id()
        assert a.stream_id() != c.stream_id()

    def test_dist_mean(self):
        assert dist_mean(("fixed", 4)) == 4.0
        assert dist_mean(("uniform", 4, 7)) == 5.5
        assert dist_mean(("categorical", {2: 0.5, 6: 0.5})) == 4.0


class TestStream:
    def test_fixed_one_impression_per_request(self):
        cfg = GeneratorConfig(seed=1, num_users=5, requests_per_user=3, loss_rate=0.0,
                              impressions_per_request=("fixed", 1), conversion_rates={})
        events = generate_raw_events(cfg)
        assert len(events) == 15
        assert all(e.kind == "impression" for e in events)
        assert len({e.request_id for e in events}) == 15

    def test_byte_identical_for_same_seed(self, tmp_path):
        cfg = GeneratorConfig(seed=9, num_users=4, requests_per_user=3)
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        sa = generate_events(cfg, a)
        sb = generate_events(GeneratorConfig(seed=9, num_users=4, requests_per_user=3), b)
        assert a.read_bytes() == b.read_bytes()
        assert sa.content_sha256 == sb.content_sha256

    def test_meta_sidecar(self, tmp_path):
        cfg = GeneratorConfig(seed=2, num_users=2, requests_per_user=2)
        summary = generate_events(cfg, tmp_path / "e.jsonl")
        meta = json.loads((tmp_path / "e.jsonl.meta.json").read_text())
        assert meta["stream_id"] == cfg.stream_id() == summary.stream_id
        assert meta["num_events"] == summary.num_events

    def test_mean_items_per_request(self):
        cfg = GeneratorConfig(
            seed=3, num_users=100, requests_per_user=100, conversion_rates={}
        )
        events = generate_raw_events(cfg)
        per_request: dict[int, int] = {}
        for e in events:
            per_request[e.request_id] = per_request.get(e.request_id, 0) + 1
        assert len(per_request) == 10_000
        mean = sum(per_request.values()) / len(per_request)
        assert abs(mean - 5.5) <= 0.1

    def test_loss_stream_is_subsequence(self):
        clean_cfg = GeneratorConfig(seed=7, num_users=10, requests_per_user=10)
        lossy_cfg = GeneratorConfig(seed=7, num_users=10, requests_per_user=10, loss_rate=0.2)
        clean = [event_to_json(e) for e in apply_loss(generate_raw_events(clean_cfg), clean_cfg)]
        lossy = [event_to_json(e) for e in apply_loss(generate_raw_events(lossy_cfg), lossy_cfg)]
        assert 0 < len(lossy) < len(clean)
        it = iter(clean)
        assert all(line in it for line in lossy)  # subsequence check

    def test_per_user_request_ordering(self):
        cfg = GeneratorConfig(seed=5, num_users=6, requests_per_user=8)
        last_seen: dict[int, tuple[int, int]] = {}
        for e in generate_raw_events(cfg):
            t, rid = last_seen.get(e.user_id, (-1, -1))
            if rid != -1 and e.request_id != rid:
                assert e.request_id > rid
                assert e.event_time >= t
            last_seen[e.user_id] = (e.event_time, max(rid, e.request_id))

    def test_jitter_bounded_by_window(self):
        cfg = GeneratorConfig(seed=6, num_users=4, requests_per_user=4, conversion_rates={})
        by_request: dict[int, list[int]] = {}
        for e in generate_raw_events(cfg):
            by_request.setdefault(e.request_id, []).append(e.event_time)
        for times in by_request.values():
            assert max(times) - min(times) <= cfg.jitter_max_ms


class TestSynthesizedSamples:
    def test_samples_validate(self):
        cfg = GeneratorConfig(seed=8)
        registry = make_registry(cfg)
        for s in synthesize_request_samples(cfg, 50):
            assert validate_request_sample(s, registry) == []

    def test_payload_model_exact_on_fixed_sizes(self):
        cfg = GeneratorConfig(
            seed=9, impressions_per_request=("fixed", 3), conversion_rates={}
        )
        u, v = expected_payload_bytes(cfg)
        for s in synthesize_request_samples(cfg, 20):
            su, sv = request_payload_bytes(s)
            assert su == u
            assert sv == v * 3

    def test_payload_model_requires_fixed_history(self):
        cfg = GeneratorConfig(seed=1, history_len=("uniform", 2, 8))
        with pytest.raises(ValueError):
            expected_payload_bytes(cfg)

    def test_deterministic(self):
        cfg = GeneratorConfig(seed=10)
        assert synthesize_request_samples(cfg, 10) == synthesize_request_samples(cfg, 10)
