"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines.
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest
from click.testing import CliRunner

from conftest import random_sample
from roo.batcher import BatchConfig, build_batch
from roo.cli import main as cli_main
from roo.config import load_settings
from roo.generator import (
    GeneratorConfig,
    expected_payload_bytes,
    generate_events,
    make_registry,
    model_features,
    synthesize_request_samples,
)
from roo.joiner import JoinerConfig, RequestJoiner, event_from_json
from roo.model import (
    ARCHITECTURES,
    Counters,
    ModelConfig,
    expanded_forward_oracle,
    forward,
    init_model_params,
    max_relative_difference,
)
from roo.pipeline import audit, join_stage, run_pipeline
from roo.schema import expand_request_sample, group_impressions, request_sample_to_json
from roo.store import measure_footprint, read_block, write_block


def _verdict(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_1_cost_formula_reproduction():
    start = time.monotonic()
    result = CliRunner().invoke(cli_main, ["cost", "1000", "10", "256"])
    elapsed = time.monotonic() - start
    assert result.exit_code == 0
    ratio = json.loads(result.output)["savings_ratio"]
    ok = abs(ratio - 9.82) <= 0.01 and elapsed < 1.0
    _verdict(
        "criterion 1 (cost formula)",
        ok,
        f"cost 1000 10 256 -> savings_ratio={ratio:.4f} (target 9.82 +/- 0.01), {elapsed:.2f}s",
    )


def test_criterion_2_forward_equivalence():
    start = time.monotonic()
    worst = {arch: 0.0 for arch in ARCHITECTURES}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(1, 9)) * 4  # 4..32
        n_max = int(rng.integers(4, 65))  # history cap <= 64
        b_ro = int(rng.integers(1, 9))
        gcfg = GeneratorConfig(
            seed=seed,
            impressions_per_request=("uniform", 1, 7),
            history_len=("uniform", 0, 64),
            n_ro_dense=int(rng.integers(1, 5)),
            n_user_arch=int(rng.integers(1, 4)),
            user_arch_len=int(rng.integers(1, 6)),
            n_nro_dense=int(rng.integers(1, 4)),
        )
        samples = synthesize_request_samples(gcfg, b_ro)
        registry = make_registry(gcfg)
        features = model_features(gcfg)
        bconfig = BatchConfig()
        mcfg = ModelConfig(
            d=d,
            n_max=n_max,
            lce_n_out=int(rng.integers(1, 5)),
            lce_d_out=int(rng.integers(2, 9)),
            hidden=int(rng.integers(4, 17)),
            user_tower="seq" if seed % 2 else "user_arch",
            seed=seed + 1,
        )
        params = init_model_params(mcfg, features, registry, tuple(bconfig.task_names()))
        batch = build_batch(samples, registry, bconfig)
        for arch in ARCHITECTURES:
            out = forward(arch, batch, params, Counters())
            oracle, _ = expanded_forward_oracle(samples, params, registry, bconfig, arch)
            worst[arch] = max(worst[arch], max_relative_difference(out, oracle))
    elapsed = time.monotonic() - start
    peak = max(worst.values())
    ok = peak <= 1e-6 and elapsed < 120.0
    detail = ", ".join(f"{a}={v:.2e}" for a, v in worst.items())
    _verdict(
        "criterion 2 (forward equivalence)",
        ok,
        f"100 configs x 4 architectures, max rel diff {detail} (limit 1e-6), {elapsed:.1f}s",
    )


def _dedup_counters(k_dist, count, seed):
    gcfg = GeneratorConfig(seed=seed, impressions_per_request=k_dist, history_len=("uniform", 1, 24))
    samples = synthesize_request_samples(gcfg, count)
    registry = make_registry(gcfg)
    features = model_features(gcfg)
    bconfig = BatchConfig()
    params = init_model_params(ModelConfig(seed=seed), features, registry, tuple(bconfig.task_names()))
    batch = build_batch(samples, registry, bconfig)
    roo = Counters(run_id="dedup")
    forward("lsr", batch, params, roo)
    _, oracle = expanded_forward_oracle(samples, params, registry, bconfig, "lsr", run_id="dedup")
    return roo, oracle


def test_criterion_3_dedup_counters():
    roo, oracle = _dedup_counters(("fixed", 4), count=64, seed=33)
    per_feature_exact = all(
        oracle.rows_ro[fid] == 4 * n and oracle.rows_ro[fid] / n == 4.000
        for fid, n in roo.rows_ro.items()
    )
    nro_equal = oracle.rows_nro == roo.rows_nro

    roo_u, oracle_u = _dedup_counters(("uniform", 4, 7), count=256, seed=34)
    band_ratio = oracle_u.total_rows_ro() / roo_u.total_rows_ro()
    ok = per_feature_exact and nro_equal and 4.0 <= band_ratio <= 7.0
    _verdict(
        "criterion 3 (dedup counters)",
        ok,
        f"k=4: per-RO-feature ratio exactly 4.000 ({per_feature_exact}), NRO equal ({nro_equal}); "
        f"k~U{{4..7}}: ratio {band_ratio:.3f} in [4, 7]",
    )


def test_criterion_4_storage_model():
    start = time.monotonic()
    base = GeneratorConfig(seed=44, impressions_per_request=("fixed", 4), conversion_rates={})
    u, v = expected_payload_bytes(base)
    samples = synthesize_request_samples(base, 10_000)
    measured = measure_footprint(samples).implied_volume_increase
    predicted = 4 * (u + v) / (u + 4 * v) - 1.0
    main_ok = abs(measured - predicted) / predicted <= 0.05

    sweep = []
    for k in (1, 2, 3, 4, 7):
        cfg = dataclasses.replace(base, seed=100 + k, impressions_per_request=("fixed", k))
        pts = synthesize_request_samples(cfg, 1_000)
        inc = measure_footprint(pts).implied_volume_increase
        uu, vv = expected_payload_bytes(cfg)
        model = k * (uu + vv) / (uu + k * vv) - 1.0
        sweep.append((k, inc, model))
    # k=1 predicts exactly 0; the once-per-request id columns leave the
    # measured value within the degenerate-case 2% bound, so that floor
    # applies as the absolute tolerance.
    sweep_faithful = all(
        inc == pytest.approx(model, rel=0.05, abs=0.02) for _, inc, model in sweep
    )
    lo = min(inc for _, inc, _ in sweep)
    hi = max(inc for _, inc, _ in sweep)
    covers_band = lo <= 0.43 and hi >= 1.50
    elapsed = time.monotonic() - start
    ok = main_ok and sweep_faithful and covers_band and elapsed < 60.0
    _verdict(
        "criterion 4 (storage model)",
        ok,
        f"k=4, u={u:.0f}, v={v:.0f}: measured {measured:.4f} vs model {predicted:.4f} (5%); "
        f"sweep spans [{lo:.2f}, {hi:.2f}] covering [0.43, 1.50], {elapsed:.1f}s",
    )


def test_criterion_5_join_quality(tmp_path):
    # One clean 10^4-request stream and its impression-oracle join are shared
    # by both checks; the lossy check joins a filtered copy of the same
    # logical stream on the request-level side only.
    seed = 55
    clean = GeneratorConfig(
        seed=seed,
        num_users=500,
        requests_per_user=20,
        conversion_rates={1: 0.8, 2: 0.3},
        n_ro_dense=2,
        n_user_arch=0,
        history_len=("fixed", 2),
    )
    events_clean = tmp_path / "clean.jsonl"
    generate_events(clean, events_clean)
    events_lossy = tmp_path / "lossy.jsonl"
    generate_events(dataclasses.replace(clean, loss_rate=0.001), events_lossy)

    settings = load_settings(None, seed_override=seed)
    settings.generator = clean
    settings.joiner = JoinerConfig(window_ms=clean.window_ms)
    join_stage(str(events_clean), "impression", settings, str(tmp_path / "imp"))
    join_stage(str(events_clean), "roo", settings, str(tmp_path / "roo_clean"))
    join_stage(str(events_lossy), "roo", settings, str(tmp_path / "roo_lossy"))

    report = audit(str(tmp_path / "roo_clean"), str(tmp_path / "imp"))
    lossless_ok = (
        all(rate == 0.0 for rate in report.mismatch_rate.values())
        and report.sample_coverage == 1.0
    )

    lossy = audit(str(tmp_path / "roo_lossy"), str(tmp_path / "imp"))
    p = 0.001
    n = lossy.triples_compared[1]
    rate = lossy.mismatch_rate[1]
    sigma = math.sqrt(p * (1 - p) / n)
    binomial_ok = abs(rate - p) <= 3 * sigma
    ok = lossless_ok and binomial_ok
    _verdict(
        "criterion 5 (join quality)",
        ok,
        f"loss 0: all labels mismatch 0.0 over 10^4 requests ({lossless_ok}); "
        f"loss 0.001: conversion mismatch {rate:.5f} vs 0.001 +/- {3 * sigma:.5f} (n={n})",
    )


def test_criterion_6_landing_latency(tmp_path):
    base = GeneratorConfig(
        seed=66,
        num_users=500,
        requests_per_user=20,
        conversion_rates={},
        n_ro_dense=2,
        n_user_arch=0,
        history_len=("fixed", 2),
    )
    events = tmp_path / "events.jsonl"
    generate_events(base, events)
    window = base.window_ms

    def landing(dynamic: bool) -> float:
        joiner = RequestJoiner(JoinerConfig(window_ms=window, dynamic_trigger=dynamic))
        with open(events, encoding="utf-8") as f:
            for line in f:
                e = event_from_json(line.strip())
                joiner.tick(e.event_time)
                joiner.ingest_event(e)
        joiner.drain()
        return joiner.metrics().mean_landing_latency_ms

    dynamic_mean = landing(dynamic=True)
    fixed_mean = landing(dynamic=False)
    ok = 0.4 * window <= dynamic_mean <= 0.6 * window and fixed_mean == float(window)
    _verdict(
        "criterion 6 (landing latency)",
        ok,
        f"dynamic trigger mean {dynamic_mean / window:.3f}T in [0.4T, 0.6T]; "
        f"fixed-time mean {fixed_mean:.0f}ms == T={window}ms, 10^4 requests",
    )


def test_criterion_7_round_trips(tmp_path):
    rng = np.random.default_rng(77)
    samples = [random_sample(rng, request_id=i + 1) for i in range(1000)]
    path = tmp_path / "trip.blk"
    write_block(samples, path)
    back = read_block(path)
    store_ok = back == samples and [request_sample_to_json(s) for s in back] == [
        request_sample_to_json(s) for s in samples
    ]

    from conftest import small_registry

    registry = small_registry()
    expand_ok = all(
        group_impressions(
            expand_request_sample(s, registry), registry, {s.request_id: s.user_id}
        )
        == [s]
        for s in samples
    )

    gcfg = GeneratorConfig(seed=78, num_users=20, requests_per_user=10)
    events = tmp_path / "events.jsonl"
    generate_events(gcfg, events)

    def run_join() -> list[str]:
        joiner = RequestJoiner(JoinerConfig(window_ms=gcfg.window_ms))
        out = []
        with open(events, encoding="utf-8") as f:
            for line in f:
                e = event_from_json(line.strip())
                out.extend(map(request_sample_to_json, joiner.tick(e.event_time)))
                out.extend(map(request_sample_to_json, joiner.ingest_event(e)))
        out.extend(map(request_sample_to_json, joiner.drain()))
        return out

    joiner_ok = run_join() == run_join()
    ok = store_ok and expand_ok and joiner_ok
    _verdict(
        "criterion 7 (round trips)",
        ok,
        f"store read.write identity on 10^3 samples ({store_ok}); "
        f"expand.group identity on 10^3 ({expand_ok}); joiner byte-determinism ({joiner_ok})",
    )


def test_criterion_8_degenerate_single_impression(tmp_path):
    gcfg = GeneratorConfig(seed=88, num_users=40, requests_per_user=5,
                           impressions_per_request=("fixed", 1))
    events = tmp_path / "events.jsonl"
    generate_events(gcfg, events)
    settings = load_settings(None, seed_override=88)
    settings.generator = gcfg
    settings.joiner = JoinerConfig(window_ms=gcfg.window_ms)
    run_pipeline(str(events), "roo", settings, str(tmp_path / "roo"))
    run_pipeline(str(events), "impression", settings, str(tmp_path / "imp"))

    manifest = json.loads((tmp_path / "roo" / "manifest.json").read_text())
    sizes_ok = manifest["b_ro_total"] == manifest["b_nro_total"] == 200

    samples = read_block(tmp_path / "roo" / "samples.blk")
    footprint = measure_footprint(samples)
    footprint_ok = abs(footprint.implied_volume_increase) < 0.02

    ratios_one = True
    for arch in settings.archs:
        roo_c = json.loads((tmp_path / "roo" / "counters" / f"{arch}.json").read_text())
        imp_c = json.loads((tmp_path / "imp" / "counters" / f"{arch}.json").read_text())
        ratios_one &= roo_c["flops"] == imp_c["flops"]
        ratios_one &= roo_c["rows_ro"] == imp_c["rows_ro"]
        ratios_one &= roo_c["rows_nro"] == imp_c["rows_nro"]

    bitwise = all(
        (tmp_path / "roo" / "outputs" / f"{arch}.npy").read_bytes()
        == (tmp_path / "imp" / "outputs" / f"{arch}.npy").read_bytes()
        for arch in settings.archs
    )
    ok = sizes_ok and footprint_ok and ratios_one and bitwise
    _verdict(
        "criterion 8 (single-impression degenerate)",
        ok,
        f"b_ro==b_nro ({sizes_ok}); volume increase {footprint.implied_volume_increase:+.4f} < 2% "
        f"({footprint_ok}); counter ratios 1.0 ({ratios_one}); bitwise-equal outputs ({bitwise})",
    )
