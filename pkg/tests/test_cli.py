import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from roo.cli import main

CONFIG = """
# mini corpus for CLI round trips
seed = 123
generator.num_users = 3
generator.requests_per_user = 2
generator.impressions_per_request = uniform:4-7
generator.conversion_rate.1 = 0.4
generator.conversion_rate.2 = 0.2
generator.history_len = fixed:12
joiner.window_ms = 600000
batch.size = 4
batch.task.engagement = 1
batch.task.consumption = 2
model.d = 8
model.n_max = 16
run.archs = two_tower,lsr
"""

GOLDEN = Path(__file__).parent / "data" / "golden_report.json"


@pytest.fixture
def runner():
    return CliRunner()


def _flow(runner):
    """generate -> join both modes -> forward both -> audit -> report."""
    Path("cfg.txt").write_text(CONFIG)
    steps = [
        ["generate", "--config", "cfg.txt", "--out", "events.jsonl"],
        ["join", "events.jsonl", "--mode", "roo", "--config", "cfg.txt", "--out", "run_roo"],
        ["join", "events.jsonl", "--mode", "impression", "--config", "cfg.txt", "--out", "run_imp"],
        ["forward", "run_roo", "--config", "cfg.txt"],
        ["forward", "run_imp", "--config", "cfg.txt"],
        ["audit", "run_roo", "run_imp"],
        ["report", "run_roo", "run_imp", "--out", "report.json"],
    ]
    outputs = []
    for argv in steps:
        result = runner.invoke(main, argv, catch_exceptions=False)
        assert result.exit_code == 0, f"{argv}: {result.output}"
        outputs.append(result.output)
    return outputs


class TestFlow:
    def test_full_flow(self, runner):
        with runner.isolated_filesystem():
            outputs = _flow(runner)
            audit_obj = json.loads(outputs[5])
            assert set(audit_obj["mismatch_rate"]) == {"1", "2"}
            assert all(v == 0.0 for v in audit_obj["mismatch_rate"].values())
            report = json.loads(Path("report.json").read_text())
            assert report["footprint"] != "absent"
            assert "cost" in outputs[6] and "latency" in outputs[6]

    def test_report_matches_golden(self, runner):
        # Fixture generated once from this flow and reviewed by hand.
        with runner.isolated_filesystem():
            _flow(runner)
            report = json.loads(Path("report.json").read_text())
        assert report == json.loads(GOLDEN.read_text())

    def test_pack_and_expand(self, runner, registry):
        from conftest import make_sample
        from roo.schema import request_sample_to_json

        with runner.isolated_filesystem():
            with open("samples.jsonl", "w") as f:
                f.write(request_sample_to_json(make_sample()) + "\n")
                f.write(request_sample_to_json(make_sample(request_id=2, items=(4,))) + "\n")
            result = runner.invoke(main, ["pack", "samples.jsonl", "--out", "s.blk"])
            assert result.exit_code == 0
            assert json.loads(result.output)["sample_count"] == 2
            result = runner.invoke(main, ["expand", "s.blk", "--out", "imps.jsonl"])
            assert result.exit_code == 0
            obj = json.loads(result.output)
            assert obj["impressions"] == 4
            assert obj["impression_io_bytes"] > 0
            assert len(Path("imps.jsonl").read_text().splitlines()) == 4

    def test_batch_dump(self, runner):
        with runner.isolated_filesystem():
            Path("cfg.txt").write_text(CONFIG)
            for argv in (
                ["generate", "--config", "cfg.txt", "--out", "events.jsonl"],
                ["join", "events.jsonl", "--mode", "roo", "--config", "cfg.txt", "--out", "run"],
            ):
                assert runner.invoke(main, argv).exit_code == 0
            result = runner.invoke(
                main, ["batch", "run/samples.blk", "--config", "cfg.txt", "--out", "b.json"]
            )
            assert result.exit_code == 0
            dump = json.loads(Path("b.json").read_text())
            assert dump["batch_size"] == 4
            first = dump["batches"][0]
            assert first["b_nro"] == sum(first["impressions_per_sample"])


class TestCostCommand:
    def test_headline_numbers(self, runner):
        result = runner.invoke(main, ["cost", "1000", "10", "256"])
        assert result.exit_code == 0
        obj = json.loads(result.output)
        assert obj["impression_flops"] == 3_215_360_000
        assert obj["roo_flops"] == 327_336_960
        assert abs(obj["savings_ratio"] - 9.82) <= 0.01

    def test_corpus_mode(self, runner):
        with runner.isolated_filesystem():
            Path("cfg.txt").write_text(CONFIG)
            for argv in (
                ["generate", "--config", "cfg.txt", "--out", "events.jsonl"],
                ["join", "events.jsonl", "--mode", "roo", "--config", "cfg.txt", "--out", "run"],
            ):
                assert runner.invoke(main, argv).exit_code == 0
            result = runner.invoke(
                main, ["cost", "--corpus", "run/samples.blk", "--config", "cfg.txt"]
            )
            assert result.exit_code == 0
            obj = json.loads(result.output)
            assert obj["samples"] == 6
            assert obj["savings_ratio"] > 1.0


class TestExitCodes:
    def test_wrong_arity_is_validation_failure(self, runner):
        result = runner.invoke(main, ["cost", "10", "20"])
        assert result.exit_code == 2

    def test_corrupt_block_is_io_error(self, runner):
        with runner.isolated_filesystem():
            Path("bad.blk").write_bytes(b"NOPE" + b"\x00" * 64)
            result = runner.invoke(main, ["footprint", "bad.blk"])
            assert result.exit_code == 1
            assert "magic" in result.output

    def test_mixed_registry_pack_is_validation_failure(self, runner):
        from conftest import make_sample
        from roo.schema import request_sample_to_json

        with runner.isolated_filesystem():
            a = make_sample()
            b = make_sample(request_id=2)
            b.ro_dense[777] = 1.0
            with open("samples.jsonl", "w") as f:
                f.write(request_sample_to_json(a) + "\n")
                f.write(request_sample_to_json(b) + "\n")
            result = runner.invoke(main, ["pack", "samples.jsonl", "--out", "s.blk"])
            assert result.exit_code == 2

    def test_audit_stream_mismatch_is_validation_failure(self, runner):
        with runner.isolated_filesystem():
            Path("cfg.txt").write_text(CONFIG)
            Path("cfg2.txt").write_text(CONFIG.replace("seed = 123", "seed = 124"))
            for argv in (
                ["generate", "--config", "cfg.txt", "--out", "a.jsonl"],
                ["generate", "--config", "cfg2.txt", "--out", "b.jsonl"],
                ["join", "a.jsonl", "--mode", "roo", "--config", "cfg.txt", "--out", "ra"],
                ["join", "b.jsonl", "--mode", "impression", "--config", "cfg2.txt", "--out", "rb"],
            ):
                assert runner.invoke(main, argv).exit_code == 0
            result = runner.invoke(main, ["audit", "ra", "rb"])
            assert result.exit_code == 2
            assert "stream" in result.output
