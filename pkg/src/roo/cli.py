"""Command-line pipeline driver.

Subcommands cover each stage: generate an event stream, join it in either
mode, pack/expand sample files, build batches, run forwards, and emit cost,
footprint, audit, and consolidated reports. Exit codes: 0 success, 2
validation failure, 1 IO or internal error.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict

import click

from . import pipeline, store
from .batcher import build_batch
from .config import ConfigError, load_settings
from .cost import impression_seq_cost, roo_seq_cost, seq_savings_ratio
from .generator import HISTORY_ITEM_FID, generate_events, make_registry
from .joiner import JoinerError
from .schema import (
    ValidationError,
    impression_sample_to_json,
    request_sample_from_json,
)


def cli_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except store.MixedRegistryError as e:
            click.echo(f"error: {e}", err=True)
            raise SystemExit(2)
        except (ValidationError, JoinerError, ConfigError, ValueError, ZeroDivisionError) as e:
            click.echo(f"error: {e}", err=True)
            raise SystemExit(2)
        except (store.StoreError, OSError) as e:
            click.echo(f"error: {e}", err=True)
            raise SystemExit(1)

    return wrapper


def _echo_json(obj) -> None:
    click.echo(json.dumps(obj, indent=2, sort_keys=True))


config_option = click.option("--config", "config_path", type=click.Path(exists=True), default=None)
seed_option = click.option("--seed", type=int, default=None)


@click.group()
def main():
    """Request-level training data pipeline."""


@main.command()
@config_option
@seed_option
@click.option("--out", required=True, type=click.Path())
@cli_errors
def generate(config_path, seed, out):
    """Write a synthetic event stream as JSON-lines."""
    settings = load_settings(config_path, seed)
    summary = generate_events(settings.generator, out)
    _echo_json(asdict(summary))


@main.command()
@click.argument("events", type=click.Path(exists=True))
@click.option("--mode", type=click.Choice(["roo", "impression"]), required=True)
@config_option
@seed_option
@click.option("--out", required=True, type=click.Path())
@cli_errors
def join(events, mode, config_path, seed, out):
    """Join an event stream and store the published samples."""
    settings = load_settings(config_path, seed)
    manifest = pipeline.join_stage(events, mode, settings, out)
    _echo_json(manifest)


@main.command()
@click.argument("run_dir", type=click.Path(exists=True))
@config_option
@seed_option
@cli_errors
def forward(run_dir, config_path, seed):
    """Batch a run's joined samples and run the configured architectures."""
    settings = load_settings(config_path, seed)
    manifest = pipeline.forward_stage(run_dir, settings)
    _echo_json(manifest)


@main.command()
@click.argument("samples_jsonl", type=click.Path(exists=True))
@config_option
@click.option("--out", required=True, type=click.Path())
@cli_errors
def pack(samples_jsonl, config_path, out):
    """Pack request samples (JSON-lines) into a columnar block."""
    registry = None
    if config_path:
        registry = make_registry(load_settings(config_path).generator)
    samples = []
    with open(samples_jsonl, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                samples.append(request_sample_from_json(line))
    summary = store.write_block(samples, out, registry)
    _echo_json(asdict(summary))


@main.command()
@click.argument("block", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="impression JSON-lines output")
@cli_errors
def expand(block, out):
    """Expand a request block into impression samples."""
    impressions, io_report = store.expand_block(block)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            for imp in impressions:
                f.write(impression_sample_to_json(imp) + "\n")
    _echo_json(
        {
            "impressions": len(impressions),
            "roo_io_bytes": io_report.roo_io_bytes,
            "impression_io_bytes": io_report.impression_io_bytes,
        }
    )


@main.command()
@click.argument("block", type=click.Path(exists=True))
@config_option
@seed_option
@click.option("--out", type=click.Path(), default=None)
@cli_errors
def batch(block, config_path, seed, out):
    """Dump the block's batches as JSON for golden tests."""
    settings = load_settings(config_path, seed)
    registry = make_registry(settings.generator)
    samples = store.read_block(block)
    dumps = []
    for start in range(0, len(samples), settings.batch_size):
        chunk = samples[start : start + settings.batch_size]
        dumps.append(build_batch(chunk, registry, settings.batch).to_debug_dict())
    payload = {"batches": dumps, "batch_size": settings.batch_size}
    if out:
        with open(out, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    else:
        _echo_json(payload)


@main.command()
@click.argument("nmd", nargs=-1, type=int)
@click.option("--corpus", type=click.Path(exists=True), default=None)
@config_option
@seed_option
@cli_errors
def cost(nmd, corpus, config_path, seed):
    """Analytic encoder cost for (N, M, D), or summed over a corpus."""
    if corpus is None:
        if len(nmd) != 3:
            raise ValueError("cost expects three integers: history length, targets, width")
        n, m, d = nmd
        _echo_json(
            {
                "n": n,
                "m": m,
                "d": d,
                "impression_flops": impression_seq_cost(n, m, d),
                "roo_flops": roo_seq_cost(n, m, d),
                "savings_ratio": seq_savings_ratio(n, m, d),
            }
        )
        return
    settings = load_settings(config_path, seed)
    d = settings.model.d
    samples = store.read_block(corpus)
    imp_total = 0
    roo_total = 0
    for s in samples:
        n = len(s.ro_idlist.get(HISTORY_ITEM_FID, []))
        m = len(s.items)
        imp_total += impression_seq_cost(n, m, d)
        roo_total += roo_seq_cost(n, m, d)
    _echo_json(
        {
            "samples": len(samples),
            "d": d,
            "impression_flops": imp_total,
            "roo_flops": roo_total,
            "savings_ratio": imp_total / roo_total if roo_total else None,
        }
    )


@main.command()
@click.argument("block", type=click.Path(exists=True))
@cli_errors
def footprint(block):
    """Storage comparison of a request block vs its impression rendering."""
    samples = store.read_block(block)
    _echo_json(store.measure_footprint(samples).to_dict())


@main.command()
@click.argument("run_roo", type=click.Path(exists=True))
@click.argument("run_impression", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None, help="defaults to RUN_ROO/audit.json")
@cli_errors
def audit(run_roo, run_impression, out):
    """Join-quality audit between a roo run and the impression oracle run."""
    report = pipeline.audit(run_roo, run_impression)
    obj = report.to_dict()
    target = out or f"{run_roo}/audit.json"
    with open(target, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    _echo_json(obj)


@main.command()
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
@cli_errors
def report(run_dirs, out):
    """Consolidated JSON plus a human-readable table."""
    rep = pipeline.build_report(list(run_dirs))
    if out:
        with open(out, "w", encoding="utf-8") as f:
            json.dump(rep, f, indent=2, sort_keys=True)
            f.write("\n")
    click.echo(pipeline.render_report_table(rep), nl=False)


if __name__ == "__main__":
    main()
