"""Declarative run configuration.

One textual key = value file configures every stage. Keys are dotted by
module (generator.*, joiner.*, batch.*, model.*, run.*); '#' starts a
comment. Distributions are written fixed:K, uniform:LO-HI, or
categorical:K=P,K=P. The top-level ``seed`` feeds both the generator and
the model unless they set their own.
"""

from __future__ import annotations

from dataclasses import dataclass

from .batcher import BatchConfig
from .generator import GeneratorConfig
from .joiner import JoinerConfig
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    seed: int
    generator: GeneratorConfig
    joiner: JoinerConfig
    batch: BatchConfig
    model: ModelConfig
    batch_size: int = 8
    archs: tuple[str, ...] = ("two_tower", "lsr")


def parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_dist(text: str, key: str) -> tuple:
    kind, _, rest = text.partition(":")
    if kind == "fixed":
        return ("fixed", int(rest))
    if kind == "uniform":
        lo, _, hi = rest.partition("-")
        return ("uniform", int(lo), int(hi))
    if kind == "categorical":
        probs = {}
        for part in rest.split(","):
            k, _, p = part.partition("=")
            probs[int(k)] = float(p)
        return ("categorical", probs)
    raise ConfigError(f"{key}: unknown distribution {text!r}")


def _parse_bool(text: str, key: str) -> bool:
    if text in ("on", "true", "1", "yes"):
        return True
    if text in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected on/off, got {text!r}")


_GEN_INT_KEYS = (
    "num_users",
    "requests_per_user",
    "window_ms",
    "jitter_max_ms",
    "conversion_delay_max_ms",
    "request_gap_ms",
    "user_stagger_ms",
    "n_ro_dense",
    "n_user_arch",
    "user_arch_len",
    "n_nro_dense",
    "n_nro_idlist",
    "nro_idlist_len",
    "item_universe",
    "n_actions",
    "n_contexts",
)

_MODEL_INT_KEYS = (
    "d",
    "n_max",
    "lce_n_out",
    "lce_d_out",
    "hidden",
    "rows_main",
    "rows_action",
    "rows_context",
)


def build_settings(kv: dict[str, str], seed_override: int | None = None) -> RunSettings:
    seed = int(kv.get("seed", 1))
    if seed_override is not None:
        seed = seed_override

    gen_kwargs: dict = {"seed": int(kv.get("generator.seed", seed))}
    for name in _GEN_INT_KEYS:
        key = f"generator.{name}"
        if key in kv:
            gen_kwargs[name] = int(kv[key])
    if "generator.loss_rate" in kv:
        gen_kwargs["loss_rate"] = float(kv["generator.loss_rate"])
    if "generator.impressions_per_request" in kv:
        gen_kwargs["impressions_per_request"] = _parse_dist(
            kv["generator.impressions_per_request"], "generator.impressions_per_request"
        )
    if "generator.history_len" in kv:
        gen_kwargs["history_len"] = _parse_dist(kv["generator.history_len"], "generator.history_len")
    rates = {
        int(key.rsplit(".", 1)[1]): float(value)
        for key, value in kv.items()
        if key.startswith("generator.conversion_rate.")
    }
    if rates:
        gen_kwargs["conversion_rates"] = rates
    generator = GeneratorConfig(**gen_kwargs)

    joiner = JoinerConfig(
        window_ms=int(kv.get("joiner.window_ms", generator.window_ms)),
        engagement_threshold=int(kv.get("joiner.engagement_threshold", 1_000_000)),
        dynamic_trigger=_parse_bool(kv.get("joiner.dynamic_trigger", "off"), "joiner.dynamic_trigger"),
    )

    tasks = {
        key.rsplit(".", 1)[1]: int(value)
        for key, value in kv.items()
        if key.startswith("batch.task.")
    }
    batch = BatchConfig(task_labels=tasks) if tasks else BatchConfig()

    model_kwargs: dict = {"seed": int(kv.get("model.seed", seed))}
    for name in _MODEL_INT_KEYS:
        key = f"model.{name}"
        if key in kv:
            model_kwargs[name] = int(kv[key])
    if "model.user_tower" in kv:
        tower = kv["model.user_tower"]
        if tower not in ("user_arch", "seq"):
            raise ConfigError(f"model.user_tower must be user_arch or seq, got {tower!r}")
        model_kwargs["user_tower"] = tower
    model = ModelConfig(**model_kwargs)

    archs = tuple(
        a.strip() for a in kv.get("run.archs", "two_tower,lsr").split(",") if a.strip()
    )
    return RunSettings(
        seed=seed,
        generator=generator,
        joiner=joiner,
        batch=batch,
        model=model,
        batch_size=int(kv.get("batch.size", 8)),
        archs=archs,
    )


def load_settings(path: str | None, seed_override: int | None = None) -> RunSettings:
    kv = parse_config_file(path) if path else {}
    return build_settings(kv, seed_override)
