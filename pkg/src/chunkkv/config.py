"""Run configuration: defaults, a flat ``key = value`` file, and CLI overrides.

Precedence is CLI flag over config file over built-in default. The seed
falls back to the ``MEPIC_SIM_SEED`` environment variable when neither the
flag nor the file sets it.
"""

from __future__ import annotations

import dataclasses
import os
import re
from dataclasses import dataclass, fields
from pathlib import Path

from chunkkv.block_pool import PoolConfig
from chunkkv.errors import ConfigError
from chunkkv.replay import CostModel, EngineOptions
from chunkkv.scheduler import REMOTE_POLICIES, Policy
from chunkkv.trace import PRESETS, WorkloadSpec, preset

CONFIG_VERSION = 1
SEED_ENV_VAR = "MEPIC_SIM_SEED"


@dataclass(frozen=True)
class RunConfig:
    # pool
    capacity_blocks: int = 8192
    block_size: int = 16
    # policy
    policy: str = "canonical"
    policies: str = "canonical,epic,cacheblend,naive,full"
    cacheblend_p: float = 0.15
    epic_n: int = 16
    # workload
    preset: str | None = None
    n_requests: int | None = None
    n_distinct_chunks: int | None = None
    chunks_per_request: int | None = None
    zipf_s: float | None = None
    mean_chunk_tokens: int | None = None
    mean_prompt_tokens: int | None = None
    qps: float | None = None
    mean_decode_ticks: int | None = None
    # cost model and remote tier
    prefill_ticks_per_token: float = 0.05
    remote_latency_ticks: int = 1
    remote_bandwidth_blocks_per_tick: float = 8.0
    block_bytes: int = 2 * 1024 * 1024
    remote_policy: str = "cost_based"
    remote_dir: str | None = None
    offload: bool = True
    retain_prefix: bool = False
    retry_limit: int = 100
    # output and randomness
    out_dir: str = "."
    seed: int = 0
    # numeric verification
    dtype: str = "f32"
    rope_instances: int = 1000

    def validate(self) -> RunConfig:
        try:
            self.pool_config()
            self.cost_model()
            self.engine_options()
            for name in self.policy_names():
                self.make_policy(name)
            self.make_policy(self.policy)
            if self.preset is not None or self.n_requests is not None:
                self.workload_spec()
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc.args[0] if exc.args else exc)) from exc
        if self.remote_policy not in REMOTE_POLICIES:
            raise ConfigError(f"remote_policy must be one of {', '.join(REMOTE_POLICIES)}")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError(f"dtype must be f32 or f64, got {self.dtype!r}")
        if self.rope_instances <= 0:
            raise ConfigError("rope_instances must be positive")
        return self

    def pool_config(self) -> PoolConfig:
        return PoolConfig(self.capacity_blocks, self.block_size)

    def cost_model(self) -> CostModel:
        return CostModel(
            prefill_ticks_per_token=self.prefill_ticks_per_token,
            remote_latency_ticks=self.remote_latency_ticks,
            remote_bandwidth_blocks_per_tick=self.remote_bandwidth_blocks_per_tick,
            block_bytes=self.block_bytes,
        )

    def engine_options(self) -> EngineOptions:
        return EngineOptions(
            remote_policy=self.remote_policy,
            retain_prefix=self.retain_prefix,
            offload=self.offload,
            retry_limit=self.retry_limit,
        )

    def policy_names(self) -> list[str]:
        return [p.strip() for p in self.policies.split(",") if p.strip()]

    def make_policy(self, name: str) -> Policy:
        """Build a policy from ``name`` or ``name(param)``, e.g. ``epic(32)``."""
        m = re.fullmatch(r"\s*([a-z_]+)\s*(?:\(\s*([^)]*)\s*\))?\s*", name)
        if not m:
            raise ValueError(f"cannot parse policy {name!r}")
        kind, arg = m.group(1), m.group(2)
        if kind == "canonical":
            return Policy.canonical()
        if kind == "naive":
            return Policy.naive()
        if kind in ("full", "full_recompute"):
            return Policy.full_recompute()
        if kind == "epic":
            return Policy.epic(int(arg) if arg else self.epic_n)
        if kind == "cacheblend":
            return Policy.cacheblend(float(arg) if arg else self.cacheblend_p, seed=self.seed)
        raise ValueError(
            f"unknown policy {kind!r}; valid policies: canonical, naive, full, epic, cacheblend"
        )

    def workload_spec(self) -> WorkloadSpec:
        overrides = {
            f.name: getattr(self, f.name)
            for f in fields(WorkloadSpec)
            if hasattr(self, f.name) and getattr(self, f.name) is not None
            and f.name not in ("block_size", "seed")
        }
        overrides["seed"] = self.seed
        overrides["block_size"] = self.block_size
        if self.preset is not None:
            return preset(self.preset, **overrides)
        return WorkloadSpec(**overrides)


_FIELDS = {f.name: f for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type.replace(" | None", "")
    if raw.lower() in ("none", "") and "None" in _FIELDS[name].type:
        return None
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: expected {kind}, got {raw!r}") from exc
    if kind == "bool":
        if raw.lower() in _TRUE:
            return True
        if raw.lower() in _FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    return raw


def parse_config_text(text: str) -> dict[str, object]:
    """Parse a versioned flat config; unknown keys are an error."""
    values: dict[str, object] = {}
    version = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key == "version":
            version = raw
            continue
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    if version is None:
        raise ConfigError("config file must declare 'version = 1'")
    if version != str(CONFIG_VERSION):
        raise ConfigError(f"unsupported config version {version!r}")
    return values


def load_config_file(path: str | Path) -> dict[str, object]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text)


def resolve_config(
    cli: dict[str, object],
    config_path: str | Path | None = None,
    environ: dict[str, str] | None = None,
) -> RunConfig:
    """Merge defaults, file values, and CLI values (``None`` means unset)."""
    environ = os.environ if environ is None else environ
    merged: dict[str, object] = {}
    if config_path is not None:
        merged.update(load_config_file(config_path))
    for key, value in cli.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown option {key!r}")
        merged[key] = value
    if "seed" not in merged and environ.get(SEED_ENV_VAR):
        merged["seed"] = _coerce("seed", environ[SEED_ENV_VAR])
    if merged.get("preset") is not None and merged["preset"] not in PRESETS:
        raise ConfigError(
            f"unknown preset {merged['preset']!r}; valid presets: {', '.join(sorted(PRESETS))}"
        )
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def config_items(cfg: RunConfig) -> dict[str, object]:
    return dataclasses.asdict(cfg)
