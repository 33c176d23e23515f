"""Scenario configuration: an INI file with one section per module.

Every key is addressed by its dotted name, ``section.key`` (for example
``onion.k_max``), both in sweeps and in error messages. ``sim.seed`` is
mandatory; everything else has a default. See ``docs/config_schema.md``.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .collection import RETURN_MODES
from .onion import HEADER_LEN


class ConfigError(ValueError):
    pass


def _key(section: str, default: Any = dataclasses.MISSING, **kw):
    if default is dataclasses.MISSING:
        return field(metadata={"section": section}, **kw)
    return field(default=default, metadata={"section": section}, **kw)


@dataclass
class ScenarioConfig:
    # [sim]
    seed: int = _key("sim", None)
    n_nodes: int = _key("sim", 100)
    sim_ticks: int = _key("sim", 5000)
    warmup_rounds: int = _key("sim", 50)
    latency_min: int = _key("sim", 1)
    latency_max: int = _key("sim", 10)
    loss: float = _key("sim", 0.0)
    round_interval_ticks: int = _key("sim", 10)
    # [churn]
    leave_rate: float = _key("churn", 0.0)
    join_rate: float = _key("churn", 0.0)
    # [sampling]
    view_capacity: int = _key("sampling", 20)
    shuffle_size: int = _key("sampling", 10)
    bootstrap_degree: int = _key("sampling", 5)
    phi_size: int = _key("sampling", 50)
    # [onion]
    k_min: int = _key("onion", 5)
    k_max: int = _key("onion", 20)
    route_ttl_ticks: float = _key("onion", math.inf)
    cell_size: int = _key("onion", 4096)
    # [delegation]
    n_delegations: int = _key("delegation", 50)
    wave_size: int = _key("delegation", 25)
    wave_spacing_ticks: int = _key("delegation", 1000)
    retry_ticks: int = _key("delegation", 1000)
    max_retries: int = _key("delegation", 3)
    profile_dim: int = _key("delegation", 1)
    # [aggregation]
    aggregator: str = _key("aggregation", "average")
    epsilon: float = _key("aggregation", 1e-8)
    window_rounds: int = _key("aggregation", 5)
    # [return]
    return_mode: str = _key("return", "pull_reenc")
    window_ticks: int = _key("return", 500)
    probe_backoff_ticks: int = _key("return", 300)
    probe_timeout_ticks: int = _key("return", 600)
    # [adversary]
    collusion_fraction: float = _key("adversary", 0.0)
    sniffer: bool = _key("adversary", False)

    @classmethod
    def fields_by_dotted(cls) -> dict[str, dataclasses.Field]:
        return {f"{f.metadata['section']}.{f.name}": f for f in dataclasses.fields(cls)}

    def get(self, dotted: str) -> Any:
        f = self.fields_by_dotted().get(dotted)
        if f is None:
            raise ConfigError(f"unknown parameter {dotted!r}")
        return getattr(self, f.name)

    def with_value(self, dotted: str, raw: Any) -> "ScenarioConfig":
        f = self.fields_by_dotted().get(dotted)
        if f is None:
            raise ConfigError(f"unknown parameter {dotted!r}")
        value = coerce(dotted, f, raw) if isinstance(raw, str) else raw
        return dataclasses.replace(self, **{f.name: value})

    def validate(self) -> "ScenarioConfig":
        def need(cond: bool, dotted: str, msg: str) -> None:
            if not cond:
                raise ConfigError(f"{dotted}: {msg}")

        need(self.seed is not None, "sim.seed", "missing (a seed is mandatory)")
        need(self.n_nodes >= 2, "sim.n_nodes", "need at least 2 nodes")
        need(self.sim_ticks > 0, "sim.sim_ticks", "must be positive")
        need(self.warmup_rounds >= 0, "sim.warmup_rounds", "must be >= 0")
        need(1 <= self.latency_min <= self.latency_max, "sim.latency_min", "need 1 <= latency_min <= latency_max")
        need(0.0 <= self.loss < 1.0, "sim.loss", "must be in [0, 1)")
        need(self.round_interval_ticks >= 1, "sim.round_interval_ticks", "must be >= 1")
        need(0.0 <= self.leave_rate <= 1.0, "churn.leave_rate", "per-tick probability in [0, 1]")
        need(0.0 <= self.join_rate <= 1.0, "churn.join_rate", "per-tick probability in [0, 1]")
        need(self.view_capacity >= 1, "sampling.view_capacity", "must be >= 1")
        need(1 <= self.shuffle_size <= self.view_capacity, "sampling.shuffle_size", "must be in [1, view_capacity]")
        need(1 <= self.bootstrap_degree, "sampling.bootstrap_degree", "must be >= 1")
        need(1 <= self.k_min <= self.k_max, "onion.k_min", "need 1 <= k_min <= k_max")
        need(self.phi_size >= self.k_max + 1, "sampling.phi_size", "must be >= k_max + 1")
        need(self.phi_size <= self.n_nodes - 1, "sampling.phi_size", "cannot exceed n_nodes - 1")
        need(self.route_ttl_ticks > 0, "onion.route_ttl_ticks", "must be positive")
        need(self.n_delegations >= 0, "delegation.n_delegations", "must be >= 0")
        need(self.wave_size >= 1, "delegation.wave_size", "must be >= 1")
        need(self.wave_spacing_ticks >= 1, "delegation.wave_spacing_ticks", "must be >= 1")
        need(self.max_retries >= 1, "delegation.max_retries", "must be >= 1")
        need(self.profile_dim >= 1, "delegation.profile_dim", "must be >= 1")
        need(self.aggregator in ("identity", "average"), "aggregation.aggregator", "identity or average")
        need(self.epsilon > 0, "aggregation.epsilon", "must be positive")
        need(self.window_rounds >= 1, "aggregation.window_rounds", "must be >= 1")
        need(self.return_mode in RETURN_MODES, "return.return_mode", f"one of {', '.join(RETURN_MODES)}")
        need(self.window_ticks > 0, "return.window_ticks", "must be positive")
        need(0.0 <= self.collusion_fraction <= 1.0, "adversary.collusion_fraction", "must be in [0, 1]")
        waves = -(-self.n_delegations // self.wave_size)
        need(waves == 0 or (waves - 1) * self.wave_spacing_ticks < self.sim_ticks,
             "sim.sim_ticks", "too short for the delegation waves")
        need(self.cell_size >= (self.k_max + 1) * HEADER_LEN + 128, "onion.cell_size", "too small for k_max layers")
        return self

    def to_dict(self) -> dict[str, Any]:
        return {d: getattr(self, f.name) for d, f in self.fields_by_dotted().items()}


def coerce(dotted: str, f: dataclasses.Field, raw: str) -> Any:
    raw = raw.strip()
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{dotted}: cannot parse {raw!r} as {kind}") from None


def parse_config(text: str) -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config syntax: {e}") from None
    fields = ScenarioConfig.fields_by_dotted()
    values: dict[str, Any] = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            dotted = f"{section}.{key}"
            f = fields.get(dotted)
            if f is None:
                raise ConfigError(f"{dotted}: unknown parameter")
            values[f.name] = coerce(dotted, f, raw)
    return ScenarioConfig(**values)


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text)


def parse_sweep(spec: str) -> tuple[str, list[str]]:
    if "=" not in spec:
        raise ConfigError(f"sweep {spec!r}: expected key=v1,v2,...")
    key, vals = spec.split("=", 1)
    key = key.strip()
    if key not in ScenarioConfig.fields_by_dotted():
        raise ConfigError(f"{key}: unknown sweep parameter")
    values = [v.strip() for v in vals.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"{key}: empty sweep")
    return key, values


def expand_sweeps(base: ScenarioConfig, sweeps: list[tuple[str, list[str]]]) -> list[tuple[dict[str, str], ScenarioConfig]]:
    """Cartesian product of sweep axes, in axis order; each cell validated."""
    cells: list[tuple[dict[str, str], ScenarioConfig]] = [({}, base)]
    for key, values in sweeps:
        cells = [({**axes, key: v}, cfg.with_value(key, v)) for axes, cfg in cells for v in values]
    return [(axes, cfg.validate()) for axes, cfg in cells]
