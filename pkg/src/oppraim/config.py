"""TOML run configuration shared by the simulator, detector and CLI.

Sections: ``[scenario]`` (with optional ``[[scenario.layout]]`` blocks),
``[noise]``, repeated ``[[attack]]``, ``[ranging]``, ``[sampling]`` and
``[detector]``. ``OPPRAIM_SEED`` in the environment replaces every seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:     # Python < 3.11
    import tomli as tomllib

from .errors import ConfigInvalid
from .fusion import DetectorConfig
from .geo import GeodeticPosition
from .positioning import RangingModelParams
from .sim import (
    AnchorLayout,
    AttackEntry,
    AttackKind,
    AttackSchedule,
    NoiseModel,
    ScenarioConfig,
    offset_spoof_trace,
    rural_config,
    urban_config,
)
from .subsets import SamplingPolicy
from .trace import parse_infrastructure

SEED_ENV = "OPPRAIM_SEED"
FAMILIES = {"rural": rural_config, "urban": urban_config}


@dataclass
class AttackSpec:
    """An ``[[attack]]`` block before it is resolved against a trace."""

    kind: AttackKind
    start: float | None = None          # seconds; default: first epoch
    end: float | None = None            # seconds; default: last epoch
    offset: tuple = (0.0, 0.0, 0.0)     # ENU meters from truth
    drift: tuple = (0.0, 0.0, 0.0)      # ENU meters per epoch
    spoof_trace: tuple = ()             # explicit positions override offset/drift
    constellations: tuple = ()
    replayed: tuple = ()
    delay_ms: float = 0.0

    def resolve(self, frames, local) -> AttackEntry:
        start = frames[0].timestamp if self.start is None else self.start
        end = frames[-1].timestamp if self.end is None else self.end
        trace = self.spoof_trace
        if self.kind.spoofing and not trace:
            trace, start, end = offset_spoof_trace(frames, start, end, local, self.offset, self.drift)
        return AttackEntry(self.kind, start, end, tuple(trace), tuple(self.constellations),
                           tuple(self.replayed), self.delay_ms)


@dataclass
class RunConfig:
    scenario: ScenarioConfig | None = None
    attacks: list = field(default_factory=list)
    ranging: RangingModelParams = field(default_factory=RangingModelParams)
    sampling: SamplingPolicy = field(default_factory=SamplingPolicy)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    @property
    def noise(self) -> NoiseModel:
        return self.scenario.noise if self.scenario is not None else NoiseModel()

    def schedule(self, frames, local) -> AttackSchedule:
        return AttackSchedule(tuple(a.resolve(frames, local) for a in self.attacks))


def _pick(cls, table: dict, section: str, rename: dict | None = None) -> dict:
    rename = rename or {}
    names = {f.name for f in fields(cls)}
    out = {}
    for k, v in table.items():
        name = rename.get(k, k)
        if name not in names:
            raise ConfigInvalid(f"unknown key {k!r} in [{section}]")
        out[name] = tuple(v) if isinstance(v, list) else v
    return out


def _position(v, where) -> GeodeticPosition:
    if not isinstance(v, (list, tuple)) or len(v) not in (2, 3):
        raise ConfigInvalid(f"{where}: positions are [lat, lon] or [lat, lon, alt]")
    try:
        return GeodeticPosition(*map(float, v))
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{where}: {exc}") from None


def _layouts(blocks) -> tuple:
    out = []
    for b in blocks:
        b = dict(b)
        try:
            infra = parse_infrastructure(str(b.pop("infrastructure")))
        except (KeyError, ValueError) as exc:
            raise ConfigInvalid(f"[[scenario.layout]]: {exc}") from None
        out.append(AnchorLayout(infra, **_pick(AnchorLayout, b, "scenario.layout")))
    return tuple(out)


def _scenario(table: dict, noise: NoiseModel, seed: int | None) -> ScenarioConfig:
    table = dict(table)
    family = table.pop("family", "custom")
    if "layout" in table:
        table["layouts"] = _layouts(table.pop("layout"))
    if "waypoints" in table:
        table["waypoints"] = tuple(_position(p, "scenario.waypoints") for p in table["waypoints"])
    if "geoip_servers" in table:
        table["geoip_servers"] = tuple(_position(p, "scenario.geoip_servers") for p in table["geoip_servers"])
    base_seed = table.pop("seed", 0)
    if seed is not None:
        base_seed = seed
        table.pop("rng_seed", None)
        table.pop("geometry_seed", None)
    kw = _pick(ScenarioConfig, table, "scenario")
    kw["noise"] = noise
    try:
        if family == "custom":
            kw.setdefault("rng_seed", base_seed)
            kw.setdefault("geometry_seed", base_seed)
            return ScenarioConfig(**kw)
        if family not in FAMILIES:
            raise ConfigInvalid(f"unknown scenario family {family!r}")
        n = kw.pop("n_epochs", 600)
        return FAMILIES[family](int(base_seed), n, **kw)
    except TypeError as exc:
        raise ConfigInvalid(f"[scenario]: {exc}") from None


def _attack(block: dict) -> AttackSpec:
    b = dict(block)
    try:
        kind = AttackKind(str(b.pop("kind")).lower())
    except (KeyError, ValueError) as exc:
        raise ConfigInvalid(f"[[attack]]: bad or missing kind ({exc})") from None
    kw = _pick(AttackSpec, b, "attack")
    if "spoof_trace" in kw:
        kw["spoof_trace"] = tuple(_position(p, "attack.spoof_trace") for p in kw["spoof_trace"])
    for k in ("offset", "drift"):
        if k in kw and len(kw[k]) != 3:
            raise ConfigInvalid(f"[[attack]] {k} needs three ENU components")
    return AttackSpec(kind, **kw)


def env_seed() -> int | None:
    v = os.environ.get(SEED_ENV)
    if v is None or v == "":
        return None
    try:
        return int(v)
    except ValueError:
        raise ConfigInvalid(f"{SEED_ENV} must be an integer, got {v!r}") from None


def parse_config(data: dict) -> RunConfig:
    data = dict(data)
    known = {"scenario", "noise", "attack", "ranging", "sampling", "detector"}
    extra = set(data) - known
    if extra:
        raise ConfigInvalid(f"unknown section(s): {', '.join(sorted(extra))}")
    seed = env_seed()
    try:
        noise = NoiseModel(**_pick(NoiseModel, data.get("noise", {}), "noise"))
        ranging = RangingModelParams(**_pick(RangingModelParams, data.get("ranging", {}), "ranging"))
        sampling = SamplingPolicy(**_pick(SamplingPolicy, data.get("sampling", {}), "sampling",
                                          {"seed": "rng_seed"}))
        if seed is not None:
            sampling = SamplingPolicy(sampling.rate, sampling.distribution, seed, sampling.cap)
        detector = DetectorConfig(**_pick(DetectorConfig, data.get("detector", {}), "detector"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        raise ConfigInvalid(str(exc)) from None
    scenario = _scenario(data["scenario"], noise, seed) if "scenario" in data else None
    attacks = [_attack(b) for b in data.get("attack", [])]
    return RunConfig(scenario, attacks, ranging, sampling, detector)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path}: {exc}") from None
    return parse_config(data)
