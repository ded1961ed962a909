"""Run configuration: TOML files, JSON overrides and cross-field validation."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field, fields

import tomli
import tomli_w

from . import ConfigError
from .soup import SoupConfig

__all__ = ["RunConfig", "load_config", "parse_config", "dump_config", "deep_merge"]


@dataclass
class CarpetSection:
    grid: int = 256
    eps: list = field(default_factory=list)  # domain units; empty means [4h, 8h, 16h]
    net_count: int = 16


@dataclass
class StatsSection:
    replicas: int = 50
    p_list: list = field(default_factory=lambda: [0.25, 0.5, 0.75])
    m0: float = 2.0
    band: float = 64.0
    pairs: int = 200


@dataclass
class LevySection:
    kappa: list = field(default_factory=lambda: [3.0])
    positivity_draws: int = 1_000_000
    paths: int = 10_000
    horizon: float = 1000.0
    dt: float = 0.02
    cutoff: float = 0.005
    n_list: list = field(default_factory=lambda: [1, 2, 4, 8, 16, 32, 64])
    M_list: list = field(default_factory=lambda: [10.0, 100.0, 1000.0])


@dataclass
class RenderSection:
    source: list = field(default_factory=lambda: [0.0, 0.0])
    eps: float = 0.0  # 0 means 4h


@dataclass
class DistSection:
    points: list = field(default_factory=list)  # rows [x_z, y_z, x_w, y_w]; empty means random pairs
    count: int = 16


_SECTIONS = {
    "soup": SoupConfig,
    "carpet": CarpetSection,
    "stats": StatsSection,
    "levy": LevySection,
    "render": RenderSection,
    "dist": DistSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    format: str = "csv"
    soup: SoupConfig = field(default_factory=lambda: SoupConfig(min_duration=5e-5))
    carpet: CarpetSection = field(default_factory=CarpetSection)
    stats: StatsSection = field(default_factory=StatsSection)
    levy: LevySection = field(default_factory=LevySection)
    render: RenderSection = field(default_factory=RenderSection)
    dist: DistSection = field(default_factory=DistSection)

    @property
    def h(self) -> float:
        return 2 * self.soup.domain_radius / self.carpet.grid

    @property
    def eps_list(self) -> list:
        return [float(e) for e in self.carpet.eps] if self.carpet.eps else [4 * self.h, 8 * self.h, 16 * self.h]

    @property
    def render_eps(self) -> float:
        return self.render.eps if self.render.eps > 0 else 4 * self.h

    def validate(self) -> "RunConfig":
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.carpet.grid < 256:
            raise ConfigError("grid must be at least 256")
        eps = self.eps_list + [self.render_eps]
        if any(e < 4 * self.h * (1 - 1e-9) for e in eps):
            raise ConfigError(f"every eps must be at least 4h = {4 * self.h}")
        root_t = math.sqrt(self.soup.min_duration)
        if any(root_t > e / 4 * (1 + 1e-9) for e in eps):
            raise ConfigError(f"sqrt(min_duration) = {root_t:.4g} exceeds eps/4 for eps = {min(eps):.4g}")
        if self.stats.replicas < 1:
            raise ConfigError("replicas must be positive")
        if any(not 0 < p < 1 for p in self.stats.p_list):
            raise ConfigError("p_list entries must lie in (0, 1)")
        if any(not 8 / 3 < k < 4 for k in self.levy.kappa):
            raise ConfigError("levy kappa values must lie in (8/3, 4)")
        if self.levy.paths < 2 or self.levy.horizon <= 1 or self.levy.dt <= 0:
            raise ConfigError("levy needs paths >= 2, horizon > 1 and dt > 0")
        for row in self.dist.points:
            if len(row) != 4:
                raise ConfigError("dist points rows must be [x_z, y_z, x_w, y_w]")
        return self

    def to_dict(self) -> dict:
        d = {"seed": self.seed, "format": self.format}
        for name in _SECTIONS:
            sec = getattr(self, name)
            if name == "soup":
                # the soup seed is always the run seed
                body = {f.name: getattr(sec, f.name) for f in fields(sec) if f.name != "seed"}
            else:
                body = asdict(sec)
            d[name] = {k: copy.deepcopy(v) for k, v in body.items() if v is not None}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"seed", "format", *_SECTIONS}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for name, typ in _SECTIONS.items():
            if name in d:
                body = dict(d[name])
                valid = {f.name for f in fields(typ)}
                bad = set(body) - valid
                if bad:
                    raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
                try:
                    kw[name] = typ(**body)
                except TypeError as exc:
                    raise ConfigError(str(exc)) from exc
        if "seed" in d:
            kw["seed"] = int(d["seed"])
        if "format" in d:
            kw["format"] = str(d["format"])
        return cls(**kw)


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_config(text: str, overrides=()) -> RunConfig:
    """Config from TOML text with JSON override blobs merged on top, validated."""
    try:
        d = tomli.loads(text) if text else {}
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML: {exc}") from exc
    d = deep_merge(RunConfig().to_dict(), d)
    for blob in overrides:
        try:
            over = json.loads(blob) if isinstance(blob, str) else blob
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON override: {exc}") from exc
        if not isinstance(over, dict):
            raise ConfigError("JSON overrides must be objects")
        d = deep_merge(d, over)
    return RunConfig.from_dict(d).validate()


def load_config(path=None, overrides=()) -> RunConfig:
    text = ""
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    return parse_config(text, overrides)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
