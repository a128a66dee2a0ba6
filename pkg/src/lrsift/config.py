"""Pipeline configuration: every tunable constant in one JSON-serializable object."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from lrsift.imaging import HarrisParams
from lrsift.lowrank import TiltParams


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    harris: HarrisParams = field(default_factory=HarrisParams)
    tilt: TiltParams = field(default_factory=TiltParams)
    block_size: int = 60
    patch_size: int = 50
    # rank band for feature selection and the rank tolerance behind it
    rank_min: int = 2
    rank_max: int = 5
    rank_rel_tol: float = 0.03
    rank_inner_tol: float = 1e-4
    lowrank: bool = True
    warm_start: bool = True
    select_query: bool = True
    select_database: bool = False
    tree_k: int = 8
    tree_depth: int = 3
    seed: int = 0
    radius_m: float = 50.0
    threads: int | None = None

    def validate(self):
        try:
            self.harris.validate()
            self.tilt.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.block_size < 20:
            raise ConfigError("block_size must be at least 20")
        if self.patch_size < 32:
            raise ConfigError("patch_size must be at least 32")
        if not 0 <= self.rank_min <= self.rank_max:
            raise ConfigError(f"rank band [{self.rank_min}, {self.rank_max}] is empty or negative")
        if not 0 < self.rank_rel_tol < 1 or not self.rank_inner_tol > 0:
            raise ConfigError("rank tolerances must be positive (rel_tol below 1)")
        if self.tree_k < 2 or self.tree_depth < 1:
            raise ConfigError("tree needs k >= 2 and depth >= 1")
        if not (self.radius_m > 0 and math.isfinite(self.radius_m)):
            raise ConfigError("radius_m must be positive")
        if self.threads is not None and self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        nested = {"harris": HarrisParams, "tilt": TiltParams}
        kwargs = {}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for name, value in data.items():
            if name in nested:
                sub = nested[name]
                sub_known = {f.name for f in dataclasses.fields(sub)}
                if not isinstance(value, dict) or set(value) - sub_known:
                    raise ConfigError(f"bad '{name}' section")
                value = sub(**value)
            kwargs[name] = value
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cfg.validate()

    @classmethod
    def load(cls, path):
        if path is None:
            return cls().validate()
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)
