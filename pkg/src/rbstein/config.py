"""Simulation configuration and config-file loading (JSON or YAML)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

POLICIES = ("random", "myopic", "ts-mcr")
OBSERVABILITY = ("partial", "full")


@dataclass(frozen=True)
class EnvSource:
    """Where the arms' passive dynamics come from.

    ``synthetic``: every arm is a controlled-restarts arm with persistence drawn
    uniformly from ``[p_low, p_high]``.
    ``fitted``: every arm shares the given passive ``matrix`` (and gap model ``eta``).
    ``synthetic-fitted``: records are generated from synthetic arms, ingested, and
    the pooled fit becomes the shared passive matrix.
    """

    kind: str = "synthetic"
    p_low: float | None = None
    p_high: float = 0.95
    matrix: list | None = None
    eta: list | None = None
    # synthetic-fitted: size of the generated record set
    n_entities: int = 20
    n_days: int = 200
    p_missing: float = 0.3
    env_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("synthetic", "fitted", "synthetic-fitted"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.kind == "fitted" and self.matrix is None:
            raise ValueError("fitted environment needs a passive matrix")


@dataclass(frozen=True)
class SimConfig:
    n_arms: int = 10
    budget: int = 1
    horizon: int = 2000
    n_states: int = 2
    batch: int = 10
    n_particles: int = 10
    n_svgd: int = 10
    policy: str = "ts-mcr"
    k_family: str = "ztpoisson"
    p_gap: float = 0.0
    k_max: int = 50
    seeds: tuple = tuple(range(20))
    env: EnvSource = field(default_factory=EnvSource)
    observability: str = "partial"
    lr: float = 0.05
    kernel: str = "imq"
    bandwidth: float | str = 1.0
    burn_in: int | None = None
    myopic_dynamics: str = "true"
    estimate: bool = True
    tau_max: int = 50
    init_noise: float = 0.1
    init: str = "prior"

    def __post_init__(self):
        if isinstance(self.env, dict):
            object.__setattr__(self, "env", EnvSource(**self.env))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not 0 <= self.budget <= self.n_arms:
            raise ValueError(f"budget M={self.budget} must lie in [0, N={self.n_arms}]")
        for name in ("n_arms", "horizon", "n_states", "batch", "n_particles", "k_max", "tau_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_svgd < 0:
            raise ValueError("n_svgd must be nonnegative")
        if self.horizon % 2:
            raise ValueError("horizon must be even (burn-in is half the horizon)")
        if self.n_states < 2:
            raise ValueError("need at least 2 states")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.observability not in OBSERVABILITY:
            raise ValueError(f"observability must be one of {OBSERVABILITY}")
        if not 0 <= self.p_gap <= 1:
            raise ValueError("p_gap must lie in [0, 1]")
        if self.myopic_dynamics not in ("true", "estimated"):
            raise ValueError("myopic_dynamics must be 'true' or 'estimated'")
        if not self.seeds:
            raise ValueError("need at least one seed")

    @property
    def burn(self) -> int:
        return self.horizon // 2 if self.burn_in is None else int(self.burn_in)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def config_from_dict(d: dict) -> SimConfig:
    known = {f.name for f in fields(SimConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return SimConfig(**d)


def load_config(path) -> SimConfig:
    """Read a JSON (``.json``) or YAML file into a :class:`SimConfig`."""
    path = Path(path)
    text = path.read_text()
    d = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return config_from_dict(d or {})


def load_mapping(path) -> dict:
    path = Path(path)
    text = path.read_text()
    return (json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)) or {}
