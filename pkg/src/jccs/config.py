"""Pipeline configuration: one YAML file, every tunable with a named key."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import GbtParams
from .grid import builtin_network, load_network
from .neural import TrainConfig
from .uncertainty import OmegaSpec, SamplingBox

BUILTIN_PREFIX = "builtin:"


class ConfigError(ValueError):
    pass


@dataclass
class MlpSection:
    hidden: list[int]
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class SolverSection:
    gap: float = 1e-6
    node_limit: int = 200_000
    time_limit: float = 600.0
    leaf_unstable: int = 12


@dataclass
class BenchmarkSection:
    b1: bool = True
    b1_saa: bool = True
    b3: bool = True
    beta: float = 0.05
    saa_scenarios: int = 100


@dataclass
class PipelineConfig:
    network: str = "builtin:ieee33"
    case: int = 1
    omega: dict | None = None  # explicit OmegaSpec; overrides ``case``
    sampling: dict = field(default_factory=lambda: dataclasses.asdict(SamplingBox()))
    n_historical: int = 10_000
    K: int = 100
    N_omega: int = 1000
    gbt: GbtParams = field(default_factory=GbtParams)
    quantile_mlp: MlpSection = field(default_factory=lambda: MlpSection([25, 25, 25]))
    loss_mlp: MlpSection = field(default_factory=lambda: MlpSection([10, 10, 10]))
    epsilons: list[float] = field(default_factory=lambda: [0.05, 0.1, 0.15, 0.2])
    demand_scales: list[float] = field(default_factory=lambda: [1.0])
    solver: SolverSection = field(default_factory=SolverSection)
    benchmarks: BenchmarkSection = field(default_factory=BenchmarkSection)
    mc_samples: int = 10_000
    seed: int = 0
    output_dir: str = "out"
    base_dir: str = field(default=".", repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.case not in (1, 2, 3):
            raise ConfigError("case must be 1, 2 or 3")
        if not self.epsilons or any(not 0 < e < 1 for e in self.epsilons):
            raise ConfigError("risk levels must lie in (0, 1)")
        if len(set(self.epsilons)) != len(self.epsilons):
            raise ConfigError("risk levels must be distinct")
        for name in ("n_historical", "K", "N_omega", "mc_samples"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.demand_scales or any(not s > 0 for s in self.demand_scales):
            raise ConfigError("demand scales must be positive")
        if self.benchmarks.saa_scenarios <= 0 or not 0 < self.benchmarks.beta < 1:
            raise ConfigError("benchmark scenario settings out of range")
        if not self.network.startswith(BUILTIN_PREFIX) and not self.network_path().exists():
            raise ConfigError(f"network file {self.network_path()} does not exist")
        try:
            self.omega_spec()
            self.sampling_box()
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(str(exc)) from None

    # -- derived objects ----------------------------------------------------
    def network_path(self) -> Path:
        p = Path(self.network)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def load_network(self):
        if self.network.startswith(BUILTIN_PREFIX):
            return builtin_network(self.network[len(BUILTIN_PREFIX):])
        return load_network(self.network_path())

    def omega_spec(self) -> OmegaSpec:
        return OmegaSpec.from_dict(self.omega) if self.omega else OmegaSpec.case(self.case)

    def sampling_box(self) -> SamplingBox:
        return SamplingBox(**self.sampling)

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> PipelineConfig:
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "gbt" in d:
                d["gbt"] = GbtParams(**d["gbt"])
            for key in ("quantile_mlp", "loss_mlp"):
                if key in d:
                    sec = dict(d[key])
                    sec["train"] = TrainConfig(**sec.get("train", {}))
                    d[key] = MlpSection(**sec)
            if "solver" in d:
                d["solver"] = SolverSection(**d["solver"])
            if "benchmarks" in d:
                d["benchmarks"] = BenchmarkSection(**d["benchmarks"])
            if "epsilons" in d:
                d["epsilons"] = [float(e) for e in d["epsilons"]]
            if "demand_scales" in d:
                d["demand_scales"] = [float(s) for s in d["demand_scales"]]
            return cls(**d, base_dir=str(base_dir))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        try:
            data = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data or {}, base_dir=path.parent)

    def replace(self, **changes) -> PipelineConfig:
        return dataclasses.replace(self, **changes)

    # -- artifact naming ------------------------------------------------------
    _STAGE_KEYS = {
        "data": ("network", "case", "omega", "sampling", "n_historical", "seed"),
        "models": ("gbt", "K", "N_omega", "quantile_mlp", "loss_mlp", "epsilons"),
    }

    def stage_hash(self, stage: str) -> str:
        """Short digest of the settings a stage's artifacts depend on."""
        d = self.to_dict()
        if self.network.startswith(BUILTIN_PREFIX):
            d["network"] = self.network
        else:
            d["network"] = hashlib.sha256(self.network_path().read_bytes()).hexdigest()
        keys = list(self._STAGE_KEYS["data"])
        if stage == "models":
            keys += self._STAGE_KEYS["models"]
        elif stage != "data":
            raise ValueError(f"unknown stage {stage!r}")
        blob = json.dumps({k: d[k] for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]
