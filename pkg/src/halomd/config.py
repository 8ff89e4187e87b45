"""
Run configuration: one JSON document, one dataclass per section.

    {
      "seed": 0,
      "system":   {...},   # SystemConfig
      "lj":       {...},   # LJConfig
      "model":    {...},   # ModelConfig
      "md":       {...},   # MDSection
      "train":    {...},   # TrainSection
      "validate": {...},   # ValidateSection
      "sweep":    {...},   # SweepSection
      "gyrate":   {...}    # GyrateSection
    }

Every key is optional. Unknown keys are an error, reported together with
their dotted paths. Command-line flags are applied on top with
`RunConfig.with_overrides`.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, TypeVar

from .classical import LJParams
from .decomp import MASKED_REDUCTION, SCHEMES, scheme_name
from .deeppot import DPConfig
from .engine import CLASSICAL, MDConfig
from .exceptions import ConfigError
from .training import TrainingParams
from .util import PathLike, atomic_write_text, sha256_file

logger = logging.getLogger(__name__)

T = TypeVar("T")


@dataclass
class SystemConfig:
    """Initial configuration: a simple cubic lattice, or a frame of an XYZ file"""

    n_per_axis: int = 6
    density: float = 0.8
    species_pattern: Tuple[int, ...] = (0,)
    nn_species: Optional[Tuple[int, ...]] = None
    temperature: float = 1.0
    equilibrate_steps: int = 200
    xyz: Optional[str] = None


@dataclass
class LJConfig:
    """Lennard-Jones parameters"""

    epsilon: float = 1.0
    sigma: float = 1.0
    rc: float = 2.5
    energy_shift: bool = True

    def params(self) -> LJParams:
        """As `LJParams`"""
        return LJParams(self.epsilon, self.sigma, self.rc, self.energy_shift)


@dataclass
class ModelConfig:
    """Model hyperparameters; `path` names a trained model file to load instead"""

    rc: float = 2.0
    rcs: float = 1.5
    n_max: int = 64
    n_types: int = 1
    type_dim: int = 4
    embed_widths: Tuple[int, ...] = (8, 16)
    n_attn: int = 0
    attn_dim: int = 16
    m_reduced: int = 4
    fit_widths: Tuple[int, ...] = (32, 32)
    path: Optional[str] = None

    def dp_config(self, seed: int) -> DPConfig:
        """As `DPConfig`, initialized from `seed`"""
        kwargs = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "path"}
        return DPConfig(seed=seed, **kwargs)


@dataclass
class MDSection:
    """Integration settings"""

    dt: float = 0.002
    n_steps: int = 1000
    potential: str = CLASSICAL
    scheme: str = MASKED_REDUCTION
    n_ranks: int = 1
    workers: int = 1
    dd_nn: bool = False
    output_every: int = 100

    def md_config(self, seed: int, nn_species: Optional[Tuple[int, ...]]) -> MDConfig:
        """As `MDConfig`"""
        return MDConfig(
            dt=self.dt,
            n_steps=self.n_steps,
            potential=self.potential,
            scheme=self.scheme,
            n_ranks=self.n_ranks,
            workers=self.workers,
            nn_species=nn_species,
            dd_nn=self.dd_nn,
            output_every=self.output_every,
            seed=seed,
        )


@dataclass
class TrainSection:
    """Oracle data generation and optimizer settings"""

    n_frames: int = 12
    stride: int = 20
    temperature: float = 1.0
    valid_fraction: float = 0.25
    lr0: float = 0.01
    decay_rate: float = 0.5
    decay_epochs: int = 100
    epochs: int = 300
    batch_size: int = 2
    w_energy: float = 1.0
    w_force: float = 1.0
    fd_step: float = TrainingParams.fd_step
    log_every: int = 25

    def training_params(self, seed: int) -> TrainingParams:
        """As `TrainingParams`"""
        return TrainingParams(
            lr0=self.lr0,
            decay_rate=self.decay_rate,
            decay_epochs=self.decay_epochs,
            epochs=self.epochs,
            batch_size=self.batch_size,
            w_energy=self.w_energy,
            w_force=self.w_force,
            seed=seed,
            fd_step=self.fd_step,
            log_every=self.log_every,
        )


@dataclass
class ValidateSection:
    """Random-configuration comparison of decomposed and single-domain evaluation"""

    n_configs: int = 50
    min_atoms: int = 16
    max_atoms: int = 256
    box_length: float = 12.0
    min_separation: float = 0.8
    ranks: Tuple[int, ...] = (1, 2, 3, 4, 8)
    schemes: Tuple[str, ...] = SCHEMES
    energy_tol: float = 1e-10
    force_tol: float = 1e-9


@dataclass
class SweepSection:
    """Simulated-rank scaling sweep"""

    mode: str = "strong"
    ranks: Tuple[int, ...] = (1, 2, 4, 8)
    reference: Optional[int] = None
    n_steps: int = 5
    repeats: int = 1
    # also time the classical potential on every system and report the DP overhead
    compare_classical: bool = False


@dataclass
class GyrateSection:
    """Gyration radii of a group along a trajectory"""

    group: Optional[Tuple[int, ...]] = None
    species: Optional[Tuple[int, ...]] = None
    window: int = 10
    band: Optional[float] = None


_SECTIONS: Dict[str, type] = {
    "system": SystemConfig,
    "lj": LJConfig,
    "model": ModelConfig,
    "md": MDSection,
    "train": TrainSection,
    "validate": ValidateSection,
    "sweep": SweepSection,
    "gyrate": GyrateSection,
}
_TOP_LEVEL = {"seed", *_SECTIONS}


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Check `value` against the type of a field's default"""
    if value is None:
        return None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple) or isinstance(value, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _section(cls: Type[T], data: Any, name: str, unknown: List[str]) -> T:
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown.extend(f"{name}.{key}" for key in data if key not in fields)
    defaults = cls()
    kwargs = {
        key: _coerce(value, getattr(defaults, key), f"{name}.{key}")
        for key, value in data.items()
        if key in fields
    }
    return cls(**kwargs)


@dataclass
class RunConfig:
    """The resolved configuration of one command"""

    seed: int = 0
    system: SystemConfig = field(default_factory=SystemConfig)
    lj: LJConfig = field(default_factory=LJConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    md: MDSection = field(default_factory=MDSection)
    train: TrainSection = field(default_factory=TrainSection)
    validate: ValidateSection = field(default_factory=ValidateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    gyrate: GyrateSection = field(default_factory=GyrateSection)

    def __post_init__(self) -> None:
        try:
            self.md.scheme = scheme_name(self.md.scheme)
            self.validate.schemes = tuple(scheme_name(s) for s in self.validate.schemes)
        except ValueError as ex:
            raise ConfigError(str(ex)) from ex
        if self.sweep.mode not in ("strong", "weak"):
            raise ConfigError(f"sweep.mode must be 'strong' or 'weak', got {self.sweep.mode!r}")
        if not self.sweep.ranks or min(self.sweep.ranks) < 1:
            raise ConfigError("sweep.ranks must list positive rank counts")
        if not self.validate.ranks or min(self.validate.ranks) < 1:
            raise ConfigError("validate.ranks must list positive rank counts")
        if self.validate.min_atoms < 2 or self.validate.max_atoms < self.validate.min_atoms:
            raise ConfigError("need 2 <= validate.min_atoms <= validate.max_atoms")

    @classmethod
    def from_dict(cls, d: Any) -> RunConfig:
        """
        Build from a parsed JSON document

        >>> RunConfig.from_dict({"md": {"n_steps": 5}}).md.n_steps
        5
        >>> RunConfig.from_dict({"md": {"nsteps": 5}, "extra": 1})
        Traceback (most recent call last):
        ...
        halomd.exceptions.ConfigError: unknown configuration keys: extra, md.nsteps
        """
        if not isinstance(d, dict):
            raise ConfigError("the configuration must be a JSON object")
        unknown = [key for key in d if key not in _TOP_LEVEL]
        sections = {name: _section(kind, d.get(name, {}), name, unknown) for name, kind in _SECTIONS.items()}
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(sorted(unknown))}")
        seed = _coerce(d.get("seed", 0), 0, "seed")
        return cls(seed=seed, **sections)  # type: ignore[arg-type]

    def to_dict(self) -> dict:
        """JSON-ready form; `from_dict(to_dict())` gives an equal config"""
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_overrides(
        self,
        seed: Optional[int] = None,
        workers: Optional[int] = None,
        scheme: Optional[str] = None,
        ranks: Optional[Sequence[int]] = None,
    ) -> RunConfig:
        """
        Apply command-line flags; a flag that is given wins over the file.
        `ranks` sets the rank list of both sweeps and validation and, when it
        names a single count, the MD rank count.
        """
        d = self.to_dict()
        if seed is not None:
            d["seed"] = seed
        if workers is not None:
            d["md"]["workers"] = workers
        if scheme is not None:
            d["md"]["scheme"] = scheme
            d["validate"]["schemes"] = [scheme]
        if ranks is not None:
            ranks = [int(r) for r in ranks]
            d["sweep"]["ranks"] = ranks
            d["validate"]["ranks"] = ranks
            if len(ranks) == 1:
                d["md"]["n_ranks"] = ranks[0]
        return RunConfig.from_dict(d)


def load_config(path: Optional[PathLike]) -> RunConfig:
    """Read a JSON configuration file; no path means all defaults"""
    if path is None:
        return RunConfig()
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as ex:
        raise ConfigError(f"{path}: line {ex.lineno}: {ex.msg}") from ex
    except OSError as ex:
        raise ConfigError(f"{path}: {ex.strerror}") from ex
    logger.debug("loaded configuration from %s", path)
    return RunConfig.from_dict(data)


@dataclass
class RunManifest:
    """
    What a command did: its resolved configuration and seed, where it wrote,
    and the SHA-256 of every artifact.
    """

    command: str
    config_path: Optional[str]
    config: dict
    seed: int
    out_dir: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    passed: bool = True

    def add(self, path: PathLike) -> Path:
        """Record the checksum of a written artifact"""
        path = Path(path)
        self.artifacts[path.name] = sha256_file(path)
        return path

    def to_dict(self) -> dict:
        """JSON-ready form"""
        return dataclasses.asdict(self)

    def write(self, path: Optional[PathLike] = None) -> Path:
        """Write `manifest.json` into the output directory"""
        target = Path(path) if path is not None else Path(self.out_dir) / "manifest.json"
        return atomic_write_text(target, json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: PathLike) -> RunManifest:
        """Read a manifest written by `write`"""
        with open(path, encoding="utf-8") as f:
            d = json.load(f)
        try:
            return cls(**d)
        except TypeError as ex:
            raise ConfigError(f"{path}: not a run manifest") from ex
