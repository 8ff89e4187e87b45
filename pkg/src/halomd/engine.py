"""
The MD main loop.

Per step: evaluate every force provider (the decomposed provider rebuilds its
virtual decomposition inside), sum their forces, advance with leap-frog and
keep a frame at the output cadence. Velocities live at half steps: an atom
set entering `leapfrog_step` carries v(t - dt/2) and leaves with v(t + dt/2).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .classical import LJParams, evaluate_classical
from .decomp import MASKED_REDUCTION, CollectiveLedger, DDResult, dd_evaluate, scheme_name
from .deeppot import DPModel, evaluate_dp
from .exceptions import SimulationError
from .neighbor import FULL, HALF, build_neighbor_list
from .system import AtomSet, SimBox, wrap_position
from .trace import DRIVER_RANK, Phase, StepTrace, parallel_step_seconds

logger = logging.getLogger(__name__)

CLASSICAL = "classical"
DP_SINGLE = "dp_single"
DP_DD = "dp_dd"
MIXED = "mixed"
POTENTIALS = (CLASSICAL, DP_SINGLE, DP_DD, MIXED)

SECONDS_PER_DAY = 86400.0


@dataclass(frozen=True)
class MDConfig:
    """
    Run settings. `nn_species` selects the NN group by species (None means
    every atom); it only matters for the mixed potential.
    """

    dt: float = 0.002
    n_steps: int = 0
    potential: str = CLASSICAL
    scheme: str = MASKED_REDUCTION
    n_ranks: int = 1
    workers: int = 1
    nn_species: Optional[Tuple[int, ...]] = None
    dd_nn: bool = False
    output_every: int = 100
    seed: Optional[int] = 0

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.potential not in POTENTIALS:
            raise ValueError(f"potential must be one of {POTENTIALS}, got {self.potential!r}")
        if self.output_every < 1 or self.n_ranks < 1 or self.workers < 1:
            raise ValueError("output_every, n_ranks and workers must be positive")
        object.__setattr__(self, "scheme", scheme_name(self.scheme))
        if self.nn_species is not None:
            object.__setattr__(self, "nn_species", tuple(int(s) for s in self.nn_species))


class ForceProvider(Protocol):
    """Anything that turns a configuration into an energy and per-atom forces"""

    name: str

    def evaluate(
        self, atoms: AtomSet, box: SimBox, step: int, trace: StepTrace, ledger: CollectiveLedger
    ) -> Tuple[float, np.ndarray]:
        """Energy and forces in the order of `atoms`"""


@dataclass
class ClassicalProvider:
    """Lennard-Jones over a half neighbor list"""

    lj: LJParams
    name: str = CLASSICAL

    def evaluate(
        self, atoms: AtomSet, box: SimBox, step: int, trace: StepTrace, ledger: CollectiveLedger
    ) -> Tuple[float, np.ndarray]:
        with trace.timed(DRIVER_RANK, Phase.CLASSICAL_MD, step):
            nlist = build_neighbor_list(atoms, box, self.lj.rc, HALF)
            return evaluate_classical(atoms, nlist, self.lj)


@dataclass
class DPProvider:
    """The deep potential on the whole system, one domain"""

    model: DPModel
    name: str = DP_SINGLE

    def evaluate(
        self, atoms: AtomSet, box: SimBox, step: int, trace: StepTrace, ledger: CollectiveLedger
    ) -> Tuple[float, np.ndarray]:
        with trace.timed(0, Phase.NEIGHBOR_BUILD, step):
            nlist = build_neighbor_list(atoms, box, self.model.rc, FULL)
        with trace.timed(0, Phase.INFERENCE, step):
            result = evaluate_dp(atoms, nlist, self.model)
        return result.energy, result.forces


@dataclass
class DDProvider:
    """The deep potential under the virtual domain decomposition"""

    model: DPModel
    n_ranks: int
    scheme: str = MASKED_REDUCTION
    workers: int = 1
    name: str = DP_DD
    last: Optional[DDResult] = field(default=None, repr=False, compare=False)

    def evaluate(
        self, atoms: AtomSet, box: SimBox, step: int, trace: StepTrace, ledger: CollectiveLedger
    ) -> Tuple[float, np.ndarray]:
        result = dd_evaluate(atoms, box, self.model, self.n_ranks, self.scheme, self.workers, ledger, trace, step)
        self.last = result
        return result.energy, result.forces


@dataclass
class GroupProvider:
    """
    Restrict a provider to the atoms whose species is (or, with
    `invert`, is not) in `species`. Atoms outside the group feel nothing
    from it and exert nothing on it.
    """

    inner: ForceProvider
    species: Tuple[int, ...]
    invert: bool = False
    name: str = field(default="")

    def __post_init__(self) -> None:
        if not self.name:
            self.name = f"{self.inner.name}[{'not ' if self.invert else ''}species {list(self.species)}]"

    def select(self, atoms: AtomSet) -> np.ndarray:
        """Boolean mask of the group"""
        mask = np.isin(atoms.species, self.species)
        return ~mask if self.invert else mask

    def evaluate(
        self, atoms: AtomSet, box: SimBox, step: int, trace: StepTrace, ledger: CollectiveLedger
    ) -> Tuple[float, np.ndarray]:
        mask = self.select(atoms)
        forces = np.zeros((len(atoms), 3))
        if not np.any(mask):
            return 0.0, forces
        energy, group_forces = self.inner.evaluate(atoms.subset(mask), box, step, trace, ledger)
        forces[mask] = group_forces
        return energy, forces


def build_providers(
    config: MDConfig, lj: Optional[LJParams] = None, model: Optional[DPModel] = None
) -> List[ForceProvider]:
    """The providers a configuration asks for"""
    if config.potential == CLASSICAL:
        return [ClassicalProvider(lj or LJParams())]
    if model is None:
        raise ValueError(f"potential {config.potential!r} needs a model")
    dd = DDProvider(model, config.n_ranks, config.scheme, config.workers)
    if config.potential == DP_SINGLE:
        return [DPProvider(model)]
    if config.potential == DP_DD:
        return [dd]
    if config.nn_species is None:
        raise ValueError("the mixed potential needs nn_species")
    nn: ForceProvider = dd if config.dd_nn else DPProvider(model)
    return [
        GroupProvider(ClassicalProvider(lj or LJParams()), config.nn_species, invert=True),
        GroupProvider(nn, config.nn_species),
    ]


def leapfrog_step(atoms: AtomSet, forces: np.ndarray, dt: float, box: Optional[SimBox] = None) -> AtomSet:
    """
    v(t + dt/2) = v(t - dt/2) + F/m · dt, then r(t + dt) = r(t) + v(t + dt/2) · dt,
    wrapped into `box` when one is given

    >>> atoms = AtomSet([0], [0], [[0.0, 0.0, 0.0]], velocities=[[1.0, 0.0, 0.0]])
    >>> leapfrog_step(atoms, np.zeros((1, 3)), 0.5).positions.tolist()
    [[0.5, 0.0, 0.0]]
    """
    v = atoms.velocities + forces / atoms.masses[:, None] * dt
    r = atoms.positions + v * dt
    if box is not None:
        r = wrap_position(r, box)
    return replace(atoms, positions=r, velocities=v)


def temperature(atoms: AtomSet) -> float:
    """Instantaneous temperature with 3N - 3 degrees of freedom"""
    dof = 3 * len(atoms) - 3
    return 2.0 * atoms.kinetic_energy() / dof if dof > 0 else 0.0


def _kinetic(masses: np.ndarray, v: np.ndarray) -> float:
    return float(0.5 * np.sum(masses[:, None] * v * v))


@dataclass
class RunSummary:
    """Wall time, throughput and cost breakdown of a run"""

    n_steps: int
    dt: float
    n_atoms: int
    potential: str
    elapsed: float
    phase_seconds: dict
    modeled_step_seconds: float
    ledger: dict

    @property
    def throughput(self) -> float:
        """Reduced time units simulated per wall-clock day"""
        return throughput(self)

    def to_dict(self) -> dict:
        """JSON-ready form"""
        return {
            "n_steps": self.n_steps,
            "dt": self.dt,
            "n_atoms": self.n_atoms,
            "potential": self.potential,
            "elapsed_seconds": self.elapsed,
            "throughput_time_units_per_day": self.throughput if self.elapsed > 0 else None,
            "phase_seconds": self.phase_seconds,
            "modeled_step_seconds": self.modeled_step_seconds,
            "collectives": self.ledger,
        }


def throughput(summary: RunSummary) -> float:
    """
    n_steps · dt / elapsed seconds · 86400

    >>> s = RunSummary(1000, 0.001, 1, "classical", 86.4, {}, 0.0, {})
    >>> round(throughput(s), 9)
    1000.0
    """
    if summary.elapsed <= 0:
        raise ValueError("elapsed time must be positive")
    return summary.n_steps * summary.dt / summary.elapsed * SECONDS_PER_DAY


@dataclass
class MDResult:
    """Trajectory frames, per-step energies, timing spans and collectives"""

    frames: List[AtomSet]
    frame_steps: List[int]
    energies: pd.DataFrame
    trace: StepTrace
    ledger: CollectiveLedger
    summary: RunSummary


def _evaluate_all(
    providers: Sequence[ForceProvider],
    atoms: AtomSet,
    box: SimBox,
    step: int,
    trace: StepTrace,
    ledger: CollectiveLedger,
) -> Tuple[float, np.ndarray]:
    energy = 0.0
    forces = np.zeros((len(atoms), 3))
    for provider in providers:
        e, f = provider.evaluate(atoms, box, step, trace, ledger)
        if not (np.isfinite(e) and np.all(np.isfinite(f))):
            raise SimulationError(step, provider.name)
        energy += e
        forces += f
    return energy, forces


def run_md(
    box: SimBox,
    atoms: AtomSet,
    config: MDConfig,
    providers: Sequence[ForceProvider],
) -> MDResult:
    """
    Integrate `config.n_steps` leap-frog steps.

    Energies are reported at whole steps, with the kinetic energy averaged
    over the two adjacent half steps; the last step has no following half
    step and is not reported. With `n_steps == 0` nothing is evaluated: the
    result holds the initial frame and an empty trace.
    """
    trace = StepTrace()
    ledger = CollectiveLedger()
    frames, frame_steps = [atoms], [0]
    rows = []
    masses = atoms.masses

    start = time.perf_counter()
    energy, forces = 0.0, np.zeros((len(atoms), 3))
    if config.n_steps:
        energy, forces = _evaluate_all(providers, atoms, box, 0, trace, ledger)
    for step in range(config.n_steps):
        with trace.timed(DRIVER_RANK, Phase.INTEGRATE, step):
            v_before = atoms.velocities
            atoms = leapfrog_step(atoms, forces, config.dt, box)
            kinetic = 0.5 * (_kinetic(masses, v_before) + _kinetic(masses, atoms.velocities))
            momentum = np.sum(masses[:, None] * atoms.velocities, axis=0)
        rows.append((step, step * config.dt, energy, kinetic, energy + kinetic, *momentum.tolist()))
        energy, forces = _evaluate_all(providers, atoms, box, step + 1, trace, ledger)
        if (step + 1) % config.output_every == 0:
            frames.append(atoms)
            frame_steps.append(step + 1)
            logger.info("step %d: potential %.6g kinetic %.6g", step + 1, energy, kinetic)
    elapsed = time.perf_counter() - start

    modeled = parallel_step_seconds(trace)
    df = trace.to_frame()
    summary = RunSummary(
        n_steps=config.n_steps,
        dt=config.dt,
        n_atoms=len(atoms),
        potential=config.potential,
        elapsed=elapsed,
        phase_seconds={k: float(v) for k, v in df.groupby("phase")["seconds"].sum().items()} if len(df) else {},
        modeled_step_seconds=float(modeled.mean()) if len(modeled) else 0.0,
        ledger=ledger.summary(),
    )
    energies = pd.DataFrame(rows, columns=["step", "time", "potential", "kinetic", "total", "px", "py", "pz"])
    return MDResult(frames, frame_steps, energies, trace, ledger, summary)


def equilibrate(
    box: SimBox,
    atoms: AtomSet,
    providers: Sequence[ForceProvider],
    target_temperature: float,
    n_steps: int,
    dt: float = 0.002,
    rescale_every: int = 10,
) -> AtomSet:
    """
    Short run that rescales velocities to `target_temperature` every
    `rescale_every` steps; returns the final state with rescaling applied
    one last time.
    """
    if target_temperature < 0:
        raise ValueError("target temperature must be non-negative")
    trace, ledger = StepTrace(), CollectiveLedger()

    def rescaled(a: AtomSet) -> AtomSet:
        t = temperature(a)
        return replace(a, velocities=a.velocities * np.sqrt(target_temperature / t)) if t > 0 else a

    atoms = rescaled(atoms)
    for step in range(n_steps):
        _, forces = _evaluate_all(providers, atoms, box, step, trace, ledger)
        atoms = leapfrog_step(atoms, forces, dt, box)
        if (step + 1) % rescale_every == 0:
            atoms = rescaled(atoms)
    atoms = rescaled(atoms)
    logger.info("equilibrated %d steps at T=%.3g", n_steps, target_temperature)
    return atoms
