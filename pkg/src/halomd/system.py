"""
Periodic simulation cell, particle state and structure IO.

Everything is in reduced Lennard-Jones units (sigma = epsilon = m = 1).
Spatial binning and ownership use half-open intervals [lo, hi).

Trajectories are extended XYZ written and read through `ase.io`. Every atom
is the dummy element X; the comment line carries the Lattice, pbc and the
frame index, and the columns carry positions, masses, momenta and two
integer arrays, `type_id` (species) and `global_id`.
"""

from __future__ import annotations

import itertools
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import ase.io
import numpy as np
from ase import Atoms

from .exceptions import MinimumImageError, ParseError
from .util import PathLike

logger = logging.getLogger(__name__)

Vector = Union[Sequence[float], np.ndarray]

TYPE_ARRAY = "type_id"
ID_ARRAY = "global_id"
FRAME_KEY = "frame"


@dataclass
class SimBox:
    """
    An orthorhombic simulation cell

    >>> SimBox.cubic(2.0).volume
    8.0
    """

    lengths: np.ndarray
    periodic: Tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self) -> None:
        self.lengths = np.array(self.lengths, dtype=np.float64).reshape(3)
        self.periodic = tuple(bool(p) for p in self.periodic)  # type: ignore[assignment]
        if len(self.periodic) != 3:
            raise ValueError("periodic needs one flag per axis")
        if not np.all(self.lengths > 0):
            raise ValueError(f"box lengths must be positive, got {self.lengths}")

    def __eq__(self, other):
        if not isinstance(other, SimBox):
            return NotImplemented
        return np.array_equal(self.lengths, other.lengths) and self.periodic == other.periodic

    @classmethod
    def cubic(cls, length: float, periodic: bool = True) -> SimBox:
        """A cube of edge `length`"""
        return cls(np.full(3, length), (periodic,) * 3)

    @property
    def volume(self) -> float:
        """Volume of the cell"""
        return float(np.prod(self.lengths))

    @property
    def periodic_mask(self) -> np.ndarray:
        """Periodic flags as a boolean array"""
        return np.array(self.periodic, dtype=bool)

    def check_cutoff(self, rc: float) -> None:
        """
        Raise `MinimumImageError` unless every periodic length is at least 2·rc

        >>> SimBox.cubic(4.0).check_cutoff(2.5)
        Traceback (most recent call last):
          ...
        halomd.exceptions.MinimumImageError: cutoff 2.5 exceeds half of periodic box length 4 on axis 0
        """
        for axis in range(3):
            if self.periodic[axis] and self.lengths[axis] < 2.0 * rc:
                raise MinimumImageError(
                    f"cutoff {rc:g} exceeds half of periodic box length "
                    f"{self.lengths[axis]:g} on axis {axis}"
                )


@dataclass
class AtomSet:
    """
    Particle state; all arrays share their first dimension.

    Positions of periodic axes are kept wrapped into [0, L) by the integrator.
    """

    global_ids: np.ndarray
    species: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray = field(default=None)  # type: ignore[assignment]
    masses: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.global_ids = np.array(self.global_ids, dtype=np.int64).reshape(-1)
        n = len(self.global_ids)
        self.species = np.array(self.species, dtype=np.int64).reshape(n)
        self.positions = np.array(self.positions, dtype=np.float64).reshape(n, 3)
        if self.velocities is None:
            self.velocities = np.zeros((n, 3))
        self.velocities = np.array(self.velocities, dtype=np.float64).reshape(n, 3)
        if self.masses is None:
            self.masses = np.ones(n)
        self.masses = np.array(self.masses, dtype=np.float64).reshape(n)
        if len(np.unique(self.global_ids)) != n:
            raise ValueError("global ids must be unique")
        if np.any(self.global_ids < 0):
            raise ValueError("global ids must be non-negative")
        if np.any(self.masses <= 0):
            raise ValueError("masses must be positive")

    def __len__(self) -> int:
        return len(self.global_ids)

    def __eq__(self, other):
        if not isinstance(other, AtomSet):
            return NotImplemented
        return (
            np.array_equal(self.global_ids, other.global_ids)
            and np.array_equal(self.species, other.species)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.velocities, other.velocities)
            and np.array_equal(self.masses, other.masses)
        )

    def subset(self, index: np.ndarray) -> AtomSet:
        """The atoms at `index` (integer or boolean array), as a new set"""
        return AtomSet(
            self.global_ids[index],
            self.species[index],
            self.positions[index],
            self.velocities[index],
            self.masses[index],
        )

    def with_positions(self, positions: np.ndarray) -> AtomSet:
        """A copy with new positions"""
        return replace(self, positions=np.array(positions, dtype=np.float64))

    def kinetic_energy(self) -> float:
        """Kinetic energy of the stored velocities"""
        return float(0.5 * np.sum(self.masses[:, None] * self.velocities**2))

    def momentum(self) -> np.ndarray:
        """Total linear momentum"""
        return np.sum(self.masses[:, None] * self.velocities, axis=0)


def minimum_image(d: Vector, box: SimBox) -> np.ndarray:
    """
    Shift each periodic component of displacement(s) `d` by a multiple of L
    so that |d_k| <= L_k / 2. Accepts a single vector or an (n, 3) array.

    >>> minimum_image([9.0, 0.0, 0.0], SimBox.cubic(10.0)).tolist()
    [-1.0, 0.0, 0.0]
    >>> [round(x, 9) for x in minimum_image([4.9, -5.1, 0.0], SimBox.cubic(10.0))]
    [4.9, 4.9, 0.0]
    """
    d = np.asarray(d, dtype=np.float64)
    lengths = np.where(box.periodic_mask, box.lengths, np.inf)
    shift = np.where(box.periodic_mask, np.round(d / box.lengths), 0.0)
    assert np.all(np.abs(d) <= 1.5 * lengths + 1e-12), "displacement beyond 1.5 box lengths"
    return d - shift * box.lengths


def wrap_position(r: Vector, box: SimBox) -> np.ndarray:
    """
    Wrap each periodic component of position(s) `r` into [0, L).

    >>> wrap_position([-0.5, 0.0, 0.0], SimBox.cubic(10.0)).tolist()
    [9.5, 0.0, 0.0]
    >>> wrap_position([10.0, 0.0, 0.0], SimBox.cubic(10.0)).tolist()
    [0.0, 0.0, 0.0]
    """
    r = np.asarray(r, dtype=np.float64)
    wrapped = np.mod(r, box.lengths)
    # np.mod can round a tiny negative value up to exactly L
    wrapped = np.where(wrapped >= box.lengths, wrapped - box.lengths, wrapped)
    return np.where(box.periodic_mask, wrapped, r)


def lattice_init(
    n_per_axis: int, density: float, species_pattern: Sequence[int] = (0,)
) -> Tuple[SimBox, AtomSet]:
    """
    A simple cubic lattice of n³ atoms at rest.

    >>> box, atoms = lattice_init(2, 1.0)
    >>> len(atoms), box.lengths.tolist()
    (8, [2.0, 2.0, 2.0])
    """
    if n_per_axis < 1:
        raise ValueError("n_per_axis must be at least 1")
    if density <= 0:
        raise ValueError("density must be positive")
    if not species_pattern:
        raise ValueError("species_pattern must not be empty")
    spacing = (1.0 / density) ** (1.0 / 3.0)
    cells = np.array(list(itertools.product(range(n_per_axis), repeat=3)), dtype=np.float64)
    n = len(cells)
    species = np.resize(np.asarray(species_pattern, dtype=np.int64), n)
    box = SimBox.cubic(n_per_axis * spacing)
    return box, AtomSet(np.arange(n), species, cells * spacing)


def random_configuration(
    n_atoms: int,
    box: SimBox,
    rng: np.random.Generator,
    n_species: int = 1,
    min_separation: float = 0.0,
    max_tries: int = 1000,
) -> AtomSet:
    """
    Uniformly random positions, rejecting insertions closer than
    `min_separation` to an already placed atom (minimum image).
    """
    positions = np.empty((n_atoms, 3))
    for i in range(n_atoms):
        for _ in range(max_tries):
            trial = rng.uniform(0.0, 1.0, 3) * box.lengths
            if i == 0 or min_separation <= 0.0:
                break
            d = minimum_image(positions[:i] - trial, box)
            if np.min(np.einsum("ij,ij->i", d, d)) >= min_separation**2:
                break
        else:
            raise ValueError(
                f"could not place atom {i} with separation {min_separation:g}; lower the density"
            )
        positions[i] = trial
    species = rng.integers(0, n_species, n_atoms)
    return AtomSet(np.arange(n_atoms), species, positions)


def assign_velocities(
    atoms: AtomSet, temperature: float, rng: np.random.Generator
) -> AtomSet:
    """Maxwell-Boltzmann velocities with zero total momentum"""
    v = rng.normal(0.0, 1.0, (len(atoms), 3)) * np.sqrt(temperature / atoms.masses)[:, None]
    if len(atoms) > 1:
        v -= np.sum(atoms.masses[:, None] * v, axis=0) / np.sum(atoms.masses)
    return replace(atoms, velocities=v)


def replicate(box: SimBox, atoms: AtomSet, reps: Sequence[int]) -> Tuple[SimBox, AtomSet]:
    """
    Tile the system `reps` times along each axis, growing the box accordingly.
    Replica k's ids are offset by k · (max id + 1).
    """
    reps = tuple(int(r) for r in reps)
    if len(reps) != 3 or min(reps) < 1:
        raise ValueError(f"invalid replication {reps}")
    stride = int(atoms.global_ids.max()) + 1 if len(atoms) else 0
    parts = []
    for k, cell in enumerate(itertools.product(*(range(r) for r in reps))):
        offset = np.asarray(cell, dtype=np.float64) * box.lengths
        parts.append(
            AtomSet(
                atoms.global_ids + k * stride,
                atoms.species,
                atoms.positions + offset,
                atoms.velocities,
                atoms.masses,
            )
        )
    merged = AtomSet(
        np.concatenate([p.global_ids for p in parts]),
        np.concatenate([p.species for p in parts]),
        np.concatenate([p.positions for p in parts]),
        np.concatenate([p.velocities for p in parts]),
        np.concatenate([p.masses for p in parts]),
    )
    return SimBox(box.lengths * np.asarray(reps), box.periodic), merged


def to_ase(atoms: AtomSet, box: SimBox, frame_index: int = 0) -> Atoms:
    """
    An `ase.Atoms` carrying the full state: every atom is the dummy element X,
    species and global ids travel as integer per-atom arrays
    """
    frame = Atoms(
        symbols=["X"] * len(atoms),
        positions=atoms.positions,
        cell=np.diag(box.lengths),
        pbc=box.periodic,
        masses=atoms.masses,
    )
    frame.set_velocities(atoms.velocities)
    frame.set_array(TYPE_ARRAY, atoms.species.astype(np.int64))
    frame.set_array(ID_ARRAY, atoms.global_ids.astype(np.int64))
    frame.info[FRAME_KEY] = int(frame_index)
    return frame


def from_ase(frame: Atoms, name: str = "<memory>") -> Tuple[SimBox, AtomSet, int]:
    """
    Back from `ase.Atoms`. Files written elsewhere get species numbered by
    element and ids 0..N-1.
    """
    cell = np.asarray(frame.cell)
    if not np.any(cell):
        raise ParseError(f"{name}: frame has no Lattice")
    if np.any(cell - np.diag(np.diag(cell))):
        raise ParseError(f"{name}: only orthorhombic lattices are supported")
    box = SimBox(np.diag(cell), tuple(bool(p) for p in frame.pbc))  # type: ignore[arg-type]
    n = len(frame)
    if TYPE_ARRAY in frame.arrays:
        species = frame.arrays[TYPE_ARRAY]
    else:
        species = np.unique(frame.numbers, return_inverse=True)[1]
    ids = frame.arrays[ID_ARRAY] if ID_ARRAY in frame.arrays else np.arange(n)
    velocities = frame.get_velocities() if "momenta" in frame.arrays else np.zeros((n, 3))
    atoms = AtomSet(ids, species, frame.positions, velocities, frame.get_masses())
    return box, atoms, int(frame.info.get(FRAME_KEY, 0))


def write_xyz(
    path: PathLike, atoms: AtomSet, frame_index: int = 0, box: Optional[SimBox] = None
) -> None:
    """Write one extended-XYZ frame; frame 0 truncates the file, later frames append"""
    if box is None:
        extent = np.ptp(atoms.positions, axis=0) if len(atoms) else np.zeros(3)
        box = SimBox(np.maximum(extent, 1.0), (False, False, False))
    ase.io.write(str(path), to_ase(atoms, box, frame_index), format="extxyz", append=frame_index > 0)


def write_trajectory(path: PathLike, frames: Sequence[AtomSet], box: SimBox) -> Path:
    """Write every frame into a fresh file that replaces `path` atomically"""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    images = [to_ase(frame, box, k) for k, frame in enumerate(frames)]
    ase.io.write(str(tmp), images, format="extxyz")
    os.replace(tmp, path)
    return path


def iter_xyz(path: PathLike) -> Iterator[Tuple[SimBox, AtomSet, int]]:
    """Yield (box, atoms, frame index) for every frame of an extended-XYZ file"""
    name = Path(path).name
    images = ase.io.iread(str(path), index=":", format="extxyz")
    for k in itertools.count():
        try:
            frame = next(images)
        except StopIteration:
            return
        except FileNotFoundError:
            raise
        except (ValueError, KeyError, IndexError, OSError, RuntimeError) as ex:
            raise ParseError(f"{name}: frame {k}: {ex}") from ex
        yield from_ase(frame, f"{name}: frame {k}")


def read_xyz(path: PathLike, frame: int = 0) -> AtomSet:
    """Read frame number `frame` (position in file, default first) as an `AtomSet`"""
    return read_xyz_frame(path, frame)[1]


def read_xyz_frame(path: PathLike, frame: int = 0) -> Tuple[SimBox, AtomSet]:
    """Like `read_xyz` but also return the frame's box"""
    for k, (box, atoms, _) in enumerate(iter_xyz(path)):
        if k == frame:
            return box, atoms
    raise ParseError(f"{Path(path).name} has no frame {frame}")
