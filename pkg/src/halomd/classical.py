"""
Lennard-Jones pair potential with a cutoff, the classical baseline.

A half list visits each pair once and scatters F_ij = -F_ji to both atoms;
a full list visits each pair from both ends with half the energy. Both give
the same energy and forces up to summation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from .exceptions import SingularityError
from .neighbor import FULL, HALF, NeighborList
from .system import AtomSet

# closer than this counts as overlapping atoms
OVERLAP_DISTANCE = 1e-6


@dataclass(frozen=True)
class LJParams:
    """Single-species Lennard-Jones parameters"""

    epsilon: float = 1.0
    sigma: float = 1.0
    rc: float = 2.5
    energy_shift: bool = True

    def __post_init__(self) -> None:
        if self.epsilon <= 0 or self.sigma <= 0:
            raise ValueError("epsilon and sigma must be positive")
        if self.rc <= self.sigma:
            raise ValueError("rc must exceed sigma")

    @property
    def cutoff_energy(self) -> float:
        """V(rc) of the unshifted potential"""
        sr6 = (self.sigma / self.rc) ** 6
        return 4.0 * self.epsilon * (sr6 * sr6 - sr6)


def lj_pair(r: Union[float, np.ndarray], p: LJParams) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pair energy and dV/dr; zero at and beyond the cutoff.

    >>> unshifted = LJParams(energy_shift=False)
    >>> [round(float(x), 6) for x in lj_pair(2.0, unshifted)]
    [-0.061523, 0.181641]
    >>> [round(float(x), 12) for x in lj_pair(2 ** (1 / 6), unshifted)]
    [-1.0, 0.0]
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise SingularityError("Lennard-Jones evaluated at r = 0")
    inside = r < p.rc
    sr6 = (p.sigma / r) ** 6
    energy = 4.0 * p.epsilon * (sr6 * sr6 - sr6)
    if p.energy_shift:
        energy = energy - p.cutoff_energy
    dv_dr = -24.0 * p.epsilon * (2.0 * sr6 * sr6 - sr6) / r
    return np.where(inside, energy, 0.0), np.where(inside, dv_dr, 0.0)


def evaluate_classical(
    atoms: AtomSet, nlist: NeighborList, p: LJParams
) -> Tuple[float, np.ndarray]:
    """
    Total LJ energy and per-atom forces over a half or full neighbor list.
    `nlist` must have been built for `atoms` with a cutoff of at least `p.rc`.
    """
    if nlist.built_from != len(atoms):
        raise ValueError("neighbor list was built for a different atom count")
    forces = np.zeros((len(atoms), 3))
    if not len(nlist):
        return 0.0, forces
    d = nlist.displacements(atoms.positions)
    r = np.sqrt(np.einsum("ij,ij->i", d, d))
    if np.any(r < OVERLAP_DISTANCE):
        k = int(np.argmin(r))
        raise SingularityError(
            f"atoms {atoms.global_ids[nlist.first[k]]} and "
            f"{atoms.global_ids[nlist.second[k]]} overlap (r = {r[k]:.3g})"
        )
    energy, dv_dr = lj_pair(r, p)
    # force on the center i; d points from i to j
    f_i = (dv_dr / r)[:, None] * d
    if nlist.mode == HALF:
        np.add.at(forces, nlist.first, f_i)
        np.add.at(forces, nlist.second, -f_i)
        return float(np.sum(energy)), forces
    assert nlist.mode == FULL
    np.add.at(forces, nlist.first, f_i)
    return float(0.5 * np.sum(energy)), forces
