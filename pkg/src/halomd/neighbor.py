"""
Cell lists and full/half neighbor lists within a cutoff.

Pairs carry an explicit integer image shift `s`, so the separation used
everywhere is ``(r_j + s * L) - r_i``. In full mode every pair is stored in
both directions; in half mode only the direction with ``j < i`` is kept.
Lists are rebuilt from scratch on every call (no Verlet skin).
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import List, Set, Tuple

import numpy as np

from .system import AtomSet, SimBox

logger = logging.getLogger(__name__)

FULL = "full"
HALF = "half"
MODES = (FULL, HALF)

_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


def pair_displacement(
    pos_i: np.ndarray, pos_j: np.ndarray, shift: np.ndarray, lengths: np.ndarray
) -> np.ndarray:
    """Separation ``(r_j + s * L) - r_i``; the one formula every builder uses"""
    return (pos_j + shift * lengths) - pos_i


def _squared_norm(d: np.ndarray) -> np.ndarray:
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


@dataclass
class CellList:
    """
    Atoms binned into a grid of cells at least `cell_size` wide.

    `order` lists atom indices grouped by linear cell index; the atoms of
    cell ``c`` are ``order[starts[c]:starts[c + 1]]``.
    """

    n_cells: np.ndarray
    widths: np.ndarray
    origin: np.ndarray
    cell_of_atom: np.ndarray
    order: np.ndarray
    starts: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        """Atoms per cell, indexed by linear cell index"""
        return np.diff(self.starts)

    @property
    def n_total(self) -> int:
        """Number of cells"""
        return int(np.prod(self.n_cells))

    def linear(self, cell: np.ndarray) -> int:
        """Linear (C-order) index of a cell triple"""
        return int(np.ravel_multi_index(tuple(int(c) for c in cell), tuple(self.n_cells)))

    def members(self, linear: int) -> np.ndarray:
        """Atom indices in the cell with linear index `linear`"""
        return self.order[self.starts[linear] : self.starts[linear + 1]]


def build_cell_list(atoms: AtomSet, box: SimBox, cell_size: float) -> CellList:
    """
    Bin atoms into cells with half-open intervals: an atom exactly on a cell
    boundary goes into the higher cell.

    Periodic axes span [0, L); non-periodic axes span the atoms' extent.
    An axis shorter than `cell_size` gets a single cell.

    >>> from halomd.system import lattice_init
    >>> box, atoms = lattice_init(2, 1.0)
    >>> build_cell_list(atoms, box, 1.0).counts.tolist()
    [1, 1, 1, 1, 1, 1, 1, 1]
    """
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    pos = atoms.positions
    periodic = box.periodic_mask
    if len(atoms):
        origin = np.where(periodic, 0.0, pos.min(axis=0))
        extent = np.where(periodic, box.lengths, pos.max(axis=0) - origin)
    else:
        origin = np.zeros(3)
        extent = box.lengths.copy()
    n_cells = np.floor(extent / cell_size).astype(np.int64)
    if np.any(periodic & (n_cells < 1)):
        logger.warning(
            "cell size %g exceeds a periodic box length %s; falling back to a single cell",
            cell_size,
            box.lengths,
        )
    n_cells = np.maximum(n_cells, 1)
    widths = np.where(periodic, extent / n_cells, np.maximum(extent / n_cells, cell_size))

    cell_of_atom = np.floor((pos - origin) / widths).astype(np.int64)
    cell_of_atom = np.clip(cell_of_atom, 0, n_cells - 1)
    linear = (cell_of_atom[:, 0] * n_cells[1] + cell_of_atom[:, 1]) * n_cells[2] + cell_of_atom[:, 2]
    order = np.argsort(linear, kind="stable")
    starts = np.searchsorted(linear[order], np.arange(int(np.prod(n_cells)) + 1))
    logger.debug("cell grid %s for %d atoms", n_cells.tolist(), len(atoms))
    return CellList(n_cells, widths, origin, cell_of_atom, order, starts)


@dataclass
class NeighborList:
    """
    Per-atom neighbors within `rc`, stored as flat sorted arrays of
    (center, neighbor, image shift) ordered by (center, neighbor, shift).
    """

    mode: str
    rc: float
    box: SimBox
    first: np.ndarray
    second: np.ndarray
    shifts: np.ndarray
    built_from: int
    starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.first = np.asarray(self.first, dtype=np.int64).reshape(-1)
        self.second = np.asarray(self.second, dtype=np.int64).reshape(-1)
        self.shifts = np.asarray(self.shifts, dtype=np.int64).reshape(-1, 3)
        self.starts = np.searchsorted(self.first, np.arange(self.built_from + 1))

    def __eq__(self, other):
        if not isinstance(other, NeighborList):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.built_from == other.built_from
            and np.array_equal(self.first, other.first)
            and np.array_equal(self.second, other.second)
            and np.array_equal(self.shifts, other.shifts)
        )

    def __len__(self) -> int:
        return len(self.first)

    def neighbor_arrays(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """Neighbor indices and shifts of atom `i`"""
        lo, hi = self.starts[i], self.starts[i + 1]
        return self.second[lo:hi], self.shifts[lo:hi]

    def neighbors(self, i: int) -> List[Tuple[int, Tuple[int, int, int]]]:
        """Neighbors of atom `i` as (index, shift) pairs"""
        js, ss = self.neighbor_arrays(i)
        return [(int(j), (int(s[0]), int(s[1]), int(s[2]))) for j, s in zip(js, ss)]

    def counts(self) -> np.ndarray:
        """Number of listed neighbors per atom"""
        return np.diff(self.starts)

    def displacements(self, positions: np.ndarray) -> np.ndarray:
        """Separation vectors of every listed pair"""
        return pair_displacement(
            positions[self.first], positions[self.second], self.shifts, self.box.lengths
        )

    def unordered_pairs(self) -> Set[Tuple[int, int, Tuple[int, int, int]]]:
        """Pairs as (larger index, smaller index, shift from larger to smaller)"""
        pairs = set()
        for i, j, s in zip(self.first.tolist(), self.second.tolist(), self.shifts.tolist()):
            if j < i:
                pairs.add((i, j, tuple(s)))
            else:
                pairs.add((j, i, tuple(-x for x in s)))
        return pairs  # type: ignore[return-value]


def _finish(
    parts: List[Tuple[np.ndarray, np.ndarray, np.ndarray]],
    mode: str,
    rc: float,
    box: SimBox,
    n_atoms: int,
) -> NeighborList:
    if parts:
        first = np.concatenate([p[0] for p in parts])
        second = np.concatenate([p[1] for p in parts])
        shifts = np.concatenate([p[2] for p in parts]).reshape(-1, 3)
    else:
        first = second = np.zeros(0, dtype=np.int64)
        shifts = np.zeros((0, 3), dtype=np.int64)
    if mode == HALF:
        keep = second < first
        first, second, shifts = first[keep], second[keep], shifts[keep]
    order = np.lexsort((shifts[:, 2], shifts[:, 1], shifts[:, 0], second, first))
    return NeighborList(mode, rc, box, first[order], second[order], shifts[order], n_atoms)


def _check_request(box: SimBox, rc: float, mode: str) -> None:
    if rc <= 0:
        raise ValueError("rc must be positive")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    box.check_cutoff(rc)


def build_neighbor_list(atoms: AtomSet, box: SimBox, rc: float, mode: str = FULL) -> NeighborList:
    """
    Neighbor list through a cell list of cell size `rc`.

    >>> from halomd.system import AtomSet, SimBox
    >>> atoms = AtomSet([0, 1], [0, 0], [[1.0, 1.0, 1.0], [1.5, 1.0, 1.0]])
    >>> nl = build_neighbor_list(atoms, SimBox.cubic(4.0), 1.0, "half")
    >>> nl.neighbors(0), nl.neighbors(1)
    ([], [(0, (0, 0, 0))])
    """
    _check_request(box, rc, mode)
    cells = build_cell_list(atoms, box, rc)
    pos = atoms.positions
    periodic = box.periodic_mask
    rc2 = rc * rc
    parts = []
    for lin in np.flatnonzero(cells.counts):
        ci = np.array(np.unravel_index(lin, tuple(cells.n_cells)))
        mi = cells.members(lin)
        seen = set()
        for off in _OFFSETS:
            cj = ci + off
            shift = np.where(periodic, np.floor_divide(cj, cells.n_cells), 0)
            if np.any(~periodic & ((cj < 0) | (cj >= cells.n_cells))):
                continue
            cj = np.where(periodic, np.mod(cj, cells.n_cells), cj)
            lin_j = cells.linear(cj)
            key = (lin_j, tuple(shift.tolist()))
            if key in seen:
                continue
            seen.add(key)
            mj = cells.members(lin_j)
            if not len(mj):
                continue
            d = pair_displacement(pos[mi][:, None, :], pos[mj][None, :, :], shift, box.lengths)
            keep = _squared_norm(d) < rc2
            if lin_j == lin and not np.any(shift):
                keep &= mi[:, None] != mj[None, :]
            ii, jj = np.nonzero(keep)
            if len(ii):
                parts.append((mi[ii], mj[jj], np.tile(shift, (len(ii), 1))))
    return _finish(parts, mode, rc, box, len(atoms))


def brute_force_neighbors(atoms: AtomSet, box: SimBox, rc: float, mode: str = FULL) -> NeighborList:
    """O(N²) minimum-image scan; the oracle for `build_neighbor_list`"""
    _check_request(box, rc, mode)
    pos = atoms.positions
    periodic = box.periodic_mask
    rc2 = rc * rc
    parts = []
    idx = np.arange(len(atoms))
    for i in range(len(atoms)):
        diff = pos - pos[i]
        shift = np.where(periodic, -np.round(diff / box.lengths), 0.0).astype(np.int64)
        d = pair_displacement(pos[i], pos, shift, box.lengths)
        keep = (_squared_norm(d) < rc2) & (idx != i)
        if np.any(keep):
            parts.append((np.full(int(keep.sum()), i), idx[keep], shift[keep]))
    return _finish(parts, mode, rc, box, len(atoms))


def ideal_gas_pair_count(n_atoms: int, box: SimBox, rc: float) -> float:
    """
    Expected number of unordered pairs within `rc` for uniformly random atoms

    >>> round(ideal_gas_pair_count(2, SimBox.cubic(10.0), 1.0), 6)
    0.004189
    """
    sphere = 4.0 / 3.0 * math.pi * rc**3
    return n_atoms * (n_atoms - 1) / 2.0 * sphere / box.volume
