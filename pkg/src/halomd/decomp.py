"""
Virtual domain decomposition for neural-potential inference.

Every step, independently of how the engine stores its atoms:

1. gather_positions: every simulated rank receives all NN atoms (atomAll),
   ordered by global id
2. each rank takes the atoms inside its Cartesian subdomain as locals and
   the atoms (and periodic images) in a slab around it as ghosts
3. each rank builds a full neighbor list over locals + ghosts and runs the
   model
4. reduce_forces: per-atom forces are summed over ranks in ascending rank
   order and replicated

Two coupling schemes:

- masked_reduction: halo of rc; only locals are centers, forces on ghosts
  are routed to their owners through the reduction
- wide_halo: halo of 2·rc; locals and first-layer ghosts are centers, so
  forces on locals are complete and only those are contributed

Ranks are isolated workers; the two collectives are their only exchange.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .deeppot import DPModel, LocalMask, evaluate_centers, evaluate_dp
from .exceptions import GeometryError, PartitionError
from .neighbor import FULL, build_neighbor_list
from .system import AtomSet, SimBox
from .trace import DRIVER_RANK, Phase, StepTrace

logger = logging.getLogger(__name__)

MASKED_REDUCTION = "masked_reduction"
WIDE_HALO = "wide_halo"
SCHEMES = (MASKED_REDUCTION, WIDE_HALO)

# the per-atom message size quoted for the production coupling, not itemized there
REFERENCE_BYTES_PER_ATOM = 28

GATHER = "gather_positions"
REDUCE = "reduce_forces"

LOAD_COLUMNS = ["step", "rank", "locals", "ghosts", "phase", "seconds", "bytes"]


def scheme_name(name: str) -> str:
    """
    Canonical scheme name; accepts the dashed command-line spelling

    >>> scheme_name("wide-halo")
    'wide_halo'
    """
    canonical = name.replace("-", "_")
    if canonical not in SCHEMES:
        raise ValueError(f"unknown scheme {name!r}, expected one of {SCHEMES}")
    return canonical


def halo_thickness(scheme: str, rc: float) -> float:
    """rc for masked_reduction, 2·rc for wide_halo"""
    return rc if scheme_name(scheme) == MASKED_REDUCTION else 2.0 * rc


@dataclass(frozen=True)
class PayloadLayout:
    """
    Bytes per atom of the two collectives

        Field               | Size
        ----------------------------------------
        position (3 x f32)  | 12 bytes
        species (i32)       | 4 bytes
        global id (i32)     | 4 bytes
        force (3 x f32)     | 12 bytes

    >>> layout = PayloadLayout()
    >>> layout.gather_bytes_per_atom, layout.reduce_bytes_per_atom
    (20, 16)
    """

    position: int = 12
    species: int = 4
    global_id: int = 4
    force: int = 12

    @property
    def gather_bytes_per_atom(self) -> int:
        """Position, species and id of one atom"""
        return self.position + self.species + self.global_id

    @property
    def reduce_bytes_per_atom(self) -> int:
        """Force and id of one atom"""
        return self.force + self.global_id


@dataclass(frozen=True)
class CollectiveRecord:
    """One collective call"""

    step: int
    kind: str
    n_atoms: int
    bytes_per_atom: int
    participants: int

    @property
    def payload_bytes(self) -> int:
        """n_atoms · bytes_per_atom"""
        return self.n_atoms * self.bytes_per_atom


@dataclass
class CollectiveLedger:
    """Every collective of a run, with its payload"""

    layout: PayloadLayout = field(default_factory=PayloadLayout)
    records: List[CollectiveRecord] = field(default_factory=list)

    def record(self, step: int, kind: str, n_atoms: int, participants: int) -> CollectiveRecord:
        """Append a record sized by the layout"""
        per_atom = self.layout.gather_bytes_per_atom if kind == GATHER else self.layout.reduce_bytes_per_atom
        rec = CollectiveRecord(step, kind, int(n_atoms), per_atom, int(participants))
        self.records.append(rec)
        logger.debug("step %d %s: %d atoms, %d bytes", step, kind, rec.n_atoms, rec.payload_bytes)
        return rec

    def to_frame(self) -> pd.DataFrame:
        """One row per collective"""
        return pd.DataFrame(
            [(r.step, r.kind, r.n_atoms, r.bytes_per_atom, r.payload_bytes, r.participants) for r in self.records],
            columns=["step", "kind", "n_atoms", "bytes_per_atom", "payload_bytes", "participants"],
        )

    def summary(self) -> dict:
        """Totals per kind next to the reference per-atom size"""
        out: dict = {"reference_bytes_per_atom": REFERENCE_BYTES_PER_ATOM}
        for kind in (GATHER, REDUCE):
            recs = [r for r in self.records if r.kind == kind]
            out[kind] = {
                "calls": len(recs),
                "atoms": sum(r.n_atoms for r in recs),
                "bytes": sum(r.payload_bytes for r in recs),
            }
        out["gather_bytes_per_atom"] = self.layout.gather_bytes_per_atom
        out["reduce_bytes_per_atom"] = self.layout.reduce_bytes_per_atom
        return out


@dataclass(frozen=True)
class RankGrid:
    """A p_x × p_y × p_z Cartesian grid of ranks, numbered in C order"""

    dims: Tuple[int, int, int]

    def __post_init__(self) -> None:
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"invalid rank grid {self.dims}")
        object.__setattr__(self, "dims", dims)

    @property
    def n_ranks(self) -> int:
        """Number of ranks"""
        return self.dims[0] * self.dims[1] * self.dims[2]

    def coords(self, rank: int) -> Tuple[int, int, int]:
        """Grid position of a rank"""
        x, y, z = np.unravel_index(rank, self.dims)
        return int(x), int(y), int(z)

    def edges(self, box: SimBox) -> np.ndarray:
        """Subdomain edge lengths"""
        return box.lengths / np.asarray(self.dims)

    def boundaries(self, box: SimBox) -> List[np.ndarray]:
        """Per axis, the p + 1 subdomain boundaries from 0 to L"""
        return [np.array([k * box.lengths[a] / self.dims[a] for k in range(self.dims[a])] + [box.lengths[a]]) for a in range(3)]

    def bounds(self, box: SimBox, rank: int) -> Tuple[np.ndarray, np.ndarray]:
        """[lo, hi) of a rank's subdomain"""
        b = self.boundaries(box)
        c = self.coords(rank)
        return np.array([b[a][c[a]] for a in range(3)]), np.array([b[a][c[a] + 1] for a in range(3)])


def partition_ranks(box: SimBox, n_ranks: int, min_edge: float = 0.0) -> RankGrid:
    """
    The factorization p_x·p_y·p_z = n_ranks with the least subdomain surface
    among those whose subdomain edges are at least `min_edge`; equal
    surfaces go to the lexicographically largest dims.

    >>> partition_ranks(SimBox.cubic(10.0), 8).dims
    (2, 2, 2)
    >>> partition_ranks(SimBox([2.0, 1.0, 1.0]), 4).dims
    (4, 1, 1)
    """
    if n_ranks < 1:
        raise ValueError("n_ranks must be at least 1")
    best: Optional[Tuple[float, Tuple[int, int, int]]] = None
    for px in range(1, n_ranks + 1):
        if n_ranks % px:
            continue
        for py in range(1, n_ranks // px + 1):
            if (n_ranks // px) % py:
                continue
            dims = (px, py, n_ranks // (px * py))
            a, b, c = box.lengths / np.asarray(dims)
            if min(a, b, c) < min_edge:
                continue
            # rounded so that geometrically equal surfaces tie exactly
            area = round(float(a * b + b * c + c * a), 9)
            if best is None or area < best[0] or (area == best[0] and dims > best[1]):
                best = (area, dims)
    if best is None:
        fallback = max(
            (n for n in range(1, n_ranks) if _fits(box, n, min_edge)),
            default=None,
        )
        hint = f"; at most {fallback} ranks fit" if fallback else ""
        raise GeometryError(
            f"no factorization of {n_ranks} ranks keeps subdomain edges >= {min_edge:g}{hint}"
        )
    return RankGrid(best[1])


def _fits(box: SimBox, n_ranks: int, min_edge: float) -> bool:
    for px, py in itertools.product(range(1, n_ranks + 1), repeat=2):
        if n_ranks % (px * py) == 0:
            pz = n_ranks // (px * py)
            if np.all(box.lengths / np.array([px, py, pz]) >= min_edge):
                return True
    return False


def owner_ranks(atoms: AtomSet, grid: RankGrid, box: SimBox) -> np.ndarray:
    """
    Owning rank of every atom, by half-open binning against the subdomain
    boundaries; O(N), no distances involved
    """
    b = grid.boundaries(box)
    coords = np.column_stack(
        [np.clip(np.searchsorted(b[a][1:-1], atoms.positions[:, a], side="right"), 0, grid.dims[a] - 1) for a in range(3)]
    )
    return np.ravel_multi_index((coords[:, 0], coords[:, 1], coords[:, 2]), grid.dims).astype(np.int64)


def assign_local(atoms: AtomSet, grid: RankGrid, box: SimBox) -> List[np.ndarray]:
    """
    Global ids owned by each rank

    >>> from halomd.system import lattice_init
    >>> box, atoms = lattice_init(2, 1.0)
    >>> [ids.tolist() for ids in assign_local(atoms, RankGrid((2, 2, 2)), box)]
    [[0], [1], [2], [3], [4], [5], [6], [7]]
    """
    owners = owner_ranks(atoms, grid, box)
    return [atoms.global_ids[owners == r] for r in range(grid.n_ranks)]


@dataclass
class Subdomain:
    """One rank's view: its bounds, local atoms and ghosts (indices into atomAll)"""

    rank: int
    lo: np.ndarray
    hi: np.ndarray
    local_index: np.ndarray
    ghost_index: np.ndarray
    ghost_shift: np.ndarray
    ghost_owner: np.ndarray
    ghost_positions: np.ndarray
    local_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_local(self) -> int:
        """Number of local atoms"""
        return len(self.local_index)

    @property
    def n_ghost(self) -> int:
        """Number of ghost entries"""
        return len(self.ghost_index)


def _check_thickness(grid: RankGrid, box: SimBox, thickness: float) -> None:
    edges = grid.edges(box)
    if np.any(edges < thickness):
        raise GeometryError(
            f"halo thickness {thickness:g} exceeds the smallest subdomain edge {edges.min():g} "
            f"of grid {grid.dims}; use fewer ranks"
        )
    if np.any(box.periodic_mask & (box.lengths < thickness)):
        raise GeometryError(f"halo thickness {thickness:g} exceeds a periodic box length")


def build_halo(
    atoms: AtomSet,
    owners: np.ndarray,
    grid: RankGrid,
    box: SimBox,
    rank: int,
    thickness: float,
) -> Subdomain:
    """
    Locals of `rank` plus every atom image r + s·L (s in {-1, 0, 1} on
    periodic axes) with lo - t <= x < hi + t on all axes, other than the
    locals themselves. Ghosts are ordered by (global id, shift).
    """
    _check_thickness(grid, box, thickness)
    lo, hi = grid.bounds(box, rank)
    pos = atoms.positions
    periodic = box.periodic_mask
    idx_parts, shift_parts = [], []
    for shift in itertools.product((-1, 0, 1), repeat=3):
        s = np.asarray(shift)
        if np.any(s[~periodic]):
            continue
        image = pos + s * box.lengths
        inside = np.all((image >= lo - thickness) & (image < hi + thickness), axis=1)
        if not np.any(s):
            inside &= owners != rank
        hits = np.flatnonzero(inside)
        idx_parts.append(hits)
        shift_parts.append(np.tile(s, (len(hits), 1)))
    ghost_index = np.concatenate(idx_parts)
    ghost_shift = np.concatenate(shift_parts).reshape(-1, 3).astype(np.int64)
    order = np.lexsort((ghost_shift[:, 2], ghost_shift[:, 1], ghost_shift[:, 0], atoms.global_ids[ghost_index]))
    ghost_index, ghost_shift = ghost_index[order], ghost_shift[order]
    local_index = np.flatnonzero(owners == rank)
    return Subdomain(
        rank=rank,
        lo=lo,
        hi=hi,
        local_index=local_index,
        ghost_index=ghost_index,
        ghost_shift=ghost_shift,
        ghost_owner=owners[ghost_index],
        ghost_positions=pos[ghost_index] + ghost_shift * box.lengths,
        local_ids=atoms.global_ids[local_index],
    )


def expected_ghost_count(density: float, edges: Sequence[float], thickness: float) -> float:
    """
    Mean ghost count of a homogeneous system: density times the slab volume

    >>> expected_ghost_count(1.0, (2.0, 2.0, 2.0), 1.0)
    56.0
    """
    a, b, c = (float(e) for e in edges)
    t2 = 2.0 * thickness
    return density * ((a + t2) * (b + t2) * (c + t2) - a * b * c)


def gather_positions(
    per_rank: Sequence[AtomSet],
    ledger: Optional[CollectiveLedger] = None,
    step: int = 0,
) -> AtomSet:
    """
    Replicate-everywhere gather: the union of every rank's atoms, ordered by
    global id. Ranks share the returned set read-only.
    """
    parts = [a for a in per_rank if len(a)]
    if parts:
        ids = np.concatenate([a.global_ids for a in parts])
        unique, counts = np.unique(ids, return_counts=True)
        if np.any(counts > 1):
            raise PartitionError(f"global ids owned by more than one rank: {unique[counts > 1][:10].tolist()}")
        merged = AtomSet(
            ids,
            np.concatenate([a.species for a in parts]),
            np.concatenate([a.positions for a in parts]),
            np.concatenate([a.velocities for a in parts]),
            np.concatenate([a.masses for a in parts]),
        )
        atom_all = merged.subset(np.argsort(ids, kind="stable"))
    else:
        atom_all = AtomSet(np.zeros(0, dtype=np.int64), [], np.zeros((0, 3)))
    if ledger is not None:
        ledger.record(step, GATHER, len(atom_all), len(per_rank))
    return atom_all


def reduce_forces(
    contributions: Sequence[Tuple[np.ndarray, np.ndarray]],
    global_ids: np.ndarray,
    ledger: Optional[CollectiveLedger] = None,
    step: int = 0,
) -> np.ndarray:
    """
    Sum-then-replicate: per-atom sums of every rank's (ids, forces),
    combined in ascending rank order, aligned with sorted `global_ids`.
    """
    global_ids = np.asarray(global_ids, dtype=np.int64)
    total = np.zeros((len(global_ids), 3))
    n_entries = 0
    for ids, forces in contributions:
        ids = np.asarray(ids, dtype=np.int64)
        rows = np.searchsorted(global_ids, ids)
        if len(ids) and (np.any(rows >= len(global_ids)) or np.any(global_ids[np.minimum(rows, len(global_ids) - 1)] != ids)):
            raise PartitionError("force contribution for an unknown global id")
        np.add.at(total, rows, forces)
        n_entries += len(ids)
    if ledger is not None:
        ledger.record(step, REDUCE, n_entries, len(contributions))
    return total


def engine_split(atoms: AtomSet, n_ranks: int) -> List[AtomSet]:
    """
    The engine-side distribution feeding the gather: contiguous blocks of the
    engine's atom order, one per rank
    """
    return [atoms.subset(chunk) for chunk in np.array_split(np.arange(len(atoms)), n_ranks)]


@dataclass
class RankResult:
    """What one rank contributes to the force reduction"""

    rank: int
    energy: float
    ids: np.ndarray
    forces: np.ndarray
    n_local: int
    n_ghost: int
    seconds: Dict[str, float]
    subdomain: Subdomain


def _rank_frame(atom_all: AtomSet, sub: Subdomain) -> Tuple[AtomSet, np.ndarray]:
    """Locals then ghosts as one frame, and the global id behind every row"""
    index = np.concatenate([sub.local_index, sub.ghost_index])
    # several images of one atom can be ghosts, so frame rows get their own ids
    # and `ids` keeps the neighbor order of the single domain
    ids = np.concatenate([atom_all.global_ids[sub.local_index], atom_all.global_ids[sub.ghost_index]])
    frame = AtomSet(
        np.arange(len(index)),
        atom_all.species[index],
        np.concatenate([atom_all.positions[sub.local_index], sub.ghost_positions]),
        masses=atom_all.masses[index],
    )
    return frame, ids


def _rank_work(
    rank: int,
    atom_all: AtomSet,
    owners: np.ndarray,
    grid: RankGrid,
    box: SimBox,
    model: DPModel,
    scheme: str,
    trace: StepTrace,
    step: int,
) -> RankResult:
    seconds: Dict[str, float] = {}
    rc = model.rc
    with trace.timed(rank, Phase.DD_BUILD, step) as t:
        sub = build_halo(atom_all, owners, grid, box, rank, halo_thickness(scheme, rc))
        frame, ids = _rank_frame(atom_all, sub)
    seconds[Phase.DD_BUILD.value] = t.interval
    n_local = sub.n_local
    if not n_local:
        return RankResult(rank, 0.0, np.zeros(0, dtype=np.int64), np.zeros((0, 3)), 0, sub.n_ghost, seconds, sub)

    frame_box = SimBox(box.lengths, (False, False, False))
    with trace.timed(rank, Phase.NEIGHBOR_BUILD, step) as t:
        nlist = build_neighbor_list(frame, frame_box, rc, FULL)
    seconds[Phase.NEIGHBOR_BUILD.value] = t.interval

    if scheme == MASKED_REDUCTION:
        with trace.timed(rank, Phase.INFERENCE, step) as t:
            mask = np.zeros(len(frame), dtype=bool)
            mask[:n_local] = True
            result = evaluate_dp(frame, nlist, model, LocalMask(mask), order_ids=ids)
        seconds[Phase.INFERENCE.value] = t.interval
        with trace.timed(rank, Phase.GHOST_FORCE_ROUTE, step) as t:
            # ghost rows keep their owner's global id, so the reduction routes them
            out_ids, out_forces = ids, result.forces
        seconds[Phase.GHOST_FORCE_ROUTE.value] = t.interval
        energy = result.energy
    else:
        with trace.timed(rank, Phase.INFERENCE, step) as t:
            lo, hi = sub.lo - rc, sub.hi + rc
            ghost_pos = frame.positions[n_local:]
            first_layer = np.all((ghost_pos >= lo) & (ghost_pos < hi), axis=1)
            centers = np.concatenate([np.arange(n_local), n_local + np.flatnonzero(first_layer)])
            e, forces, _ = evaluate_centers(frame, nlist, model, centers, order_ids=ids)
            energy = float(np.sum(e[:n_local]))
            out_ids, out_forces = ids[:n_local], forces[:n_local]
        seconds[Phase.INFERENCE.value] = t.interval
    return RankResult(rank, energy, out_ids, out_forces, n_local, sub.n_ghost, seconds, sub)


@dataclass
class DDResult:
    """Outcome of one decomposed evaluation; forces follow the input atom order"""

    energy: float
    forces: np.ndarray
    trace: StepTrace
    ledger: CollectiveLedger
    grid: RankGrid
    ranks: List[RankResult]
    step: int = 0

    def load_table(self) -> pd.DataFrame:
        """Per-rank phase timings and atom loads, plus the collectives' payloads"""
        rows = []
        for r in self.ranks:
            for phase, secs in r.seconds.items():
                rows.append((self.step, r.rank, r.n_local, r.n_ghost, phase, secs, 0))
        for rec in self.ledger.records:
            if rec.step == self.step:
                rows.append((self.step, DRIVER_RANK, rec.n_atoms, 0, rec.kind, float("nan"), rec.payload_bytes))
        return pd.DataFrame(rows, columns=LOAD_COLUMNS)


def dd_evaluate(
    atoms: AtomSet,
    box: SimBox,
    model: DPModel,
    n_ranks: int,
    scheme: str = MASKED_REDUCTION,
    workers: int = 1,
    ledger: Optional[CollectiveLedger] = None,
    trace: Optional[StepTrace] = None,
    step: int = 0,
    grid: Optional[RankGrid] = None,
) -> DDResult:
    """
    Energy and forces of `atoms` evaluated on `n_ranks` simulated ranks.

    Positions must be wrapped on periodic axes. Forces are returned in the
    order of `atoms`.
    """
    scheme = scheme_name(scheme)
    ledger = CollectiveLedger() if ledger is None else ledger
    trace = StepTrace() if trace is None else trace
    thickness = halo_thickness(scheme, model.rc)
    if grid is None:
        grid = partition_ranks(box, n_ranks, min_edge=thickness)
    elif grid.n_ranks != n_ranks:
        raise ValueError(f"grid {grid.dims} does not have {n_ranks} ranks")

    with trace.timed(DRIVER_RANK, Phase.GATHER_POSITIONS, step):
        atom_all = gather_positions(engine_split(atoms, n_ranks), ledger, step)
        owners = owner_ranks(atom_all, grid, box)

    def work(rank: int) -> RankResult:
        return _rank_work(rank, atom_all, owners, grid, box, model, scheme, trace, step)

    if workers > 1 and n_ranks > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ranks = list(pool.map(work, range(n_ranks)))
    else:
        ranks = [work(rank) for rank in range(n_ranks)]

    with trace.timed(DRIVER_RANK, Phase.REDUCE_FORCES, step):
        total = reduce_forces([(r.ids, r.forces) for r in ranks], atom_all.global_ids, ledger, step)
        energy = float(sum(r.energy for r in ranks))

    # back from global-id order to the caller's order
    forces = total[np.searchsorted(atom_all.global_ids, atoms.global_ids)]
    logger.debug(
        "step %d: %s on grid %s, ghosts per rank %s",
        step,
        scheme,
        grid.dims,
        [r.n_ghost for r in ranks],
    )
    return DDResult(energy, forces, trace, ledger, grid, ranks, step)
