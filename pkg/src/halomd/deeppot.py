"""
Local deep potential: smooth environment matrix, type-embedded neighbor
features, optional gated self-attention, and a fitting network mapping each
atom's descriptor to an atomic energy.

Forces come from an exact hand-written backward pass. The same pass yields
parameter gradients for training.

Shapes used throughout, for a batch of C center atoms padded to K = n_max
neighbor slots:

    d      (C, K, 3)   displacement r_j + s·L - r_i
    R      (C, K, 4)   environment rows (s, s·x/r, s·y/r, s·z/r)
    G      (C, K, M)   embedded neighbor features
    T      (C, M, 4)   Gᵀ R / n_max
    D      (C, M, m)   T T_<ᵀ, flattened into the fitting network
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .exceptions import CapacityError, SingularityError
from .neighbor import FULL, NeighborList
from .system import AtomSet

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

# attention gate rows are divided by the sum of s(r)² over real neighbors
GATE_NORMALIZATION = "sum_s2"
# softmax terms are s(r_k)·exp(a_jk), so a neighbor at rc carries no attention weight
SOFTMAX_WEIGHTING = "switch"

MODEL_CONVENTIONS = {"gate_normalization": GATE_NORMALIZATION, "softmax_weighting": SOFTMAX_WEIGHTING}


def switch_fn(
    r: Union[float, np.ndarray], rcs: float, rc: float
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Smoothly switched inverse distance s(r) and ds/dr.

    s = 1/r up to `rcs`, then 1/r times the quintic u³(-6u²+15u-10)+1 of
    u = (r - rcs)/(rc - rcs), and exactly zero from `rc` on.

    >>> [float(x) for x in switch_fn(0.5, 1.0, 2.0)]
    [2.0, -4.0]
    >>> [round(float(x), 6) for x in switch_fn(1.5, 1.0, 2.0)]
    [0.333333, -1.472222]
    >>> [float(x) for x in switch_fn(2.0, 1.0, 2.0)]
    [0.0, 0.0]
    """
    r = np.asarray(r, dtype=np.float64)
    if np.any(r <= 0):
        raise SingularityError("switching function evaluated at r = 0")
    u = np.clip((r - rcs) / (rc - rcs), 0.0, 1.0)
    sw = u**3 * (-6.0 * u**2 + 15.0 * u - 10.0) + 1.0
    dsw = -30.0 * u**2 * (u - 1.0) ** 2 / (rc - rcs)
    inv = 1.0 / r
    s = sw * inv
    ds = dsw * inv - sw * inv * inv
    beyond = r >= rc
    return np.where(beyond, 0.0, s), np.where(beyond, 0.0, ds)


@dataclass(frozen=True)
class DPConfig:
    """Hyperparameters of a `DPModel`; the last embedding width is M"""

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
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "embed_widths", tuple(int(w) for w in self.embed_widths))
        object.__setattr__(self, "fit_widths", tuple(int(w) for w in self.fit_widths))
        if not 0 < self.rcs < self.rc:
            raise ValueError(f"need 0 < rcs < rc, got rcs={self.rcs} rc={self.rc}")
        if self.n_max < 1 or self.n_types < 1 or self.type_dim < 1:
            raise ValueError("n_max, n_types and type_dim must be positive")
        if not self.embed_widths or min(self.embed_widths) < 1:
            raise ValueError("embed_widths must be non-empty and positive")
        if self.fit_widths and min(self.fit_widths) < 1:
            raise ValueError("fit_widths must be positive")
        if self.n_attn < 0 or self.attn_dim < 1:
            raise ValueError("n_attn must be >= 0 and attn_dim positive")
        if not 1 <= self.m_reduced <= self.embed_widths[-1]:
            raise ValueError("m_reduced must lie in [1, M]")

    @property
    def m_features(self) -> int:
        """M, the number of embedded features per neighbor"""
        return self.embed_widths[-1]

    @property
    def descriptor_size(self) -> int:
        """Length of the flattened descriptor"""
        return self.m_features * self.m_reduced

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Every parameter tensor in canonical order"""
        shapes: Dict[str, Tuple[int, ...]] = {"type_embed": (self.n_types, self.type_dim)}
        fan_in = 1 + 2 * self.type_dim
        for i, width in enumerate(self.embed_widths):
            shapes[f"embed.{i}.w"] = (fan_in, width)
            shapes[f"embed.{i}.b"] = (width,)
            fan_in = width
        m = self.m_features
        for i in range(self.n_attn):
            shapes[f"attn.{i}.wq"] = (m, self.attn_dim)
            shapes[f"attn.{i}.wk"] = (m, self.attn_dim)
            shapes[f"attn.{i}.wv"] = (m, m)
        fan_in = self.descriptor_size
        for i, width in enumerate(self.fit_widths + (1,)):
            shapes[f"fit.{i}.w"] = (fan_in, width)
            shapes[f"fit.{i}.b"] = (width,)
            fan_in = width
        shapes["atom_bias"] = (self.n_types,)
        return shapes

    def to_dict(self) -> dict:
        """JSON-ready form"""
        return {
            "rc": self.rc,
            "rcs": self.rcs,
            "n_max": self.n_max,
            "n_types": self.n_types,
            "type_dim": self.type_dim,
            "embed_widths": list(self.embed_widths),
            "n_attn": self.n_attn,
            "attn_dim": self.attn_dim,
            "m_reduced": self.m_reduced,
            "fit_widths": list(self.fit_widths),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> DPConfig:
        """Inverse of `to_dict`"""
        return cls(**d)


@dataclass
class DPModel:
    """
    Model hyperparameters plus parameter tensors.

    `metadata` records the attention conventions the weights belong to:

    - `gate_normalization`: "sum_s2", the gate R·Rᵀ of a center is divided by
      Σ_k s(r_k)² over its real neighbors;
    - `softmax_weighting`: "switch", the attention softmax of neighbor j over
      k is s(r_k)·exp(a_jk) / Σ_k s(r_k)·exp(a_jk) rather than a plain
      softmax, so the weight of a neighbor goes to zero smoothly at rc.

    >>> DPModel.initialize(DPConfig()).metadata["softmax_weighting"]
    'switch'
    """

    config: DPConfig
    params: Params
    metadata: dict = field(default_factory=lambda: dict(MODEL_CONVENTIONS))

    def __post_init__(self) -> None:
        shapes = self.config.param_shapes()
        if list(self.params) != list(shapes):
            missing = sorted(set(shapes) - set(self.params))
            extra = sorted(set(self.params) - set(shapes))
            if missing or extra:
                raise ValueError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
            self.params = {k: self.params[k] for k in shapes}
        for name, shape in shapes.items():
            value = np.asarray(self.params[name], dtype=np.float64)
            if value.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {value.shape}")
            self.params[name] = value

    def __eq__(self, other):
        if not isinstance(other, DPModel):
            return NotImplemented
        return (
            self.config == other.config
            and self.metadata == other.metadata
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )

    @classmethod
    def initialize(cls, config: DPConfig) -> DPModel:
        """Uniform Glorot initialization of weights, zero biases, seeded by the config"""
        rng = np.random.default_rng(config.seed)
        params: Params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith(".b") or name == "atom_bias":
                params[name] = np.zeros(shape)
            else:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                params[name] = rng.uniform(-limit, limit, size=shape)
        return cls(config, params)

    @property
    def rc(self) -> float:
        """Cutoff radius"""
        return self.config.rc

    @property
    def n_params(self) -> int:
        """Total number of scalar parameters"""
        return sum(p.size for p in self.params.values())

    def copy(self) -> DPModel:
        """A deep copy"""
        return DPModel(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.metadata))

    def flat_params(self) -> np.ndarray:
        """All parameters concatenated in canonical order"""
        return np.concatenate([p.reshape(-1) for p in self.params.values()])

    def with_flat_params(self, flat: np.ndarray) -> DPModel:
        """A model with parameters taken from a flat vector (inverse of `flat_params`)"""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} values, got {flat.shape}")
        params, offset = {}, 0
        for name, p in self.params.items():
            params[name] = flat[offset : offset + p.size].reshape(p.shape).copy()
            offset += p.size
        return DPModel(self.config, params, dict(self.metadata))


@dataclass
class LocalMask:
    """Per-atom flags: True for local atoms, False for ghosts"""

    flags: np.ndarray

    def __post_init__(self) -> None:
        self.flags = np.asarray(self.flags, dtype=bool).reshape(-1)
        if not np.any(self.flags):
            raise ValueError("at least one atom must be local")

    @classmethod
    def all_local(cls, n: int) -> LocalMask:
        """Every atom local"""
        return cls(np.ones(n, dtype=bool))

    @property
    def local_indices(self) -> np.ndarray:
        """Indices of local atoms, ascending"""
        return np.flatnonzero(self.flags)

    def __len__(self) -> int:
        return len(self.flags)


@dataclass
class EnvironmentMatrix:
    """
    The sorted, zero-padded neighborhood of one center atom.

    Real neighbors occupy the first `n_real` slots ordered by
    (species, distance, global id); the remaining slots are zero.
    """

    center: int
    center_species: int
    neighbor_index: np.ndarray
    neighbor_species: np.ndarray
    displacements: np.ndarray
    rows: np.ndarray
    n_real: int


@dataclass
class _Batch:
    """Padded neighborhoods of C centers"""

    centers: np.ndarray
    sp_i: np.ndarray
    nbr: np.ndarray
    sp_j: np.ndarray
    d: np.ndarray
    valid: np.ndarray


def _gather_batch(
    atoms: AtomSet,
    nlist: NeighborList,
    centers: np.ndarray,
    rc: float,
    n_max: int,
    order_ids: Optional[np.ndarray] = None,
) -> _Batch:
    """
    Neighbors of every center within rc, sorted by (species, distance, global
    id, displacement). `order_ids` are the global ids behind the rows of
    `atoms` when they differ from `atoms.global_ids`, as in rank frames.
    """
    if nlist.mode != FULL:
        raise ValueError("deep potential evaluation needs a full neighbor list")
    if nlist.rc < rc:
        raise ValueError(f"neighbor list cutoff {nlist.rc:g} is below the model cutoff {rc:g}")
    if nlist.built_from != len(atoms):
        raise ValueError("neighbor list was built for a different atom count")
    ids = atoms.global_ids if order_ids is None else np.asarray(order_ids, dtype=np.int64)
    if len(ids) != len(atoms):
        raise ValueError("order_ids length differs from the atom count")
    centers = np.asarray(centers, dtype=np.int64)
    n_c = len(centers)
    lo, hi = nlist.starts[centers], nlist.starts[centers + 1]
    counts = hi - lo
    owner = np.repeat(np.arange(n_c), counts)
    rows = (np.arange(int(counts.sum())) - np.repeat(np.cumsum(counts) - counts, counts)) + np.repeat(lo, counts)
    first, second = nlist.first[rows], nlist.second[rows]
    pos = atoms.positions
    d = (pos[second] + nlist.shifts[rows] * nlist.box.lengths) - pos[first]
    r = np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2])
    inside = r < rc
    owner, second, d, r = owner[inside], second[inside], d[inside], r[inside]

    n_real = np.bincount(owner, minlength=n_c)
    if n_c and n_real.max(initial=0) > n_max:
        worst = int(np.argmax(n_real))
        raise CapacityError(
            f"atom {ids[centers[worst]]} has {n_real[worst]} neighbors "
            f"within rc={rc:g}, exceeding n_max={n_max}"
        )
    sp_j = atoms.species[second]
    # images of one atom differ only in d
    order = np.lexsort((d[:, 2], d[:, 1], d[:, 0], ids[second], r, sp_j, owner))
    owner, second, d, sp_j = owner[order], second[order], d[order], sp_j[order]
    slot = np.arange(len(owner)) - np.repeat(np.cumsum(n_real) - n_real, n_real)

    batch = _Batch(
        centers=centers,
        sp_i=atoms.species[centers],
        nbr=np.zeros((n_c, n_max), dtype=np.int64),
        sp_j=np.zeros((n_c, n_max), dtype=np.int64),
        d=np.zeros((n_c, n_max, 3)),
        valid=np.zeros((n_c, n_max), dtype=bool),
    )
    batch.nbr[owner, slot] = second
    batch.sp_j[owner, slot] = sp_j
    batch.d[owner, slot] = d
    batch.valid[owner, slot] = True
    return batch


def build_environment(
    center: int,
    nlist: NeighborList,
    atoms: AtomSet,
    model: DPModel,
    order_ids: Optional[np.ndarray] = None,
) -> EnvironmentMatrix:
    """
    Environment matrix of atom `center`.

    >>> atoms = AtomSet([0, 1], [0, 0], [[0.0, 0, 0], [1.0, 0, 0]])
    >>> from halomd.neighbor import build_neighbor_list
    >>> from halomd.system import SimBox
    >>> nl = build_neighbor_list(atoms, SimBox.cubic(10.0, periodic=False), 2.0)
    >>> env = build_environment(0, nl, atoms, DPModel.initialize(DPConfig(n_max=4)))
    >>> env.rows.tolist()
    [[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
    """
    cfg = model.config
    batch = _gather_batch(atoms, nlist, np.array([center]), cfg.rc, cfg.n_max, order_ids)
    env = _environment(batch, cfg)
    n_real = int(batch.valid[0].sum())
    return EnvironmentMatrix(
        center=int(center),
        center_species=int(batch.sp_i[0]),
        neighbor_index=batch.nbr[0, :n_real].copy(),
        neighbor_species=batch.sp_j[0].copy(),
        displacements=batch.d[0].copy(),
        rows=env["R"][0].copy(),
        n_real=n_real,
    )


def _environment(batch: _Batch, cfg: DPConfig) -> Dict[str, np.ndarray]:
    m = batch.valid.astype(np.float64)
    d = batch.d
    r = np.sqrt(d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2])
    r = np.where(batch.valid, r, 1.0)
    s, ds = switch_fn(r, cfg.rcs, cfg.rc)
    s, ds = s * m, ds * m
    u = d / r[..., None]
    R = np.concatenate([s[..., None], s[..., None] * u], axis=-1)
    return {"m": m, "r": r, "s": s, "ds": ds, "u": u, "R": R}


def _forward(
    params: Params, cfg: DPConfig, batch: _Batch
) -> Tuple[np.ndarray, dict]:
    """Atomic energies of the batch and everything the backward pass needs"""
    env = _environment(batch, cfg)
    m, s, R = env["m"], env["s"], env["R"]
    n_c, n_k = batch.valid.shape
    tz = params["type_embed"]

    x = np.concatenate(
        [
            s[..., None],
            tz[batch.sp_j],
            np.broadcast_to(tz[batch.sp_i][:, None, :], (n_c, n_k, cfg.type_dim)),
        ],
        axis=-1,
    )
    embed_h = [x]
    for i in range(len(cfg.embed_widths)):
        x = np.tanh(x @ params[f"embed.{i}.w"] + params[f"embed.{i}.b"])
        embed_h.append(x)
    G = x * m[..., None]

    attn: List[dict] = []
    gate = None
    if cfg.n_attn:
        pair = batch.valid[:, :, None] & batch.valid[:, None, :]
        P = np.einsum("cjf,ckf->cjk", R, R)
        S = np.sum(s * s, axis=1)
        Ss = np.where(S > 0, S, 1.0)
        g = P / Ss[:, None, None]
        gate = {"P": P, "S": S, "Ss": Ss, "g": g}
        scale = 1.0 / np.sqrt(cfg.attn_dim)
        for i in range(cfg.n_attn):
            Q = G @ params[f"attn.{i}.wq"]
            Kt = G @ params[f"attn.{i}.wk"]
            V = G @ params[f"attn.{i}.wv"]
            a = np.einsum("cjd,ckd->cjk", Q, Kt) * scale
            a_masked = np.where(pair, a, -np.inf)
            row_max = np.max(a_masked, axis=2, keepdims=True)
            row_max = np.where(np.isfinite(row_max), row_max, 0.0)
            expa = np.where(pair, np.exp(a_masked - row_max), 0.0)
            X = expa * s[:, None, :]
            Z = np.sum(X, axis=2)
            Zs = np.where(Z > 0, Z, 1.0)
            A = X / Zs[..., None]
            H = A * g
            attn.append({"G": G, "Q": Q, "K": Kt, "V": V, "expa": expa, "X": X, "Zs": Zs, "A": A, "H": H})
            G = (G + H @ V) * m[..., None]

    T = np.einsum("ckm,ckf->cmf", G, R) / cfg.n_max
    Tr = T[:, : cfg.m_reduced, :]
    D = np.einsum("cmf,cnf->cmn", T, Tr)
    y = D.reshape(n_c, -1)
    fit_h = [y]
    n_fit = len(cfg.fit_widths)
    for i in range(n_fit):
        y = np.tanh(y @ params[f"fit.{i}.w"] + params[f"fit.{i}.b"])
        fit_h.append(y)
    e = (y @ params[f"fit.{n_fit}.w"] + params[f"fit.{n_fit}.b"])[:, 0]
    e = e + params["atom_bias"][batch.sp_i]
    cache = {"env": env, "embed_h": embed_h, "G": G, "attn": attn, "gate": gate, "T": T, "Tr": Tr, "D": D, "fit_h": fit_h}
    return e, cache


def _backward(
    params: Params,
    cfg: DPConfig,
    batch: _Batch,
    cache: dict,
    de: np.ndarray,
    want_params: bool,
) -> Tuple[np.ndarray, Optional[Params]]:
    """
    Gradient of Σ_c de_c·e_c with respect to every displacement d (C, K, 3)
    and, if `want_params`, with respect to every parameter.
    """
    env = cache["env"]
    m, s, u, r, R = env["m"], env["s"], env["u"], env["r"], env["R"]
    n_c = len(de)
    grads: Params = {k: np.zeros_like(v) for k, v in params.items()} if want_params else {}

    # fitting network
    if want_params:
        np.add.at(grads["atom_bias"], batch.sp_i, de)
    n_fit = len(cfg.fit_widths)
    fit_h = cache["fit_h"]
    dy = de[:, None]
    if want_params:
        grads[f"fit.{n_fit}.w"] = fit_h[n_fit].T @ dy
        grads[f"fit.{n_fit}.b"] = dy.sum(axis=0)
    dy = dy @ params[f"fit.{n_fit}.w"].T
    for i in reversed(range(n_fit)):
        dz = dy * (1.0 - fit_h[i + 1] ** 2)
        if want_params:
            grads[f"fit.{i}.w"] = fit_h[i].T @ dz
            grads[f"fit.{i}.b"] = dz.sum(axis=0)
        dy = dz @ params[f"fit.{i}.w"].T

    # descriptor contraction
    T, Tr, G = cache["T"], cache["Tr"], cache["G"]
    dD = dy.reshape(n_c, cfg.m_features, cfg.m_reduced)
    dT = np.einsum("cmn,cnf->cmf", dD, Tr)
    dT[:, : cfg.m_reduced, :] += np.einsum("cmn,cmf->cnf", dD, T)
    dG = np.einsum("cmf,ckf->ckm", dT, R) / cfg.n_max
    dR = np.einsum("cmf,ckm->ckf", dT, G) / cfg.n_max
    ds = np.zeros_like(s)

    # attention layers
    if cfg.n_attn:
        gate = cache["gate"]
        dg = np.zeros_like(gate["g"])
        scale = 1.0 / np.sqrt(cfg.attn_dim)
        for i in reversed(range(cfg.n_attn)):
            c = cache["attn"][i]
            dGo = dG * m[..., None]
            dG_in = dGo.copy()
            dH = np.einsum("cjm,ckm->cjk", dGo, c["V"])
            dV = np.einsum("cjk,cjm->ckm", c["H"], dGo)
            dA = dH * gate["g"]
            dg += dH * c["A"]
            dX = (dA - np.sum(dA * c["A"], axis=2, keepdims=True)) / c["Zs"][..., None]
            ds += np.sum(dX * c["expa"], axis=1)
            da = dX * s[:, None, :] * c["expa"]
            dQ = np.einsum("cjk,ckd->cjd", da, c["K"]) * scale
            dK = np.einsum("cjk,cjd->ckd", da, c["Q"]) * scale
            wq, wk, wv = params[f"attn.{i}.wq"], params[f"attn.{i}.wk"], params[f"attn.{i}.wv"]
            if want_params:
                grads[f"attn.{i}.wq"] = np.einsum("ckm,ckd->md", c["G"], dQ)
                grads[f"attn.{i}.wk"] = np.einsum("ckm,ckd->md", c["G"], dK)
                grads[f"attn.{i}.wv"] = np.einsum("ckm,ckn->mn", c["G"], dV)
            dG_in += dQ @ wq.T + dK @ wk.T + dV @ wv.T
            dG = dG_in
        S, Ss, P = gate["S"], gate["Ss"], gate["P"]
        dP = dg / Ss[:, None, None]
        dS = np.where(S > 0, -np.sum(dg * P, axis=(1, 2)) / (Ss * Ss), 0.0)
        dR += np.einsum("cjk,ckf->cjf", dP + dP.transpose(0, 2, 1), R)
        ds += 2.0 * s * dS[:, None]

    # embedding network
    embed_h = cache["embed_h"]
    dh = dG * m[..., None]
    for i in reversed(range(len(cfg.embed_widths))):
        dz = dh * (1.0 - embed_h[i + 1] ** 2)
        if want_params:
            grads[f"embed.{i}.w"] = np.einsum("cki,ckj->ij", embed_h[i], dz)
            grads[f"embed.{i}.b"] = dz.sum(axis=(0, 1))
        dh = dz @ params[f"embed.{i}.w"].T
    ds += dh[..., 0]
    if want_params:
        dz_type = cfg.type_dim
        np.add.at(grads["type_embed"], batch.sp_j, dh[..., 1 : 1 + dz_type] * m[..., None])
        np.add.at(grads["type_embed"], batch.sp_i, np.sum(dh[..., 1 + dz_type :] * m[..., None], axis=1))

    # environment rows back to displacements
    ds_total = ds + dR[..., 0] + np.sum(dR[..., 1:] * u, axis=-1)
    g_u = s[..., None] * dR[..., 1:]
    radial = np.sum(g_u * u, axis=-1, keepdims=True)
    dd = (g_u - radial * u) / r[..., None] + (ds_total * env["ds"])[..., None] * u
    dd = dd * m[..., None]
    return dd, (grads if want_params else None)


def evaluate_centers(
    atoms: AtomSet,
    nlist: NeighborList,
    model: DPModel,
    centers: np.ndarray,
    weights: Optional[np.ndarray] = None,
    param_grad: bool = False,
    order_ids: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, Optional[Params]]:
    """
    Atomic energies e_c of `centers` and the forces -∂(Σ_c w_c e_c)/∂r on
    every atom of `atoms`, plus parameter gradients of Σ_c w_c e_c on request.
    """
    cfg = model.config
    centers = np.asarray(centers, dtype=np.int64)
    weights = np.ones(len(centers)) if weights is None else np.asarray(weights, dtype=np.float64)
    forces = np.zeros((len(atoms), 3))
    if not len(centers):
        grads = {k: np.zeros_like(v) for k, v in model.params.items()} if param_grad else None
        return np.zeros(0), forces, grads
    batch = _gather_batch(atoms, nlist, centers, cfg.rc, cfg.n_max, order_ids)
    if np.any(batch.valid & (np.sum(batch.d * batch.d, axis=-1) < 1e-12)):
        raise SingularityError("overlapping atoms inside the model cutoff")
    e, cache = _forward(model.params, cfg, batch)
    dd, grads = _backward(model.params, cfg, batch, cache, weights, param_grad)
    # d = r_j - r_i: the center gains +dd, the neighbor -dd
    np.add.at(forces, batch.centers, dd.sum(axis=1))
    np.add.at(forces, batch.nbr[batch.valid], -dd[batch.valid])
    return e, forces, grads


@dataclass
class DPResult:
    """
    Energy of the local atoms and forces on every atom of the evaluated frame.

    Rows of `forces` belonging to ghosts hold the force the local energy
    exerts on those ghosts, to be routed back to their owners.
    """

    energy: float
    forces: np.ndarray
    mask: LocalMask
    atom_energies: np.ndarray

    @property
    def forces_local(self) -> np.ndarray:
        """Forces on local atoms, in frame order"""
        return self.forces[self.mask.flags]

    @property
    def forces_on_ghosts(self) -> np.ndarray:
        """Forces on ghost atoms, in frame order"""
        return self.forces[~self.mask.flags]


def evaluate_dp(
    atoms: AtomSet,
    nlist: NeighborList,
    model: DPModel,
    mask: Optional[LocalMask] = None,
    order_ids: Optional[np.ndarray] = None,
) -> DPResult:
    """
    Masked energy E = Σ_{local j} e_j and forces -∂E/∂r_i on all atoms.
    Ghost atoms never act as centers; their rows only receive forces.
    """
    if mask is None:
        mask = LocalMask.all_local(len(atoms))
    if len(mask) != len(atoms):
        raise ValueError("mask length differs from the atom count")
    centers = mask.local_indices
    e, forces, _ = evaluate_centers(atoms, nlist, model, centers, order_ids=order_ids)
    atom_energies = np.zeros(len(atoms))
    atom_energies[centers] = e
    return DPResult(float(np.sum(e)), forces, mask, atom_energies)


def descriptor(env: EnvironmentMatrix, model: DPModel) -> np.ndarray:
    """The flattened M × m descriptor of one environment"""
    cfg = model.config
    batch = _Batch(
        centers=np.array([env.center]),
        sp_i=np.array([env.center_species]),
        nbr=np.zeros((1, cfg.n_max), dtype=np.int64),
        sp_j=env.neighbor_species[None, :].astype(np.int64),
        d=env.displacements[None, :, :],
        valid=(np.arange(cfg.n_max) < env.n_real)[None, :],
    )
    _, cache = _forward(model.params, cfg, batch)
    return cache["D"].reshape(-1)


def energy_parameter_gradient(
    atoms: AtomSet, nlist: NeighborList, model: DPModel
) -> Tuple[float, np.ndarray, Params]:
    """Total energy, forces and ∂E/∂θ for a frame with every atom local"""
    e, forces, grads = evaluate_centers(atoms, nlist, model, np.arange(len(atoms)), param_grad=True)
    assert grads is not None
    return float(np.sum(e)), forces, grads


def describe(model: DPModel) -> str:
    """One-line summary for logs"""
    cfg = model.config
    kind = f"attention x{cfg.n_attn}" if cfg.n_attn else "smooth edition"
    return f"{kind}, M={cfg.m_features}, rc={cfg.rc:g}, n_max={cfg.n_max}, {model.n_params} parameters"
