"""
Desk-scale training of a `DPModel` on frames labeled by the classical potential.

The loss of one frame is

    w_e · ((E - E_ref) / N)² + w_f · mean((F - F_ref)²)

minimized by plain gradient descent with an exponentially decaying step,
lr = lr0 · decay_rate ** (epoch / decay_epochs).

Parameter gradients of the force term need the mixed derivative ∂²E/∂r∂θ.
Along the residual direction δ this is a directional derivative of ∂E/∂θ,
evaluated by a central difference of exact parameter gradients at r ± h·δ/|δ|.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .classical import LJParams, evaluate_classical
from .deeppot import DPModel, Params, evaluate_centers
from .exceptions import TrainingDivergedError
from .neighbor import FULL, HALF, NeighborList, build_neighbor_list
from .system import AtomSet, SimBox, assign_velocities
from .util import make_rng

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "lr", "loss", "train_rmse", "valid_rmse"]


def force_rmse(pred: np.ndarray, ref: np.ndarray) -> float:
    """
    Root mean square over every force component

    >>> force_rmse(np.array([[1.0, 2.0, 2.0]]), np.zeros((1, 3))) == 3 ** 0.5
    True
    """
    pred, ref = np.asarray(pred, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {ref.shape}")
    if not pred.size:
        return 0.0
    return float(np.sqrt(np.mean((pred - ref) ** 2)))


@dataclass
class Frame:
    """One labeled configuration"""

    box: SimBox
    atoms: AtomSet
    energy: float
    forces: np.ndarray

    def __post_init__(self) -> None:
        self.forces = np.asarray(self.forces, dtype=np.float64).reshape(len(self.atoms), 3)
        if not np.all(np.isfinite(self.forces)) or not np.isfinite(self.energy):
            raise ValueError("reference energy and forces must be finite")


@dataclass
class TrainingSet:
    """Disjoint training and validation frames"""

    train: List[Frame]
    valid: List[Frame] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.train:
            raise ValueError("the training split must not be empty")
        if {id(f) for f in self.train} & {id(f) for f in self.valid}:
            raise ValueError("training and validation splits overlap")

    @classmethod
    def split(cls, frames: Sequence[Frame], valid_fraction: float, seed: Optional[int] = 0) -> TrainingSet:
        """Random split; at least one frame always stays in training"""
        if not 0 <= valid_fraction < 1:
            raise ValueError("valid_fraction must lie in [0, 1)")
        order = make_rng(seed).permutation(len(frames))
        n_valid = min(int(round(valid_fraction * len(frames))), max(len(frames) - 1, 0))
        valid = [frames[i] for i in sorted(order[:n_valid])]
        train = [frames[i] for i in sorted(order[n_valid:])]
        return cls(train, valid)


@dataclass(frozen=True)
class TrainingParams:
    """Optimizer and loss settings"""

    lr0: float = 0.01
    decay_rate: float = 0.5
    decay_epochs: int = 500
    epochs: int = 2000
    batch_size: int = 2
    w_energy: float = 1.0
    w_force: float = 1.0
    seed: int = 0
    fd_step: float = 1e-4
    log_every: int = 100

    def __post_init__(self) -> None:
        if self.lr0 <= 0 or not 0 < self.decay_rate <= 1 or self.decay_epochs < 1:
            raise ValueError("need lr0 > 0, 0 < decay_rate <= 1 and decay_epochs >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("need epochs >= 0 and batch_size >= 1")
        if self.w_energy < 0 or self.w_force < 0 or self.w_energy + self.w_force == 0:
            raise ValueError("loss weights must be non-negative and not both zero")
        if self.fd_step <= 0:
            raise ValueError("fd_step must be positive")

    def learning_rate(self, epoch: int) -> float:
        """
        Step size of an epoch

        >>> TrainingParams(lr0=1.0, decay_rate=0.5, decay_epochs=10).learning_rate(20)
        0.25
        """
        return self.lr0 * self.decay_rate ** (epoch / self.decay_epochs)


def label_frame(box: SimBox, atoms: AtomSet, lj: LJParams) -> Frame:
    """Label a configuration with the classical potential"""
    nlist = build_neighbor_list(atoms, box, lj.rc, HALF)
    energy, forces = evaluate_classical(atoms, nlist, lj)
    return Frame(box, atoms, energy, forces)


def oracle_dataset(
    box: SimBox,
    atoms: AtomSet,
    lj: LJParams,
    n_frames: int,
    stride: int = 20,
    dt: float = 0.002,
    temperature: float = 1.0,
    seed: Optional[int] = 0,
) -> List[Frame]:
    """
    Frames sampled every `stride` steps from a classical NVE trajectory
    started at `temperature`, each labeled by the classical potential.
    """
    # deferred: the engine imports the model modules
    from .engine import ClassicalProvider, MDConfig, run_md  # pylint: disable=import-outside-toplevel

    atoms = assign_velocities(atoms, temperature, make_rng(seed))
    config = MDConfig(dt=dt, n_steps=max(n_frames - 1, 0) * stride, output_every=stride, seed=seed)
    result = run_md(box, atoms, config, [ClassicalProvider(lj)])
    frames = [label_frame(box, frame, lj) for frame in result.frames[:n_frames]]
    logger.info("labeled %d oracle frames of %d atoms", len(frames), len(atoms))
    return frames


class _FrameCache:
    """Neighbor lists of the training frames, built once"""

    def __init__(self, rc: float) -> None:
        self.rc = rc
        self._lists: Dict[int, NeighborList] = {}

    def get(self, frame: Frame) -> NeighborList:
        key = id(frame)
        if key not in self._lists:
            self._lists[key] = build_neighbor_list(frame.atoms, frame.box, self.rc, FULL)
        return self._lists[key]


def _predict(model: DPModel, frame: Frame, nlist: NeighborList) -> Tuple[float, np.ndarray]:
    e, forces, _ = evaluate_centers(frame.atoms, nlist, model, np.arange(len(frame.atoms)))
    return float(np.sum(e)), forces


def _frame_loss_and_grad(
    model: DPModel, frame: Frame, nlist: NeighborList, hp: TrainingParams
) -> Tuple[float, np.ndarray, Params]:
    """
    Loss w_e·(ΔE/N)² + w_f·mean(ΔF²) of one frame, the predicted forces and
    ∂loss/∂θ.

    The energy term is exact. The force term needs ∂F/∂θ contracted with the
    force residual δ, taken as a central difference of ∂E/∂θ at r ± h·δ/|δ|
    with h = `hp.fd_step` (1e-4 by default, in length units). Its error is
    O(h²); roundoff grows like 1/h below about 1e-6.
    """
    n = len(frame.atoms)
    centers = np.arange(n)
    e, forces, g_energy = evaluate_centers(frame.atoms, nlist, model, centers, param_grad=True)
    assert g_energy is not None
    energy = float(np.sum(e))
    de = (energy - frame.energy) / n
    delta = forces - frame.forces
    loss = hp.w_energy * de * de + hp.w_force * float(np.mean(delta * delta))

    grads = {k: 2.0 * hp.w_energy * de / n * v for k, v in g_energy.items()}
    norm = float(np.linalg.norm(delta))
    if hp.w_force and norm > 0:
        step = hp.fd_step * delta / norm
        _, _, g_plus = evaluate_centers(frame.atoms.with_positions(frame.atoms.positions + step), nlist, model, centers, param_grad=True)
        _, _, g_minus = evaluate_centers(frame.atoms.with_positions(frame.atoms.positions - step), nlist, model, centers, param_grad=True)
        assert g_plus is not None and g_minus is not None
        # ∂F/∂θ · δ = -∂/∂h [∂E/∂θ(r + hδ)]
        coeff = -2.0 * hp.w_force / (3 * n) * norm / (2.0 * hp.fd_step)
        for k in grads:
            grads[k] = grads[k] + coeff * (g_plus[k] - g_minus[k])
    return loss, forces, grads


def fit_atom_bias(model: DPModel, frames: Sequence[Frame], cache: _FrameCache) -> DPModel:
    """Shift the per-species energy bias to the least-squares fit of the residual energies"""
    n_types = model.config.n_types
    counts = np.array([np.bincount(f.atoms.species, minlength=n_types) for f in frames], dtype=np.float64)
    residual = np.array([f.energy - _predict(model, f, cache.get(f))[0] for f in frames])
    shift, *_ = np.linalg.lstsq(counts, residual, rcond=None)
    model = model.copy()
    model.params["atom_bias"] = model.params["atom_bias"] + shift
    logger.debug("energy bias per species %s", model.params["atom_bias"].tolist())
    return model


def _valid_rmse(model: DPModel, frames: Sequence[Frame], cache: _FrameCache) -> float:
    if not frames:
        return float("nan")
    pred = np.concatenate([_predict(model, f, cache.get(f))[1] for f in frames])
    return force_rmse(pred, np.concatenate([f.forces for f in frames]))


def train(
    model: DPModel, data: TrainingSet, hp: TrainingParams, fit_bias: bool = True
) -> Tuple[DPModel, pd.DataFrame]:
    """
    Gradient descent over `hp.epochs` epochs.

    Each curve row describes the model entering that epoch: `train_rmse`
    comes from the predictions the epoch's updates were computed from.
    """
    cache = _FrameCache(model.rc)
    rows: List[dict] = []
    if hp.epochs == 0:
        return model, pd.DataFrame(rows, columns=CURVE_COLUMNS)
    if fit_bias:
        model = fit_atom_bias(model, data.train, cache)
    rng = make_rng(hp.seed)
    theta = model.flat_params()
    checkpoint = model

    for epoch in range(hp.epochs):
        lr = hp.learning_rate(epoch)
        valid_rmse = _valid_rmse(model, data.valid, cache)
        losses, preds, refs = [], [], []
        order = rng.permutation(len(data.train))
        for lo in range(0, len(order), hp.batch_size):
            batch = [data.train[i] for i in order[lo : lo + hp.batch_size]]
            total = np.zeros_like(theta)
            for frame in batch:
                loss, forces, grads = _frame_loss_and_grad(model, frame, cache.get(frame), hp)
                losses.append(loss)
                preds.append(forces)
                refs.append(frame.forces)
                total += np.concatenate([g.reshape(-1) for g in grads.values()])
            theta = theta - lr * total / len(batch)
            if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(losses))):
                curve = pd.DataFrame(rows, columns=CURVE_COLUMNS)
                raise TrainingDivergedError(epoch, checkpoint, curve)
            model = model.with_flat_params(theta)
        rows.append(
            {
                "epoch": epoch,
                "lr": lr,
                "loss": float(np.mean(losses)),
                "train_rmse": force_rmse(np.concatenate(preds), np.concatenate(refs)),
                "valid_rmse": valid_rmse,
            }
        )
        checkpoint = model
        if hp.log_every and epoch % hp.log_every == 0:
            logger.info(
                "epoch %d: lr %.3g loss %.4g train rmse %.4g valid rmse %.4g",
                epoch,
                lr,
                rows[-1]["loss"],
                rows[-1]["train_rmse"],
                valid_rmse,
            )
    return model, pd.DataFrame(rows, columns=CURVE_COLUMNS)
