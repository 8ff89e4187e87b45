"""
Unittest training on classically labeled frames
"""

from typing import List

import numpy as np
import pytest

from halomd.classical import LJParams
from halomd.config import TrainSection
from halomd.deeppot import DPModel
from halomd.exceptions import TrainingDivergedError
from halomd.neighbor import build_neighbor_list
from halomd.system import lattice_init, wrap_position
from halomd.training import (
    CURVE_COLUMNS,
    Frame,
    TrainingParams,
    TrainingSet,
    _frame_loss_and_grad,
    _FrameCache,
    _predict,
    fit_atom_bias,
    force_rmse,
    label_frame,
    oracle_dataset,
    train,
)
from halomd.util import make_rng

from .conftest import perturbed_model, small_dp_config

LJ = LJParams(rc=1.5)


def jiggled_frames(n: int, seed: int = 0) -> List[Frame]:
    """Perturbed 27-atom lattices labeled by a short-ranged LJ"""
    box, atoms = lattice_init(3, 0.8)
    rng = make_rng(seed)
    return [
        label_frame(box, atoms.with_positions(wrap_position(atoms.positions + rng.normal(0.0, 0.06, (27, 3)), box)), LJ)
        for _ in range(n)
    ]


def frame_loss(model: DPModel, frame: Frame, hp: TrainingParams) -> float:
    """Loss of one frame"""
    return _frame_loss_and_grad(model, frame, build_neighbor_list(frame.atoms, frame.box, model.rc), hp)[0]


@pytest.fixture(name="frames")
def fixture_frames() -> List[Frame]:
    """A handful of labeled frames"""
    return jiggled_frames(4)


class TestLoss:
    """Test the loss and its parameter gradient"""

    @staticmethod
    @pytest.mark.parametrize("w_force", [0.0, 1.0])
    def test_gradient(frames: List[Frame], model: DPModel, w_force: float) -> None:
        """The loss gradient matches a central difference of the loss"""
        hp = TrainingParams(w_energy=1.0, w_force=w_force, fd_step=1e-5)
        frame = frames[0]
        nlist = build_neighbor_list(frame.atoms, frame.box, model.rc)
        _, _, grads = _frame_loss_and_grad(model, frame, nlist, hp)
        rng = make_rng(9)
        h = 1e-6
        for name in ["type_embed", "embed.0.w", "embed.1.b", "fit.0.w", "fit.2.w", "fit.2.b"]:
            idx = tuple(int(rng.integers(0, n)) for n in model.params[name].shape)
            plus, minus = model.copy(), model.copy()
            plus.params[name][idx] += h
            minus.params[name][idx] -= h
            numeric = (frame_loss(plus, frame, hp) - frame_loss(minus, frame, hp)) / (2 * h)
            assert grads[name][idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6), name

    @staticmethod
    def test_descent_step(frames: List[Frame], model: DPModel) -> None:
        """A small step against the gradient lowers the loss"""
        hp = TrainingParams()
        frame = frames[1]
        nlist = build_neighbor_list(frame.atoms, frame.box, model.rc)
        loss, _, grads = _frame_loss_and_grad(model, frame, nlist, hp)
        g = np.concatenate([v.reshape(-1) for v in grads.values()])
        stepped = model.with_flat_params(model.flat_params() - 1e-4 * g / np.linalg.norm(g))
        assert frame_loss(stepped, frame, hp) < loss

    @staticmethod
    def test_force_term_order(frames: List[Frame], model: DPModel) -> None:
        """Halving fd_step quarters the finite-difference error of the force term"""
        frame = frames[0]
        nlist = build_neighbor_list(frame.atoms, frame.box, model.rc)

        def gradient(h: float) -> np.ndarray:
            hp = TrainingParams(w_energy=0.0, w_force=1.0, fd_step=h)
            grads = _frame_loss_and_grad(model, frame, nlist, hp)[2]
            return np.concatenate([g.reshape(-1) for g in grads.values()])

        g4, g2, g1 = gradient(4e-3), gradient(2e-3), gradient(1e-3)
        ratio = np.linalg.norm(g4 - g2) / np.linalg.norm(g2 - g1)
        assert 3.0 < ratio < 5.0

    @staticmethod
    def test_fd_step_default() -> None:
        """The configuration and the optimizer share the finite-difference step"""
        assert TrainingParams().fd_step == TrainSection().fd_step == 1e-4

    @staticmethod
    def test_rmse() -> None:
        """Shapes must agree"""
        assert force_rmse(np.zeros((0, 3)), np.zeros((0, 3))) == 0.0
        with pytest.raises(ValueError):
            force_rmse(np.zeros((2, 3)), np.zeros((3, 3)))


class TestData:
    """Test datasets"""

    @staticmethod
    def test_split(frames: List[Frame]) -> None:
        """Splits are disjoint and keep at least one training frame"""
        data = TrainingSet.split(frames, 0.5, seed=1)
        assert len(data.train) == 2 and len(data.valid) == 2
        assert not {id(f) for f in data.train} & {id(f) for f in data.valid}
        assert len(TrainingSet.split(frames[:1], 0.9).train) == 1
        with pytest.raises(ValueError):
            TrainingSet(frames[:2], frames[1:])

    @staticmethod
    def test_oracle_dataset() -> None:
        """Oracle frames are sampled along a classical trajectory"""
        box, atoms = lattice_init(4, 0.8)
        frames = oracle_dataset(box, atoms, LJParams(rc=2.0), n_frames=3, stride=5, seed=2)
        assert len(frames) == 3
        assert not np.array_equal(frames[0].atoms.positions, frames[2].atoms.positions)
        assert all(np.isfinite(f.energy) for f in frames)

    @staticmethod
    def test_bias_fit(frames: List[Frame], model: DPModel) -> None:
        """After fitting the bias the energy residuals average to zero"""
        cache = _FrameCache(model.rc)
        fitted = fit_atom_bias(model, frames, cache)
        residual = [f.energy - _predict(fitted, f, cache.get(f))[0] for f in frames]
        assert np.mean(residual) == pytest.approx(0.0, abs=1e-9)


class TestTrain:
    """Test the optimizer loop"""

    @staticmethod
    def test_zero_epochs(frames: List[Frame], model: DPModel) -> None:
        """No epochs leave the model untouched"""
        out, curve = train(model, TrainingSet(frames), TrainingParams(epochs=0))
        assert out == model
        assert list(curve.columns) == CURVE_COLUMNS and curve.empty

    @staticmethod
    def test_curve(frames: List[Frame]) -> None:
        """One curve row per epoch with a decaying learning rate"""
        model = DPModel.initialize(small_dp_config(n_types=1))
        hp = TrainingParams(lr0=0.002, decay_epochs=2, epochs=3, log_every=1)
        _, curve = train(model, TrainingSet.split(frames, 0.25), hp)
        assert curve["epoch"].tolist() == [0, 1, 2]
        assert curve["lr"].is_monotonic_decreasing
        assert curve[["loss", "train_rmse", "valid_rmse"]].notna().all().all()

    @staticmethod
    def test_diverged(frames: List[Frame], model: DPModel) -> None:
        """A runaway step raises with the last finite model"""
        hp = TrainingParams(lr0=1e300, epochs=3, batch_size=1)
        with pytest.raises(TrainingDivergedError) as info:
            train(model, TrainingSet(frames), hp)
        assert isinstance(info.value.checkpoint, DPModel)
        assert np.all(np.isfinite(info.value.checkpoint.flat_params()))

    @staticmethod
    @pytest.mark.slow
    def test_learns() -> None:
        """Training lowers the force error on held-out frames"""
        frames = jiggled_frames(8, seed=3)
        model = perturbed_model(small_dp_config(n_types=1), scale=0.1)
        hp = TrainingParams(lr0=0.005, decay_rate=0.5, decay_epochs=100, epochs=150, batch_size=2, log_every=50)
        _, curve = train(model, TrainingSet.split(frames, 0.25, seed=0), hp)
        assert curve["valid_rmse"].iloc[-1] < curve["valid_rmse"].iloc[0]

    @staticmethod
    @pytest.mark.slow
    def test_oracle_acceptance() -> None:
        """Ten oracle frames and 2000 epochs cut the validation force RMSE at least fivefold"""
        box, atoms = lattice_init(3, 0.8)
        frames = oracle_dataset(box, atoms, LJ, 10, stride=20, temperature=0.5, seed=1)
        model = DPModel.initialize(small_dp_config(n_types=1))
        hp = TrainingParams(lr0=0.005, decay_rate=0.5, decay_epochs=500, epochs=2000, batch_size=2, log_every=500)
        _, curve = train(model, TrainingSet.split(frames, 0.2, seed=0), hp)
        valid = curve["valid_rmse"].to_numpy()
        assert len(valid) == 2000 and np.all(np.isfinite(valid))
        assert valid[0] / valid[-1] >= 5.0
