"""
Unittest the Lennard-Jones potential
"""

import numpy as np
import pytest

from halomd.classical import LJParams, evaluate_classical, lj_pair
from halomd.exceptions import SingularityError
from halomd.neighbor import FULL, HALF, build_neighbor_list
from halomd.system import AtomSet, SimBox, random_configuration
from halomd.util import make_rng

from .conftest import numeric_forces


@pytest.fixture(name="liquid")
def fixture_liquid():
    """A dense random configuration in a periodic box"""
    box = SimBox.cubic(6.0)
    return box, random_configuration(120, box, make_rng(3), min_separation=0.85)


class TestPair:
    """Test the pair function"""

    @staticmethod
    def test_shift_zero_at_cutoff() -> None:
        """The shifted potential vanishes continuously at rc"""
        p = LJParams()
        below, _ = lj_pair(p.rc - 1e-9, p)
        at, slope = lj_pair(p.rc, p)
        assert abs(float(below)) < 1e-9
        assert float(at) == 0.0 and float(slope) == 0.0

    @staticmethod
    def test_derivative() -> None:
        """dV/dr matches a central difference"""
        p = LJParams(epsilon=1.3, sigma=0.9, rc=2.5)
        r = np.linspace(0.85, 2.4, 40)
        h = 1e-6
        numeric = (lj_pair(r + h, p)[0] - lj_pair(r - h, p)[0]) / (2 * h)
        assert np.allclose(lj_pair(r, p)[1], numeric, rtol=1e-6, atol=1e-8)

    @staticmethod
    def test_zero_distance() -> None:
        """r = 0 is a singularity"""
        with pytest.raises(SingularityError):
            lj_pair(np.array([1.0, 0.0]), LJParams())

    @staticmethod
    @pytest.mark.parametrize("kwargs", [{"epsilon": 0.0}, {"sigma": -1.0}, {"rc": 0.5}])
    def test_invalid(kwargs) -> None:
        """Parameters are validated"""
        with pytest.raises(ValueError):
            LJParams(**kwargs)


class TestEvaluate:
    """Test total energy and forces"""

    @staticmethod
    def test_half_full_agree(liquid) -> None:
        """Half and full lists give the same energy and forces"""
        box, atoms = liquid
        p = LJParams()
        e_half, f_half = evaluate_classical(atoms, build_neighbor_list(atoms, box, p.rc, HALF), p)
        e_full, f_full = evaluate_classical(atoms, build_neighbor_list(atoms, box, p.rc, FULL), p)
        assert abs(e_half - e_full) <= 1e-12 * max(1.0, abs(e_half))
        assert np.max(np.abs(f_half - f_full)) <= 1e-12 * max(1.0, np.max(np.abs(f_half)))

    @staticmethod
    def test_newton_third_law(liquid) -> None:
        """Forces sum to zero"""
        box, atoms = liquid
        _, forces = evaluate_classical(atoms, build_neighbor_list(atoms, box, 2.5, HALF), LJParams())
        assert np.allclose(forces.sum(axis=0), 0.0, atol=1e-9)

    @staticmethod
    def test_forces_are_gradient() -> None:
        """Forces are minus the gradient of the energy"""
        box = SimBox.cubic(6.0)
        atoms = random_configuration(10, box, make_rng(8), min_separation=0.9)
        p = LJParams()

        def energy(pos: np.ndarray) -> float:
            moved = atoms.with_positions(pos)
            return evaluate_classical(moved, build_neighbor_list(moved, box, p.rc, HALF), p)[0]

        _, forces = evaluate_classical(atoms, build_neighbor_list(atoms, box, p.rc, HALF), p)
        assert np.allclose(forces, numeric_forces(energy, atoms.positions), rtol=1e-5, atol=1e-6)

    @staticmethod
    def test_dimer() -> None:
        """Two atoms at the minimum feel no force and sit at -epsilon"""
        r_min = 2 ** (1 / 6)
        atoms = AtomSet([0, 1], [0, 0], [[1.0, 1.0, 1.0], [1.0 + r_min, 1.0, 1.0]])
        p = LJParams(energy_shift=False)
        box = SimBox.cubic(6.0)
        energy, forces = evaluate_classical(atoms, build_neighbor_list(atoms, box, p.rc, HALF), p)
        assert energy == pytest.approx(-1.0)
        assert np.allclose(forces, 0.0, atol=1e-12)

    @staticmethod
    def test_overlap() -> None:
        """Coincident atoms raise"""
        atoms = AtomSet([0, 1], [0, 0], [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])
        with pytest.raises(SingularityError):
            evaluate_classical(atoms, build_neighbor_list(atoms, SimBox.cubic(6.0), 2.5, HALF), LJParams())
