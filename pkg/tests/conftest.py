"""
Configuration for pytest
"""

import numpy as np
import pytest

from halomd.deeppot import DPConfig, DPModel
from halomd.system import AtomSet, SimBox, random_configuration
from halomd.util import make_rng


def pytest_make_parametrize_id(config, val):
    """
    Return a user-friendly string representation of the given `val` that will be
    used by @pytest.mark.parametrize calls, or None if the hook doesn’t know
    about val.
    """
    # pytest's API; pylint: disable=unused-argument
    if getattr(val, "__module__", val.__class__.__module__).startswith("halomd"):
        return repr(val)
    return None


def small_dp_config(n_attn: int = 0, n_types: int = 2, seed: int = 3) -> DPConfig:
    """A model small enough for exhaustive checks"""
    return DPConfig(
        rc=1.6,
        rcs=1.0,
        n_max=32,
        n_types=n_types,
        type_dim=3,
        embed_widths=(4, 8),
        n_attn=n_attn,
        attn_dim=6,
        m_reduced=3,
        fit_widths=(12, 12),
        seed=seed,
    )


def perturbed_model(config: DPConfig, scale: float = 0.3) -> DPModel:
    """A model whose biases are non-zero too, so every parameter matters"""
    model = DPModel.initialize(config)
    rng = make_rng(config.seed + 100)
    for name, value in model.params.items():
        model.params[name] = value + scale * rng.normal(size=value.shape)
    return model


@pytest.fixture(name="model", params=[0, 2], ids=["plain", "attention"])
def fixture_model(request) -> DPModel:
    """Small models without and with attention layers"""
    return perturbed_model(small_dp_config(n_attn=request.param))


@pytest.fixture(name="box")
def fixture_box() -> SimBox:
    """A periodic cube large enough for eight wide-halo subdomains"""
    return SimBox.cubic(10.0)


@pytest.fixture(name="gas")
def fixture_gas(box: SimBox) -> AtomSet:
    """A random two-species configuration without close contacts"""
    return random_configuration(80, box, make_rng(7), n_species=2, min_separation=0.8)


@pytest.fixture(name="cluster")
def fixture_cluster() -> AtomSet:
    """A small isolated cluster in open space"""
    rng = make_rng(11)
    box = SimBox.cubic(3.0, periodic=False)
    atoms = random_configuration(14, box, rng, n_species=2, min_separation=0.7)
    return atoms.with_positions(atoms.positions + 5.0)


@pytest.fixture(name="open_box")
def fixture_open_box() -> SimBox:
    """A non-periodic box around `cluster`"""
    return SimBox.cubic(13.0, periodic=False)


def numeric_forces(energy, positions: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of `energy(positions)`"""
    forces = np.zeros_like(positions)
    for i in range(positions.shape[0]):
        for k in range(3):
            plus, minus = positions.copy(), positions.copy()
            plus[i, k] += h
            minus[i, k] -= h
            forces[i, k] = -(energy(plus) - energy(minus)) / (2.0 * h)
    return forces
