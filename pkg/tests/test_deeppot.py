"""
Unittest the local deep potential: switching, environments, symmetries and
the hand-written gradients
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from halomd.deeppot import (
    DPConfig,
    DPModel,
    LocalMask,
    build_environment,
    descriptor,
    energy_parameter_gradient,
    evaluate_centers,
    evaluate_dp,
    switch_fn,
)
from halomd.exceptions import CapacityError, SingularityError
from halomd.neighbor import FULL, HALF, build_neighbor_list
from halomd.system import AtomSet, SimBox, lattice_init, random_configuration
from halomd.util import make_rng

from .conftest import numeric_forces, perturbed_model, small_dp_config


def total_energy(model: DPModel, atoms: AtomSet, box: SimBox) -> float:
    """Energy with every atom local"""
    return evaluate_dp(atoms, build_neighbor_list(atoms, box, model.rc, FULL), model).energy


def dp_forces(model: DPModel, atoms: AtomSet, box: SimBox) -> np.ndarray:
    """Analytic forces with every atom local"""
    return evaluate_dp(atoms, build_neighbor_list(atoms, box, model.rc, FULL), model).forces


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Largest deviation relative to the largest reference magnitude"""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


class TestSwitch:
    """Test the smooth switching"""

    @staticmethod
    def test_derivative() -> None:
        """ds/dr matches a central difference across the switching region"""
        r = np.linspace(0.4, 1.95, 200)
        h = 1e-6
        numeric = (switch_fn(r + h, 1.0, 2.0)[0] - switch_fn(r - h, 1.0, 2.0)[0]) / (2 * h)
        assert np.allclose(switch_fn(r, 1.0, 2.0)[1], numeric, rtol=1e-6, atol=1e-7)

    @staticmethod
    def test_continuity() -> None:
        """Value and slope are continuous at rcs and vanish at rc"""
        s_lo, ds_lo = switch_fn(1.0 - 1e-9, 1.0, 2.0)
        s_hi, ds_hi = switch_fn(1.0 + 1e-9, 1.0, 2.0)
        assert abs(float(s_lo - s_hi)) < 1e-8 and abs(float(ds_lo - ds_hi)) < 1e-6
        s, ds = switch_fn(2.0 - 1e-6, 1.0, 2.0)
        assert abs(float(s)) < 1e-15 and abs(float(ds)) < 1e-9

    @staticmethod
    def test_zero() -> None:
        """r = 0 is a singularity"""
        with pytest.raises(SingularityError):
            switch_fn(0.0, 1.0, 2.0)


class TestConfig:
    """Test model hyperparameters and parameter handling"""

    @staticmethod
    @pytest.mark.parametrize(
        "kwargs",
        [{"rcs": 2.0}, {"n_max": 0}, {"m_reduced": 17}, {"embed_widths": ()}, {"n_attn": -1}],
    )
    def test_invalid(kwargs) -> None:
        """Inconsistent hyperparameters are rejected"""
        with pytest.raises(ValueError):
            DPConfig(**kwargs)

    @staticmethod
    def test_dict_round_trip() -> None:
        """to_dict and from_dict are inverse"""
        cfg = small_dp_config(n_attn=2)
        assert DPConfig.from_dict(cfg.to_dict()) == cfg

    @staticmethod
    def test_flat_params(model: DPModel) -> None:
        """Flattening and unflattening parameters is lossless"""
        flat = model.flat_params()
        assert flat.shape == (model.n_params,)
        assert model.with_flat_params(flat) == model
        with pytest.raises(ValueError):
            model.with_flat_params(flat[:-1])

    @staticmethod
    def test_shapes_checked() -> None:
        """Parameters must match the configuration"""
        model = DPModel.initialize(small_dp_config())
        params = dict(model.params)
        params["atom_bias"] = np.zeros(5)
        with pytest.raises(ValueError):
            DPModel(model.config, params)


class TestEnvironment:
    """Test the environment matrix"""

    @staticmethod
    def test_sorted_and_padded() -> None:
        """Neighbors are ordered by species then distance; unused slots are zero"""
        atoms = AtomSet(
            [0, 1, 2, 3],
            [0, 1, 0, 0],
            [[5.0, 5.0, 5.0], [5.5, 5.0, 5.0], [6.2, 5.0, 5.0], [5.0, 5.9, 5.0]],
        )
        box = SimBox.cubic(12.0, periodic=False)
        model = DPModel.initialize(small_dp_config())
        env = build_environment(0, build_neighbor_list(atoms, box, model.rc), atoms, model)
        assert env.n_real == 3
        assert env.neighbor_index.tolist() == [3, 2, 1]
        assert env.neighbor_species[:3].tolist() == [0, 0, 1]
        assert np.all(env.rows[3:] == 0.0)
        assert env.rows[0, 0] == pytest.approx(float(switch_fn(0.9, 1.0, 1.6)[0]))
        assert descriptor(env, model).shape == (model.config.descriptor_size,)

    @staticmethod
    def test_capacity() -> None:
        """Too many neighbors name the atom instead of truncating"""
        box, atoms = lattice_init(4, 1.0)
        cfg = DPConfig(rc=1.6, rcs=1.0, n_max=4, embed_widths=(4,), m_reduced=2, fit_widths=(4,))
        model = DPModel.initialize(cfg)
        with pytest.raises(CapacityError, match="atom 0 has"):
            evaluate_dp(atoms, build_neighbor_list(atoms, box, model.rc), model)

    @staticmethod
    def test_needs_full_list(gas: AtomSet, box: SimBox, model: DPModel) -> None:
        """Half lists cannot feed descriptors"""
        with pytest.raises(ValueError):
            evaluate_dp(gas, build_neighbor_list(gas, box, model.rc, HALF), model)


class TestDescriptor:
    """Test the descriptor against its closed form"""

    @staticmethod
    def test_without_attention(cluster: AtomSet, open_box: SimBox) -> None:
        """Without attention layers D = T·T<ᵀ with T = GᵀR / n_max"""
        model = perturbed_model(small_dp_config(n_attn=0))
        cfg, params = model.config, model.params
        env = build_environment(0, build_neighbor_list(cluster, open_box, model.rc), cluster, model)
        valid = np.arange(cfg.n_max) < env.n_real
        tz = params["type_embed"]
        x = np.column_stack(
            [env.rows[:, 0], tz[env.neighbor_species], np.tile(tz[env.center_species], (cfg.n_max, 1))]
        )
        for i in range(len(cfg.embed_widths)):
            x = np.tanh(x @ params[f"embed.{i}.w"] + params[f"embed.{i}.b"])
        G = x * valid[:, None]
        T = G.T @ env.rows / cfg.n_max
        expected = T @ T[: cfg.m_reduced].T
        assert env.n_real > 1
        assert np.allclose(descriptor(env, model), expected.reshape(-1), rtol=1e-12, atol=1e-15)

    @staticmethod
    def test_silent_attention(cluster: AtomSet, open_box: SimBox) -> None:
        """Attention layers with zero value weights leave the descriptor bit for bit unchanged"""
        plain = perturbed_model(small_dp_config(n_attn=0))
        attention = perturbed_model(small_dp_config(n_attn=2))
        for name, value in plain.params.items():
            attention.params[name] = value.copy()
        for i in range(2):
            attention.params[f"attn.{i}.wv"][:] = 0.0
        nlist = build_neighbor_list(cluster, open_box, plain.rc)
        for center in range(len(cluster)):
            env = build_environment(center, nlist, cluster, plain)
            assert np.array_equal(descriptor(env, attention), descriptor(env, plain))


class TestSymmetry:
    """Invariances of the energy"""

    @staticmethod
    def test_permutation(gas: AtomSet, box: SimBox, model: DPModel) -> None:
        """Reordering atoms (with their ids) leaves the energy unchanged"""
        order = make_rng(1).permutation(len(gas))
        shuffled = gas.subset(order)
        e0, f0 = total_energy(model, gas, box), dp_forces(model, gas, box)
        e1, f1 = total_energy(model, shuffled, box), dp_forces(model, shuffled, box)
        assert abs(e0 - e1) < 1e-12 * max(1.0, abs(e0))
        assert np.max(np.abs(f0[order] - f1)) < 1e-12 * max(1.0, np.max(np.abs(f0)))

    @staticmethod
    @pytest.mark.parametrize("seed", range(3))
    def test_rotation(cluster: AtomSet, open_box: SimBox, model: DPModel, seed: int) -> None:
        """Energies are rotation invariant, forces rotate along"""
        rot = Rotation.random(random_state=seed).as_matrix()
        center = cluster.positions.mean(axis=0)
        rotated = cluster.with_positions((cluster.positions - center) @ rot.T + center)
        e0, f0 = total_energy(model, cluster, open_box), dp_forces(model, cluster, open_box)
        e1, f1 = total_energy(model, rotated, open_box), dp_forces(model, rotated, open_box)
        assert abs(e0 - e1) < 1e-10 * max(1.0, abs(e0))
        assert np.max(np.abs(f0 @ rot.T - f1)) < 1e-9 * max(1.0, np.max(np.abs(f0)))

    @staticmethod
    def test_translation(gas: AtomSet, box: SimBox, model: DPModel) -> None:
        """Forces sum to zero"""
        forces = dp_forces(model, gas, box)
        assert np.max(np.abs(forces.sum(axis=0))) < 1e-9

    @staticmethod
    def test_cutoff_smoothness(model: DPModel) -> None:
        """Crossing the cutoff changes the energy by a negligible amount"""
        box = SimBox.cubic(10.0, periodic=False)
        rc = model.rc

        def dimer(r: float) -> AtomSet:
            return AtomSet([0, 1], [0, 1], [[4.0, 4.0, 4.0], [4.0 + r, 4.0, 4.0]])

        inside = total_energy(model, dimer(rc - 1e-7), box)
        outside = total_energy(model, dimer(rc + 1e-7), box)
        assert abs(inside - outside) < 1e-10

    @staticmethod
    def test_attention_cutoff() -> None:
        """A third atom crossing rc leaves the attention of its center without a jump"""
        model = perturbed_model(small_dp_config(n_attn=2))
        box = SimBox.cubic(10.0, periodic=False)
        rc = model.rc

        def trimer(r: float) -> AtomSet:
            return AtomSet([0, 1, 2], [0, 1, 0], [[4.0, 4.0, 4.0], [3.0, 4.0, 4.0], [4.0 + r, 4.0, 4.0]])

        inside = total_energy(model, trimer(rc - 1e-7), box)
        outside = total_energy(model, trimer(rc + 1e-7), box)
        assert abs(inside - outside) < 1e-10
        assert abs(total_energy(model, trimer(rc - 0.2), box) - outside) > 1e-6

    @staticmethod
    def test_locality(cluster: AtomSet, open_box: SimBox, model: DPModel) -> None:
        """An atom beyond rc does not affect an atomic energy, bit for bit"""
        d = np.linalg.norm(cluster.positions - cluster.positions[0], axis=1)
        far = int(np.argmax(d))
        assert d[far] > model.rc + 0.3
        moved_pos = cluster.positions.copy()
        moved_pos[far] += 0.2 * (cluster.positions[far] - cluster.positions[0]) / d[far]
        moved = cluster.with_positions(moved_pos)
        before = evaluate_dp(cluster, build_neighbor_list(cluster, open_box, model.rc), model)
        after = evaluate_dp(moved, build_neighbor_list(moved, open_box, model.rc), model)
        assert before.atom_energies[0] == after.atom_energies[0]

    @staticmethod
    def test_isolated_atom() -> None:
        """An atom without neighbors has the energy of an empty environment and no force"""
        model = perturbed_model(small_dp_config())
        atoms = AtomSet([0], [1], [[1.0, 1.0, 1.0]])
        result = evaluate_dp(atoms, build_neighbor_list(atoms, SimBox.cubic(5.0), model.rc), model)
        assert np.all(result.forces == 0.0)
        assert np.isfinite(result.energy)


class TestGradients:
    """Test the backward pass against finite differences"""

    @staticmethod
    def test_forces(cluster: AtomSet, open_box: SimBox, model: DPModel) -> None:
        """Analytic forces equal -dE/dr"""
        numeric = numeric_forces(lambda p: total_energy(model, cluster.with_positions(p), open_box), cluster.positions)
        assert relative_error(dp_forces(model, cluster, open_box), numeric) < 1e-6

    @staticmethod
    def test_forces_periodic(model: DPModel) -> None:
        """Forces through periodic images are exact too"""
        box = SimBox.cubic(4.0)
        atoms = random_configuration(12, box, make_rng(21), n_species=2, min_separation=0.8)
        numeric = numeric_forces(lambda p: total_energy(model, atoms.with_positions(p), box), atoms.positions)
        assert relative_error(dp_forces(model, atoms, box), numeric) < 1e-6

    @staticmethod
    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(20))
    def test_forces_many(seed: int) -> None:
        """Analytic forces on many 32-atom configurations"""
        model = perturbed_model(small_dp_config(n_attn=seed % 3, seed=seed))
        box = SimBox.cubic(5.0)
        atoms = random_configuration(32, box, make_rng(seed), n_species=2, min_separation=0.75)
        numeric = numeric_forces(lambda p: total_energy(model, atoms.with_positions(p), box), atoms.positions)
        assert relative_error(dp_forces(model, atoms, box), numeric) < 1e-6

    @staticmethod
    def test_parameter_gradient(cluster: AtomSet, open_box: SimBox, model: DPModel) -> None:
        """dE/dθ matches a central difference for sampled entries of every tensor"""
        nlist = build_neighbor_list(cluster, open_box, model.rc)
        _, _, grads = energy_parameter_gradient(cluster, nlist, model)
        rng = make_rng(5)
        h = 1e-6
        for name, value in model.params.items():
            for _ in range(3):
                idx = tuple(int(rng.integers(0, n)) for n in value.shape)
                plus, minus = model.copy(), model.copy()
                plus.params[name][idx] += h
                minus.params[name][idx] -= h
                numeric = (
                    evaluate_dp(cluster, nlist, plus).energy - evaluate_dp(cluster, nlist, minus).energy
                ) / (2 * h)
                assert grads[name][idx] == pytest.approx(numeric, rel=1e-5, abs=1e-7), name

    @staticmethod
    def test_weighted_centers(gas: AtomSet, box: SimBox, model: DPModel) -> None:
        """Forces are linear in the center weights"""
        nlist = build_neighbor_list(gas, box, model.rc)
        centers = np.arange(len(gas))
        w = make_rng(2).uniform(0.0, 2.0, len(gas))
        _, f_w, _ = evaluate_centers(gas, nlist, model, centers, weights=w)
        f_sum = np.zeros_like(f_w)
        for c in range(0, len(gas), 17):
            _, f_c, _ = evaluate_centers(gas, nlist, model, centers[c : c + 17], weights=w[c : c + 17])
            f_sum += f_c
        assert np.allclose(f_w, f_sum, rtol=1e-10, atol=1e-12)


class TestMask:
    """Test masked evaluation"""

    @staticmethod
    def test_masked_energy(gas: AtomSet, box: SimBox, model: DPModel) -> None:
        """The masked energy is the sum of the local atomic energies"""
        nlist = build_neighbor_list(gas, box, model.rc)
        full = evaluate_dp(gas, nlist, model)
        flags = np.arange(len(gas)) % 3 == 0
        masked = evaluate_dp(gas, nlist, model, LocalMask(flags))
        assert masked.energy == pytest.approx(float(np.sum(full.atom_energies[flags])), rel=1e-12, abs=1e-12)
        assert np.all(masked.atom_energies[~flags] == 0.0)
        assert masked.forces_local.shape == (int(flags.sum()), 3)
        assert np.any(masked.forces_on_ghosts != 0.0)

    @staticmethod
    def test_empty_mask() -> None:
        """At least one atom must be local"""
        with pytest.raises(ValueError):
            LocalMask(np.zeros(4, dtype=bool))

    @staticmethod
    def test_mask_length(gas: AtomSet, box: SimBox, model: DPModel) -> None:
        """The mask must cover every atom"""
        with pytest.raises(ValueError):
            evaluate_dp(gas, build_neighbor_list(gas, box, model.rc), model, LocalMask.all_local(3))
