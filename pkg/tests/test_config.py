"""
Unittest run configurations and manifests
"""

import json

import pytest

from halomd.config import RunConfig, RunManifest, load_config
from halomd.decomp import MASKED_REDUCTION, WIDE_HALO
from halomd.exceptions import ConfigError
from halomd.util import sha256_hex


class TestRunConfig:
    """Test parsing and validation"""

    @staticmethod
    def test_defaults() -> None:
        """An empty document gives the defaults"""
        cfg = RunConfig.from_dict({})
        assert cfg == RunConfig()
        assert cfg.md.scheme == MASKED_REDUCTION

    @staticmethod
    def test_round_trip() -> None:
        """to_dict and from_dict are inverse"""
        cfg = RunConfig.from_dict(
            {
                "seed": 4,
                "system": {"nn_species": [1]},
                "model": {"embed_widths": [4, 8]},
                "sweep": {"compare_classical": True},
                "gyrate": {"group": [0, 3]},
            }
        )
        assert cfg.system.nn_species == (1,)
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    @staticmethod
    def test_number_widening() -> None:
        """Integers are accepted where floats are expected"""
        assert RunConfig.from_dict({"lj": {"rc": 3}}).lj.rc == 3.0

    @staticmethod
    @pytest.mark.parametrize(
        "doc",
        [
            {"md": {"n_steps": "5"}},
            {"md": {"n_steps": 2.5}},
            {"lj": {"energy_shift": 1}},
            {"validate": {"ranks": 4}},
            {"sweep": {"compare_classical": 1}},
            {"md": []},
            {"seed": True},
            [],
        ],
    )
    def test_wrong_types(doc) -> None:
        """Values must have the type of the field"""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(doc)

    @staticmethod
    def test_unknown_keys() -> None:
        """Every unknown key is reported with its path"""
        with pytest.raises(ConfigError, match="md.nsteps, sweep.rank"):
            RunConfig.from_dict({"md": {"nsteps": 1}, "sweep": {"rank": [1]}})

    @staticmethod
    @pytest.mark.parametrize(
        "doc",
        [
            {"md": {"scheme": "thin_halo"}},
            {"sweep": {"mode": "medium"}},
            {"sweep": {"ranks": [0, 2]}},
            {"validate": {"min_atoms": 10, "max_atoms": 5}},
        ],
    )
    def test_invalid_values(doc) -> None:
        """Semantically invalid settings are rejected"""
        with pytest.raises(ConfigError):
            RunConfig.from_dict(doc)

    @staticmethod
    def test_overrides() -> None:
        """Flags win over the file"""
        cfg = RunConfig.from_dict({"md": {"workers": 2, "n_ranks": 3}})
        out = cfg.with_overrides(seed=9, workers=4, scheme="wide-halo", ranks=[8])
        assert (out.seed, out.md.workers, out.md.scheme, out.md.n_ranks) == (9, 4, WIDE_HALO, 8)
        assert out.validate.schemes == (WIDE_HALO,) and out.sweep.ranks == (8,)
        assert cfg.with_overrides(ranks=[1, 2]).md.n_ranks == 3
        assert cfg.with_overrides() == cfg

    @staticmethod
    def test_converters() -> None:
        """Sections turn into the parameter objects of the package"""
        cfg = RunConfig.from_dict({"seed": 5, "md": {"potential": "dp_dd", "n_ranks": 2}, "train": {"epochs": 7}})
        assert cfg.model.dp_config(cfg.seed).seed == 5
        md = cfg.md.md_config(cfg.seed, (1,))
        assert (md.potential, md.n_ranks, md.nn_species) == ("dp_dd", 2, (1,))
        assert cfg.train.training_params(cfg.seed).epochs == 7
        assert cfg.lj.params().rc == 2.5


class TestLoadConfig:
    """Test reading configuration files"""

    @staticmethod
    def test_no_path() -> None:
        """No file means defaults"""
        assert load_config(None) == RunConfig()

    @staticmethod
    def test_file(tmp_path) -> None:
        """A JSON file is parsed"""
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"md": {"dt": 0.001}}), encoding="utf-8")
        assert load_config(path).md.dt == 0.001

    @staticmethod
    def test_bad_json(tmp_path) -> None:
        """Malformed JSON names the line"""
        path = tmp_path / "cfg.json"
        path.write_text('{\n  "md": \n}', encoding="utf-8")
        with pytest.raises(ConfigError, match="line 3"):
            load_config(path)

    @staticmethod
    def test_missing(tmp_path) -> None:
        """A missing file is a configuration error"""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")


class TestManifest:
    """Test run manifests"""

    @staticmethod
    def test_write_read(tmp_path) -> None:
        """Artifacts are recorded with their digest"""
        artifact = tmp_path / "energies.csv"
        artifact.write_bytes(b"step\n")
        manifest = RunManifest("run", None, RunConfig().to_dict(), 0, str(tmp_path))
        manifest.add(artifact)
        path = manifest.write()
        assert path == tmp_path / "manifest.json"
        back = RunManifest.read(path)
        assert back == manifest
        assert back.artifacts["energies.csv"] == sha256_hex(b"step\n")

    @staticmethod
    def test_not_a_manifest(tmp_path) -> None:
        """Foreign JSON is rejected"""
        path = tmp_path / "manifest.json"
        path.write_text('{"hello": 1}', encoding="utf-8")
        with pytest.raises(ConfigError):
            RunManifest.read(path)
