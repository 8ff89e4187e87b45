"""
Unittest utilities
"""

import numpy as np
import pytest

from halomd.exceptions import DecodeError
from halomd.util import (
    atomic_write_bytes,
    atomic_write_text,
    decode_varint,
    encode_varint,
    make_rng,
    sha256_file,
    sha256_hex,
)


class TestVarInt:
    """Test variable-length encoded integers"""

    @staticmethod
    @pytest.mark.parametrize(
        "i, b",
        [
            (0, b"\x00"),
            (252, b"\xFC"),
            (253, b"\xFD\xFD\x00"),
            (0x3419, b"\xFD\x19\x34"),
            (0xDC4591, b"\xFE\x91\x45\xDC\x00"),
            (0x4BF583A17D59C158, b"\xFFX\xc1Y}\xa1\x83\xf5K"),
        ],
    )
    def test_encode_decode(i: int, b: bytes) -> None:
        """Tensor dimensions and name lengths survive the shape table encoding"""
        assert encode_varint(i) == b
        assert decode_varint(b) == i

    @staticmethod
    @pytest.mark.parametrize("i", [-1, 2 ** 65])
    def test_encode_errors(i: int) -> None:
        """Variable-length integers are unsigned and fit in 9 bytes"""
        with pytest.raises(ValueError):
            encode_varint(i)

    @staticmethod
    @pytest.mark.parametrize("b", [b"", b"\xFC-", b"\xFD\xFF", b"\xFFW(NV\xda\xb4\x00"])
    def test_decode_errors(b: bytes) -> None:
        """Truncated or padded encodings raise"""
        with pytest.raises(DecodeError):
            decode_varint(b)


class TestFiles:
    """Test atomic writes and digests"""

    @staticmethod
    def test_atomic_write(tmp_path) -> None:
        """The target holds the new content and no temporary file is left behind"""
        path = tmp_path / "sub" / "out.txt"
        atomic_write_text(path, "first")
        atomic_write_text(path, "second")
        assert path.read_text(encoding="utf-8") == "second"
        assert [p.name for p in path.parent.iterdir()] == ["out.txt"]

    @staticmethod
    def test_sha256(tmp_path) -> None:
        """File and bytes digests agree"""
        path = atomic_write_bytes(tmp_path / "blob", b"abc")
        assert sha256_file(path) == sha256_hex(b"abc")
        assert sha256_hex(b"abc").startswith("ba7816bf")


class TestRng:
    """Test seeding"""

    @staticmethod
    def test_reproducible() -> None:
        """The same seed gives the same stream"""
        assert np.array_equal(make_rng(4).normal(size=5), make_rng(4).normal(size=5))
        assert not np.array_equal(make_rng(4).normal(size=5), make_rng(5).normal(size=5))
