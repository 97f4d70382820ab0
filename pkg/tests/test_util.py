import os

from gainscout._util import atomic_write_text, config_hash, substream


def test_substream_deterministic_and_distinct():
    assert substream(1, "a") == substream(1, "a")
    assert substream(1, "a") != substream(1, "b")
    assert substream(1, "a") != substream(2, "a")
    assert substream(1, "a", 0) != substream(1, "a", 1)


def test_substream_fits_in_64_bits():
    assert 0 <= substream(123456789, "x", "y", 7) < 2**64


def test_atomic_write(tmp_path):
    p = tmp_path / "f.txt"
    atomic_write_text(p, "hello")
    assert p.read_text() == "hello"
    atomic_write_text(p, "world")
    assert p.read_text() == "world"
    assert os.listdir(tmp_path) == ["f.txt"]  # no temp files left over


def test_config_hash_ignores_key_order():
    a = config_hash({"x": 1, "y": [1, 2]})
    b = config_hash({"y": [1, 2], "x": 1})
    assert a == b
    assert a != config_hash({"x": 2, "y": [1, 2]})
    assert len(a) == 16
