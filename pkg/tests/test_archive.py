import numpy as np
import pytest

from ditslim.archive import load_archive, save_archive
from ditslim.errors import ContractError
from ditslim.tensor import seeded_rng


def test_round_trip_bit_exact(tmp_path):
    rng = seeded_rng(0)
    entries = {
        "a.weight": rng.normal(size=(3, 5)),
        "b.bias": rng.normal(size=(7,)),
        "scalar": np.array(3.14159),
        "empty_axis": np.zeros((0, 4)),
    }
    path = tmp_path / "ckpt.tarc"
    save_archive(path, entries, meta={"step": 12, "note": "x"})
    loaded, meta = load_archive(path)
    assert meta["step"] == 12
    assert set(loaded) == set(entries)
    for name, arr in entries.items():
        assert loaded[name].shape == arr.shape
        assert loaded[name].tobytes() == arr.astype(np.float64).tobytes()


def test_deterministic_bytes(tmp_path):
    entries = {"w": seeded_rng(1).normal(size=(4, 4))}
    p1, p2 = tmp_path / "a.tarc", tmp_path / "b.tarc"
    save_archive(p1, entries)
    save_archive(p2, entries)
    assert p1.read_bytes() == p2.read_bytes()


def test_rejects_non_archive(tmp_path):
    p = tmp_path / "junk.tarc"
    p.write_bytes(b"definitely not an archive")
    with pytest.raises(ContractError):
        load_archive(p)
