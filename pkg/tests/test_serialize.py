import numpy as np
import pytest

from parkour.nn import load_arrays, load_into, save_arrays
from parkour.nn.tensor import parameter


class TestCheckpointContainer:
    def test_round_trip(self, tmp_path):
        arrays = {
            "actor.w": np.random.default_rng(0).standard_normal((3, 4)),
            "steps": np.array([7], dtype=np.int64),
            "scalar": np.array(2.5),
        }
        path = tmp_path / "ck.bin"
        save_arrays(path, arrays, {"iteration": 3, "hash": "abc"})
        meta, loaded = load_arrays(path)
        assert meta == {"iteration": 3, "hash": "abc"}
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k]), k

    def test_rejects_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(ValueError, match="magic"):
            load_arrays(path)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        path = tmp_path / "ck.bin"
        save_arrays(path, {"a": np.ones(2)}, {})
        assert list(tmp_path.iterdir()) == [path]

    def test_load_into_shape_mismatch(self):
        p = parameter(np.zeros((2, 3)), "w")
        with pytest.raises(ValueError, match="shape mismatch"):
            load_into({"w": p}, {"w": np.zeros((3, 2))})

    def test_load_into_missing_key(self):
        p = parameter(np.zeros(2), "w")
        with pytest.raises(KeyError):
            load_into({"w": p}, {})

    def test_load_into_copies_values(self):
        p = parameter(np.zeros(3), "w")
        src = {"w": np.array([1.0, 2.0, 3.0])}
        load_into({"w": p}, src)
        src["w"][0] = 99.0
        assert p.data[0] == 1.0
