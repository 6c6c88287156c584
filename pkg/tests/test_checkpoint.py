"""Binary container roundtrips and byte-determinism."""

import numpy as np
import pytest

from badgnn.checkpoint import load_arrays, load_model, save_arrays, save_model
from badgnn.exceptions import ParseError
from badgnn.memory import NodeMemory
from badgnn.training import TrainConfig, init_model_params


class TestArrayContainer:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "weights": rng.standard_normal((3, 4)),
            "ids": np.arange(5, dtype=np.int64),
            "scalar": np.asarray(2.5),
        }
        meta = {"kind": "test", "n": 3}
        path = tmp_path / "arrays.bin"
        save_arrays(path, arrays, meta)
        loaded, loaded_meta = load_arrays(path)
        assert loaded_meta == meta
        for name, arr in arrays.items():
            np.testing.assert_array_equal(loaded[name], arr)
            assert loaded[name].shape == np.asarray(arr).shape

    def test_rewrite_is_byte_identical(self, tmp_path):
        arrays = {"a": np.linspace(0, 1, 7), "b": np.arange(4, dtype=np.int64)}
        p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
        save_arrays(p1, arrays, {"seed": 1})
        save_arrays(p2, arrays, {"seed": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ParseError):
            load_arrays(path)


class TestModelCheckpoint:
    def test_model_roundtrip(self, tmp_path):
        cfg = TrainConfig(d_mem=3, d_time=2, d_k=2, h=2, m=2, batch_size=7,
                          lambda_tlr=0.0005, lambda_a3=0.04, seed=9)
        params = init_model_params(cfg, d_e=2, rng=np.random.default_rng(1))
        mem = NodeMemory(5, cfg.d_mem)
        mem.state[:] = np.random.default_rng(2).standard_normal((5, cfg.d_mem))
        mem.last_update[:] = [0.0, 1.0, 2.0, 3.0, 4.0]

        path = tmp_path / "model.bin"
        save_model(path, params, mem, cfg, extra_meta={"dataset": "x.csv"})
        params2, mem2, cfg2, meta = load_model(path)

        assert cfg2.to_dict() == cfg.to_dict()
        assert meta["dataset"] == "x.csv"
        for key, arr in params.flatten().items():
            np.testing.assert_array_equal(params2.flatten()[key], arr)
        np.testing.assert_array_equal(mem2.state, mem.state)
        np.testing.assert_array_equal(mem2.last_update, mem.last_update)
