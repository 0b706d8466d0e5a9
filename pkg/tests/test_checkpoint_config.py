from dataclasses import dataclass, field

import numpy as np
import pytest

from stemmark.checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint
from stemmark.config import ConfigError, from_dict, to_jsonable


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    arrays = {"a": rng.standard_normal((3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "empty": np.zeros(0)}
    save_checkpoint(tmp_path / "x.ckpt", {"type": "test", "step": 7}, arrays)
    meta, back = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"type": "test", "step": 7}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert raw[:8] == MAGIC


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, {"type": "test"}, {"a": np.ones(10)})
    raw = p.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"NOTACKPT" + raw[8:])
    (tmp_path / "short").write_bytes(raw[:-16])
    (tmp_path / "ragged").write_bytes(raw[:-3])
    (tmp_path / "version").write_bytes(raw[:8] + b"\x09\x00" + raw[10:])
    for name in ("bad_magic", "short", "ragged", "version"):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / name)


@dataclass(frozen=True)
class Inner:
    a: int = 1
    pair: tuple = (0.1, 0.2)


@dataclass(frozen=True)
class Outer:
    name: str = "x"
    inner: Inner = field(default_factory=Inner)


def test_config_conversion():
    cfg = from_dict(Outer, {"name": "y", "inner": {"pair": [1.0, 2.0]}})
    assert cfg == Outer("y", Inner(1, (1.0, 2.0)))
    assert from_dict(Outer, to_jsonable(cfg)) == cfg
    with pytest.raises(ConfigError, match="unknown key"):
        from_dict(Outer, {"nmae": "typo"})
    with pytest.raises(ConfigError, match="inner"):
        from_dict(Outer, {"inner": {"b": 2}})
    with pytest.raises(ConfigError):
        from_dict(Outer, [1, 2])
