"""Checkpoint container and experiment configuration round trips."""
import json

import numpy as np
import pytest

from anchorasr.checkpoint import load_checkpoint, save_checkpoint
from anchorasr.config import (OUTPUT_ROOT_ENV, ExperimentConfig,
                              config_from_dict, config_to_dict, load_config,
                              save_config)


def _arrays():
    rng = np.random.default_rng(0)
    return {
        "b.w": rng.standard_normal((3, 4)).astype(np.float32),
        "a.scalarish": rng.standard_normal((1,)),
        "c.bias": rng.standard_normal((5,)).astype(np.float32),
    }


def test_checkpoint_roundtrip(tmp_path):
    arrays = _arrays()
    meta = {"epoch": 3, "note": "hello", "nested": {"k": [1, 2]}}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, arrays, meta)
    meta2, arrays2 = load_checkpoint(p)
    assert meta2 == meta
    assert sorted(arrays2) == sorted(arrays)
    for name in arrays:
        assert arrays2[name].dtype == arrays[name].dtype
        assert np.array_equal(arrays2[name], arrays[name])


def test_checkpoint_bytes_are_stable(tmp_path):
    arrays = _arrays()
    save_checkpoint(tmp_path / "a.ckpt", arrays, {"epoch": 1})
    save_checkpoint(tmp_path / "b.ckpt", dict(reversed(list(arrays.items()))), {"epoch": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_checkpoint_rejects_bad_inputs(tmp_path):
    with pytest.raises(ValueError):
        save_checkpoint(tmp_path / "x.ckpt", {"q": np.zeros(3, dtype=np.int64)}, {})
    p = tmp_path / "ok.ckpt"
    save_checkpoint(p, _arrays(), {})
    raw = bytearray(p.read_bytes())
    raw[0] = ord(b"X")
    (tmp_path / "magic.ckpt").write_bytes(raw)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "magic.ckpt")
    raw = bytearray(p.read_bytes())
    raw[4] = 99  # version field
    (tmp_path / "ver.ckpt").write_bytes(raw)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ver.ckpt")
    (tmp_path / "short.ckpt").write_bytes(p.read_bytes()[:6])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "short.ckpt")


# ---------------------------------------------------------------------------
# configuration


def test_config_dict_roundtrip():
    cfg = ExperimentConfig()
    cfg.anchoring.encoder_bias = True
    cfg.anchoring.joiner_gating = True
    cfg.objective.mode = "BOTH"
    d = config_to_dict(cfg)
    assert isinstance(d["corpus"]["wake_word"], list)
    back = config_from_dict(d)
    assert back == cfg
    assert isinstance(back.corpus.wake_word, tuple)
    assert isinstance(back.mixer.snr_grid, tuple)


def test_config_file_roundtrip(tmp_path):
    cfg = ExperimentConfig(seed=5, system="anchored")
    cfg.anchoring.joiner_gating = True
    save_config(cfg, tmp_path / "e.json")
    back = load_config(tmp_path / "e.json")
    assert back == cfg
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ValueError):
        load_config(tmp_path / "bad.json")


def test_config_rejects_unknown_keys():
    d = config_to_dict(ExperimentConfig())
    d["oops"] = 1
    with pytest.raises(ValueError, match="oops"):
        config_from_dict(d)
    d = config_to_dict(ExperimentConfig())
    d["optimizer"]["momentum"] = 0.9
    with pytest.raises(ValueError, match="optimizer"):
        config_from_dict(d)


def test_config_cross_validation():
    cfg = ExperimentConfig(baseline="ams")
    cfg.anchoring.encoder_bias = True
    with pytest.raises(ValueError, match="mutually exclusive"):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.objective.mode = "VIC"
    with pytest.raises(ValueError, match="anchoring"):
        cfg.validate()
    cfg = ExperimentConfig()
    cfg.corpus.vocab_size = 8
    with pytest.raises(ValueError, match="vocab"):
        cfg.validate()
    cfg = ExperimentConfig(baseline="frobnicate")
    with pytest.raises(ValueError, match="baseline"):
        cfg.validate()
    ok = ExperimentConfig()
    ok.anchoring.encoder_bias = True
    ok.anchoring.joiner_gating = True
    ok.objective.mode = "BOTH"
    ok.validate()


def test_output_dir_env_override(tmp_path, monkeypatch):
    cfg = ExperimentConfig(output_dir="runs/x")
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert cfg.resolve_output_dir() == __import__("pathlib").Path("runs/x")
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    assert cfg.resolve_output_dir() == tmp_path / "runs" / "x"
    cfg_abs = ExperimentConfig(output_dir=str(tmp_path / "abs"))
    assert cfg_abs.resolve_output_dir() == tmp_path / "abs"


def test_saved_config_is_sorted_json(tmp_path):
    cfg = ExperimentConfig()
    save_config(cfg, tmp_path / "c.json")
    text = (tmp_path / "c.json").read_text()
    doc = json.loads(text)
    assert text == json.dumps(doc, sort_keys=True, indent=1) + "\n"
