from __future__ import annotations

import dataclasses
import struct

import numpy as np
import pytest

from intuit import checkpoint as ckpt
from intuit.calibrator import CalibratorModel
from intuit.config import DESK_HYPER, RunConfig, load_config
from intuit.reasoner import ModelConfig, PolicyModel
from intuit.verify import checkpoint_roundtrip_failures
from intuit.worldgen import ConfigError


# -- config --------------------------------------------------------------------


def test_defaults():
    cfg = RunConfig()
    assert cfg.world.num_classes == 4 and cfg.world.teacher_noise_rate == 0.1
    assert cfg.sizes == {"cold_start": 1000, "grpo": 3000, "calibration": 4000, "eval": 1000}
    assert (cfg.hyper.K, cfg.hyper.tau, cfg.hyper.batch_size) == (8, 1.0, 64)
    assert cfg.hyper.lr == 2e-5
    for k, v in DESK_HYPER.items():
        assert getattr(cfg.hyper, k) == v
    assert (cfg.arch.d_model, cfg.arch.n_heads, cfg.arch.context_length) == (64, 4, 160)
    assert cfg.calibrator_init == "stage2"


def test_hash_is_stable_and_sensitive():
    a, b = RunConfig(), RunConfig()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    assert int(a.hash(), 16) >= 0
    assert a.with_seed(2).hash() != a.hash()
    assert a.with_budget(16).hash() != a.hash()
    moved = dataclasses.replace(a, paths=dataclasses.replace(a.paths, data_dir="/elsewhere"))
    assert moved.hash() == a.hash()


def test_budget_adds_wrapper_tokens():
    assert RunConfig().sampler.max_trace_tokens == 52 and RunConfig().with_budget(48) == RunConfig()
    assert RunConfig().with_budget(0).sampler.max_trace_tokens == 4
    assert RunConfig().with_budget(128).hp.max_trace_tokens == 132


def test_ini_round_trip(tmp_path):
    cfg = load_config(None, ["hyper.K=4", "run.seed=3", "world.eval_class_weights=4,2,1,1"])
    path = tmp_path / "run.ini"
    path.write_text(cfg.to_ini())
    back = load_config(path)
    assert back == cfg and back.hash() == cfg.hash()
    assert back.hyper.K == 4 and back.seed == 3 and back.world.eval_class_weights == (4.0, 2.0, 1.0, 1.0)


def test_partial_file_keeps_defaults_and_flags_win(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[hyper]\ntau = 0.5\nK = 2\n[sizes]\neval = 10\n")
    cfg = load_config(path, ["hyper.tau=2.0"])
    assert cfg.hyper.tau == 2.0 and cfg.hyper.K == 2 and cfg.sizes["eval"] == 10
    assert cfg.sizes["grpo"] == 3000


@pytest.mark.parametrize(
    "override",
    ["nosection=1", "hyper.nokey=1", "bogus.K=1", "hyper.K=abc", "world.train_template_family=0,6", "sizes.eval=0", "sampler.max_trace_tokens=200", "run.calibrator_init=maybe"],
)
def test_invalid_config_is_rejected(override):
    with pytest.raises((ConfigError, ValueError)):
        load_config(None, [override])


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.ini")


def test_report_dir_env(monkeypatch):
    monkeypatch.setenv("INTUIT_REPORT_DIR", "/tmp/somewhere")
    assert str(RunConfig().paths.report()) == "/tmp/somewhere"
    monkeypatch.delenv("INTUIT_REPORT_DIR")
    assert str(RunConfig().paths.report()) == "reports"


# -- checkpoint -------------------------------------------------------------------


ARCH = ModelConfig(50, d_model=16, n_heads=2, d_mlp=32, context_length=40)


def test_policy_round_trip(tmp_path):
    m = PolicyModel(ARCH, seed=4)
    path = tmp_path / "p.ckpt"
    ckpt.save_policy(m, path, {"config_hash": "abc", "seed": 4})
    blob = path.read_bytes()
    assert blob[:7] == b"INTUIT1"
    assert struct.unpack_from("<I", blob, 8)[0] == ckpt.VERSION
    back, meta = ckpt.load_policy(path)
    assert meta["config_hash"] == "abc" and meta["seed"] == 4
    assert all(back.state_dict()[k].tobytes() == v.tobytes() for k, v in m.state_dict().items())
    ckpt.save_policy(back, tmp_path / "q.ckpt", {"config_hash": "abc", "seed": 4})
    assert (tmp_path / "q.ckpt").read_bytes() == blob


def test_calibrator_round_trip_with_head_shape(tmp_path):
    cal = CalibratorModel.from_policy(PolicyModel(ARCH, seed=1), 3, seed=2)
    path = tmp_path / "c.ckpt"
    ckpt.save_calibrator(cal, path)
    back, meta = ckpt.load_calibrator(path)
    assert meta["head_shape"] == [16, 3]
    assert all(np.array_equal(back.state_dict()[k], v) for k, v in cal.state_dict().items())


def test_kind_mismatch_and_corruption(tmp_path):
    path = tmp_path / "p.ckpt"
    ckpt.save_policy(PolicyModel(ARCH), path)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load_calibrator(path)
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(ckpt.CheckpointError):
        ckpt.decode(path.read_bytes() + b"\0")
    with pytest.raises(ckpt.CheckpointError):
        ckpt.read(tmp_path / "missing.ckpt")


def test_off_grid_values_are_refused():
    with pytest.raises(ckpt.CheckpointError):
        ckpt.encode({"w": np.array([0.1])}, {})


def test_random_models_round_trip():
    assert checkpoint_roundtrip_failures(n=20, seed=3) == 0
