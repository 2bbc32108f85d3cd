"""Config parsing/validation and checkpoint round-trips."""
import os
import struct

import numpy as np
import pytest

from spikerl import persistence, sac
from spikerl.autodiff import Tensor
from spikerl.envs import make_env
from spikerl.persistence import CheckpointError, ConfigError


def make_actor(variant="hsac", hidden=(8, 8), time_steps=6):
    from dataclasses import replace
    cfg = persistence.default_config()
    cfg.sac = replace(cfg.sac, hidden=hidden)
    cfg.snn = replace(cfg.snn, time_steps=time_steps)
    env = make_env("kenv", cfg.kenv, cfg.denv)
    return sac.make_actor(variant, env.observation_dim, 1, env.action_low,
                          env.action_high, cfg, np.random.default_rng(3))


# --- configuration ----------------------------------------------------------

def test_default_hyperparameters():
    cfg = persistence.default_config()
    assert cfg.sac.gamma == 0.99
    assert cfg.sac.tau == 0.005
    assert cfg.sac.batch_size == 256
    assert cfg.sac.buffer_size == 50_000
    assert cfg.sac.learning_starts == 5_000
    assert cfg.sac.policy_lr == 3e-4
    assert cfg.sac.q_lr == 1e-4
    assert cfg.sac.alpha_init == 0.2
    assert cfg.sac.policy_freq == 2
    assert cfg.sac.target_freq == 3
    assert cfg.sac.total_steps == 500_000
    assert cfg.sac.hidden == (512, 512, 384)
    assert cfg.sac.log_std_min == -5.0
    assert cfg.sac.log_std_max == 2.0
    assert cfg.snn.time_steps == 16
    assert cfg.snn.surrogate_slope == 10.0
    assert cfg.snn.beta_init == 1.0
    assert cfg.snn.v_th_init == 2.0
    assert cfg.snn.reset_mode == "zero"
    assert cfg.spttq.delta == 0.95


def test_desk_preset_shrinks_network_and_horizon():
    cfg = persistence.desk_preset()
    assert cfg.sac.hidden == (128, 128, 96)
    assert cfg.sac.total_steps == 100_000
    # everything else matches the full preset
    assert cfg.sac.gamma == 0.99
    assert cfg.snn.time_steps == 16


def test_config_round_trip_through_file(tmp_path):
    cfg = persistence.default_config()
    cfg.sac.gamma = 0.97
    cfg.kenv.w_pi = 3.5
    path = str(tmp_path / "run.ini")
    persistence.save_config(path, cfg)
    loaded = persistence.load_config(path)
    assert persistence.config_to_flat(loaded) == persistence.config_to_flat(cfg)
    assert persistence.config_hash(loaded) == persistence.config_hash(cfg)


def test_partial_config_file_keeps_defaults(tmp_path):
    path = str(tmp_path / "partial.ini")
    with open(path, "w") as f:
        f.write("[sac]\ngamma = 0.9\n")
    cfg = persistence.load_config(path)
    assert cfg.sac.gamma == 0.9
    assert cfg.sac.batch_size == 256  # untouched default


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"sac.gamm": "0.9"})
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"dqn.epsilon": "0.1"})


def test_out_of_range_values_rejected():
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"sac.gamma": "1.5"})
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"sac.tau": "0"})
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"snn.time_steps": "0"})
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"snn.reset_mode": "bounce"})
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"kenv.d_min": "60"})  # above d_max
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"sac.precision": "bfloat16"})


def test_type_coercion_and_errors():
    cfg = persistence.config_from_flat({"sac.batch_size": "64",
                                         "sac.hidden": "32,16",
                                         "sac.gamma": "0.95"})
    assert cfg.sac.batch_size == 64
    assert cfg.sac.hidden == (32, 16)
    assert cfg.sac.gamma == 0.95
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"sac.batch_size": "many"})
    with pytest.raises(ConfigError):
        persistence.config_from_flat({"sac.gamma": "high"})


def test_parse_overrides():
    out = persistence.parse_overrides(["sac.gamma=0.9", "kenv.w_pi = 2.0"])
    assert out == {"sac.gamma": "0.9", "kenv.w_pi": "2.0"}
    with pytest.raises(ConfigError):
        persistence.parse_overrides(["sac.gamma"])


def test_config_hash_tracks_content():
    a = persistence.default_config()
    b = persistence.default_config()
    assert persistence.config_hash(a) == persistence.config_hash(b)
    b.sac.gamma = 0.98
    assert persistence.config_hash(a) != persistence.config_hash(b)


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact_at_f32(tmp_path):
    actor = make_actor()
    path = str(tmp_path / "a.spk")
    persistence.save_checkpoint(path, actor, {"note": "x"})
    loaded, meta = persistence.load_checkpoint(path)
    assert meta["note"] == "x"
    for (n1, a1), (n2, a2) in zip(actor.state_arrays(), loaded.state_arrays(),
                                  strict=True):
        assert n1 == n2
        # saved values passed through f32 exactly once
        assert np.array_equal(a1.astype(np.float32), a2.astype(np.float32))
    # a second round trip is the identity
    path2 = str(tmp_path / "b.spk")
    persistence.save_checkpoint(path2, loaded, {"note": "x"})
    loaded2, _ = persistence.load_checkpoint(path2)
    for (_, a1), (_, a2) in zip(loaded.state_arrays(), loaded2.state_arrays(),
                                strict=True):
        assert np.array_equal(a1, a2)


def test_checkpoint_round_trip_preserves_forward_outputs(tmp_path):
    actor = make_actor()
    path = str(tmp_path / "a.spk")
    persistence.save_checkpoint(path, actor, {})
    first, _ = persistence.load_checkpoint(path)
    second, _ = persistence.load_checkpoint(path)
    obs = np.random.default_rng(0).normal(size=(1, 5))
    m1, s1 = first.dist_params(Tensor(obs))
    m2, s2 = second.dist_params(Tensor(obs))
    assert np.array_equal(m1.data, m2.data)
    assert np.array_equal(s1.data, s2.data)


def test_artificial_actor_round_trip(tmp_path):
    actor = make_actor("asac")
    path = str(tmp_path / "a.spk")
    persistence.save_checkpoint(path, actor, {"variant": "asac"})
    loaded, meta = persistence.load_checkpoint(path)
    assert loaded.is_spiking is False
    assert meta["actor_kind"] == "artificial"


def test_f32_truncation_error_is_bounded(tmp_path):
    actor = make_actor()
    # give a weight a value that does not fit in f32 exactly
    actor.net.layers[0].w.data[0, 0] = 1.0 + 2.0 ** -40
    path = str(tmp_path / "a.spk")
    persistence.save_checkpoint(path, actor, {})
    loaded, _ = persistence.load_checkpoint(path)
    diff = abs(loaded.net.layers[0].w.data[0, 0] - actor.net.layers[0].w.data[0, 0])
    assert 0.0 < diff < 2.0 ** -24


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = str(tmp_path / "junk.spk")
    with open(path, "wb") as f:
        f.write(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError, match="magic"):
        persistence.load_checkpoint(path)


def test_checkpoint_unknown_version_rejected(tmp_path):
    actor = make_actor()
    path = str(tmp_path / "a.spk")
    persistence.save_checkpoint(path, actor, {})
    with open(path, "rb") as f:
        blob = f.read()
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = blob[8:8 + hlen].replace(b'"format_version": 1', b'"format_version": 9')
    with open(path, "wb") as f:
        f.write(blob[:4] + struct.pack("<I", len(header)) + header + blob[8 + hlen:])
    with pytest.raises(CheckpointError, match="version"):
        persistence.load_checkpoint(path)


def test_checkpoint_truncated_payload_rejected(tmp_path):
    actor = make_actor()
    path = str(tmp_path / "a.spk")
    persistence.save_checkpoint(path, actor, {})
    with open(path, "rb") as f:
        blob = f.read()
    with open(path, "wb") as f:
        f.write(blob[:-17])
    with pytest.raises(CheckpointError, match="payload"):
        persistence.load_checkpoint(path)


def test_checkpoint_save_is_atomic(tmp_path):
    actor = make_actor()
    path = str(tmp_path / "a.spk")
    persistence.save_checkpoint(path, actor, {})
    persistence.save_checkpoint(path, actor, {"second": True})  # overwrite in place
    _, meta = persistence.load_checkpoint(path)
    assert meta["second"] is True
    assert not os.path.exists(path + ".tmp")


# --- metrics -----------------------------------------------------------------

def test_metrics_csv_formatting(tmp_path):
    path = str(tmp_path / "m.csv")
    persistence.write_metrics_csv(path, ("a", "b", "c"),
                                  [(1, 0.123456789, float("nan")),
                                   {"a": 2, "b": 1e-7, "c": "x"}])
    with open(path) as f:
        lines = f.read().strip().split("\n")
    assert lines[0] == "a,b,c"
    assert lines[1] == "1,0.123457,nan"
    assert lines[2] == "2,1e-07,x"
