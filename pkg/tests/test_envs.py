"""Simulator physics: kinematics, dynamics, invariants, and exports."""
import math
import os

import numpy as np
import pytest

from spikerl import envs


def test_kenv_angle_is_linear_in_step_counter():
    env = envs.Kenv()
    env.reset(seed=0)
    for _ in range(375):
        env.step([10.0])
    assert math.isclose(env.theta, math.pi / 4)
    for _ in range(375):
        env.step([10.0])
    assert math.isclose(env.theta, math.pi / 2)


def test_kenv_speed_follows_delay():
    """theta_dot = delta_theta * 1000 / d for d in ms."""
    env = envs.Kenv()
    env.reset(seed=0)
    p = env.params
    _, _, comps, _, _ = env.step([25.0])
    assert math.isclose(env.theta_dot, p.delta_theta * 1000.0 / 25.0)
    _, _, comps, _, _ = env.step([2.0])
    assert math.isclose(env.theta_dot, p.delta_theta * 1000.0 / 2.0)


def test_kenv_action_clipped_to_delay_bounds():
    env = envs.Kenv()
    env.reset(seed=0)
    _, _, comps, _, _ = env.step([1000.0])
    assert comps["d"] == env.params.d_max
    _, _, comps, _, _ = env.step([-3.0])
    assert comps["d"] == env.params.d_min


def test_kenv_episode_always_runs_full_length_and_never_terminates():
    env = envs.Kenv()
    env.reset(seed=1)
    rng = np.random.default_rng(1)
    for i in range(env.params.max_steps):
        _, _, _, terminated, truncated = env.step(rng.uniform(2.0, 50.0, 1))
        assert not terminated
        assert truncated == (i == env.params.max_steps - 1)
    with pytest.raises(envs.EpisodeFinished):
        env.step([10.0])


def test_kenv_motor_torque_is_assist_as_needed():
    """tau_m = max(0, (tau_g + tau_i) - tau_p), never negative."""
    env = envs.Kenv(envs.KenvParams(profile=envs.TorqueProfile("constant", 100.0)))
    env.reset(seed=0)
    _, _, comps, _, _ = env.step([25.0])
    assert comps["tau_m"] == 0.0  # a very strong patient needs no assist
    env2 = envs.Kenv(envs.KenvParams(profile=envs.TorqueProfile("constant", -5.0)))
    env2.reset(seed=0)
    for _ in range(100):
        _, _, comps, _, _ = env2.step([25.0])
        expected = max(0.0, comps["tau_g"] + comps["tau_i"] - comps["tau_p"])
        assert math.isclose(comps["tau_m"], expected)


def test_kenv_invariants_over_a_million_random_steps():
    """tau_m >= 0 and theta non-decreasing for any action sequence."""
    env = envs.Kenv()
    rng = np.random.default_rng(123)
    steps_done = 0
    violations = 0
    while steps_done < 1_000_000:
        env.reset(seed=steps_done)
        theta_prev = env.theta
        for _ in range(env.params.max_steps):
            # include out-of-range actions on purpose
            _, _, comps, _, _ = env.step(rng.uniform(-10.0, 80.0, 1))
            if comps["tau_m"] < 0.0 or env.theta < theta_prev:
                violations += 1
            theta_prev = env.theta
            steps_done += 1
    assert violations == 0


def test_kenv_reward_components_signs():
    env = envs.Kenv()
    env.reset(seed=0)
    _, _, comps, _, _ = env.step([10.0])
    for name in envs.KENV_COMPONENTS:
        assert comps[name] >= 0.0


def test_kenv_negative_patient_torque_is_penalised():
    """A resisting patient (tau_p < 0) lowers reward via the pullback term."""
    assisting = envs.Kenv(envs.KenvParams(profile=envs.TorqueProfile("constant", 0.7)))
    resisting = envs.Kenv(envs.KenvParams(profile=envs.TorqueProfile("constant", -0.7)))
    ra = rr = 0.0
    assisting.reset(seed=0)
    resisting.reset(seed=0)
    for _ in range(100):
        _, r1, _, _, _ = assisting.step([20.0])
        _, r2, _, _, _ = resisting.step([20.0])
        ra += r1
        rr += r2
    assert ra > rr


def test_target_speed_profile_is_trapezoidal():
    p = envs.KenvParams()
    peak = p.target_peak_speed
    assert envs.target_speed(p, 0.0) == 0.0
    assert math.isclose(envs.target_speed(p, 0.075), peak / 2.0)
    assert envs.target_speed(p, 0.15) == peak
    assert envs.target_speed(p, 0.5) == peak
    assert envs.target_speed(p, 0.75) == peak
    assert math.isclose(envs.target_speed(p, 0.875), peak / 2.0)
    assert math.isclose(envs.target_speed(p, 1.0), 0.0)


def test_denv_free_pendulum_energy_drift_below_one_percent():
    """Symplectic integration: frictionless pendulum conserves energy.

    Configure away damping, the hand model, and the patient torque, then
    swing freely from 0.3 rad for 10^4 steps at dt=1e-3.
    """
    p = envs.DenvParams(damping=0.0, hand_mass_fraction=0.0, dt=1e-3,
                        max_steps=20_000,
                        profile=envs.TorqueProfile("constant", 0.0))
    env = envs.Denv(p)
    env.reset(seed=0)
    env.theta = 0.3
    inertia = (2.0 / 3.0) * p.m * p.l ** 2

    def energy():
        kinetic = 0.5 * inertia * env.theta_dot ** 2
        potential = -0.5 * p.m * p.g * p.l * math.cos(env.theta)
        return kinetic + potential

    e0 = energy()
    reference = abs(e0 - (-0.5 * p.m * p.g * p.l))  # energy above the rest state
    for _ in range(10_000):
        env.step([0.0])
        env._done = False  # keep integrating through the theta >= 0 guard
        drift = abs(energy() - e0)
        assert drift < 0.01 * reference


def test_denv_termination_exactly_on_angle_exit():
    env = envs.Denv()
    env.reset(seed=0)
    terminated = False
    while not terminated:
        _, r, _, terminated, truncated = env.step([env.params.tau_max])
        assert not truncated
    assert env.theta > env.params.theta_star
    # exit cost: the faster the crossing, the larger the penalty
    assert r < 0.0
    with pytest.raises(envs.EpisodeFinished):
        env.step([0.0])


def test_denv_no_early_termination_inside_range():
    """theta in [0, theta*] never terminates, whatever happened before."""
    env = envs.Denv()
    env.reset(seed=3)
    rng = np.random.default_rng(3)
    for _ in range(env.params.max_steps):
        _, _, _, terminated, truncated = env.step(rng.uniform(0.0, 4.0, 1))
        if terminated:
            assert env.theta < 0.0 or env.theta > env.params.theta_star
            break
        if truncated:
            assert 0.0 <= env.theta <= env.params.theta_star
            break


def test_denv_strain_is_zero_when_hand_acts_alone():
    """With zero system torque the two trajectories coincide."""
    env = envs.Denv()
    env.reset(seed=0)
    for _ in range(50):
        _, _, comps, terminated, _ = env.step([0.0])
        assert math.isclose(comps["strain"], 0.0, abs_tol=1e-12)
        if terminated:
            break


def test_denv_strain_grows_under_system_torque():
    env = envs.Denv()
    env.reset(seed=0)
    _, _, comps, _, _ = env.step([5.0])
    assert comps["strain"] > 0.0


def test_denv_semi_implicit_euler_order():
    """Velocity updates first and the new velocity moves the position."""
    p = envs.DenvParams(damping=0.0, hand_mass_fraction=0.0,
                        profile=envs.TorqueProfile("constant", 0.0))
    env = envs.Denv(p)
    env.reset(seed=0)
    tau = 4.0
    acc = 3.0 * tau / (2.0 * p.m * p.l ** 2)
    env.step([tau])
    v1 = p.dt * acc
    assert math.isclose(env.theta_dot, v1)
    assert math.isclose(env.theta, p.dt * v1)   # position used the NEW velocity


def test_denv_rejects_non_finite_action():
    env = envs.Denv()
    env.reset(seed=0)
    with pytest.raises(ValueError):
        env.step([float("nan")])


def test_sinusoidal_profile_phase_is_seeded():
    p = envs.DenvParams(profile=envs.TorqueProfile("sinusoidal", 0.7, 0.01))
    env = envs.Denv(p)
    env.reset(seed=5)
    phase_a = env.profile.phase
    env.reset(seed=5)
    assert env.profile.phase == phase_a
    env.reset(seed=6)
    assert env.profile.phase != phase_a


def test_torque_profile_kinds():
    const = envs.TorqueProfile("constant", 0.7)
    assert const.torque(0) == const.torque(500) == 0.7
    sin = envs.TorqueProfile("sinusoidal", 1.0, frequency=math.pi / 2)
    assert math.isclose(sin.torque(1), 1.0)
    with pytest.raises(ValueError):
        envs.TorqueProfile("sawtooth", 1.0)


def test_reconstruct_patient_torque_round_trip():
    """Recover tau_p from the net force it would produce at the sensor."""
    rng = np.random.default_rng(8)
    m, l, g, r = 2.0, 0.35, 9.81, 0.25
    for _ in range(100):
        theta = rng.uniform(0.0, math.pi / 2)
        tau_p = rng.uniform(-2.0, 2.0)
        tau_pg = -0.5 * m * g * l * math.sin(theta)
        f_net = (tau_p + tau_pg) / r
        assert math.isclose(
            envs.reconstruct_patient_torque(f_net, theta, r, m, l, g), tau_p,
            abs_tol=1e-12)
    with pytest.raises(ValueError):
        envs.reconstruct_patient_torque(1.0, 0.5, 0.0, m, l, g)


def test_environment_reset_determinism():
    for name in ("kenv", "denv"):
        env = envs.make_env(name)
        rng = np.random.default_rng(0)
        actions = rng.uniform(env.action_low, env.action_high, size=(30, 1))
        def rollout():
            env.reset(seed=42)
            out = []
            for a in actions:
                obs, r, _, terminated, truncated = env.step(a)
                out.append((obs, r))
                if terminated or truncated:
                    break
            return out

        for (o1, r1), (o2, r2) in zip(rollout(), rollout(), strict=True):
            assert np.array_equal(o1, o2)
            assert r1 == r2


def test_make_env_rejects_unknown_name():
    with pytest.raises(ValueError):
        envs.make_env("mujoco")


def test_export_trajectory_writes_one_row_per_step(tmp_path):
    env = envs.make_env("kenv")
    path = os.path.join(tmp_path, "traj.csv")
    total = envs.export_trajectory(path, env, lambda obs: np.array([20.0]), seed=0)
    with open(path) as f:
        lines = f.read().strip().split("\n")
    assert len(lines) == env.params.max_steps + 1  # header + rows
    assert lines[0].startswith("step,theta,theta_dot")
    assert math.isfinite(total)
