"""Rehabilitation-arm simulators: stepper-kinematic KENV and torque-dynamic DENV.

Both expose a gym-style interface (reset/step, bounded 1-D action) and
return per-step reward components alongside the scalar reward so that
trajectory exports can decompose behaviour.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

CONSTANT = "constant"
SINUSOIDAL = "sinusoidal"


@dataclass
class TorqueProfile:
    """Patient torque as a function of the RL step index."""

    kind: str = CONSTANT
    amplitude: float = 0.7       # N*m
    frequency: float = 0.01      # rad per RL step (sinusoidal only)
    phase: float = 0.0

    def __post_init__(self):
        if self.kind not in (CONSTANT, SINUSOIDAL):
            raise ValueError(f"unknown torque profile kind {self.kind!r}")

    def torque(self, step: int) -> float:
        if self.kind == CONSTANT:
            return self.amplitude
        return self.amplitude * math.sin(self.frequency * step + self.phase)


def reconstruct_patient_torque(f_net: float, theta: float, r: float,
                               m: float, l: float, g: float) -> float:
    """Recover patient torque from the measured net joint force.

    tau_pg = -(1/2) m g l sin(theta); tau_p = r * f_net - tau_pg.
    """
    if r <= 0:
        raise ValueError(f"lever arm r must be positive, got {r}")
    tau_pg = -0.5 * m * g * l * math.sin(theta)
    return r * f_net - tau_pg


class EpisodeFinished(RuntimeError):
    """Step called on a finished episode without reset."""


@dataclass
class KenvParams:
    m: float = 2.0               # kg
    l: float = 0.35              # m
    g: float = 9.81              # m/s^2
    theta_max: float = math.pi / 2
    max_steps: int = 750
    d_min: float = 2.0           # ms
    d_max: float = 50.0          # ms
    w_sp: float = 2.0
    w_pb: float = 1.0
    w_sf: float = 1.0
    w_acc: float = 0.5
    w_pi: float = 6.0
    target_peak_speed: float = 0.4   # rad/s, plateau of the target profile
    profile: TorqueProfile = field(default_factory=TorqueProfile)

    @property
    def torque_scale(self) -> float:
        return self.m * self.g * self.l

    @property
    def delta_theta(self) -> float:
        return self.theta_max / self.max_steps

    @property
    def speed_ref(self) -> float:
        """Fastest reachable angular speed (rad/s), at the minimum delay."""
        return self.theta_max * 1000.0 / (self.max_steps * self.d_min)


def target_speed(params: KenvParams, progress: float) -> float:
    """Trapezoidal speed target: ramp up over the first 15% of progress,
    plateau, ramp down to zero over the last 25%."""
    peak = params.target_peak_speed
    if progress < 0.15:
        return peak * progress / 0.15
    if progress > 0.75:
        return peak * (1.0 - progress) / 0.25
    return peak


KENV_COMPONENTS = ("e_sp", "e_pb", "e_sf", "e_acc", "e_pi")
DENV_COMPONENTS = ("e_theta", "e_vel", "e_torque", "e_strain", "e_jerk")


class Kenv:
    """Stepper-motor kinematic simulator; the action is a delay in ms.

    The joint advances one fixed angular increment per RL step, so theta is
    a pure function of the step counter and every episode lasts exactly
    ``max_steps`` steps.
    """

    name = "kenv"

    def __init__(self, params: KenvParams | None = None):
        self.params = params or KenvParams()
        p = self.params
        self.action_low = np.array([p.d_min])
        self.action_high = np.array([p.d_max])
        self.observation_dim = 5
        self._done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        p = self.params
        rng = np.random.default_rng(seed)
        self.profile = TorqueProfile(p.profile.kind, p.profile.amplitude,
                                     p.profile.frequency, p.profile.phase)
        if self.profile.kind == SINUSOIDAL:
            self.profile.phase = rng.uniform(0.0, 2.0 * math.pi)
        self.current_step = 0
        self.theta = 0.0
        self.theta_dot = 0.0
        self.d_prev = p.d_max
        self._done = False
        tau_p = self.profile.torque(0)
        tau_m = max(0.0, -tau_p)
        return self._observe(tau_m, tau_p)

    def _observe(self, tau_m: float, tau_p: float) -> np.ndarray:
        p = self.params
        return np.array([
            tau_m / p.torque_scale,
            tau_p / p.torque_scale,
            self.theta / p.theta_max,
            self.theta_dot / p.speed_ref,
            (self.d_prev - p.d_min) / (p.d_max - p.d_min),
        ])

    def step(self, action) -> tuple[np.ndarray, float, dict, bool, bool]:
        if self._done:
            raise EpisodeFinished("kenv: step on finished episode; call reset")
        p = self.params
        d_t = float(np.clip(np.asarray(action).reshape(-1)[0], p.d_min, p.d_max))

        self.current_step += 1
        progress = self.current_step / p.max_steps
        self.theta = progress * p.theta_max
        theta_dot = p.delta_theta * 1000.0 / d_t          # rad/s, d_t in ms
        dt = d_t / 1000.0
        tau_g = p.m * p.g * p.l * math.sin(self.theta)
        tau_i = (1.0 / 3.0) * p.m * p.l ** 2 * (theta_dot - self.theta_dot) / dt
        tau_p = self.profile.torque(self.current_step)
        tau_m = max(0.0, (tau_g + tau_i) - tau_p)

        scale = p.torque_scale
        components = {
            "e_sp": (theta_dot - target_speed(p, progress)) ** 2,
            "e_pb": max(0.0, -tau_p) / scale,
            "e_sf": max(0.0, tau_m - 1.2 * scale) / scale,
            "e_acc": abs(d_t - self.d_prev) / (p.d_max - p.d_min),
            "e_pi": max(0.0, tau_p) / scale,
        }
        reward = (-p.w_sp * components["e_sp"]
                  - p.w_pb * components["e_pb"]
                  - p.w_sf * components["e_sf"]
                  - p.w_acc * components["e_acc"]
                  + p.w_pi * components["e_pi"])

        self.theta_dot = theta_dot
        self.d_prev = d_t
        truncated = self.current_step >= p.max_steps
        self._done = truncated
        components.update(tau_g=tau_g, tau_i=tau_i, tau_p=tau_p, tau_m=tau_m, d=d_t)
        return self._observe(tau_m, tau_p), reward, components, False, truncated


@dataclass
class DenvParams:
    m: float = 2.0               # kg
    l: float = 0.35              # m
    g: float = 9.81              # m/s^2
    damping: float = 0.08        # N*m*s
    tau_max: float = 12.0        # N*m
    dt: float = 0.02             # s
    theta_star: float = math.pi / 2
    max_steps: int = 500
    hand_mass_fraction: float = 0.5
    w_theta: float = 1.0
    w_vel: float = 0.1
    w_torque: float = 0.01
    w_strain: float = 2.0
    w_dtau: float = 0.5
    profile: TorqueProfile = field(default_factory=TorqueProfile)


class Denv:
    """Torque-controlled pendulum-like simulator; the action is tau_s in N*m.

    A parallel hand-only trajectory (same dynamics, zero system torque)
    tracks what the patient alone would do; the angular gap is the strain.
    """

    name = "denv"

    def __init__(self, params: DenvParams | None = None):
        self.params = params or DenvParams()
        p = self.params
        self.action_low = np.array([0.0])
        self.action_high = np.array([p.tau_max])
        self.observation_dim = 5
        self._done = True

    def reset(self, seed: int | None = None) -> np.ndarray:
        p = self.params
        rng = np.random.default_rng(seed)
        self.profile = TorqueProfile(p.profile.kind, p.profile.amplitude,
                                     p.profile.frequency, p.profile.phase)
        if self.profile.kind == SINUSOIDAL:
            self.profile.phase = rng.uniform(0.0, 2.0 * math.pi)
        self.current_step = 0
        self.theta = 0.0
        self.theta_dot = 0.0
        self.theta_h = 0.0
        self.theta_dot_h = 0.0
        self.tau_s_prev = 0.0
        self._done = False
        return self._observe()

    def _observe(self) -> np.ndarray:
        tau_p = self.profile.torque(self.current_step)
        return np.array([math.sin(self.theta), math.cos(self.theta),
                         self.theta, tau_p, self.tau_s_prev])

    def _gravity(self, theta: float) -> float:
        p = self.params
        return -0.5 * p.m * p.g * p.l * math.sin(theta)

    def _hand_gravity(self, theta: float) -> float:
        p = self.params
        return -0.5 * (p.hand_mass_fraction * p.m) * p.g * p.l * math.sin(theta)

    def step(self, action) -> tuple[np.ndarray, float, dict, bool, bool]:
        if self._done:
            raise EpisodeFinished("denv: step on finished episode; call reset")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(a)):
            raise ValueError("denv: non-finite action")
        p = self.params
        tau_s = float(np.clip(a[0], 0.0, p.tau_max))
        tau_p = self.profile.torque(self.current_step)

        # system dynamics, semi-implicit Euler (velocity first, then position)
        tau_net = (tau_s + self._gravity(self.theta) + tau_p
                   + self._hand_gravity(self.theta) - p.damping * self.theta_dot)
        acc = 3.0 * tau_net / (2.0 * p.m * p.l ** 2)
        self.theta_dot += p.dt * acc
        self.theta += p.dt * self.theta_dot

        # hand-only trajectory: identical integration with tau_s = 0
        tau_net_h = (self._gravity(self.theta_h) + tau_p
                     + self._hand_gravity(self.theta_h) - p.damping * self.theta_dot_h)
        acc_h = 3.0 * tau_net_h / (2.0 * p.m * p.l ** 2)
        self.theta_dot_h += p.dt * acc_h
        self.theta_h += p.dt * self.theta_dot_h

        strain = self.theta - self.theta_h
        components = {
            "e_theta": abs(self.theta - p.theta_star),
            "e_vel": self.theta_dot ** 2,
            "e_torque": tau_s ** 2,
            "e_strain": abs(strain),
            "e_jerk": abs(tau_s - self.tau_s_prev),
        }
        reward = -(p.w_theta * components["e_theta"]
                   + p.w_vel * components["e_vel"]
                   + p.w_torque * components["e_torque"]
                   + p.w_strain * components["e_strain"]
                   + p.w_dtau * components["e_jerk"])

        self.current_step += 1
        self.tau_s_prev = tau_s
        terminated = self.theta < 0.0 or self.theta > p.theta_star
        truncated = not terminated and self.current_step >= p.max_steps
        if terminated:
            reward -= abs(self.theta_dot)
        self._done = terminated or truncated
        components.update(tau_net=tau_net, tau_p=tau_p, tau_s=tau_s, strain=strain)
        return self._observe(), reward, components, terminated, truncated


def make_env(name: str, kenv_params: KenvParams | None = None,
             denv_params: DenvParams | None = None):
    if name == "kenv":
        return Kenv(kenv_params)
    if name == "denv":
        return Denv(denv_params)
    raise ValueError(f"unknown environment {name!r}")


def export_trajectory(path, env, policy, seed: int) -> float:
    """Roll one episode and write one CSV row per RL step; returns the return.

    ``policy`` maps an observation to an action array.
    """
    obs = env.reset(seed)
    if env.name == "kenv":
        comp_names = KENV_COMPONENTS
        extra = ("d", "tau_p", "tau_m")
    else:
        comp_names = DENV_COMPONENTS
        extra = ("tau_s", "tau_p", "tau_net", "strain")
    total = 0.0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("step", "theta", "theta_dot") + extra + ("reward",) + comp_names)
        done = False
        step = 0
        while not done:
            action = policy(obs)
            obs, reward, comps, terminated, truncated = env.step(action)
            total += reward
            step += 1
            row = [step, env.theta, env.theta_dot]
            row += [comps[k] for k in extra]
            row.append(reward)
            row += [comps[k] for k in comp_names]
            writer.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])
            done = terminated or truncated
    return total
