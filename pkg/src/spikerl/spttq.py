"""Post-training temporal quantisation, no-reset inference, and accounting.

The inference loop runs the first RL step for the full T time steps and
every later step for the cutoff tau; SLeaky mode carries membrane state
across RL steps (with detach + negative clamp) and resets only at episode
end, while Leaky mode resets before every forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericalError, no_grad
from .snn import LEAKY, SLEAKY


def decrement_percent(value: float, baseline: float) -> float:
    """Percentage saving 1 - value/baseline, truncated to two decimals.

    Truncation (not rounding) matches the reference accounting: 4510 vs
    12000 time steps gives 62.41%, not 62.42%.
    """
    frac = 1.0 - value / baseline
    return math.floor(frac * 10000.0 + 1e-9) / 100.0


def stable_point(outputs, eps: float) -> int | None:
    """Earliest 1-based time step after which the decoded output holds still.

    The flat stretch must cover at least the final two time steps; a trace
    that only settles on its last point (or never) is unstable (None).
    """
    if len(outputs) == 0:
        raise ValueError("empty trace")
    n = len(outputs)
    if n < 2:
        return None
    arr = [np.asarray(o, dtype=np.float64).reshape(-1) for o in outputs]
    t = n  # 1-based candidate; n means "nothing qualifies"
    for i in range(n - 2, -1, -1):
        if float(np.max(np.abs(arr[i + 1] - arr[i]))) <= eps:
            t = i + 1
        else:
            break
    return t if t <= n - 1 else None


def spike_profile(profiles) -> np.ndarray:
    """Elementwise mean of equal-length per-time-step spike count vectors."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no spike profiles to aggregate")
    length = len(profiles[0])
    if any(len(p) != length for p in profiles):
        raise ValueError("mixed cutoff lengths in one aggregate")
    return np.mean(np.asarray(profiles, dtype=np.float64), axis=0)


@dataclass
class EpisodeRecord:
    episode_return: float
    rl_steps: int
    time_steps: int
    spikes: float
    step_profiles: list = field(default_factory=list)   # per-RL-step count vectors
    traces: list = field(default_factory=list)          # per-RL-step decoded outputs
    seed: int = 0


@dataclass
class EvalReport:
    """Aggregate of seeded inference episodes (Table-1-style accounting)."""

    cutoff: int
    neuron_mode: str
    episodes: list
    power_decrement: float | None = None
    latency_decrement: float | None = None

    @property
    def return_mean(self) -> float:
        return float(np.mean([e.episode_return for e in self.episodes]))

    @property
    def return_var(self) -> float:
        return float(np.var([e.episode_return for e in self.episodes]))

    @property
    def rl_steps_mean(self) -> float:
        return float(np.mean([e.rl_steps for e in self.episodes]))

    @property
    def rl_steps_var(self) -> float:
        return float(np.var([e.rl_steps for e in self.episodes]))

    @property
    def time_steps_mean(self) -> float:
        return float(np.mean([e.time_steps for e in self.episodes]))

    @property
    def spikes_mean(self) -> float:
        return float(np.mean([e.spikes for e in self.episodes]))

    def steady_spike_profile(self) -> np.ndarray:
        """Mean per-time-step spike counts over steady-state RL steps.

        The first RL step always runs the full T steps, so when the cutoff
        is shorter it is excluded to keep the aggregate single-length.
        """
        profiles = []
        for ep in self.episodes:
            for p in ep.step_profiles:
                if len(p) == self.cutoff:
                    profiles.append(p)
        return spike_profile(profiles)

    def first_step_spike_profile(self) -> np.ndarray:
        return spike_profile([ep.step_profiles[0] for ep in self.episodes])

    def attach_baseline(self, baseline: "EvalReport"):
        self.power_decrement = decrement_percent(self.spikes_mean, baseline.spikes_mean)
        self.latency_decrement = decrement_percent(self.time_steps_mean,
                                                   baseline.time_steps_mean)


def _deterministic_action(actor, mean: np.ndarray) -> np.ndarray:
    action = np.tanh(mean) * actor.action_scale + actor.action_bias
    if not np.all(np.isfinite(action)):
        raise NumericalError("actor produced a non-finite action")
    return action


def run_inference_episode(actor, env, tau: int, neuron_mode: str, seed: int,
                          record: bool = False) -> EpisodeRecord:
    """One deterministic episode under the quantised inference loop."""
    if not getattr(actor, "is_spiking", False):
        raise ValueError("inference loop requires a spiking actor")
    total_steps = actor.time_steps
    if not 1 <= tau <= total_steps:
        raise ValueError(f"cutoff {tau} outside [1, {total_steps}]")
    if neuron_mode not in (LEAKY, SLEAKY):
        raise ValueError(f"unknown neuron mode {neuron_mode!r}")
    if neuron_mode == SLEAKY and actor.net.neuron_kind != SLEAKY:
        raise ValueError("SLeaky inference requires a converted (SLeaky) network")

    obs = env.reset(seed)
    actor.net.reset_membranes()
    rec = EpisodeRecord(0.0, 0, 0, 0.0, seed=seed)
    first = True
    done = False
    with no_grad():
        while not done:
            steps = total_steps if first else tau
            if neuron_mode == LEAKY and not first:
                actor.net.reset_membranes()
            (mean, _), trace = actor.net.forward(obs, steps, record=record)
            if neuron_mode == SLEAKY:
                actor.net.carry_forward()
            action = _deterministic_action(actor, mean.data)
            obs, reward, _, terminated, truncated = env.step(action)
            rec.episode_return += reward
            rec.rl_steps += 1
            rec.time_steps += steps
            rec.spikes += trace.total_spikes
            rec.step_profiles.append(np.asarray(trace.spike_counts))
            if record:
                rec.traces.append([o.reshape(-1) for o in trace.outputs])
            first = False
            done = terminated or truncated
    actor.net.reset_membranes()
    return rec


def _episode_worker(args):
    actor, env, tau, neuron_mode, ep_seed, record = args
    return run_inference_episode(actor, env, tau, neuron_mode, ep_seed, record=record)


def evaluate_policy(actor, env, tau: int, neuron_mode: str, episodes: int = 50,
                    seed: int = 0, record: bool = False,
                    baseline: EvalReport | None = None, jobs: int = 1) -> EvalReport:
    """Aggregate seeded inference episodes into an EvalReport.

    Converts the actor to the requested neuron kind when needed; episode
    seeds depend only on (seed, episode index) so cutoff sweeps are paired
    and results are independent of ``jobs``.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    net_actor = actor
    if actor.net.neuron_kind != neuron_mode:
        net_actor = actor.convert(neuron_mode)
    seeds = [int(np.random.default_rng([seed, ep]).integers(2 ** 31))
             for ep in range(episodes)]
    if jobs > 1 and episodes > 1:
        from concurrent.futures import ProcessPoolExecutor

        work = [(net_actor, env, tau, neuron_mode, s, record) for s in seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_episode_worker, work))
    else:
        records = [run_inference_episode(net_actor, env, tau, neuron_mode, s,
                                         record=record) for s in seeds]
    report = EvalReport(cutoff=tau, neuron_mode=neuron_mode, episodes=records)
    if baseline is not None:
        report.attach_baseline(baseline)
    return report


def evaluate_artificial(actor, env, episodes: int = 50, seed: int = 0) -> EvalReport:
    """Deterministic rollouts of a non-spiking actor (no spike accounting)."""
    from .autodiff import Tensor

    records = []
    for ep in range(episodes):
        ep_seed = int(np.random.default_rng([seed, ep]).integers(2 ** 31))
        obs = env.reset(ep_seed)
        rec = EpisodeRecord(0.0, 0, 0, 0.0, seed=ep_seed)
        done = False
        with no_grad():
            while not done:
                mean, _ = actor.dist_params(Tensor(np.asarray(obs)))
                obs, reward, _, terminated, truncated = env.step(
                    _deterministic_action(actor, mean.data))
                rec.episode_return += reward
                rec.rl_steps += 1
                done = terminated or truncated
        records.append(rec)
    return EvalReport(cutoff=0, neuron_mode="relu", episodes=records)


def random_policy_floor(env, episodes: int, seed: int) -> EvalReport:
    """Return statistics of a uniform-random (untrained) policy."""
    records = []
    for ep in range(episodes):
        ep_seed = int(np.random.default_rng([seed, ep]).integers(2 ** 31))
        rng = np.random.default_rng([seed, ep, 7])
        obs = env.reset(ep_seed)
        rec = EpisodeRecord(0.0, 0, 0, 0.0, seed=ep_seed)
        done = False
        while not done:
            action = rng.uniform(env.action_low, env.action_high)
            obs, reward, _, terminated, truncated = env.step(action)
            rec.episode_return += reward
            rec.rl_steps += 1
            done = terminated or truncated
        records.append(rec)
    return EvalReport(cutoff=0, neuron_mode="random", episodes=records)


def select_cutoff(score_fn, total_steps: int, threshold: float) -> tuple[int, dict]:
    """Sweep cutoffs from T down to 1; stop at the first failing score.

    Returns (tau, scores): tau is the last passing cutoff (clamped to T if
    even T fails, 1 if nothing fails).
    """
    scores = {}
    for t in range(total_steps, 0, -1):
        scores[t] = score_fn(t)
        if scores[t] < threshold:
            return min(t + 1, total_steps), scores
    return 1, scores


@dataclass
class SpttqResult:
    tau: int
    converted_actor: object
    baseline_report: EvalReport
    cutoff_reports: dict
    r_floor: float
    threshold: float


def spttq_optimize(actor, env, delta: float, total_steps: int | None = None,
                   episodes: int = 50, seed: int = 0,
                   r_floor: float | None = None,
                   floor_episodes: int = 20) -> SpttqResult:
    """Pick the shortest cutoff whose evaluation clears the score threshold.

    The threshold is floor-referenced: pass iff
    r(t) >= r_floor + delta * (r_baseline - r_floor), which stays well
    posed when returns are negative. The sweep evaluates the converted
    (SLeaky) network, which is the artifact actually returned.
    """
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must be in (0, 1], got {delta}")
    total_steps = total_steps or actor.time_steps
    baseline = evaluate_policy(actor, env, total_steps, actor.net.neuron_kind,
                               episodes=episodes, seed=seed)
    if r_floor is None:
        r_floor = random_policy_floor(env, floor_episodes, seed).return_mean
    threshold = r_floor + delta * (baseline.return_mean - r_floor)

    converted = actor.convert(SLEAKY)
    reports: dict = {}

    def score(t: int) -> float:
        reports[t] = evaluate_policy(converted, env, t, SLEAKY,
                                     episodes=episodes, seed=seed, baseline=baseline)
        return reports[t].return_mean

    tau, _ = select_cutoff(score, total_steps, threshold)
    return SpttqResult(tau, converted, baseline, reports, r_floor, threshold)


def stable_point_histogram(actor, env, neuron_mode: str, samples: int, seed: int,
                           eps: float = 1e-4, tau: int | None = None) -> dict:
    """Distribution of per-RL-step stable points plus a Gaussian moment fit."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    total_steps = tau or actor.time_steps
    net_actor = actor
    if actor.net.neuron_kind != neuron_mode:
        net_actor = actor.convert(neuron_mode)
    points = []
    unstable = 0
    collected = 0
    episode = 0
    while collected < samples:
        ep_seed = int(np.random.default_rng([seed, episode]).integers(2 ** 31))
        rec = run_inference_episode(net_actor, env, total_steps, neuron_mode,
                                    ep_seed, record=True)
        for trace in rec.traces:
            if collected >= samples:
                break
            sp = stable_point(trace, eps)
            if sp is None:
                unstable += 1
            else:
                points.append(sp)
            collected += 1
        episode += 1
    counts = np.zeros(total_steps, dtype=int)
    for p in points:
        counts[p - 1] += 1
    mean = float(np.mean(points)) if points else float("nan")
    var = float(np.var(points)) if points else float("nan")
    return {"counts": counts, "unstable": unstable, "samples": collected,
            "mean": mean, "variance": var,
            "unstable_fraction": unstable / collected}


SWEEP_HEADER = ("cutoff", "neuron_mode", "reward_mean", "reward_var",
                "rl_steps_mean", "rl_steps_var", "time_steps_mean", "total_spikes",
                "power_decrement_pct", "latency_decrement_pct")


def sweep_row(report: EvalReport):
    return (report.cutoff, report.neuron_mode, report.return_mean, report.return_var,
            report.rl_steps_mean, report.rl_steps_var, report.time_steps_mean,
            report.spikes_mean,
            "" if report.power_decrement is None else report.power_decrement,
            "" if report.latency_decrement is None else report.latency_decrement)
