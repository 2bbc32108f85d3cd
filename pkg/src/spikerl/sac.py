"""Soft actor-critic with interchangeable actor/critic substrates.

Variants: ASAC (artificial actor and critics), HSAC (spiking actor,
artificial critics), SSAC (spiking actor and critics). The training loop
is identical across variants; only the network forward/backward differs.
"""
from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import persistence
from .autodiff import Adam, GradTape, Tensor, no_grad, polyak_average
from .envs import make_env
from .persistence import RunConfig
from .snn import LEAKY, SpikingNet, init_weight

VARIANTS = ("asac", "hsac", "ssac")


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions, overwriting oldest first."""

    def __init__(self, capacity: int, obs_dim: int, action_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros((capacity, 1))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.dones = np.zeros((capacity, 1))
        self.cursor = 0
        self.filled = 0

    def add(self, s, a, r, s2, done: bool):
        if not np.isfinite(r):
            raise ValueError("non-finite reward")
        i = self.cursor
        self.obs[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_obs[i] = s2
        self.dones[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.filled = min(self.filled + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self.filled, size=batch_size)
        return (self.obs[idx], self.actions[idx], self.rewards[idx],
                self.next_obs[idx], self.dones[idx])


class Mlp:
    """ReLU stack returning the last hidden representation."""

    def __init__(self, in_dim: int, hidden, rng: np.random.Generator):
        self.dims = [in_dim] + list(hidden)
        self.weights = []
        self.biases = []
        for i in range(len(self.dims) - 1):
            self.weights.append(Tensor(init_weight(rng, self.dims[i + 1], self.dims[i]),
                                       requires_grad=True))
            self.biases.append(Tensor(np.zeros(self.dims[i + 1]), requires_grad=True))

    def forward(self, x: Tensor) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            x = ad.relu(ad.linear(x, w, b))
        return x

    def params(self):
        return self.weights + self.biases


class LinearHead:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.w = Tensor(init_weight(rng, out_dim, in_dim), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.w, self.b)

    def params(self):
        return [self.w, self.b]


class ActorBase:
    """Shared squashed-Gaussian bookkeeping (action bounds, log-std clamp)."""

    def __init__(self, obs_dim, action_dim, hidden, action_low, action_high,
                 log_std_min, log_std_max):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.hidden = tuple(hidden)
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)
        self.action_scale = (self.action_high - self.action_low) / 2.0
        self.action_bias = (self.action_high + self.action_low) / 2.0
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max

    def describe(self) -> dict:
        return {
            "actor_kind": self.kind,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "hidden": list(self.hidden),
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "log_std_min": self.log_std_min,
            "log_std_max": self.log_std_max,
        }


class ArtificialActor(ActorBase):
    kind = "artificial"
    is_spiking = False

    def __init__(self, obs_dim, action_dim, hidden, action_low, action_high,
                 rng, log_std_min=-5.0, log_std_max=2.0):
        super().__init__(obs_dim, action_dim, hidden, action_low, action_high,
                         log_std_min, log_std_max)
        self.trunk = Mlp(obs_dim, hidden, rng)
        self.mean_head = LinearHead(hidden[-1], action_dim, rng)
        self.log_std_head = LinearHead(hidden[-1], action_dim, rng)

    def dist_params(self, x: Tensor):
        h = self.trunk.forward(x)
        return self.mean_head.forward(h), self.log_std_head.forward(h)

    def params(self):
        return self.trunk.params() + self.mean_head.params() + self.log_std_head.params()

    def post_step(self):
        pass

    def state_arrays(self):
        out = []
        for i, (w, b) in enumerate(zip(self.trunk.weights, self.trunk.biases)):
            out += [(f"layer{i}.w", w.data), (f"layer{i}.b", b.data)]
        out += [("mean.w", self.mean_head.w.data), ("mean.b", self.mean_head.b.data),
                ("logstd.w", self.log_std_head.w.data), ("logstd.b", self.log_std_head.b.data)]
        return out

    def load_state_arrays(self, arrays: dict):
        for i in range(len(self.trunk.weights)):
            self.trunk.weights[i].data[...] = arrays[f"layer{i}.w"]
            self.trunk.biases[i].data[...] = arrays[f"layer{i}.b"]
        self.mean_head.w.data[...] = arrays["mean.w"]
        self.mean_head.b.data[...] = arrays["mean.b"]
        self.log_std_head.w.data[...] = arrays["logstd.w"]
        self.log_std_head.b.data[...] = arrays["logstd.b"]


class SpikingActor(ActorBase):
    """LIF trunk with two spike decoders (action mean and log-std)."""

    kind = "spiking"
    is_spiking = True

    def __init__(self, obs_dim, action_dim, hidden, action_low, action_high,
                 rng, snn_params, log_std_min=-5.0, log_std_max=2.0,
                 neuron_kind=LEAKY):
        super().__init__(obs_dim, action_dim, hidden, action_low, action_high,
                         log_std_min, log_std_max)
        self.snn_params = snn_params
        self.time_steps = snn_params.time_steps
        self.net = SpikingNet([obs_dim] + list(hidden), [action_dim, action_dim], rng,
                              beta_init=snn_params.beta_init, v_th_init=snn_params.v_th_init,
                              k=snn_params.surrogate_slope, reset_mode=snn_params.reset_mode,
                              neuron_kind=neuron_kind)

    def dist_params(self, x: Tensor, steps: int | None = None, reset: bool = True):
        if reset:
            self.net.reset_membranes()
        (mean, log_std), _ = self.net.forward(x.data, steps or self.time_steps)
        return mean, log_std

    def params(self):
        return self.net.params()

    def post_step(self):
        self.net.clamp_decays()

    def convert(self, neuron_kind: str) -> "SpikingActor":
        clone = copy.copy(self)
        clone.net = self.net.convert(neuron_kind)
        return clone

    def describe(self) -> dict:
        d = super().describe()
        d.update(neuron_kind=self.net.neuron_kind,
                 reset_mode=self.net.layers[0].reset_mode,
                 time_steps=self.time_steps,
                 surrogate_slope=self.snn_params.surrogate_slope)
        return d

    def state_arrays(self):
        out = []
        for i, layer in enumerate(self.net.layers):
            out += [(f"layer{i}.w", layer.w.data), (f"layer{i}.beta", layer.beta.data),
                    (f"layer{i}.v_th", layer.v_th.data)]
        for name, head in zip(("mean", "logstd"), self.net.heads):
            out += [(f"{name}.w", head.w.data), (f"{name}.b", head.b.data)]
        return out

    def load_state_arrays(self, arrays: dict):
        for i, layer in enumerate(self.net.layers):
            layer.w.data[...] = arrays[f"layer{i}.w"]
            layer.beta.data[...] = arrays[f"layer{i}.beta"]
            layer.v_th.data[...] = arrays[f"layer{i}.v_th"]
        for name, head in zip(("mean", "logstd"), self.net.heads):
            head.w.data[...] = arrays[f"{name}.w"]
            head.b.data[...] = arrays[f"{name}.b"]


def build_actor_from_description(desc: dict):
    """Reconstruct an untrained actor matching a checkpoint header."""
    kind = desc.get("actor_kind")
    common = dict(obs_dim=desc["obs_dim"], action_dim=desc["action_dim"],
                  hidden=tuple(desc["hidden"]), action_low=desc["action_low"],
                  action_high=desc["action_high"], rng=np.random.default_rng(0),
                  log_std_min=desc["log_std_min"], log_std_max=desc["log_std_max"])
    if kind == "artificial":
        return ArtificialActor(**common)
    if kind == "spiking":
        snn_params = persistence.SnnParams(
            time_steps=desc["time_steps"], surrogate_slope=desc["surrogate_slope"],
            reset_mode=desc["reset_mode"])
        return SpikingActor(snn_params=snn_params, neuron_kind=desc["neuron_kind"], **common)
    raise persistence.CheckpointError(f"unknown actor kind {kind!r}")


class ArtificialCritic:
    is_spiking = False

    def __init__(self, obs_dim, action_dim, hidden, rng):
        self.trunk = Mlp(obs_dim + action_dim, hidden, rng)
        self.head = LinearHead(hidden[-1], 1, rng)

    def forward(self, s: Tensor, a: Tensor) -> Tensor:
        return self.head.forward(self.trunk.forward(ad.concat(s, a)))

    def params(self):
        return self.trunk.params() + self.head.params()

    def post_step(self):
        pass


class SpikingCritic:
    """Spiking Q-network: LIF trunk over (s, a) with one OWS value head."""

    is_spiking = True

    def __init__(self, obs_dim, action_dim, hidden, rng, snn_params):
        self.time_steps = snn_params.time_steps
        self.net = SpikingNet([obs_dim + action_dim] + list(hidden), [1], rng,
                              beta_init=snn_params.beta_init, v_th_init=snn_params.v_th_init,
                              k=snn_params.surrogate_slope, reset_mode=snn_params.reset_mode)

    def forward(self, s: Tensor, a: Tensor) -> Tensor:
        self.net.reset_membranes()
        x = ad.concat(s, a)
        # unrolled here (not via net.forward) so the action stays on the tape
        spikes = x
        for _ in range(self.time_steps):
            spk = x
            for layer in self.net.layers:
                spk = layer.step(spk)
            spikes = spk
        return self.net.heads[0].decode(spikes)

    def params(self):
        return self.net.params()

    def post_step(self):
        self.net.clamp_decays()


class EntropyTuner:
    """Learned temperature: alpha = exp(log_alpha), target entropy -dim(A)."""

    def __init__(self, action_dim: int, alpha_init: float, lr: float):
        self.log_alpha = Tensor(math.log(alpha_init), requires_grad=True)
        self.target_entropy = -float(action_dim)
        self.opt = Adam([self.log_alpha], lr=lr)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data))

    def update(self, log_probs: np.ndarray) -> float:
        with GradTape() as tape:
            gap = Tensor(log_probs + self.target_entropy)
            loss = ad.tmean(ad.mul(ad.neg(self.log_alpha), gap))
        self.opt.step(ad.backward(tape, loss))
        return float(loss.data)


def squashed_gaussian(actor, obs: np.ndarray, eps: np.ndarray | None,
                      dist_kwargs: dict | None = None):
    """tanh-squashed Gaussian action and its log-probability.

    ``eps`` is the standard-normal draw (reparameterisation); None means
    deterministic (the mean action).
    """
    x = Tensor(np.asarray(obs))
    mean, log_std = actor.dist_params(x, **(dist_kwargs or {}))
    log_std = ad.clip(log_std, actor.log_std_min, actor.log_std_max)
    if eps is None:
        u = mean
    else:
        u = ad.add(mean, ad.mul(ad.exp(log_std), Tensor(eps)))
    t = ad.tanh(u)
    action = ad.add(ad.mul(t, Tensor(actor.action_scale)), Tensor(actor.action_bias))
    log_prob = ad.normal_log_prob(mean, log_std, u)
    squash = ad.log(ad.add(ad.mul(ad.sub(1.0, ad.square(t)), Tensor(actor.action_scale)), 1e-6))
    log_prob = ad.tsum(ad.sub(log_prob, squash), axis=-1, keepdims=True)
    return action, log_prob


def sample_action(actor, obs: np.ndarray, mode: str, rng: np.random.Generator | None = None):
    """Draw one action for an environment step (no gradient recording)."""
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    eps = None
    if mode == "stochastic":
        if rng is None:
            raise ValueError("stochastic sampling requires an rng")
        eps = rng.standard_normal(actor.action_dim)
    with no_grad():
        a, lp = squashed_gaussian(actor, obs, eps)
    if not np.all(np.isfinite(a.data)):
        raise ad.NumericalError("actor produced a non-finite action")
    return a.data, lp.data


def make_actor(variant: str, obs_dim: int, action_dim: int, action_low, action_high,
               cfg: RunConfig, rng: np.random.Generator):
    common = dict(obs_dim=obs_dim, action_dim=action_dim, hidden=cfg.sac.hidden,
                  action_low=action_low, action_high=action_high, rng=rng,
                  log_std_min=cfg.sac.log_std_min, log_std_max=cfg.sac.log_std_max)
    if variant == "asac":
        return ArtificialActor(**common)
    return SpikingActor(snn_params=cfg.snn, **common)


def make_critic(variant: str, obs_dim: int, action_dim: int, cfg: RunConfig,
                rng: np.random.Generator):
    if variant == "ssac":
        return SpikingCritic(obs_dim, action_dim, cfg.sac.hidden, rng, cfg.snn)
    return ArtificialCritic(obs_dim, action_dim, cfg.sac.hidden, rng)


class CriticPair:
    """Two independent Q-networks with polyak-averaged target copies."""

    def __init__(self, variant, obs_dim, action_dim, cfg, rng):
        self.q1 = make_critic(variant, obs_dim, action_dim, cfg, rng)
        self.q2 = make_critic(variant, obs_dim, action_dim, cfg, rng)
        self.t1 = copy.deepcopy(self.q1)
        self.t2 = copy.deepcopy(self.q2)

    def params(self):
        return self.q1.params() + self.q2.params()

    def target_params(self):
        return self.t1.params() + self.t2.params()

    def polyak(self, tau: float):
        polyak_average(self.target_params(), self.params(), tau)

    def post_step(self):
        self.q1.post_step()
        self.q2.post_step()


class SacAgent:
    """Networks plus update rules; the training loop drives this object."""

    def __init__(self, variant: str, env, cfg: RunConfig, rng: np.random.Generator):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.cfg = cfg
        obs_dim = env.observation_dim
        action_dim = env.action_low.size
        self.actor = make_actor(variant, obs_dim, action_dim, env.action_low,
                                env.action_high, cfg, rng)
        self.critics = CriticPair(variant, obs_dim, action_dim, cfg, rng)
        self.tuner = EntropyTuner(action_dim, cfg.sac.alpha_init, cfg.sac.q_lr)
        self.actor_opt = Adam(self.actor.params(), lr=cfg.sac.policy_lr)
        self.critic_opt = Adam(self.critics.params(), lr=cfg.sac.q_lr)

    def critic_update(self, batch, rng: np.random.Generator) -> float:
        s, a, r, s2, done = batch
        gamma = self.cfg.sac.gamma
        alpha = self.tuner.alpha
        with no_grad():
            eps = rng.standard_normal((s2.shape[0], self.actor.action_dim))
            a2, lp2 = squashed_gaussian(self.actor, s2, eps)
            q1t = self.critics.t1.forward(Tensor(s2), a2)
            q2t = self.critics.t2.forward(Tensor(s2), a2)
        q_min = np.minimum(q1t.data, q2t.data)
        y = Tensor(r + gamma * (1.0 - done) * (q_min - alpha * lp2.data))
        st, at = Tensor(s), Tensor(a)
        with GradTape() as tape:
            q1 = self.critics.q1.forward(st, at)
            q2 = self.critics.q2.forward(st, at)
            loss = ad.add(ad.tmean(ad.square(ad.sub(q1, y))),
                          ad.tmean(ad.square(ad.sub(q2, y))))
        self.critic_opt.step(ad.backward(tape, loss))
        self.critics.post_step()
        return float(loss.data)

    def actor_update(self, batch, rng: np.random.Generator) -> tuple[float, np.ndarray]:
        s = batch[0]
        alpha = self.tuner.alpha
        eps = rng.standard_normal((s.shape[0], self.actor.action_dim))
        st = Tensor(s)
        with GradTape() as tape:
            a, lp = squashed_gaussian(self.actor, s, eps)
            q = ad.minimum(self.critics.q1.forward(st, a),
                           self.critics.q2.forward(st, a))
            loss = ad.tmean(ad.sub(ad.mul(lp, alpha), q))
        self.actor_opt.step(ad.backward(tape, loss))
        self.actor.post_step()
        return float(loss.data), lp.data.copy()

    def alpha_update(self, log_probs: np.ndarray) -> float:
        return self.tuner.update(log_probs)


def evaluate_actor(actor, env, episodes: int, seed: int, deterministic: bool = True):
    """Mean return of fresh-membrane (training-semantics) rollouts."""
    returns = []
    for ep in range(episodes):
        obs = env.reset(int(np.random.default_rng([seed, ep]).integers(2 ** 31)))
        total = 0.0
        done = False
        rng = np.random.default_rng([seed, ep, 1])
        while not done:
            mode = "deterministic" if deterministic else "stochastic"
            a, _ = sample_action(actor, obs, mode, rng)
            obs, r, _, term, trunc = env.step(a)
            total += r
            done = term or trunc
        returns.append(total)
    return float(np.mean(returns))


@dataclass
class TrainResult:
    variant: str
    env_name: str
    seed: int
    best_eval: float
    final_eval: float
    log_path: str
    best_checkpoint: str
    last_checkpoint: str


def train(variant: str, env_name: str, cfg: RunConfig, seed: int, outdir: str) -> TrainResult:
    """Full off-policy training loop (schedule per the SAC hyperparameters).

    Writes a per-episode training log, an evaluation log, and best/last
    actor checkpoints under ``outdir``. Deterministic given (cfg, seed).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    previous_dtype = ad.default_dtype()
    ad.set_default_dtype(cfg.sac.precision)
    try:
        return _train(variant, env_name, cfg, seed, outdir)
    finally:
        ad.set_default_dtype(previous_dtype)


def _train(variant: str, env_name: str, cfg: RunConfig, seed: int, outdir: str) -> TrainResult:
    os.makedirs(outdir, exist_ok=True)
    env = make_env(env_name, cfg.kenv, cfg.denv)
    eval_env = make_env(env_name, cfg.kenv, cfg.denv)
    ss = np.random.SeedSequence(seed)
    s_init, s_expl, s_buf, s_episode = ss.spawn(4)
    rng_init = np.random.default_rng(s_init)
    rng_expl = np.random.default_rng(s_expl)
    rng_buf = np.random.default_rng(s_buf)
    rng_episode = np.random.default_rng(s_episode)

    agent = SacAgent(variant, env, cfg, rng_init)
    buffer = ReplayBuffer(cfg.sac.buffer_size, env.observation_dim, env.action_low.size)

    meta = {"variant": variant, "env": env_name, "seed": seed,
            "config_hash": persistence.config_hash(cfg)}
    log_rows = []
    eval_rows = []
    best_eval = -np.inf
    best_path = os.path.join(outdir, "checkpoint_best.spk")
    last_path = os.path.join(outdir, "checkpoint_last.spk")

    obs = env.reset(int(rng_episode.integers(2 ** 31)))
    episode_return = 0.0
    episode_len = 0
    critic_loss = actor_loss = float("nan")
    sac = cfg.sac

    for step in range(1, sac.total_steps + 1):
        if step <= sac.learning_starts:
            action = rng_expl.uniform(env.action_low, env.action_high)
        else:
            action, _ = sample_action(agent.actor, obs, "stochastic", rng_expl)
        next_obs, reward, _, terminated, truncated = env.step(action)
        buffer.add(obs, action, reward, next_obs, terminated)
        episode_return += reward
        episode_len += 1

        if terminated or truncated:
            log_rows.append((step, episode_return, episode_len, critic_loss,
                             actor_loss, agent.tuner.alpha))
            obs = env.reset(int(rng_episode.integers(2 ** 31)))
            episode_return = 0.0
            episode_len = 0
        else:
            obs = next_obs

        if step > sac.learning_starts:
            batch = buffer.sample(sac.batch_size, rng_buf)
            critic_loss = agent.critic_update(batch, rng_buf)
            if step % sac.policy_freq == 0:
                actor_loss, lp = agent.actor_update(batch, rng_buf)
                agent.alpha_update(lp)
            if step % sac.target_freq == 0:
                agent.critics.polyak(sac.tau)

        if step % sac.eval_every == 0:
            mean_ret = evaluate_actor(agent.actor, eval_env, sac.eval_episodes,
                                      seed=seed * 1_000_003 + step)
            eval_rows.append((step, mean_ret))
            if mean_ret > best_eval:
                best_eval = mean_ret
                persistence.save_checkpoint(best_path, agent.actor,
                                            {**meta, "training_step": step,
                                             "eval_return": mean_ret})
            persistence.save_checkpoint(last_path, agent.actor,
                                        {**meta, "training_step": step})

    persistence.save_checkpoint(last_path, agent.actor,
                                {**meta, "training_step": sac.total_steps})
    if not np.isfinite(best_eval):
        best_eval = evaluate_actor(agent.actor, eval_env, sac.eval_episodes, seed=seed)
        persistence.save_checkpoint(best_path, agent.actor,
                                    {**meta, "training_step": sac.total_steps,
                                     "eval_return": best_eval})
    log_path = os.path.join(outdir, "training_log.csv")
    persistence.write_metrics_csv(
        log_path,
        ("global_step", "episodic_return", "episode_length", "critic_loss",
         "actor_loss", "alpha"),
        log_rows)
    persistence.write_metrics_csv(os.path.join(outdir, "eval_log.csv"),
                                  ("global_step", "mean_return"), eval_rows)
    final_eval = eval_rows[-1][1] if eval_rows else best_eval
    return TrainResult(variant, env_name, seed, best_eval, final_eval,
                       log_path, best_path, last_path)
