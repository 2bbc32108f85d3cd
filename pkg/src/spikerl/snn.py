"""Spiking layers, encoders/decoders, and the multi-time-step forward pass.

A ``SpikingNet`` is a stack of leaky integrate-and-fire layers read out by
one or more trainable affine spike decoders (output-weighted-spike, OWS)
applied to the final time step's spike vector.
"""
from __future__ import annotations

import copy

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

LEAKY = "leaky"
SLEAKY = "sleaky"
ZERO_RESET = "zero"
SUBTRACT_RESET = "subtract"


def init_weight(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(in_dim)
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


class SpikingLayer:
    """One LIF layer: synaptic weights, per-neuron decay and threshold.

    Membrane potential and the previous spike vector are carried as live
    graph tensors during training so BPTT sees the full time unroll.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, *,
                 beta_init: float = 1.0, v_th_init: float = 2.0, k: float = 10.0,
                 reset_mode: str = ZERO_RESET, neuron_kind: str = LEAKY):
        if reset_mode not in (ZERO_RESET, SUBTRACT_RESET):
            raise ValueError(f"unknown reset mode {reset_mode!r}")
        if neuron_kind not in (LEAKY, SLEAKY):
            raise ValueError(f"unknown neuron kind {neuron_kind!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = Tensor(init_weight(rng, out_dim, in_dim), requires_grad=True)
        self.beta = Tensor(np.full(out_dim, beta_init), requires_grad=True)
        self.v_th = Tensor(np.full(out_dim, v_th_init), requires_grad=True)
        self.k = k
        self.reset_mode = reset_mode
        self.neuron_kind = neuron_kind
        self.h: Tensor | None = None
        self.s_prev: Tensor | None = None

    def params(self) -> list[Tensor]:
        return [self.w, self.beta, self.v_th]

    def step(self, x: Tensor) -> Tensor:
        """Advance the membrane one time step and return binary spikes."""
        pre, s = ad.lif_step(x, self.w, self.h, self.s_prev, self.beta,
                             self.v_th, self.k, self.reset_mode == ZERO_RESET)
        self.h = pre
        self.s_prev = s
        return s

    def reset(self):
        self.h = None
        self.s_prev = None

    def carry_forward(self):
        """SLeaky `continue`: detach state and clear negative membranes.

        Inference only; rejected for plain Leaky layers.
        """
        if self.neuron_kind != SLEAKY:
            raise ValueError("carry_forward is only defined for SLeaky layers")
        if self.h is not None:
            self.h = Tensor(np.maximum(self.h.data, 0.0), _checked=True)
        if self.s_prev is not None:
            self.s_prev = self.s_prev.detach()

    def clamp_decay(self):
        """Keep the trainable decay in [0, 1]; above 1 the membrane diverges."""
        np.clip(self.beta.data, 0.0, 1.0, out=self.beta.data)


class OwsDecoder:
    """Trainable affine readout of the final-step spike vector."""

    def __init__(self, population: int, out_dim: int, rng: np.random.Generator):
        self.population = population
        self.out_dim = out_dim
        self.w = Tensor(init_weight(rng, out_dim, population), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def params(self) -> list[Tensor]:
        return [self.w, self.b]

    def decode(self, spikes: Tensor) -> Tensor:
        if spikes.data.shape[-1] != self.population:
            raise ShapeError(
                f"ows_decode: {spikes.data.shape} does not match population {self.population}")
        return ad.linear(spikes, self.w, self.b)


class SpikeTrace:
    """Per-time-step record of one forward pass."""

    def __init__(self):
        self.spike_counts: list[float] = []   # network-wide spikes per time step
        self.outputs: list[np.ndarray] = []   # decoded primary output per time step

    @property
    def steps(self) -> int:
        return len(self.spike_counts)

    @property
    def total_spikes(self) -> float:
        return float(sum(self.spike_counts))


def direct_encode(x: np.ndarray, steps: int) -> list[np.ndarray]:
    """Repeat the raw input for every time step."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return [x] * steps


def rate_encode(x: np.ndarray, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Bernoulli spike train with per-neuron rate x in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("rate_encode requires values in [0, 1]")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    return (rng.random((steps, x.size)) < x).astype(np.float64)


def rate_decode(spikes: np.ndarray) -> np.ndarray:
    """Mean spike count per neuron over the trace."""
    return np.asarray(spikes, dtype=np.float64).mean(axis=0)


class SpikingNet:
    """LIF layer stack with OWS decoder heads.

    Membrane state is never reset inside ``forward``; reset policy (per
    training step vs per episode) belongs to the caller.
    """

    def __init__(self, layer_dims: list[int], head_dims: list[int],
                 rng: np.random.Generator, *, beta_init: float = 1.0,
                 v_th_init: float = 2.0, k: float = 10.0,
                 reset_mode: str = ZERO_RESET, neuron_kind: str = LEAKY):
        if len(layer_dims) < 2:
            raise ValueError("need at least input and one layer width")
        self.layers = [
            SpikingLayer(layer_dims[i], layer_dims[i + 1], rng, beta_init=beta_init,
                         v_th_init=v_th_init, k=k, reset_mode=reset_mode,
                         neuron_kind=neuron_kind)
            for i in range(len(layer_dims) - 1)
        ]
        population = layer_dims[-1]
        self.heads = [OwsDecoder(population, d, rng) for d in head_dims]

    @property
    def neuron_kind(self) -> str:
        return self.layers[0].neuron_kind

    def params(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        for head in self.heads:
            out.extend(head.params())
        return out

    def reset_membranes(self):
        for layer in self.layers:
            layer.reset()

    def carry_forward(self):
        for layer in self.layers:
            layer.carry_forward()

    def clamp_decays(self):
        for layer in self.layers:
            layer.clamp_decay()

    def convert(self, neuron_kind: str) -> "SpikingNet":
        """Deep copy with every layer switched to ``neuron_kind``."""
        net = copy.deepcopy(self)
        for layer in net.layers:
            layer.neuron_kind = neuron_kind
            layer.reset()
        return net

    def forward(self, x: np.ndarray, steps: int, record: bool = False
                ) -> tuple[list[Tensor], SpikeTrace]:
        """Run ``steps`` time steps of direct-encoded input.

        Returns one decoded output per head (from the final executed step)
        and the spike trace. With ``record``, the first head is also
        decoded at every intermediate step for stability analysis.
        """
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        xt = x if isinstance(x, Tensor) else Tensor(x)
        trace = SpikeTrace()
        spikes = None
        for _ in range(steps):
            s = xt
            count = 0.0
            for layer in self.layers:
                s = layer.step(s)
                count += float(s.data.sum())
            spikes = s
            trace.spike_counts.append(count)
            if record:
                trace.outputs.append(self.heads[0].decode(spikes).data.copy())
        outputs = [head.decode(spikes) for head in self.heads]
        return outputs, trace
