"""Spiking-actor soft actor-critic for rehabilitation-arm control.

Subpackages: autodiff (reverse-mode numpy engine), snn (leaky spiking
layers and readout), envs (kinematic/dynamic arm simulators), sac
(training loop), spttq (temporal quantisation and inference accounting),
persistence (configs/checkpoints), cli (command-line front end).
"""

__version__ = "0.1.0"
