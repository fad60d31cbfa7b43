"""Soft actor-critic with a jointly trained VAE state encoder for camera-based lane keeping.

Subpackages and modules:

* ``numcore``  tensors, reverse-mode gradients, Adam, seeded rng, checkpoint files
* ``vae``      convolutional VAE and its loss
* ``sac``      actor, critics, losses and the agent update
* ``simenv``   procedural track simulator with a pinhole ground camera
* ``pipeline`` frame preprocessing, control history, replay buffer
* ``remote``   message protocol, transports, car/trainer loops, off-track detector
* ``trainer``  training protocol, pretraining, evaluation, curves, CLI
* ``toy``      one-dimensional control task with a known optimum
"""

__version__ = "0.1.0"
