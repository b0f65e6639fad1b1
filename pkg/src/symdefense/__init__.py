"""Symmetry defense against adversarial perturbations, at desk scale."""

from .group import A, B, C, E, ELEMENTS, GroupElement, apply, compose, inverse
from .nn import Network, build_network, forward, load_checkpoint, loss_and_grads, predict, save_checkpoint, sgd_step

__version__ = "0.1.0"
