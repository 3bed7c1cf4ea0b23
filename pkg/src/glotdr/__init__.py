"""Desk-scale distributionally robust training with local adversarial
particles and global optimal-transport regularizers.

Submodules:
  diffcore   dense nets, losses, exact gradients, optimizers, schedules
  svgd       projected Stein variational particle sampler
  transport  discrete optimal transport (exact oracle, Sinkhorn, duals)
  glot       cost metric, local densities, assembled risk, global terms
  train      scenario harnesses, baselines, PGD attack, evaluation
  data       synthetic shift generators and IDX file IO
  cli        config parsing, subcommands, CSV/SVG output
"""

__version__ = "0.1.0"

from . import backend  # noqa: F401
