"""Desk-scale planar legged parkour lab.

Curriculum height-field terrains, a deterministic planar quadruped-lite
simulator with a noisy egocentric depth camera, a recurrent cross-modal
state/terrain estimator trained by regression, and an asymmetric
actor-critic trained with PPO, optimized concurrently.
"""

__version__ = "0.1.0"
