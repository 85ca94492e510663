"""locobox: desk-scale whole-body loco-manipulation training and evaluation.

A reduced planar-base humanoid with two 3-joint arms learns to walk to a
table, grasp a box bimanually, and carry it to a commanded pose. The package
contains the reduced physics world, reward shaping, domain randomization,
from-scratch numpy networks, a recurrent object-pose estimator with a
ground-truth-to-estimate curriculum, PPO training, and an evaluation harness
with pose-source ablations.
"""

__version__ = "0.1.0"
