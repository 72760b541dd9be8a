"""Reinforcement-learned key-frame selection for long-video question answering.

A numpy-only toolkit: a 1D U-Net frame sampler, exact sampling without
replacement, GRPO and REINFORCE objectives with hand-written gradients, and
a synthetic video-QA environment that stands in for the vision-language
model and the frame encoder.

Modules
-------
env        synthetic episodes, similarity matrices, answer oracle, file formats
nn         conv layers, pooling, Adam, gradient checking, checkpoints
sampler    the U-Net sampler and frame drawing
policy     toy query policy and the clipped group-relative update
rewards    reward parts and advantage estimators
harness    training phases, baselines, evaluation
gradcheck  finite-difference suite used by ``keyframe-rl gradcheck``
cli        command-line entry point
"""

__version__ = "0.1.0"
