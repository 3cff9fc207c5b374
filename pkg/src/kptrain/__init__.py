"""Keypoint-detector training on synthetic two-view scenes.

Modules
-------
scenegen   procedural scenes, cameras and two-view pairs
geometry   camera model and the exact depth warp
targets    self-supervised target construction (NMS, top-k)
losses     cross-entropy and coverage regularization
augment    C4 rotations and flips with exact camera updates
detector   score network and training loop
sampler    density-aware keypoint sampling
evalbench  repeatability and relative-pose benchmark
storage    on-disk datasets
cli        ``kptrain`` command line
"""

__version__ = "0.1.0"
