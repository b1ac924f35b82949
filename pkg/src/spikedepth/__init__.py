"""Sparse spiking encoder-decoder engine for event-camera depth estimation.

Subpackages:
- events:    DVS streams, spike histograms, the `.evt` file format
- autodiff:  reverse-mode tape over dense tensors, arctan surrogate
- snn:       IF layers, SEW residual blocks, integrator readout
- model:     the full network, depth decoding, `.ssk` checkpoints
- losses:    multiscale regression/smoothness and spike penalization
- train:     Adam and the training schedule
- evalx:     MDE and firing-rate (density) reports
- synthdata: deterministic synthetic stereo event scenes
- cli:       `spikedepth` command-line entry point
"""

__version__ = "0.1.0"
