"""Residual-recovery image denoising (policy-based and regression twins).

The package trains and runs two fully convolutional denoisers that share
one encoder: a per-pixel discrete policy over integer residuals in
[-13, 13] optimized with advantage actor-critic, and a tanh regression
head optimized with terminal MSE. Inference iterates the same one-stage
residual map T times for both.

Public surface by module:

* ``tensor`` — 4-D float64 tensors, tape-based reverse-mode autodiff
* ``kernels`` — dilated 3x3 convolution backends (compiled + numpy)
* ``networks`` — architectures, initialization, checkpoint I/O
* ``env`` — noise synthesis, action set, rewards, returns, sampling
* ``training`` — actor-critic and supervised training loops
* ``inference`` — greedy recursive denoising
* ``data`` — PGM I/O, patches, PSNR, synthetic corpus
* ``sweep`` — noise-level robustness reports
* ``cli`` — command-line entry point (``r3denoise`` console script)
"""

__version__ = "1.0.0"

from .networks import RESIDUAL_LIMIT  # noqa: F401
