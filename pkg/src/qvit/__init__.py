"""Hybrid quantum-classical vision transformer for jet image classification.

Subpackages:
  tensor - float64 tensors with tape-based reverse-mode autodiff
  qsim   - exact statevector simulation of the RX/CNOT circuit family
  model  - patch pipeline, transformer encoder (classical and quantum modes)
  data   - synthetic jet image generation and the on-disk dataset format
  train  - optimizers, schedule, metrics, training loop
  cli    - command-line entry point
"""

__version__ = "0.1.0"
