"""Rotation-invariant iris recognition toolkit.

Library layout:
  tensor/functional  autodiff engine and the differentiable ops
  iris               rubber-sheet normalization, synthesis, datasets
  codes              log-Gabor / ordinal iris codes + Hamming matching
  model              the network, k-means VLAD init, checkpoints
  train              SGD training with plateau schedule and resume
  metrics            pairing regimes, ROC/EER/FRR, saliency
  config / cli       experiment configs and the command-line front end
"""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeMismatchError, TapeError, no_grad

__all__ = ["Tensor", "ShapeMismatchError", "TapeError", "no_grad",
           "__version__"]
