"""morphseg: deformable-window transformer segmentation at desk scale.

Core pieces: diffeomorphic deformation fields integrated from bounded
velocity fields by scaling and squaring; morphology-aware patch/window
features sampled through those fields; soft K-means clustering attention;
a small trainable encoder/decoder with fully hand-written gradients; and
topology-aware evaluation (clDice over Zhang-Suen skeletons) on synthetic
vessel phantoms.
"""

from .tensor import Tensor, ShapeError, grid_sample, conv2d, softmax, \
    matmul, layer_norm
from .diffeo import (VelocityField, DeformationField, compose, exponentiate,
                     invert, jacobian_determinant)
from .io import read_mtk1, write_mtk1, write_pgm, FormatError

__version__ = "0.1.0"

__all__ = [
    "Tensor", "ShapeError", "grid_sample", "conv2d", "softmax", "matmul",
    "layer_norm", "VelocityField", "DeformationField", "compose",
    "exponentiate", "invert", "jacobian_determinant", "read_mtk1",
    "write_mtk1", "write_pgm", "FormatError", "__version__",
]
