"""Differentiable sparse permutohedral-lattice operators and the LatticeNet segmenter."""
from .autodiff import Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .estimator import LatticeNetSegmenter
from .io import parse_cloud, write_cloud, write_labels
from .lattice import PointCloud, SparseLattice, SimplexAssignment, build_lattice, elevate, find_enclosing_simplex
from .network import LatticeNet, LayerSpec
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "LatticeNet",
    "LatticeNetSegmenter",
    "LayerSpec",
    "PointCloud",
    "SimplexAssignment",
    "SparseLattice",
    "Tape",
    "Tensor",
    "TrainConfig",
    "build_lattice",
    "elevate",
    "find_enclosing_simplex",
    "fit",
    "load_checkpoint",
    "parse_cloud",
    "save_checkpoint",
    "write_cloud",
    "write_labels",
]
