"""Polynomial vision networks: all-polynomial blocks, training, and circuit export."""

from .circuit import ArithmeticCircuit, eval_circuit, read_circuit, verify_polynomial, write_circuit
from .folding import NotPolynomialFoldable, export_circuit, fold_inference
from .model import ModelConfig, PolyNeXtModel, build_model, param_count, preset
from .tensor import Tape, Tensor
from .training import TrainRecipe, train

__all__ = [
    "ArithmeticCircuit", "ModelConfig", "NotPolynomialFoldable", "PolyNeXtModel", "Tape", "Tensor",
    "TrainRecipe", "build_model", "eval_circuit", "export_circuit", "fold_inference", "param_count",
    "preset", "read_circuit", "train", "verify_polynomial", "write_circuit",
]
__version__ = "0.1.0"
