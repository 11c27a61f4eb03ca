"""Minimal reverse-mode autodiff: tensors, layers, Adam, checkpoints."""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheck, gradient_check
from .layers import LSTM, Conv2d, ConvTranspose2d, Dense, Module
from .optim import Adam, AdamState, adam_step
from .tensor import Graph, GraphStateError, ShapeError, Tensor

__all__ = ["Tensor", "Graph", "ShapeError", "GraphStateError", "Module", "Dense",
           "Conv2d", "ConvTranspose2d", "LSTM", "Adam", "AdamState", "adam_step",
           "save_checkpoint", "load_checkpoint", "gradient_check", "GradCheck"]
