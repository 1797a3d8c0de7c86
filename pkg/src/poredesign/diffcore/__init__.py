"""Minimal reverse-mode autodiff engine, layers, Adam and checkpoints."""

from .checkpoint import load_checkpoint, save_checkpoint
from .nn import Conv, ConvTranspose, Dense, Flatten, MaxPool, Module, Reshape, Sequential
from .optim import Adam, AdamState, ReduceLROnPlateau, adam_step
from .tensor import Tensor, no_grad

__all__ = [
    "Adam", "AdamState", "Conv", "ConvTranspose", "Dense", "Flatten", "MaxPool", "Module",
    "ReduceLROnPlateau", "Reshape", "Sequential", "Tensor", "adam_step", "load_checkpoint",
    "no_grad", "save_checkpoint",
]
