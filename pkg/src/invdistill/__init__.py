"""Inverse distillation of discrete diffusion language models, at desk scale.

The package holds forward noising processes, a small reverse-mode autodiff
engine, transformer denoisers, the diffusion losses, samplers, the
distillation loop and an exact enumeration oracle for tiny instances.
"""

__version__ = "0.1.0"
