"""Fully binarized transformer encoders in numpy: elastic binarizers, packed kernels, multi-step distillation."""

__version__ = "0.1.0"
