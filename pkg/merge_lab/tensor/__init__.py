"""
Tensor Package

Float64 tensors, reproducible random streams and matrix norms.
"""
