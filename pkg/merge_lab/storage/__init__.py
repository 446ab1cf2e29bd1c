"""
Storage Package

Checkpoint containers, CSV result files and image grids.
"""
