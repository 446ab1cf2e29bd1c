"""
Merging Package

This package provides weight soups, output ensembles and greedy selection.
"""
