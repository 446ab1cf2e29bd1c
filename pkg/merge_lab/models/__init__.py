"""
Models Package

Fully connected classifiers and their forward pass.
"""
