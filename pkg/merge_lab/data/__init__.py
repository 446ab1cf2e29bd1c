"""
Data Package

This package generates synthetic image classification tasks.
"""
