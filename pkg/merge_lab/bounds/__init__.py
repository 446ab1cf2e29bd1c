"""
Bounds Package
"""
