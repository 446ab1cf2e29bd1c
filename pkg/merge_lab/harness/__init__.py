"""
Harness Package

Experiment configs and the commands behind the CLI.
"""
