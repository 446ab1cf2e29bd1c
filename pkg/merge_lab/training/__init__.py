"""
Training Package

Minibatch SGD with momentum, evaluation and gradient checking.
"""
