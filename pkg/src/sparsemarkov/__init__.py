"""Sparse inducing-state inference for Markovian Gaussian processes."""
