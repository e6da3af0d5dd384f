"""Numerical laboratory for matrix cocycles over symbolic dynamical systems."""
