"""Quasi-stationary laws, Yaglom limits and Martin kernels of killed walks."""
