"""Diffusion and stochastic control on the Sierpinski gasket.

Submodules
----------
gasket
    Pre-gasket graphs, cell words and the self-similar mass.
dirichlet
    Graph energy, harmonic extension and the Kusuoka energy measure.
diffusion
    The measure-time random walk, its bracket and Monte Carlo estimators.
control
    Controlled SDE integration, spike variations and adjoint regression.
regulator
    The linear regulator benchmark and its checks.
cli
    Experiment runner.
"""
__version__ = "0.1.0"

from . import control, diffusion, dirichlet, gasket, regulator  # noqa: E402

__all__ = ["__version__", "gasket", "dirichlet", "diffusion", "control", "regulator"]
