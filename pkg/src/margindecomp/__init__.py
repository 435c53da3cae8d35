"""Desk-scale adversarial robustness toolkit.

Trains small MLP classifiers on synthetic data, measures gradient imbalance
(GIR), and evaluates robustness with a family of sign-gradient attacks
including the two-stage margin-decomposition (MD) attacks.
"""

from margindecomp.tensor import GradTape, Tensor, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "GradTape", "backward", "finite_diff_grad", "__version__"]
