"""Convex compositional energy minimization.

Factor energies are partially input-convex networks, composed by nonnegative
summation into a convex global energy over a tight convex relaxation, trained
contrastively and through an unrolled projected solver, and minimized at
inference by projected first-order methods.
"""

__version__ = "0.1.0"
