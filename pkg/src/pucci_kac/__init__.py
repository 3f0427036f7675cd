"""Monte Carlo, dynamic-programming and finite-difference solvers for the
Dirichlet problem ``1/2 P+(D^2 u) + f = 0`` in ``D``, ``u = g`` on ``dD``.

Submodules are imported explicitly (``from pucci_kac import symmat``); the
package root stays light so the CLI can configure numba threading before
any kernel is compiled.
"""

__version__ = "0.1.0"
