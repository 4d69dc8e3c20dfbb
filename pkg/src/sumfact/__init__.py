"""Structure-exploiting finite element kernel compiler.

Basis tabulations are tensor-algebra expressions (products, Kronecker
deltas, concatenations) rather than dense tables, and a pass pipeline (sum
factorisation, delta cancellation, Concatenate splitting) turns weak-form
kernels into loop programs with asymptotically optimal operation counts,
verified against a naive-evaluation oracle.
"""

from . import (  # noqa: F401
    elements, forms, geometry, interpreter, ir, passes, quadrature,
    scheduling,
)

__version__ = "0.1.0"
