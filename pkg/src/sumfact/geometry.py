"""Symbolic cell geometry: Jacobian, its inverse, and the scaling factor.

The Jacobian is assembled like any coefficient: dof array times derivative
tabulation of the (vector-valued) coordinate element, evaluated per
quadrature point.  No affine short-circuit; redundancy is the passes'
problem.  Inverses use the closed-form adjugate for d <= 3.
"""

from __future__ import annotations

import numpy as np

from .ir import (
    Division, FlexiblyIndexed, Indexed, IndexSum, ListTensor, Literal,
    MathFunction, Product, Sum,
)
from .elements import DimensionMismatch, Unsupported, coordinate_element


class GeometryBundle:
    """J (d x d), G = J^-1, S = |det J|, and the coordinate argument."""

    def __init__(self, jacobian_expr, inverse_expr, scaling_expr, det_expr,
                 coord_variable, dimension):
        self.J = jacobian_expr
        self.G = inverse_expr
        self.S = scaling_expr
        self.detJ = det_expr
        self.coord_variable = coord_variable
        self.dimension = dimension


def _row_major_strides(shape):
    strides = []
    acc = 1
    for e in reversed(shape):
        strides.append(acc)
        acc *= e
    return tuple(reversed(strides))


def jacobian(coord_element, ps, coords):
    """J[a][b](xi_q) = sum_i c_i[a] d(Phi_i)/dx_b (xi_q), as a (d, d) grid.

    The coordinate dof array is flat, dof-major then component; the vector
    element's Kronecker deltas are left in place for the passes to cancel.
    """
    d = ps.dimension
    if coord_element.value_shape != (d,):
        raise DimensionMismatch(
            "coordinate element value shape %s does not match point dimension %d"
            % (coord_element.value_shape, d))
    tab = coord_element._tabulate(1, ps)
    basis = tab.basis_indices
    strides = _row_major_strides(coord_element.basis_shape)
    dofs = FlexiblyIndexed(coords, 0, tuple(zip(basis, strides)))
    rows = []
    for a in range(d):
        row = []
        for b in range(d):
            integrand = Product(dofs, Indexed(tab[(b,)], (a,)))
            row.append(IndexSum(integrand, basis))
        rows.append(row)
    return ListTensor(rows)


def _neg(e):
    return Product(Literal(-1.0), e)


def inverse_and_det(J, d):
    """Closed-form adjugate inverse and determinant for d in {1, 2, 3}."""
    j = [[Indexed(J, (a, b)) for b in range(d)] for a in range(d)]
    if d == 1:
        det = j[0][0]
        inv = [[Division(Literal(1.0), det)]]
    elif d == 2:
        det = Sum(Product(j[0][0], j[1][1]), _neg(Product(j[0][1], j[1][0])))
        inv = [[Division(j[1][1], det), Division(_neg(j[0][1]), det)],
               [Division(_neg(j[1][0]), det), Division(j[0][0], det)]]
    elif d == 3:
        def minor(r, c):
            rs = [a for a in range(3) if a != r]
            cs = [b for b in range(3) if b != c]
            return Sum(Product(j[rs[0]][cs[0]], j[rs[1]][cs[1]]),
                       _neg(Product(j[rs[0]][cs[1]], j[rs[1]][cs[0]])))
        det = Sum(Sum(Product(j[0][0], minor(0, 0)),
                      _neg(Product(j[0][1], minor(0, 1)))),
                  Product(j[0][2], minor(0, 2)))
        inv = [[None] * 3 for _ in range(3)]
        for a in range(3):
            for b in range(3):
                cof = minor(b, a)
                if (a + b) % 2:
                    cof = _neg(cof)
                inv[a][b] = Division(cof, det)
    else:
        raise Unsupported("no closed-form inverse for dimension %d" % d)
    return ListTensor(inv), det


def geometry_bundle(cell_name, ps, coords):
    """Build J, G, S for a named cell with its degree-1 coordinate element."""
    element = coordinate_element(cell_name)
    J = jacobian(element, ps, coords)
    G, det = inverse_and_det(J, ps.dimension)
    S = MathFunction("abs", det)
    return GeometryBundle(J, G, S, det, coords, ps.dimension)


def reference_vertices(cell_name):
    """Coordinate dofs of the reference cell, in element node order."""
    from .elements import coordinate_element as ce
    elem = ce(cell_name)
    if cell_name == "interval":
        pts = np.array([[0.0], [1.0]])
    elif cell_name == "quad":
        pts = np.array([[x, y] for x in (0.0, 1.0) for y in (0.0, 1.0)])
    elif cell_name == "hex":
        pts = np.array([[x, y, z] for x in (0.0, 1.0) for y in (0.0, 1.0)
                        for z in (0.0, 1.0)])
    elif cell_name == "triangle":
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    elif cell_name == "prism":
        tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        pts = np.array([[t[0], t[1], z] for t in tri for z in (0.0, 1.0)])
    else:
        raise Unsupported("unknown cell %r" % cell_name)
    assert pts.shape == (elem.space_dimension // pts.shape[1], pts.shape[1])
    return pts


def coords_flat(vertex_coords):
    """Flatten vertex coordinates dof-major then component."""
    return np.asarray(vertex_coords, dtype=float).reshape(-1)
