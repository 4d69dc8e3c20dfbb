"""Structure-revealing finite elements.

Elements return their basis tabulations as expressions, not as numbers.
Tensor products tabulate as products of factor tabulations, vector and
tensor elements contribute Kronecker deltas, enriched elements concatenate
flattened subelement tabulations, and spectral variants collapse to a Delta
node when evaluated at their own nodes.  Dense tables appear only in the
leaves (interval tables, the deliberately structure-free numeric wrapper).
"""

from __future__ import annotations

import itertools

import numpy as np

from . import ir
from .ir import (
    ComponentTensor, Concatenate, Delta, Index, Indexed, ListTensor, Literal,
    Product, Zero,
)
from .quadrature import (
    PointSet1D, TensorPointSet, UnstructuredPointSet,
    gauss_legendre_points, gauss_lobatto_legendre_points,
)


class InvalidDegree(Exception):
    pass


class DimensionMismatch(Exception):
    pass


class ShapeMismatch(Exception):
    pass


class ValueShapeMismatch(Exception):
    pass


class Unsupported(Exception):
    pass


# ---------------------------------------------------------------------------
# reference cells


class Interval:
    dimension = 1

    def __eq__(self, other):
        return isinstance(other, Interval)

    def __hash__(self):
        return hash("Interval")

    def __repr__(self):
        return "interval"


class Triangle:
    dimension = 2

    def __eq__(self, other):
        return isinstance(other, Triangle)

    def __hash__(self):
        return hash("Triangle")

    def __repr__(self):
        return "triangle"


class ProductCell:
    def __init__(self, a, b):
        self.factors = (a, b)
        self.dimension = a.dimension + b.dimension

    def __eq__(self, other):
        return isinstance(other, ProductCell) and self.factors == other.factors

    def __hash__(self):
        return hash(("ProductCell", self.factors))

    def __repr__(self):
        return "(%r x %r)" % self.factors


def quad_cell():
    return ProductCell(Interval(), Interval())


def hex_cell():
    return ProductCell(ProductCell(Interval(), Interval()), Interval())


def prism_cell():
    return ProductCell(Triangle(), Interval())


# ---------------------------------------------------------------------------
# tabulation results


class TabulationResult:
    """Derivative-key -> expression map, plus the indices minted for it.

    Every expression has shape ``value_shape`` and free indices
    ``basis_indices + point indices``.  Keys are tuples of spatial
    directions, one entry per differentiation.
    """

    def __init__(self, entries, basis_indices, point_set):
        self.entries = dict(entries)
        self.basis_indices = tuple(basis_indices)
        self.point_set = point_set

    def __getitem__(self, key):
        return self.entries[key]

    def keys(self):
        return self.entries.keys()


def _derivative_keys(dimension, order):
    return list(itertools.product(range(dimension), repeat=order))


class FiniteElement:
    """Base element: cell, degree, basis multi-index shape, value shape."""

    cell = None
    degree = None
    basis_shape = ()
    value_shape = ()
    continuity = None

    @property
    def space_dimension(self):
        return int(np.prod(self.basis_shape, dtype=int))

    def basis_evaluation(self, order, ps):
        """Tabulation expressions for exactly the ``order``-th derivatives."""
        result = self._tabulate(order, ps)
        keys = set(_derivative_keys(self.cell.dimension, order))
        entries = {k: v for k, v in result.entries.items() if k in keys}
        return TabulationResult(entries, result.basis_indices, ps)

    def _tabulate(self, max_order, ps):
        """Entries for all derivative orders up to ``max_order``, sharing
        one set of basis indices."""
        raise NotImplementedError


# ---------------------------------------------------------------------------
# interval Lagrange elements


def _lagrange_tables(nodes, points, max_order):
    """Dense tables: table[o][i, q] = d^o L_i / dx^o at points[q]."""
    nf, nq = len(nodes), len(points)
    tables = {o: np.empty((nf, nq)) for o in range(max_order + 1)}
    for i in range(nf):
        others = np.delete(nodes, i)
        if len(others):
            poly = np.polynomial.Polynomial.fromroots(others)
            poly = poly / np.prod(nodes[i] - others)
        else:
            poly = np.polynomial.Polynomial([1.0])
        for o in range(max_order + 1):
            p = poly.deriv(o) if o else poly
            tables[o][i, :] = p(points)
    return tables


def _equispaced_nodes(n):
    if n == 0:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, n + 1)


class IntervalLagrange(FiniteElement):
    """Nodal Lagrange basis on [0, 1]; spectral variants use GLL/GL nodes."""

    def __init__(self, degree, nodes, continuity, collocation=False,
                 variant="equispaced"):
        self.cell = Interval()
        self.degree = degree
        self.nodes = np.asarray(nodes, dtype=float)
        self.basis_shape = (len(self.nodes),)
        self.value_shape = ()
        self.continuity = continuity
        self.collocation = collocation
        self.variant = variant

    def _is_collocated(self, ps):
        return (self.collocation and isinstance(ps, PointSet1D)
                and (ps.points is self.nodes
                     or np.array_equal(ps.points, self.nodes)))

    def _tabulate(self, max_order, ps):
        if not isinstance(ps, PointSet1D):
            raise DimensionMismatch("interval element needs a 1D point set")
        i = Index(len(self.nodes), "i")
        q = ps.quad_index
        collocated = self._is_collocated(ps)
        entries = {}
        if not (collocated and max_order == 0):
            tables = _lagrange_tables(self.nodes, ps.points, max_order)
        for o in range(max_order + 1):
            key = (0,) * o
            if o == 0 and collocated:
                entries[key] = Delta(i, q)
            else:
                entries[key] = Indexed(Literal(tables[o]), (i, q))
        return TabulationResult(entries, (i,), ps)


def lagrange_interval(n, variant="equispaced"):
    """Interval Lagrange family.

    equispaced: continuous, nodes 0, 1/n, ..., 1 (n >= 1)
    spectral_gll: continuous, nodes at GLL(n+1) points (n >= 1)
    spectral_gl: discontinuous, nodes at GL(n+1) points (n >= 0)
    equispaced_discontinuous: dP_n; midpoint for n = 0
    """
    if variant == "equispaced":
        if n < 1:
            raise InvalidDegree("continuous Lagrange needs degree >= 1")
        return IntervalLagrange(n, _equispaced_nodes(n), "C0", variant=variant)
    if variant == "equispaced_discontinuous":
        if n < 0:
            raise InvalidDegree("negative degree")
        return IntervalLagrange(n, _equispaced_nodes(n), "L2", variant=variant)
    if variant == "spectral_gll":
        if n < 1:
            raise InvalidDegree("GLL variant needs degree >= 1")
        return IntervalLagrange(n, gauss_lobatto_legendre_points(n + 1), "C0",
                                collocation=True, variant=variant)
    if variant == "spectral_gl":
        if n < 0:
            raise InvalidDegree("negative degree")
        return IntervalLagrange(n, gauss_legendre_points(n + 1), "L2",
                                collocation=True, variant=variant)
    raise Unsupported("unknown interval variant %r" % variant)


def discontinuous_lagrange_interval(n):
    return lagrange_interval(n, "equispaced_discontinuous")


# ---------------------------------------------------------------------------
# numeric tabulation wrapper (structure-free path)


class NumericTabulationElement(FiniteElement):
    """Wraps externally supplied dense tables; claims no structure."""

    def __init__(self, cell, degree, tables, value_shape=(), nodes=None):
        self.cell = cell
        self.degree = degree
        self.value_shape = tuple(value_shape)
        self.continuity = "C0"
        self.nodes = nodes
        shapes = {np.asarray(t).shape for t in tables.values()}
        if len(shapes) != 1:
            raise ShapeMismatch("inconsistent table shapes: %s" % shapes)
        shape = shapes.pop()
        if len(shape) != 2 + len(self.value_shape) or shape[2:] != self.value_shape:
            raise ShapeMismatch("tables must be (N_f, N_q%s)" % (
                ", " + ", ".join(map(str, self.value_shape)) if self.value_shape else ""))
        self.tables = {k: np.asarray(t, dtype=float) for k, t in tables.items()}
        self.num_points = shape[1]
        self.basis_shape = (shape[0],)

    def _tabulate(self, max_order, ps):
        if ps.dimension != self.cell.dimension:
            raise DimensionMismatch("point set dimension %d, cell dimension %d"
                                    % (ps.dimension, self.cell.dimension))
        if len(ps.indices) != 1:
            raise DimensionMismatch("numeric tabulation needs a flat point set")
        (q,) = ps.indices
        if q.extent != self.num_points:
            raise ShapeMismatch("tables were built for %d points, point set has %d"
                                % (self.num_points, q.extent))
        i = Index(self.basis_shape[0], "i")
        entries = {}
        for o in range(max_order + 1):
            for key in _derivative_keys(self.cell.dimension, o):
                if key not in self.tables:
                    raise ShapeMismatch("no table for derivative %s" % (key,))
                lit = Literal(self.tables[key])
                if self.value_shape:
                    kappa = tuple(Index(e, "k") for e in self.value_shape)
                    entries[key] = ComponentTensor(
                        Indexed(lit, (i, q) + kappa), kappa)
                else:
                    entries[key] = Indexed(lit, (i, q))
        return TabulationResult(entries, (i,), ps)


def numeric_tabulation_element(cell, degree, tables, value_shape=()):
    return NumericTabulationElement(cell, degree, tables, value_shape)


def _monomial_exponents(n):
    return [(a, b) for b in range(n + 1) for a in range(n + 1 - b)]


def _monomial_eval(exponents, points, key):
    """Evaluate (derivatives of) 2D monomials at points; key lists the
    differentiation directions."""
    x, y = points[:, 0], points[:, 1]
    out = np.empty((len(points), len(exponents)))
    for m, (a, b) in enumerate(exponents):
        ca, cb = 1.0, 1.0
        for d in key:
            if d == 0:
                ca *= a
                a -= 1
            else:
                cb *= b
                b -= 1
        if a < 0 or b < 0:
            out[:, m] = 0.0
        else:
            out[:, m] = ca * cb * x**a * y**b
    return out


def triangle_lattice(n):
    """Principal lattice of the unit triangle, deterministic ordering."""
    return np.array([(a / n, b / n) for (a, b) in _monomial_exponents(n)])


class TriangleLagrange(FiniteElement):
    """P_n on the unit triangle via a monomial Vandermonde solve.

    Conditioning restricts n <= 6.  All tabulations go through the numeric
    wrapper; this element reveals no structure on purpose.
    """

    def __init__(self, degree):
        if not 1 <= degree <= 6:
            raise InvalidDegree("triangle Lagrange restricted to 1 <= n <= 6")
        self.cell = Triangle()
        self.degree = degree
        self.exponents = _monomial_exponents(degree)
        self.nodes = triangle_lattice(degree)
        self.basis_shape = (len(self.nodes),)
        self.value_shape = ()
        self.continuity = "C0"
        vandermonde = _monomial_eval(self.exponents, self.nodes, ())
        self.coefficients = np.linalg.solve(vandermonde, np.eye(len(self.nodes)))

    def _tables_at(self, points, max_order):
        tables = {}
        for o in range(max_order + 1):
            for key in _derivative_keys(2, o):
                tables[key] = (_monomial_eval(self.exponents, points, key)
                               @ self.coefficients).T
        return tables

    def _tabulate(self, max_order, ps):
        if ps.dimension != 2:
            raise DimensionMismatch("triangle element needs 2D points")
        wrapper = NumericTabulationElement(
            self.cell, self.degree,
            self._tables_at(ps.coordinates(), max_order), nodes=self.nodes)
        return wrapper._tabulate(max_order, ps)


def triangle_lagrange(n):
    return TriangleLagrange(n)


# ---------------------------------------------------------------------------
# tensor product elements


class ProductElement(FiniteElement):
    def __init__(self, e1, e2):
        if e1.value_shape != () or e2.value_shape != ():
            raise Unsupported("tensor products of non-scalar elements are "
                              "built via the HDiv/HCurl wrappers")
        self.factors = (e1, e2)
        self.cell = ProductCell(e1.cell, e2.cell)
        self.degree = max(e1.degree, e2.degree)
        self.basis_shape = e1.basis_shape + e2.basis_shape
        self.value_shape = ()
        self.continuity = (e1.continuity, e2.continuity)

    def _tabulate(self, max_order, ps):
        if not isinstance(ps, TensorPointSet) or len(ps.factors) != 2:
            raise DimensionMismatch("product element needs a binary tensor "
                                    "product point set")
        e1, e2 = self.factors
        ps1, ps2 = ps.factors
        if ps1.dimension != e1.cell.dimension or ps2.dimension != e2.cell.dimension:
            raise DimensionMismatch("point set factors do not match element factors")
        d1 = e1.cell.dimension
        t1 = e1._tabulate(max_order, ps1)
        t2 = e2._tabulate(max_order, ps2)
        entries = {}
        for o in range(max_order + 1):
            for key in _derivative_keys(self.cell.dimension, o):
                k1 = tuple(d for d in key if d < d1)
                k2 = tuple(d - d1 for d in key if d >= d1)
                entries[key] = Product(t1[k1], t2[k2])
        return TabulationResult(entries, t1.basis_indices + t2.basis_indices, ps)


def tensor_product_element(e1, e2):
    return ProductElement(e1, e2)


# ---------------------------------------------------------------------------
# vector / tensor elements


class TensorFamilyElement(FiniteElement):
    """Vector (rank 1) or tensor (rank n) version of a scalar element."""

    def __init__(self, scalar, value_shape):
        if scalar.value_shape != ():
            raise Unsupported("vector/tensor elements need a scalar-valued base")
        self.scalar = scalar
        self.cell = scalar.cell
        self.degree = scalar.degree
        self.value_shape = tuple(value_shape)
        self.basis_shape = scalar.basis_shape + self.value_shape
        self.continuity = scalar.continuity

    def _tabulate(self, max_order, ps):
        base = self.scalar._tabulate(max_order, ps)
        nu = tuple(Index(e, "v") for e in self.value_shape)
        kappa = tuple(Index(e, "k") for e in self.value_shape)
        entries = {}
        for key, expr in base.entries.items():
            body = expr
            for n_r, k_r in zip(nu, kappa):
                body = Product(body, Delta(n_r, k_r))
            entries[key] = ComponentTensor(body, kappa)
        return TabulationResult(entries, base.basis_indices + nu, ps)


def vector_element(scalar, d):
    return TensorFamilyElement(scalar, (d,))


def tensor_element(scalar, shape):
    return TensorFamilyElement(scalar, tuple(shape))


# ---------------------------------------------------------------------------
# enriched elements


class EnrichedElement(FiniteElement):
    def __init__(self, subelements):
        subs = tuple(subelements)
        if not subs:
            raise ValueShapeMismatch("enriched element needs subelements")
        cell = subs[0].cell
        vshape = subs[0].value_shape
        for e in subs[1:]:
            if e.cell != cell:
                raise Unsupported("subelements must share the reference cell")
            if e.value_shape != vshape:
                raise ValueShapeMismatch(
                    "subelement value shapes differ: %s vs %s"
                    % (e.value_shape, vshape))
        self.subelements = subs
        self.cell = cell
        self.degree = max(e.degree for e in subs)
        self.value_shape = vshape
        self.basis_shape = (sum(e.space_dimension for e in subs),)
        self.continuity = None

    def _tabulate(self, max_order, ps):
        subs = [e._tabulate(max_order, ps) for e in self.subelements]
        flat = Index(self.basis_shape[0], "I")
        kappa = tuple(Index(e, "k") for e in self.value_shape)
        entries = {}
        for o in range(max_order + 1):
            for key in _derivative_keys(self.cell.dimension, o):
                operands = []
                for tab in subs:
                    body = tab[key]
                    if self.value_shape:
                        body = Indexed(body, kappa)
                    operands.append(ComponentTensor(body, tab.basis_indices))
                entry = Indexed(Concatenate(*operands), (flat,))
                if self.value_shape:
                    entry = ComponentTensor(entry, kappa)
                entries[key] = entry
        return TabulationResult(entries, (flat,), ps)


def enriched_element(subelements):
    return EnrichedElement(subelements)


# ---------------------------------------------------------------------------
# H(div) / H(curl) value-modifier wrappers


_HDIV_CASES = {
    ("C0", "L2"): ("negate", "zero"),
    ("L2", "C0"): ("zero", "plain"),
}

_HCURL_CASES = {
    ("C0", "L2"): ("zero", "plain"),
    ("L2", "C0"): ("plain", "zero"),
}


class ValueModifierElement(FiniteElement):
    """Maps the scalar value of a 2D interval-product element to a vector."""

    def __init__(self, sub, cases, tag):
        if not isinstance(sub, ProductElement) or sub.cell.dimension != 2:
            raise Unsupported("%s expects a 2D tensor product element" % tag)
        if not all(isinstance(f, IntervalLagrange) for f in sub.factors):
            raise Unsupported("%s expects interval element factors" % tag)
        key = (sub.factors[0].continuity, sub.factors[1].continuity)
        if key not in cases:
            raise Unsupported("%s has no case for factor continuity %s"
                              % (tag, (key,)))
        self.sub = sub
        self.case = cases[key]
        self.tag = tag
        self.cell = sub.cell
        self.degree = sub.degree
        self.basis_shape = sub.basis_shape
        self.value_shape = (2,)
        self.continuity = None

    def _component(self, kind, scalar):
        if kind == "zero":
            return Zero()
        if kind == "negate":
            return Product(Literal(-1.0), scalar)
        return scalar

    def _tabulate(self, max_order, ps):
        base = self.sub._tabulate(max_order, ps)
        entries = {}
        for key, expr in base.entries.items():
            entries[key] = ListTensor(
                [self._component(kind, expr) for kind in self.case])
        return TabulationResult(entries, base.basis_indices, ps)


def hdiv_wrap(element):
    return ValueModifierElement(element, _HDIV_CASES, "HDiv")


def hcurl_wrap(element):
    return ValueModifierElement(element, _HCURL_CASES, "HCurl")


def rtcf_element(n, variant="equispaced"):
    """Quadrilateral Raviart-Thomas: HDiv(P_n x dP_{n-1}) + HDiv(dP_{n-1} x P_n)."""
    if n < 1:
        raise InvalidDegree("RTCF needs degree >= 1")
    cont = lambda: lagrange_interval(n, variant)
    disc = lambda: discontinuous_lagrange_interval(n - 1)
    return enriched_element([
        hdiv_wrap(tensor_product_element(cont(), disc())),
        hdiv_wrap(tensor_product_element(disc(), cont())),
    ])


def rtce_element(n, variant="equispaced"):
    """Quadrilateral H(curl) analogue via the HCurl wrapper."""
    if n < 1:
        raise InvalidDegree("RTCE needs degree >= 1")
    cont = lambda: lagrange_interval(n, variant)
    disc = lambda: discontinuous_lagrange_interval(n - 1)
    return enriched_element([
        hcurl_wrap(tensor_product_element(cont(), disc())),
        hcurl_wrap(tensor_product_element(disc(), cont())),
    ])


# ---------------------------------------------------------------------------
# spec-level free function and default element builders


def basis_evaluation(element, order, ps):
    return element.basis_evaluation(order, ps)


def scalar_element(cell_name, degree, variant="equispaced"):
    """Default scalar element on a named cell."""
    if cell_name == "interval":
        return lagrange_interval(degree, variant)
    if cell_name == "quad":
        return tensor_product_element(lagrange_interval(degree, variant),
                                      lagrange_interval(degree, variant))
    if cell_name == "hex":
        return tensor_product_element(
            tensor_product_element(lagrange_interval(degree, variant),
                                   lagrange_interval(degree, variant)),
            lagrange_interval(degree, variant))
    if cell_name == "triangle":
        return triangle_lagrange(degree)
    if cell_name == "prism":
        return tensor_product_element(triangle_lagrange(degree),
                                      lagrange_interval(degree, variant))
    raise Unsupported("unknown cell %r" % cell_name)


def coordinate_element(cell_name):
    """Degree-1 vector element used for the coordinate field."""
    if cell_name == "interval":
        return vector_element(lagrange_interval(1), 1)
    if cell_name == "quad":
        return vector_element(scalar_element("quad", 1), 2)
    if cell_name == "hex":
        return vector_element(scalar_element("hex", 1), 3)
    if cell_name == "triangle":
        return vector_element(triangle_lagrange(1), 2)
    if cell_name == "prism":
        return vector_element(scalar_element("prism", 1), 3)
    raise Unsupported("unknown cell %r" % cell_name)


def cell_by_name(cell_name):
    return {"interval": Interval(), "quad": quad_cell(), "hex": hex_cell(),
            "triangle": Triangle(), "prism": prism_cell()}[cell_name]
