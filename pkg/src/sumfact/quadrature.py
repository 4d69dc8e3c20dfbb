"""Quadrature rules and point sets on the reference interval [0, 1].

Gauss-Legendre and Gauss-Lobatto-Legendre nodes are found by Newton
iteration on the Legendre recurrences, then mapped from [-1, 1] to the unit
interval, so the weights of every rule sum to one.  Tensor-product point
sets keep their factor structure and a multi-index, one free index per
factor.
"""

from __future__ import annotations

import numpy as np

from .ir import Index, Indexed, Literal, Product


class InvalidArity(Exception):
    pass


def _legendre(m, x):
    """P_m(x) by the three-term recurrence."""
    p0 = np.ones_like(x)
    if m == 0:
        return p0
    p1 = x.copy()
    for k in range(1, m):
        p0, p1 = p1, ((2 * k + 1) * x * p1 - k * p0) / (k + 1)
    return p1


def _legendre_and_derivative(m, x):
    """P_m(x) and P'_m(x); x must avoid the singular endpoints +-1."""
    p0 = np.ones_like(x)
    if m == 0:
        return p0, np.zeros_like(x)
    p1 = x.copy()
    for k in range(1, m):
        p0, p1 = p1, ((2 * k + 1) * x * p1 - k * p0) / (k + 1)
    dp = m * (x * p1 - p0) / (x * x - 1.0)
    return p1, dp


def _gauss_legendre_11(m):
    """Nodes/weights on [-1, 1]; Newton on P_m with Chebyshev seeds."""
    k = np.arange(m)
    x = np.cos(np.pi * (k + 0.75) / (m + 0.5))
    for _ in range(100):
        p, dp = _legendre_and_derivative(m, x)
        dx = p / dp
        x = x - dx
        if np.max(np.abs(dx)) < 1e-15:
            break
    _, dp = _legendre_and_derivative(m, x)
    w = 2.0 / ((1.0 - x * x) * dp * dp)
    order = np.argsort(x)
    return x[order], w[order]


def _gauss_lobatto_11(m):
    """Lobatto nodes on [-1, 1]: endpoints plus the roots of P'_{m-1}."""
    n = m - 1
    x = np.empty(m)
    x[0], x[-1] = -1.0, 1.0
    if m > 2:
        y = -np.cos(np.pi * np.arange(1, n) / n)
        for _ in range(100):
            p, dp = _legendre_and_derivative(n, y)
            # Newton on P'_n using (1-x^2) P''_n = 2 x P'_n - n(n+1) P_n
            ddp = (2.0 * y * dp - n * (n + 1) * p) / (1.0 - y * y)
            dy = dp / ddp
            y = y - dy
            if np.max(np.abs(dy)) < 1e-15:
                break
        x[1:-1] = np.sort(y)
    p = _legendre(n, x)
    w = 2.0 / (m * n * p * p)
    return x, w


class PointSet1D:
    """Strictly increasing points in [0, 1] with a quadrature index."""

    def __init__(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim != 1 or np.any(np.diff(points) <= 0):
            raise ValueError("points must be a strictly increasing 1D array")
        if points[0] < 0.0 or points[-1] > 1.0:
            raise ValueError("points must lie in [0, 1]")
        points.flags.writeable = False
        self.points = points
        self.quad_index = Index(len(points), "q")

    @property
    def dimension(self):
        return 1

    @property
    def indices(self):
        return (self.quad_index,)

    def coordinates(self):
        """Dense (N, 1) coordinate array in iteration order."""
        return self.points.reshape(-1, 1)

    def same_points(self, other):
        return self is other or (
            isinstance(other, PointSet1D)
            and np.array_equal(self.points, other.points))


class UnstructuredPointSet:
    """Flat list of d-dimensional points with a single quadrature index."""

    def __init__(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim != 2:
            raise ValueError("expected an (N, d) point array")
        points.flags.writeable = False
        self.points = points
        self.quad_index = Index(points.shape[0], "q")

    @property
    def dimension(self):
        return self.points.shape[1]

    @property
    def indices(self):
        return (self.quad_index,)

    def coordinates(self):
        return self.points

    def same_points(self, other):
        return self is other or (
            isinstance(other, UnstructuredPointSet)
            and np.array_equal(self.points, other.points))


class TensorPointSet:
    """Cartesian product of point sets; iteration is lexicographic."""

    def __init__(self, *factors):
        self.factors = tuple(factors)

    @property
    def dimension(self):
        return sum(f.dimension for f in self.factors)

    @property
    def indices(self):
        out = ()
        for f in self.factors:
            out += f.indices
        return out

    def coordinates(self):
        grids = [f.coordinates() for f in self.factors]
        counts = [g.shape[0] for g in grids]
        total = int(np.prod(counts))
        out = np.empty((total, self.dimension))
        rep = total
        col = 0
        pos = np.zeros((total,), dtype=int)
        # lexicographic in (q1, q2, ...)
        strides = []
        acc = 1
        for c in reversed(counts):
            strides.append(acc)
            acc *= c
        strides = strides[::-1]
        for g, c, s in zip(grids, counts, strides):
            idx = (np.arange(total) // s) % c
            out[:, col:col + g.shape[1]] = g[idx]
            col += g.shape[1]
        return out

    def same_points(self, other):
        if self is other:
            return True
        return (isinstance(other, TensorPointSet)
                and len(self.factors) == len(other.factors)
                and all(a.same_points(b)
                        for a, b in zip(self.factors, other.factors)))


class QuadratureRule:
    """A point set together with weights and a weight expression builder."""

    def __init__(self, point_set, weights=None, factors=None):
        self.point_set = point_set
        self.factors = factors
        if weights is not None:
            weights = np.asarray(weights, dtype=float)
            weights.flags.writeable = False
        self.weights = weights

    def weight_expression(self):
        """Scalar weight expr, free in the point set's indices."""
        if self.factors is not None:
            expr = None
            for rule in self.factors:
                term = rule.weight_expression()
                expr = term if expr is None else Product(expr, term)
            return expr
        return Indexed(Literal(self.weights), (self.point_set.quad_index,))

    def dense_weights(self):
        if self.factors is not None:
            w = np.array([1.0])
            for rule in self.factors:
                w = np.multiply.outer(w, rule.dense_weights()).reshape(-1)
            return w
        return np.asarray(self.weights)


_gl_cache = {}
_gll_cache = {}


def gauss_legendre(m):
    """m-point Gauss-Legendre rule on [0, 1]; exact to degree 2m-1."""
    if m < 1:
        raise InvalidArity("Gauss-Legendre needs at least one point")
    if m not in _gl_cache:
        x, w = _gauss_legendre_11(m)
        _gl_cache[m] = ((x + 1.0) / 2.0, w / 2.0)
    pts, wts = _gl_cache[m]
    return QuadratureRule(PointSet1D(pts), wts)


def gauss_lobatto_legendre(m):
    """m-point Gauss-Lobatto-Legendre rule on [0, 1]; exact to degree 2m-3."""
    if m < 2:
        raise InvalidArity("Gauss-Lobatto-Legendre needs at least two points")
    if m not in _gll_cache:
        x, w = _gauss_lobatto_11(m)
        _gll_cache[m] = ((x + 1.0) / 2.0, w / 2.0)
    pts, wts = _gll_cache[m]
    return QuadratureRule(PointSet1D(pts), wts)


def gauss_legendre_points(m):
    """Node coordinates of GL(m), without minting a point set."""
    return gauss_legendre(m).point_set.points


def gauss_lobatto_legendre_points(m):
    return gauss_lobatto_legendre(m).point_set.points


def tensor_point_set(ps_a, ps_b):
    return TensorPointSet(ps_a, ps_b)


def tensor_rule(rule_a, rule_b):
    """Product rule: concatenated coordinates, multiplied weights."""
    return QuadratureRule(TensorPointSet(rule_a.point_set, rule_b.point_set),
                          factors=(rule_a, rule_b))


def collapsed_triangle_rule(m):
    """Product GL rule mapped onto the unit triangle x+y <= 1.

    The square (u, v) maps to (u, v(1-u)); the metric factor (1-u) is folded
    into the weights.  Exact for total degree <= 2m-2 (and for 2m-1 in v).
    """
    gu = gauss_legendre(m)
    gv = gauss_legendre(m)
    u = gu.point_set.points
    v = gv.point_set.points
    pts = np.empty((m * m, 2))
    wts = np.empty(m * m)
    k = 0
    for a in range(m):
        for b in range(m):
            pts[k, 0] = u[a]
            pts[k, 1] = v[b] * (1.0 - u[a])
            wts[k] = gu.weights[a] * gv.weights[b] * (1.0 - u[a])
            k += 1
    return QuadratureRule(UnstructuredPointSet(pts), wts)
