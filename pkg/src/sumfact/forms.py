"""Weak-form registry and lowering to kernels.

A kernel is a cleared-then-accumulated flat return buffer, a list of affine
views into it, and one accumulation assignment per view.  Lowering inserts
quadrature weights, geometry and tabulation expressions symbolically; all
optimisation is left to the passes.  Geometric inner products are written
with explicit small index sums which a later pass unrolls.
"""

from __future__ import annotations

import numpy as np

from . import ir
from .ir import (
    FlexiblyIndexed, Index, Indexed, IndexSum, ListTensor, Literal, Product,
    Sum, Variable,
)
from .elements import (
    Unsupported, rtcf_element, scalar_element, vector_element,
    coordinate_element,
)
from .geometry import _row_major_strides, geometry_bundle
from .quadrature import (
    collapsed_triangle_rule, gauss_legendre, gauss_lobatto_legendre,
    tensor_rule,
)


class ArityMismatch(Exception):
    pass


class UnsupportedCell(Exception):
    pass


class ExtentMismatch(Exception):
    pass


CELLS = ("interval", "quad", "triangle", "hex", "prism")
CELL_DIMENSION = {"interval": 1, "quad": 2, "triangle": 2, "hex": 3, "prism": 3}


# ---------------------------------------------------------------------------
# kernel data structures


class View:
    """Affine region of the flat return buffer: offset + sum(stride * index)."""

    __slots__ = ("offset", "entries")

    def __init__(self, offset, entries):
        self.offset = int(offset)
        merged = []
        for idx, stride in entries:
            for k, (i2, s2) in enumerate(merged):
                if i2 is idx:
                    merged[k] = (i2, s2 + int(stride))
                    break
            else:
                merged.append((idx, int(stride)))
        self.entries = tuple(merged)

    @property
    def indices(self):
        return tuple(i for i, _ in self.entries)

    def substitute(self, src, dst):
        """Re-aim the view: src index becomes dst (an Index or fixed int)."""
        offset = self.offset
        entries = []
        for i, s in self.entries:
            if i is src:
                if isinstance(dst, Index):
                    entries.append((dst, s))
                else:
                    offset += int(dst) * s
            else:
                entries.append((i, s))
        return View(offset, entries)

    def addresses(self):
        """Dense address array over the view's index grid."""
        addr = np.full(tuple(i.extent for i in self.indices), self.offset)
        for k, (i, s) in enumerate(self.entries):
            shape = [1] * len(self.indices)
            shape[k] = i.extent
            addr = addr + s * np.arange(i.extent).reshape(shape)
        return addr

    def __repr__(self):
        return "View(+%d, %s)" % (
            self.offset, " ".join("%r*%d" % (i, s) for i, s in self.entries))


class Kernel:
    """Return-buffer layout plus accumulation assignments."""

    def __init__(self, name, return_size, assignments, arguments,
                 quad_indices, argument_groups, reserved_indices,
                 meta=None, hoisted=None):
        self.name = name
        self.return_size = int(return_size)
        self.assignments = list(assignments)
        self.arguments = list(arguments)
        self.quad_indices = frozenset(quad_indices)
        self.argument_groups = tuple(frozenset(g) for g in argument_groups)
        self.reserved_indices = frozenset(reserved_indices)
        self.meta = dict(meta or {})
        self.hoisted = list(hoisted or [])

    @property
    def argument_indices(self):
        out = frozenset()
        for g in self.argument_groups:
            out |= g
        return out

    def replaced(self, assignments=None, argument_groups=None,
                 reserved_indices=None, hoisted=None):
        return Kernel(
            self.name, self.return_size,
            self.assignments if assignments is None else assignments,
            self.arguments, self.quad_indices,
            self.argument_groups if argument_groups is None else argument_groups,
            self.reserved_indices if reserved_indices is None else reserved_indices,
            self.meta,
            self.hoisted if hoisted is None else hoisted)


# ---------------------------------------------------------------------------
# integrand builders


class Access:
    """Uniform view of an argument tabulation or evaluated coefficient."""

    def __init__(self, entries, value_shape, dimension):
        self.entries = dict(entries)
        self.value_shape = tuple(value_shape)
        self.dimension = dimension

    def value(self, comp=()):
        e = self.entries[()]
        return Indexed(e, comp) if self.value_shape else e

    def grad(self, direction, comp=()):
        def scalar(key):
            e = self.entries[key]
            return Indexed(e, comp) if self.value_shape else e
        if isinstance(direction, (int, np.integer)):
            return scalar((int(direction),))
        return Indexed(
            ListTensor([scalar((b,)) for b in range(self.dimension)]),
            (direction,))


class Context:
    def __init__(self, geometry):
        self.geometry = geometry
        self.G = geometry.G
        self.S = geometry.S
        self.dimension = geometry.dimension


def _neg(e):
    return Product(Literal(-1.0), e)


def _mass(ctx, v, u):
    return Product(v.value(), u.value())


def _weighted_mass(ctx, v, u, kappa):
    return Product(kappa.value(), Product(v.value(), u.value()))


def _physical_grad(ctx, f, k, comp=()):
    l = Index(ctx.dimension, "l")
    return IndexSum(Product(Indexed(ctx.G, (l, k)), f.grad(l, comp)), (l,))


def _laplace(ctx, v, u):
    k = Index(ctx.dimension, "k")
    return IndexSum(Product(_physical_grad(ctx, v, k),
                            _physical_grad(ctx, u, k)), (k,))


def _weighted_laplace(ctx, v, u, kappa):
    return Product(kappa.value(), _laplace(ctx, v, u))


def _vector_mass(ctx, v, u):
    k = Index(ctx.dimension, "k")
    return IndexSum(Product(v.value((k,)), u.value((k,))), (k,))


def _stokes_momentum(ctx, v, u):
    a = Index(ctx.dimension, "a")
    k = Index(ctx.dimension, "k")
    body = Product(_physical_grad(ctx, v, k, (a,)),
                   _physical_grad(ctx, u, k, (a,)))
    return IndexSum(body, (a, k))


def _curl_curl(ctx, v, u):
    # 2D scalar curl in reference coordinates; no Piola pullback.
    def curl(f):
        return Sum(f.grad(0, (1,)), _neg(f.grad(1, (0,))))
    return Product(curl(v), curl(u))


def _rhs_source(ctx, v, f):
    return Product(f.value(), v.value())


class FormSpec:
    """Registry entry: rank, derivative order, coefficient slots, builder."""

    def __init__(self, name, rank, arg_order, builder, family="scalar",
                 cells=CELLS, coefficient_slots=()):
        self.name = name
        self.rank = rank
        self.arg_order = arg_order
        self.builder = builder
        self.family = family
        self.cells = tuple(cells)
        # each slot: (derivative order, element family)
        self.coefficient_slots = tuple(coefficient_slots)


def action_form(bilinear):
    """Demote the trial argument of a bilinear form to a coefficient slot."""
    if bilinear.rank != 2:
        raise ArityMismatch("action needs a bilinear form")
    return FormSpec(
        "action_" + bilinear.name, 1, bilinear.arg_order, bilinear.builder,
        family=bilinear.family, cells=bilinear.cells,
        coefficient_slots=((bilinear.arg_order, bilinear.family),)
        + bilinear.coefficient_slots)


REGISTRY = {}
for _spec in (
    FormSpec("mass", 2, 0, _mass),
    FormSpec("weighted_mass", 2, 0, _weighted_mass,
             coefficient_slots=((0, "scalar"),)),
    FormSpec("laplace", 2, 1, _laplace),
    FormSpec("weighted_laplace", 2, 1, _weighted_laplace,
             coefficient_slots=((0, "scalar"),)),
    FormSpec("vector_mass", 2, 0, _vector_mass, family="vector"),
    FormSpec("stokes_momentum", 2, 1, _stokes_momentum, family="vector"),
    FormSpec("curl_curl", 2, 1, _curl_curl, family="rtcf", cells=("quad",)),
    FormSpec("rhs_source", 1, 0, _rhs_source,
             coefficient_slots=((0, "scalar"),)),
):
    REGISTRY[_spec.name] = _spec
for _name in ("mass", "laplace", "curl_curl"):
    _a = action_form(REGISTRY[_name])
    REGISTRY[_a.name] = _a


# ---------------------------------------------------------------------------
# elements and quadrature per request


def form_element(spec, cell, degree, variant="equispaced"):
    if cell not in spec.cells:
        raise UnsupportedCell("form %s is not defined on %s" % (spec.name, cell))
    if spec.family == "scalar":
        return scalar_element(cell, degree, variant)
    if spec.family == "vector":
        return vector_element(scalar_element(cell, degree, variant),
                              CELL_DIMENSION[cell])
    if spec.family == "rtcf":
        if cell != "quad":
            raise UnsupportedCell("RTCF elements are quadrilateral")
        return rtcf_element(degree, variant)
    raise Unsupported("unknown element family %r" % spec.family)


def coefficient_element(spec, family, cell, degree, variant="equispaced"):
    if family == "scalar":
        return scalar_element(cell, degree, variant)
    return form_element(spec, cell, degree, variant)


def default_quadrature(cell, degree, points_per_direction=None,
                       collocated_gll=False):
    """GL(n+1) per direction unless overridden; triangles use the collapsed
    product rule with the same count."""
    if collocated_gll:
        m = degree + 1
        if cell == "quad":
            return tensor_rule(gauss_lobatto_legendre(m),
                               gauss_lobatto_legendre(m))
        if cell == "hex":
            return tensor_rule(tensor_rule(gauss_lobatto_legendre(m),
                                           gauss_lobatto_legendre(m)),
                               gauss_lobatto_legendre(m))
        if cell == "interval":
            return gauss_lobatto_legendre(m)
        raise UnsupportedCell("collocated GLL quadrature needs a box cell")
    m = points_per_direction or degree + 1
    if cell == "interval":
        return gauss_legendre(m)
    if cell == "quad":
        return tensor_rule(gauss_legendre(m), gauss_legendre(m))
    if cell == "hex":
        return tensor_rule(tensor_rule(gauss_legendre(m), gauss_legendre(m)),
                           gauss_legendre(m))
    if cell == "triangle":
        return collapsed_triangle_rule(m)
    if cell == "prism":
        return tensor_rule(collapsed_triangle_rule(m), gauss_legendre(m))
    raise UnsupportedCell("unknown cell %r" % cell)


# ---------------------------------------------------------------------------
# coefficient evaluation and lowering


def evaluate_coefficient(element, dofs, ps, order):
    """C_q = sum_i U_i (tabulation)_{iq} for each derivative key of ``order``.

    Returns (entries, contraction indices); entries have shape value_shape
    and free indices = point indices only.
    """
    if dofs.shape != (element.space_dimension,):
        raise ExtentMismatch(
            "dof array %s has extent %s, element has %d dofs"
            % (dofs.name, dofs.shape, element.space_dimension))
    tab = element._tabulate(order, ps)
    basis = tab.basis_indices
    strides = _row_major_strides(element.basis_shape)
    coeff = FlexiblyIndexed(dofs, 0, tuple(zip(basis, strides)))
    entries = {}
    for key, expr in tab.entries.items():
        if len(key) != order:
            continue
        if element.value_shape:
            kappa = tuple(Index(e, "k") for e in element.value_shape)
            body = Product(coeff, Indexed(expr, kappa))
            entries[key] = ir.ComponentTensor(IndexSum(body, basis), kappa)
        else:
            entries[key] = IndexSum(Product(coeff, expr), basis)
    return entries, basis


def lower_form(spec, element, rule, cell, coeff_elements=(), name=None,
               meta=None):
    """Lower a registry form to an unoptimised kernel."""
    if cell not in spec.cells:
        raise UnsupportedCell("form %s is not defined on %s" % (spec.name, cell))
    if element.cell.dimension != CELL_DIMENSION[cell]:
        raise ArityMismatch("element/cell dimension mismatch")
    coeff_elements = tuple(coeff_elements)
    if len(coeff_elements) != len(spec.coefficient_slots):
        raise ArityMismatch(
            "form %s needs %d coefficient elements, got %d"
            % (spec.name, len(spec.coefficient_slots), len(coeff_elements)))
    ps = rule.point_set
    d = CELL_DIMENSION[cell]

    coord_elem = coordinate_element(cell)
    coords = Variable("coords", (coord_elem.space_dimension,))
    gb = geometry_bundle(cell, ps, coords)
    ctx = Context(gb)

    accesses = []
    arg_indices = []
    arg_shapes = []
    reserved = set(_collect_indexsum_indices(gb.J))
    for _ in range(spec.rank):
        tab = element.basis_evaluation(spec.arg_order, ps)
        accesses.append(Access(tab.entries, element.value_shape, d))
        arg_indices.append(tab.basis_indices)
        arg_shapes.append(element.basis_shape)

    arguments = [("coords", coord_elem.space_dimension)]
    for slot, (order, _family) in enumerate(spec.coefficient_slots):
        ce = coeff_elements[slot]
        var = Variable("w%d" % slot, (ce.space_dimension,))
        entries, basis = evaluate_coefficient(ce, var, ps, order)
        accesses.append(Access(entries, ce.value_shape, d))
        reserved.update(basis)
        arguments.append((var.name, ce.space_dimension))

    integrand = spec.builder(ctx, *accesses)
    scale = Product(rule.weight_expression(), gb.S)
    weighted = Product(scale, integrand)
    expr = IndexSum(weighted, ps.indices)

    # geometry scalars are shared by every monomial: precompute per point
    geometry_hoists = [gb.detJ, gb.S, scale]
    for entry in gb.G.arrays.flat:
        geometry_hoists.append(entry)

    full_shape = ()
    flat_args = ()
    for shape, idxs in zip(arg_shapes, arg_indices):
        full_shape += shape
        flat_args += idxs
    return_size = int(np.prod(full_shape, dtype=int)) if full_shape else 1
    view = View(0, tuple(zip(flat_args, _row_major_strides(full_shape))))

    kernel_meta = {"form": spec.name, "cell": cell, "degree": element.degree}
    kernel_meta.update(meta or {})
    return Kernel(
        name or spec.name, return_size, [(view, expr)], arguments,
        quad_indices=ps.indices,
        argument_groups=tuple(frozenset(idxs) for idxs in arg_indices),
        reserved_indices=frozenset(reserved),
        meta=kernel_meta, hoisted=geometry_hoists)


def _collect_indexsum_indices(expr):
    for node in ir.iter_dag(expr):
        if isinstance(node, ir.IndexSum):
            for i in node.indices:
                yield i


# ---------------------------------------------------------------------------
# dense kernel evaluation (oracle path, not the product)


def evaluate_kernel(kernel, inputs):
    """Evaluate all assignments with the expression interpreter and
    scatter-add into the flat return buffer."""
    from .interpreter import Environment, eval_expr

    env = Environment(inputs)
    out = np.zeros(kernel.return_size)
    for view, expr in kernel.assignments:
        arr = eval_expr(expr, env)
        order = ir.sorted_indices(expr.free_indices)
        if set(order) != set(view.indices):
            raise ArityMismatch("assignment frees %s do not match view %s"
                                % (order, view.indices))
        perm = [order.index(i) for i in view.indices]
        arr = np.transpose(arr, perm)
        np.add.at(out, view.addresses(), arr)
    return out
