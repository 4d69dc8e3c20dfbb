"""Kernel optimisation passes.

Pipeline order (spectral runs all of it, coffee a subset, vanilla almost
nothing):

  1. split Concatenate nodes against the indexed buffers,
  2. argument factorisation into a sum of monomials,
  3. Kronecker delta cancellation against contraction indices,
  4. delta cancellation across the assignment (re-aiming buffer views),
  5. sum factorisation with one shared contraction ordering,
  6. a greedy distributive refactoring at each contraction level.

Parametrising-function evaluations (coefficients, the Jacobian) are
factorised in every mode.  Monomials keep argument-dependent factors apart
from the aggregated argument-independent rest factor.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import ir, scheduling
from .ir import (
    Delta, FlexiblyIndexed, Index, Indexed, IndexSum, Literal, Product, Sum,
    canonical_key, is_zero, sorted_indices, substitute_indices,
)
from .forms import Kernel, View


class UnsplittableConcatenate(Exception):
    pass


class NonlinearArgument(Exception):
    pass


class TooManyIndices(Exception):
    pass


MODES = ("spectral", "coffee", "vanilla")
PERMUTATION_LIMIT = 4


@dataclass(frozen=True)
class Monomial:
    """One product: contraction indices, argument-dependent atomics and the
    aggregated argument-independent rest factor."""
    sum_indices: tuple
    atomics: tuple
    rest: object

    @property
    def all_factors(self):
        if ir._is_one(self.rest):
            return self.atomics
        return self.atomics + (self.rest,)

    def substitute(self, mapping):
        return Monomial(
            self.sum_indices,
            tuple(substitute_indices(f, mapping) for f in self.atomics),
            substitute_indices(self.rest, mapping))


# ---------------------------------------------------------------------------
# pass 1: Concatenate splitting


def _concat_consumers(expr):
    """(flat index -> list of Indexed-Concatenate nodes) in ``expr``."""
    found = {}
    for node in ir.iter_dag(expr):
        if isinstance(node, ir._IndexedNode) and isinstance(node.base, ir.Concatenate):
            if len(node.multiindex) != 1 or not isinstance(node.multiindex[0], Index):
                raise UnsplittableConcatenate(
                    "Concatenate consumed other than via a single flat index")
            found.setdefault(node.multiindex[0], []).append(node)
        elif isinstance(node, ir.Concatenate):
            pass  # validated through its consumers
    return found


def _operand_layouts(concat):
    """(offset, shape, row-major strides) of each operand."""
    from .geometry import _row_major_strides
    layouts = []
    for offset, op in zip(ir.concatenate_offsets(concat), concat.operands):
        layouts.append((offset, op.shape, _row_major_strides(op.shape)))
    return layouts


def _split_index(expr, flat, operand_pos, alphas, offset, strides):
    """Rewrite every use of ``flat`` for one Concatenate operand choice."""
    memo = {}

    def rec(e):
        if flat not in e.free_indices:
            return e
        if id(e) in memo:
            return memo[id(e)]
        if (isinstance(e, ir._IndexedNode) and isinstance(e.base, ir.Concatenate)
                and e.multiindex == (flat,)):
            out = Indexed(e.base.operands[operand_pos], alphas)
        elif isinstance(e, ir._IndexedNode) and e.multiindex == (flat,):
            out = FlexiblyIndexed(e.base, offset, tuple(zip(alphas, strides)))
        elif isinstance(e, FlexiblyIndexed):
            off = e.offset
            terms = []
            for i, s in e.terms:
                if i is flat:
                    off += offset * s
                    terms.extend((a, st * s) for a, st in zip(alphas, strides))
                else:
                    terms.append((i, s))
            out = FlexiblyIndexed(e.base, off, tuple(terms))
        elif isinstance(e, (Delta, ir.Variable)):
            raise UnsplittableConcatenate("flat index used outside indexing")
        else:
            out = ir.map_children(e, rec)
        memo[id(e)] = out
        return out

    return rec(expr)


def _replace_node(expr, old, new):
    memo = {}

    def rec(e):
        if e is old:
            return new
        if id(e) in memo:
            return memo[id(e)]
        out = ir.map_children(e, rec)
        memo[id(e)] = out
        return out

    return rec(expr)


def _find_binding_sum(expr, flat):
    for node in ir.iter_dag(expr):
        if isinstance(node, IndexSum) and flat in node.indices:
            return node
    return None


def split_concatenate(kernel):
    """Split every Concatenate against its indexed buffer.

    Argument-side flat indices multiply the assignment into one per operand
    combination with an affine view each; coefficient-side flat indices
    split their index sum into one sum per operand.
    """
    assignments = list(kernel.assignments)
    groups = [set(g) for g in kernel.argument_groups]
    reserved = set(kernel.reserved_indices)

    changed = True
    while changed:
        changed = False
        out = []
        for view, expr in assignments:
            consumers = _concat_consumers(expr)
            if not consumers:
                out.append((view, expr))
                continue
            changed = True
            flat = min(consumers, key=lambda i: i.serial)
            nodes = consumers[flat]
            concats = {id(n.base): n.base for n in nodes}
            ref_layout = _operand_layouts(next(iter(concats.values())))
            for c in concats.values():
                if _operand_layouts(c) != ref_layout:
                    raise UnsplittableConcatenate(
                        "one flat index consumes differently shaped Concatenates")

            if flat in view.indices:
                stride = dict(view.entries)[flat]
                for pos, (offset, shape, strides) in enumerate(ref_layout):
                    alphas = tuple(Index(e, "s") for e in shape)
                    for g in groups:
                        if flat in g:
                            g.update(alphas)
                    new_expr = _split_index(expr, flat, pos, alphas, offset, strides)
                    new_view = View(
                        view.offset + offset * stride,
                        tuple((i, s) for i, s in view.entries if i is not flat)
                        + tuple((a, st * stride) for a, st in zip(alphas, strides)))
                    out.append((new_view, new_expr))
            else:
                binder = _find_binding_sum(expr, flat)
                if binder is None:
                    raise UnsplittableConcatenate(
                        "flat index %r is neither a view index nor summed" % flat)
                pieces = []
                for pos, (offset, shape, strides) in enumerate(ref_layout):
                    alphas = tuple(Index(e, "s") for e in shape)
                    reserved.update(alphas)
                    body = _split_index(binder.body, flat, pos, alphas, offset, strides)
                    rest = tuple(i for i in binder.indices if i is not flat)
                    pieces.append(IndexSum(body, rest + alphas))
                replacement = pieces[0]
                for p in pieces[1:]:
                    replacement = Sum(replacement, p)
                out.append((view, _replace_node(expr, binder, replacement)))
        assignments = out

    return kernel.replaced(assignments=assignments,
                           argument_groups=tuple(frozenset(g) for g in groups),
                           reserved_indices=frozenset(reserved))


# ---------------------------------------------------------------------------
# small-sum unrolling


def expand_small_sums(expr, protected=frozenset(), max_extent=3):
    """Unroll index sums over small value/geometric indices.

    Quadrature and basis indices (the ``protected`` set) are never unrolled.
    """
    memo = {}

    def rec(e):
        if id(e) in memo:
            return memo[id(e)]
        out = ir.map_children(e, rec)
        if isinstance(out, IndexSum):
            unroll = tuple(i for i in out.indices
                           if i.extent <= max_extent and i not in protected)
            if unroll:
                keep = tuple(i for i in out.indices if i not in unroll)
                total = None
                for values in itertools.product(*[range(i.extent) for i in unroll]):
                    term = substitute_indices(out.body, dict(zip(unroll, values)))
                    total = term if total is None else Sum(total, term)
                out = IndexSum(total, keep)
        memo[id(e)] = out
        return out

    return rec(expr)


# ---------------------------------------------------------------------------
# pass 2: argument factorisation


def argument_factorise(expr, argument_groups):
    """Sum-of-products form in which no non-delta factor touches more than
    one argument's indices.

    Monomials with identical contraction indices and atomics coalesce into
    one, their argument-independent factors summed into a single aggregated
    rest factor.
    """
    groups = tuple(frozenset(g) for g in argument_groups)
    allarg = frozenset().union(*groups) if groups else frozenset()

    def expand(e):
        # raw pieces: (sum_indices, flat factor list)
        if not (e.free_indices & allarg):
            return [((), (e,))]
        if isinstance(e, ir._SumNode):
            return expand(e.a) + expand(e.b)
        if isinstance(e, ir._ProductNode):
            out = []
            for sa, fa in expand(e.a):
                for sb, fb in expand(e.b):
                    if set(sa) & set(sb):
                        raise NonlinearArgument(
                            "contraction index reused across a product")
                    out.append((sa + sb, fa + fb))
            return out
        if isinstance(e, IndexSum):
            return [(s + e.indices, f) for s, f in expand(e.body)]
        if isinstance(e, ir.Division):
            if e.b.free_indices & allarg:
                raise NonlinearArgument("argument in a denominator")
            return [(s, f + (ir.Division(Literal(1.0), e.b),))
                    for s, f in expand(e.a)]
        if isinstance(e, (ir._IndexedNode, FlexiblyIndexed, Delta)):
            return [((), (e,))]
        raise NonlinearArgument(
            "argument indices inside %s" % type(e).__name__)

    merged = {}
    order = []
    for sums, factors in expand(expr):
        if any(is_zero(f) for f in factors):
            continue
        atomics = tuple(f for f in factors if f.free_indices & allarg)
        rest_parts = [f for f in factors if not (f.free_indices & allarg)]
        for f in atomics:
            if isinstance(f, Delta):
                continue
            touched = sum(1 for g in groups if f.free_indices & g)
            if touched > 1:
                raise NonlinearArgument(
                    "factor %r depends on %d arguments" % (f, touched))
        rest = make_product(rest_parts)[0]
        key = (frozenset(i.serial for i in sums),
               tuple(sorted(ir.structural_hash(a) for a in atomics)))
        if key in merged:
            s0, a0, r0 = merged[key]
            merged[key] = (s0, a0, Sum(r0, rest))
        else:
            merged[key] = (sums, atomics, rest)
            order.append(key)
    return [Monomial(*merged[key]) for key in order]


def reassemble(monomial):
    """Inverse of factorisation, for the soundness oracle."""
    expr, _ = make_product(monomial.all_factors)
    return IndexSum(expr, monomial.sum_indices)


def reassemble_sum(monomials):
    total = None
    for m in monomials:
        e = reassemble(m)
        total = e if total is None else Sum(total, e)
    return total if total is not None else ir.Zero()


# ---------------------------------------------------------------------------
# passes 3 and 4: delta cancellation


def cancel_contraction_deltas(monomial):
    """Remove Delta factors whose side is a contraction index, substituting
    the other side; repeats to a fixpoint."""
    sums = list(monomial.sum_indices)
    atomics = list(monomial.atomics)
    rest = monomial.rest
    changed = True
    while changed:
        changed = False
        for k, f in enumerate(atomics):
            if not isinstance(f, Delta):
                continue
            if isinstance(f.i, Index) and f.i in sums:
                src, dst = f.i, f.j
            elif isinstance(f.j, Index) and f.j in sums:
                src, dst = f.j, f.i
            else:
                continue
            del atomics[k]
            sums.remove(src)
            mapping = {src: dst}
            atomics = [substitute_indices(g, mapping) for g in atomics]
            rest = substitute_indices(rest, mapping)
            changed = True
            break
    return Monomial(tuple(sums), tuple(atomics), rest)


def cancel_assignment_deltas(view, monomial):
    """Remove Delta factors bound to view indices, re-aiming the view."""
    v, m = view, monomial
    changed = True
    while changed:
        changed = False
        for k, f in enumerate(m.atomics):
            if not isinstance(f, Delta):
                continue
            if isinstance(f.i, Index) and f.i in v.indices:
                src, dst = f.i, f.j
            elif isinstance(f.j, Index) and f.j in v.indices:
                src, dst = f.j, f.i
            else:
                continue
            atomics = list(m.atomics)
            del atomics[k]
            mapping = {src: dst}
            atomics = [substitute_indices(g, mapping) for g in atomics]
            v = v.substitute(src, dst)
            m = Monomial(m.sum_indices, tuple(atomics),
                         substitute_indices(m.rest, mapping))
            changed = True
            break
    return v, m


# ---------------------------------------------------------------------------
# pass 5: sum factorisation (the optimal tensor product construction)


def _extent_product(indices):
    p = 1
    for i in indices:
        p *= i.extent
    return p


def make_product(factors):
    """Deterministic product in canonical factor order.

    Returns (expression, multiplication count over the product's free-index
    space).  Literal ones vanish; a zero factor collapses everything.
    """
    factors = [f for f in factors if not ir._is_one(f)]
    if any(is_zero(f) for f in factors):
        return ir.Zero(), 0
    if not factors:
        return Literal(1.0), 0
    factors = sorted(factors, key=canonical_key)
    expr = factors[0]
    for f in factors[1:]:
        expr = Product(expr, f)
    cost = (len(factors) - 1) * _extent_product(sorted_indices(expr.free_indices))
    return expr, cost


def build_with_ordering(factors, ordering):
    """Contract one index at a time in the given order; returns the
    expression and its structural flop count."""
    terms = list(factors)
    flops = 0
    for index in ordering:
        contract = [t for t in terms if index in t.free_indices]
        deferred = [t for t in terms if index not in t.free_indices]
        if not contract:
            # summing a constant over the index: scale
            terms = deferred + [Literal(float(index.extent))]
            continue
        product, cost = make_product(contract)
        term = IndexSum(product, (index,))
        flops += cost + _extent_product(sorted_indices(product.free_indices))
        terms = deferred + [term]
    expr, cost = make_product(terms)
    flops += cost
    return expr, flops


def _factor_materialisation_cost(factors):
    """One-time cost of computing each distinct op-bearing factor, counted
    exactly as the scheduler would."""
    seen = set()
    total = 0
    for f in factors:
        h = ir.structural_hash(f)
        if h in seen:
            continue
        seen.add(h)
        if scheduling.scalar_ops(f) or any(
                isinstance(n, IndexSum) for n in ir.iter_dag(f)):
            total += scheduling.count_flops(
                scheduling.schedule_expression(f)).total_flops
    return total


def make_tensor_product(factors, indices, limit=PERMUTATION_LIMIT):
    """Minimum-flop contraction over all orderings of ``indices``.

    Beyond ``limit`` indices, falls back to a greedy smallest-extent-first
    ordering.  The returned flop count includes the one-time materialisation
    cost of op-bearing factors, so it matches the scheduled program exactly.
    """
    indices = sorted_indices(indices)
    base = _factor_materialisation_cost(factors)
    if len(indices) > limit:
        ordering = tuple(sorted(indices, key=lambda i: (i.extent, i.serial)))
        expr, flops = build_with_ordering(factors, ordering)
        return expr, flops + base
    best = None
    for ordering in itertools.permutations(indices):
        expr, flops = build_with_ordering(factors, ordering)
        if best is None or flops < best[1]:
            best = (expr, flops)
    return best[0], best[1] + base


def choose_shared_ordering(monomials, limit=PERMUTATION_LIMIT):
    """One contraction ordering minimising total flops over all monomials.

    Ties break to the first permutation in token-creation (lexicographic)
    order.
    """
    universe = set()
    for m in monomials:
        universe.update(m.sum_indices)
    universe = sorted_indices(universe)
    if len(universe) > limit:
        return tuple(sorted(universe, key=lambda i: (i.extent, i.serial)))
    best = None
    for ordering in itertools.permutations(universe):
        total = 0
        for m in monomials:
            own = tuple(i for i in ordering if i in m.sum_indices)
            total += build_with_ordering(m.all_factors, own)[1]
        if best is None or total < best[1]:
            best = (ordering, total)
    return best[0] if best else ()


# ---------------------------------------------------------------------------
# pass 6: greedy distributive refactoring


def _flatten_sum(e):
    if isinstance(e, ir._SumNode):
        return _flatten_sum(e.a) + _flatten_sum(e.b)
    return [e]


def _flatten_product(e, protected=frozenset()):
    if isinstance(e, ir._ProductNode) and ir.structural_hash(e) not in protected:
        return (_flatten_product(e.a, protected)
                + _flatten_product(e.b, protected))
    return [e]


def _fold_sum(terms):
    total = None
    for t in terms:
        total = t if total is None else Sum(total, t)
    return total if total is not None else ir.Zero()


def _hoist_summands(summands, is_hoistable):
    """summands: list of factor lists.  Greedy a*b + a*c -> a*(b+c)."""
    if len(summands) <= 1:
        return _fold_sum([make_product(fl)[0] for fl in summands])
    counts = {}
    keys = {}
    for fl in summands:
        for f in {ir.structural_hash(x): x for x in fl if is_hoistable(x)}.values():
            h = ir.structural_hash(f)
            counts[h] = counts.get(h, 0) + 1
            keys[h] = f
    candidates = [h for h, c in counts.items() if c >= 2]
    if not candidates:
        return _fold_sum([make_product(fl)[0] for fl in summands])
    best = min(candidates, key=lambda h: (-counts[h], canonical_key(keys[h])))
    factor = keys[best]
    with_f, without = [], []
    for fl in summands:
        pos = next((k for k, x in enumerate(fl)
                    if ir.structural_hash(x) == best), None)
        if pos is None:
            without.append(fl)
        else:
            with_f.append(fl[:pos] + fl[pos + 1:])
    hoisted = Product(factor, _hoist_summands(with_f, is_hoistable))
    if without:
        return Sum(hoisted, _hoist_summands(without, is_hoistable))
    return hoisted


def distributive_refactor(expr, argument_indices, protected=frozenset()):
    """Greedy hoisting of repeated argument-dependent factors inside each
    contraction-level sum; never increases the structural flop count.

    ``protected`` nodes (aggregated rest factors) are treated as opaque.
    """
    argset = frozenset(argument_indices)

    def is_hoistable(f):
        return bool(f.free_indices & argset)

    def rec(e):
        if ir.structural_hash(e) in protected:
            return e
        if isinstance(e, IndexSum):
            return IndexSum(rec(e.body), e.indices)
        if isinstance(e, ir._SumNode):
            summands = [_flatten_product(s, protected) for s in _flatten_sum(e)]
            summands = [[rec(f) for f in fl] for fl in summands]
            candidate = _hoist_summands(summands, is_hoistable)
            before = scheduling.scalar_ops(
                _fold_sum([make_product(fl)[0] for fl in summands]))
            after = scheduling.scalar_ops(candidate)
            return candidate if after <= before else _fold_sum(
                [make_product(fl)[0] for fl in summands])
        if isinstance(e, ir._ProductNode):
            return Product(rec(e.a), rec(e.b))
        return e

    return rec(expr)


# ---------------------------------------------------------------------------
# parametrising-function evaluation (all modes)


def _sum_factorise_parametrised(node):
    """Disassemble, delta-cancel and optimally rebuild one coefficient-style
    index sum."""
    interesting = frozenset(node.indices)
    monomials = argument_factorise(node.body, [interesting])
    out = []
    for m in monomials:
        full = Monomial(m.sum_indices + node.indices, m.atomics, m.rest)
        full = cancel_contraction_deltas(full)
        expr, _ = make_tensor_product(full.all_factors, full.sum_indices)
        out.append(expr)
    return _fold_sum(out)


def optimise_parametrised_evaluations(expr, argument_indices):
    """Factorise every index sum that involves no argument index."""
    argset = frozenset(argument_indices)
    memo = {}

    def rec(e):
        if id(e) in memo:
            return memo[id(e)]
        out = ir.map_children(e, rec)
        if isinstance(out, IndexSum) and not (out.free_indices & argset):
            out = _sum_factorise_parametrised(out)
        memo[id(e)] = out
        return out

    return rec(expr)


# ---------------------------------------------------------------------------
# the pipeline


def _needs_hoisting(expr):
    return scheduling.scalar_ops(expr) > 0 or any(
        isinstance(n, IndexSum) for n in ir.iter_dag(expr))


def _group_argument_products(atomics, argument_groups, hoisted, protected):
    """Combine each argument's atomics into one hoistable tabulation product
    (coffee-style loop-invariant motion)."""
    factors = []
    used = set()
    for g in argument_groups:
        mine = [f for f in atomics if f.free_indices & g]
        used.update(id(f) for f in mine)
        if len(mine) >= 2 and not any(isinstance(f, Delta) for f in mine):
            prod = make_product(mine)[0]
            hoisted.append(prod)
            protected.add(ir.structural_hash(prod))
            factors.append(prod)
        else:
            factors.extend(mine)
    factors.extend(f for f in atomics if id(f) not in used)
    return factors


def _merge_levels(exprs):
    """Merge top-level index sums sharing the same (ordered) index tuple."""
    groups = []
    for e in exprs:
        key = e.indices if isinstance(e, IndexSum) else None
        for g in groups:
            if g[0] is not None and key is not None and g[0] == key:
                g[1].append(e.body)
                break
        else:
            groups.append([key, [e.body] if key is not None else [e]])
    out = []
    for key, bodies in groups:
        if key is None:
            out.extend(bodies)
        else:
            out.append(IndexSum(_fold_sum(bodies), key))
    return out


def run_pipeline(kernel, mode):
    """Apply the mode's passes; parametrised evaluations always optimised."""
    if mode not in MODES:
        raise ValueError("unknown mode %r" % mode)
    k = split_concatenate(kernel)
    argset = frozenset(k.argument_indices)
    assignments = [
        (view, optimise_parametrised_evaluations(e, argset))
        for view, e in k.assignments]
    # keep hoist marks aligned with the rebuilt expressions
    hoisted = [optimise_parametrised_evaluations(h, argset) for h in k.hoisted]
    k = k.replaced(assignments=assignments, hoisted=hoisted)
    k.meta["mode"] = mode
    if mode == "vanilla":
        return k

    protected = k.quad_indices | argset | k.reserved_indices
    hoisted = list(k.hoisted)
    new_assignments = []
    for view, expr in k.assignments:
        expr = expand_small_sums(expr, protected)
        monomials = argument_factorise(expr, k.argument_groups)

        if mode == "coffee":
            products = []
            protected = set()
            sum_set = None
            for m in monomials:
                if _needs_hoisting(m.rest):
                    hoisted.append(m.rest)
                    protected.add(ir.structural_hash(m.rest))
                factors = _group_argument_products(
                    m.atomics, k.argument_groups, hoisted, protected)
                products.append(make_product(factors + [m.rest])[0])
                if sum_set is None:
                    sum_set = m.sum_indices
                elif set(sum_set) != set(m.sum_indices):
                    raise NonlinearArgument("mismatched contraction sets")
            body = _fold_sum(products)
            merged = IndexSum(body, sum_set or ())
            merged = distributive_refactor(merged, argset, frozenset(protected))
            new_assignments.append((view, merged))
            continue

        # spectral
        monomials = [cancel_contraction_deltas(m) for m in monomials]
        by_view = []
        for m in monomials:
            v2, m2 = cancel_assignment_deltas(view, m)
            for slot in by_view:
                if slot[0].offset == v2.offset and slot[0].entries == v2.entries:
                    slot[1].append(m2)
                    break
            else:
                by_view.append((v2, [m2]))
        for v2, monos in by_view:
            ordering = choose_shared_ordering(monos)
            built = []
            protected = set()
            for m in monos:
                if _needs_hoisting(m.rest):
                    hoisted.append(m.rest)
                    protected.add(ir.structural_hash(m.rest))
                own = tuple(i for i in ordering if i in m.sum_indices)
                expr_m, _ = build_with_ordering(m.all_factors, own)
                built.append(expr_m)
            merged = _merge_levels(built)
            refactored = [distributive_refactor(e, argset, frozenset(protected))
                          for e in merged]
            new_assignments.append((v2, _fold_sum(refactored)))

    return k.replaced(assignments=new_assignments, hoisted=hoisted)
