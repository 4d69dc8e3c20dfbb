"""Loop-nest scheduling, flop counting, serialization and C emission.

An optimised kernel turns into an explicit loop program: index sums become
temporaries when they are reused or smaller than the iteration space that
consumes them, otherwise they unroll or run as local scalar accumulators.
Counting is exact and static (loops multiply body costs); the interpreter's
instrumented execution must agree with it.
"""

from __future__ import annotations

import hashlib
import itertools
import json

import numpy as np

from . import ir
from .ir import (
    Delta, FlexiblyIndexed, Index, Indexed, IndexSum, Literal, Variable,
    sorted_indices, substitute_indices,
)


class UnloweredNode(Exception):
    pass


class UnsupportedFunction(Exception):
    pass


INLINE_UNROLL_LIMIT = 8


# ---------------------------------------------------------------------------
# program structures


class Ref:
    """Flat-buffer store/load target: name[offset + sum(stride * index)]."""

    __slots__ = ("name", "offset", "terms")

    def __init__(self, name, offset, terms):
        self.name = name
        self.offset = int(offset)
        self.terms = tuple((i, int(s)) for i, s in terms)

    def __repr__(self):
        return "%s[+%d%s]" % (self.name, self.offset,
                              "".join(" %r*%d" % t for t in self.terms))


class Loop:
    __slots__ = ("index", "body")

    def __init__(self, index, body):
        self.index = index
        self.body = list(body)


class Assign:
    __slots__ = ("target", "expr")

    def __init__(self, target, expr):
        self.target = target
        self.expr = expr


class Accumulate:
    __slots__ = ("target", "expr")

    def __init__(self, target, expr):
        self.target = target
        self.expr = expr


class ZeroFill:
    __slots__ = ("name", "size")

    def __init__(self, name, size):
        self.name = name
        self.size = int(size)


class LoopProgram:
    def __init__(self, name, return_buffer, arguments, temporaries, body,
                 meta=None):
        self.name = name
        self.return_buffer = tuple(return_buffer)
        self.arguments = list(arguments)
        self.temporaries = list(temporaries)
        self.body = list(body)
        self.meta = dict(meta or {})


class FlopReport:
    """Exact static operation count and literal-table footprint."""

    def __init__(self, total_flops, by_depth, table_bytes, kernel_hash=None):
        self.total_flops = int(total_flops)
        self.by_depth = dict(by_depth)
        self.table_bytes = int(table_bytes)
        self.kernel_hash = kernel_hash

    def record(self, meta=None):
        rec = dict(meta or {})
        rec.update(flops=self.total_flops, table_bytes=self.table_bytes,
                   kernel_hash=self.kernel_hash)
        return rec


# ---------------------------------------------------------------------------
# operation counting


_SCALAR_OPS = (ir._SumNode, ir._ProductNode, ir.Division, ir.Power,
               ir.MinValue, ir.MaxValue, ir.MathFunction, ir.Comparison,
               ir.LogicalAnd, ir.LogicalOr, ir.LogicalNot)


def scalar_ops(expr):
    """Tree (per-occurrence) operation count; Delta and table indexing are
    free, an IndexSum reference counts as a load."""
    if isinstance(expr, IndexSum):
        return 0
    if isinstance(expr, ir.Conditional):
        return 1 + sum(scalar_ops(c) for c in expr.children)
    n = 1 if isinstance(expr, _SCALAR_OPS) else 0
    return n + sum(scalar_ops(c) for c in expr.children)


# ---------------------------------------------------------------------------
# scheduling


def _loop_order(free, quad_indices):
    quad = [i for i in sorted_indices(free) if i in quad_indices]
    other = [i for i in sorted_indices(free) if i not in quad_indices]
    return tuple(quad + other)


def _row_major_strides(extents):
    strides = []
    acc = 1
    for e in reversed(extents):
        strides.append(acc)
        acc *= e
    return tuple(reversed(strides))


class _Scheduler:
    def __init__(self, quad_indices=frozenset(), hoist_marks=frozenset()):
        self.quad_indices = frozenset(quad_indices)
        self.hoist_marks = frozenset(hoist_marks)
        self.edge_count = {}
        self.temp_for = {}
        self.grid_for = {}
        self.temp_defs = []
        self.temporaries = []
        self.counter = itertools.count()

    def count_edges(self, exprs):
        seen = set()
        for expr in exprs:
            self.edge_count[ir.structural_hash(expr)] = (
                self.edge_count.get(ir.structural_hash(expr), 0) + 1)
            for node in ir.iter_dag(expr):
                if id(node) in seen:
                    continue
                seen.add(id(node))
                for c in node.children:
                    h = ir.structural_hash(c)
                    self.edge_count[h] = self.edge_count.get(h, 0) + 1

    def _temp_ref(self, name, axes):
        extents = tuple(i.extent for i in axes)
        return FlexiblyIndexed(Variable(name, (int(np.prod(extents, dtype=int)),)
                                        if axes else (1,)),
                               0, tuple(zip(axes, _row_major_strides(extents))))

    def _new_temp(self, axes):
        name = "t%d" % next(self.counter)
        size = int(np.prod([i.extent for i in axes], dtype=int)) if axes else 1
        self.temporaries.append((name, size))
        return name

    def materialise(self, node, original_hash):
        """Create (once) a temporary filled with ``node``'s values."""
        if original_hash in self.temp_for:
            name, axes = self.temp_for[original_hash]
            return self._temp_ref(name, axes)
        axes = _loop_order(node.free_indices, self.quad_indices)
        name = self._new_temp(axes)
        size = self.temporaries[-1][1]
        self.temp_for[original_hash] = (name, axes)
        ref = Ref(name, 0, tuple(zip(axes, _row_major_strides(
            tuple(i.extent for i in axes)))))
        if isinstance(node, IndexSum):
            stmts = _as_stmt_list(self.statement(ref, node.body, True))
            for i in reversed(node.indices):
                stmts = [Loop(i, stmts)]
            body = stmts
            prologue = [ZeroFill(name, size)]
        else:
            body = _as_stmt_list(self.statement(ref, node, False))
            prologue = []
        for i in reversed(axes):
            body = [Loop(i, body)]
        self.temp_defs.extend(prologue + body)
        return self._temp_ref(name, axes)

    def materialise_grid(self, lt):
        """Tabulate a ListTensor consumed with run-time indices into a
        temporary array, one defining statement per grid entry."""
        h = ir.structural_hash(lt)
        if h in self.grid_for:
            return self.grid_for[h]
        union = _loop_order(lt.free_indices, self.quad_indices)
        extents = tuple(i.extent for i in union) + lt.shape
        strides = _row_major_strides(extents)
        name = self._new_temp_sized(int(np.prod(extents, dtype=int)))
        axis_terms = tuple(zip(union, strides[:len(union)]))
        grid_strides = strides[len(union):]
        for pos, entry in np.ndenumerate(lt.arrays):
            offset = sum(p * s for p, s in zip(pos, grid_strides))
            body = self.process(entry, frozenset(union), {})
            ref = Ref(name, offset, axis_terms)
            stmts = _as_stmt_list(self.statement(ref, body, False))
            for i in reversed(union):
                stmts = [Loop(i, stmts)]
            self.temp_defs.extend(stmts)
        record = (name, axis_terms, grid_strides)
        self.grid_for[h] = record
        return record

    def _new_temp_sized(self, size):
        name = "t%d" % next(self.counter)
        self.temporaries.append((name, int(size)))
        return name

    def process(self, expr, space, memo):
        """Hoist qualifying subexpressions of ``expr`` (consumed inside the
        iteration ``space``) into temporaries."""
        if id(expr) in memo:
            return memo[id(expr)]
        if (isinstance(expr, ir._IndexedNode)
                and isinstance(expr.base, ir.ListTensor)):
            name, axis_terms, grid_strides = self.materialise_grid(expr.base)
            size = dict(self.temporaries)[name]
            terms = axis_terms + tuple(zip(expr.multiindex, grid_strides))
            out = FlexiblyIndexed(Variable(name, (size,)), 0, terms)
            memo[id(expr)] = out
            return out
        h = ir.structural_hash(expr)
        qualifies = False
        if isinstance(expr, IndexSum):
            shared = self.edge_count.get(h, 0) >= 2
            smaller = expr.free_indices < space
            qualifies = shared or smaller
        elif h in self.hoist_marks and scalar_ops(expr) > 0:
            qualifies = (expr.free_indices < space
                         or self.edge_count.get(h, 0) >= 2)
        elif (self.edge_count.get(h, 0) >= 2 and scalar_ops(expr) >= 2
              and expr.shape == () and not isinstance(expr, ir.Conditional)):
            # plain common-subexpression elimination for shared scalars
            qualifies = True
        if qualifies or h in self.temp_for:
            if h in self.temp_for:
                out = self._temp_ref(*self.temp_for[h])
            else:
                inner_space = frozenset(expr.free_indices)
                if isinstance(expr, IndexSum):
                    inner_space = inner_space | frozenset(expr.indices)
                inner = ir.map_children(
                    expr, lambda c: self.process(c, inner_space, memo))
                out = self.materialise(inner, h)
        elif isinstance(expr, IndexSum):
            # stays inline: its body iterates over the summed indices too
            wider = space | frozenset(expr.indices)
            out = ir.map_children(expr, lambda c: self.process(c, wider, memo))
        else:
            out = ir.map_children(expr, lambda c: self.process(c, space, memo))
        memo[id(expr)] = out
        return out

    def statement(self, target, expr, accumulate):
        """One scalar statement; remaining index sums unroll (small extents)
        or become local scalar accumulators with their own loop."""

        def resolve(e, sink):
            if isinstance(e, IndexSum):
                total = int(np.prod([i.extent for i in e.indices], dtype=int))
                if total <= INLINE_UNROLL_LIMIT:
                    acc = None
                    for values in itertools.product(
                            *[range(i.extent) for i in e.indices]):
                        term = substitute_indices(
                            e.body, dict(zip(e.indices, values)))
                        term = resolve(term, sink)
                        acc = term if acc is None else ir.Sum(acc, term)
                    return acc if acc is not None else Literal(0.0)
                name = self._new_temp(())
                ref = Ref(name, 0, ())
                inner_sink = []
                body = resolve(e.body, inner_sink)
                inner = inner_sink + [Accumulate(ref, body)]
                for i in reversed(e.indices):
                    inner = [Loop(i, inner)]
                sink.append(Assign(ref, Literal(0.0)))
                sink.extend(inner)
                return FlexiblyIndexed(Variable(name, (1,)), 0, ())
            return ir.map_children(e, lambda c: resolve(c, sink))

        sink = []
        body = resolve(expr, sink)
        _validate_scalar(body)
        final = Accumulate(target, body) if accumulate else Assign(target, body)
        if sink:
            return sink + [final]
        return final


def _validate_scalar(expr):
    for node in ir.iter_dag(expr):
        if isinstance(node, (ir.Concatenate, ir.ComponentTensor, ir.ListTensor,
                             ir.Zero)) and node.shape != ():
            raise UnloweredNode(type(node).__name__)
        if isinstance(node, ir.Concatenate):
            raise UnloweredNode("Concatenate")
        for entry in ir._index_entries(node):
            if isinstance(entry, ir.RuntimeIndex):
                raise UnloweredNode("RuntimeIndex in a cell kernel")


def _as_stmt_list(x):
    return x if isinstance(x, list) else [x]


def schedule(kernel):
    """Lower an optimised kernel to a loop program."""
    sched = _Scheduler(kernel.quad_indices,
                       frozenset(ir.structural_hash(n) for n in kernel.hoisted))
    sched.count_edges([e for _, e in kernel.assignments])

    stmts = []
    for view, expr in kernel.assignments:
        space = frozenset(view.indices)
        summands = _flatten_sum_root(expr)
        for s in summands:
            if isinstance(s, IndexSum):
                root_space = space | frozenset(s.indices)
                body = sched.process(s.body, root_space, {})
                target = Ref("A", view.offset, view.entries)
                inner = _as_stmt_list(sched.statement(target, body, True))
                loops = _loop_order(view.indices, kernel.quad_indices)
                for i in reversed(loops):
                    inner = [Loop(i, inner)]
                for i in reversed(s.indices):
                    inner = [Loop(i, inner)]
                stmts.extend(inner)
            else:
                body = sched.process(s, space, {})
                target = Ref("A", view.offset, view.entries)
                inner = _as_stmt_list(sched.statement(target, body, True))
                loops = _loop_order(view.indices, kernel.quad_indices)
                for i in reversed(loops):
                    inner = [Loop(i, inner)]
                stmts.extend(inner)

    body = [ZeroFill("A", kernel.return_size)] + sched.temp_defs + stmts
    return LoopProgram(kernel.name, ("A", kernel.return_size),
                       kernel.arguments, sched.temporaries, body,
                       meta=kernel.meta)


def _flatten_sum_root(expr):
    if isinstance(expr, ir._SumNode):
        return _flatten_sum_root(expr.a) + _flatten_sum_root(expr.b)
    return [expr]


def schedule_expression(expr, name="expression", hoisted=(), quad_indices=()):
    """Materialise a bare expression into an output tensor over its free
    indices; used as the cost model's reference."""
    sched = _Scheduler(quad_indices,
                       frozenset(ir.structural_hash(n) for n in hoisted))
    sched.count_edges([expr])
    axes = sorted_indices(expr.free_indices)
    size = int(np.prod([i.extent for i in axes], dtype=int)) if axes else 1
    ref = Ref("A", 0, tuple(zip(axes, _row_major_strides(
        tuple(i.extent for i in axes)))))
    space = frozenset(axes)
    if isinstance(expr, IndexSum):
        body = sched.process(expr.body, space | frozenset(expr.indices), {})
        inner = _as_stmt_list(sched.statement(ref, body, True))
        for i in reversed(expr.indices):
            inner = [Loop(i, inner)]
        for i in reversed(axes):
            inner = [Loop(i, inner)]
        stmts = [ZeroFill("A", size)] + sched.temp_defs + inner
    else:
        body = sched.process(expr, space, {})
        inner = _as_stmt_list(sched.statement(ref, body, False))
        for i in reversed(axes):
            inner = [Loop(i, inner)]
        stmts = sched.temp_defs + inner
    return LoopProgram(name, ("A", size), [], sched.temporaries, stmts)


# ---------------------------------------------------------------------------
# flop counting


def count_flops(program):
    """Exact static count: loops multiply, accumulations add one."""
    by_depth = {}

    def walk(stmts, depth, multiplier):
        total = 0
        for st in stmts:
            if isinstance(st, Loop):
                total += walk(st.body, depth + 1, multiplier * st.index.extent)
            elif isinstance(st, Assign):
                ops = scalar_ops(st.expr)
                total += ops * multiplier
                by_depth[depth] = by_depth.get(depth, 0) + ops * multiplier
            elif isinstance(st, Accumulate):
                ops = scalar_ops(st.expr) + 1
                total += ops * multiplier
                by_depth[depth] = by_depth.get(depth, 0) + ops * multiplier
            # ZeroFill costs nothing
        return total

    total = walk(program.body, 0, 1)
    return FlopReport(total, by_depth, _table_bytes(program))


def _literals(program):
    seen = {}
    for st in _iter_statements(program.body):
        for node in ir.iter_dag(st.expr):
            if isinstance(node, Literal) and node.shape != ():
                seen[ir.structural_hash(node)] = node
    return list(seen.values())


def _table_bytes(program):
    return sum(lit.array.size * 8 for lit in _literals(program))


def _iter_statements(stmts):
    for st in stmts:
        if isinstance(st, Loop):
            yield from _iter_statements(st.body)
        elif isinstance(st, (Assign, Accumulate)):
            yield st


# ---------------------------------------------------------------------------
# serialization (loss-free, deterministic)


def serialize_program(program):
    """Stable JSON rendering; indices renumbered by first appearance."""
    ids = {}

    def idx(i):
        if i not in ids:
            ids[i] = len(ids)
        return ["idx", ids[i], i.extent]

    def entry(e):
        return idx(e) if isinstance(e, Index) else int(e)

    def expr(e):
        if isinstance(e, Literal):
            if e.shape == ():
                return ["lit", float(e.array)]
            return ["table", list(e.shape), e.array.reshape(-1).tolist()]
        if isinstance(e, Variable):
            return ["var", e.name, list(e.shape)]
        if isinstance(e, ir._IndexedNode):
            return ["indexed", expr(e.base), [entry(i) for i in e.multiindex]]
        if isinstance(e, FlexiblyIndexed):
            return ["flex", expr(e.base), e.offset,
                    [[entry(i), s] for i, s in e.terms]]
        if isinstance(e, Delta):
            return ["delta", entry(e.i), entry(e.j)]
        if isinstance(e, ir._SumNode):
            return ["+", expr(e.a), expr(e.b)]
        if isinstance(e, ir._ProductNode):
            return ["*", expr(e.a), expr(e.b)]
        if isinstance(e, ir.Division):
            return ["/", expr(e.a), expr(e.b)]
        if isinstance(e, ir.Power):
            return ["pow", expr(e.a), expr(e.b)]
        if isinstance(e, ir.MinValue):
            return ["min", expr(e.a), expr(e.b)]
        if isinstance(e, ir.MaxValue):
            return ["max", expr(e.a), expr(e.b)]
        if isinstance(e, ir.MathFunction):
            return ["call", e.fname, expr(e.operand)]
        if isinstance(e, ir.Comparison):
            return ["cmp", e.op, expr(e.a), expr(e.b)]
        if isinstance(e, ir.Zero) and e.shape == ():
            return ["lit", 0.0]
        raise UnloweredNode("cannot serialize %s" % type(e).__name__)

    def ref(r):
        return [r.name, r.offset, [[entry(i), s] for i, s in r.terms]]

    def stmt(st):
        if isinstance(st, Loop):
            return ["loop", idx(st.index), [stmt(s) for s in st.body]]
        if isinstance(st, Assign):
            return ["assign", ref(st.target), expr(st.expr)]
        if isinstance(st, Accumulate):
            return ["accumulate", ref(st.target), expr(st.expr)]
        if isinstance(st, ZeroFill):
            return ["zero", st.name, st.size]
        raise UnloweredNode(type(st).__name__)

    doc = {
        "name": program.name,
        "return": list(program.return_buffer),
        "arguments": [list(a) for a in program.arguments],
        "temporaries": [list(t) for t in program.temporaries],
        "body": [stmt(s) for s in program.body],
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def parse_program(text):
    doc = json.loads(text)
    ids = {}

    def idx(spec):
        key = spec[1]
        if key not in ids:
            ids[key] = Index(spec[2], "i%d" % key)
        return ids[key]

    def entry(e):
        return idx(e) if isinstance(e, list) else int(e)

    def expr(e):
        tag = e[0]
        if tag == "lit":
            return Literal(e[1])
        if tag == "table":
            return Literal(np.array(e[2]).reshape(e[1]))
        if tag == "var":
            return Variable(e[1], tuple(e[2]))
        if tag == "indexed":
            return Indexed(expr(e[1]), tuple(entry(i) for i in e[2]))
        if tag == "flex":
            return FlexiblyIndexed(expr(e[1]), e[2],
                                   tuple((entry(i), s) for i, s in e[3]))
        if tag == "delta":
            return Delta(entry(e[1]), entry(e[2]))
        if tag == "+":
            return ir.Sum(expr(e[1]), expr(e[2]))
        if tag == "*":
            return ir.Product(expr(e[1]), expr(e[2]))
        if tag == "/":
            return ir.Division(expr(e[1]), expr(e[2]))
        if tag == "pow":
            return ir.Power(expr(e[1]), expr(e[2]))
        if tag == "min":
            return ir.MinValue(expr(e[1]), expr(e[2]))
        if tag == "max":
            return ir.MaxValue(expr(e[1]), expr(e[2]))
        if tag == "call":
            return ir.MathFunction(e[1], expr(e[2]))
        if tag == "cmp":
            return ir.Comparison(e[1], expr(e[2]), expr(e[3]))
        raise UnloweredNode("cannot parse %r" % tag)

    def ref(r):
        return Ref(r[0], r[1], tuple((entry(i), s) for i, s in r[2]))

    def stmt(st):
        tag = st[0]
        if tag == "loop":
            return Loop(idx(st[1]), [stmt(s) for s in st[2]])
        if tag == "assign":
            return Assign(ref(st[1]), expr(st[2]))
        if tag == "accumulate":
            return Accumulate(ref(st[1]), expr(st[2]))
        if tag == "zero":
            return ZeroFill(st[1], st[2])
        raise UnloweredNode(tag)

    return LoopProgram(doc["name"], tuple(doc["return"]),
                       [tuple(a) for a in doc["arguments"]],
                       [tuple(t) for t in doc["temporaries"]],
                       [stmt(s) for s in doc["body"]])


# ---------------------------------------------------------------------------
# C emission


_C_FUNCTIONS = {"sqrt": "sqrt", "sin": "sin", "cos": "cos", "tan": "tan",
                "exp": "exp", "ln": "log", "abs": "fabs"}


def _c_float(x):
    x = float(x)
    if x == int(x) and abs(x) < 1e16:
        return "%.1f" % x
    return repr(x)


def emit_c(program):
    """Deterministic single-function C99 text for a scheduled kernel."""
    tables = {}
    table_order = []
    for st in _iter_statements(program.body):
        for node in ir.iter_dag(st.expr):
            if isinstance(node, Literal) and node.shape != ():
                h = ir.structural_hash(node)
                if h not in tables:
                    tables[h] = ("T%d" % len(table_order), node)
                    table_order.append(h)

    loop_names = {}

    def iname(i):
        if i not in loop_names:
            loop_names[i] = "i%d" % len(loop_names)
        return loop_names[i]

    def entry(e):
        return iname(e) if isinstance(e, Index) else str(int(e))

    def addr(offset, terms):
        parts = [str(offset)] if offset or not terms else []
        for i, s in terms:
            parts.append(entry(i) if s == 1 else "%d * %s" % (s, entry(i)))
        return " + ".join(parts) if parts else "0"

    def cexpr(e):
        if isinstance(e, Literal):
            if e.shape == ():
                return _c_float(e.array)
            raise UnloweredNode("bare table literal")
        if isinstance(e, ir.Zero):
            return "0.0"
        if isinstance(e, ir._IndexedNode):
            base = e.base
            if isinstance(base, Literal):
                name = tables[ir.structural_hash(base)][0]
                strides = _row_major_strides(base.shape)
                return "%s[%s]" % (name, addr(0, tuple(
                    zip(e.multiindex, strides))))
            if isinstance(base, Variable):
                strides = _row_major_strides(base.shape)
                return "%s[%s]" % (base.name, addr(0, tuple(
                    zip(e.multiindex, strides))))
            raise UnloweredNode(type(base).__name__)
        if isinstance(e, FlexiblyIndexed):
            return "%s[%s]" % (e.base.name, addr(e.offset, e.terms))
        if isinstance(e, Delta):
            return "((%s == %s) ? 1.0 : 0.0)" % (entry(e.i), entry(e.j))
        if isinstance(e, ir._SumNode):
            return "(%s + %s)" % (cexpr(e.a), cexpr(e.b))
        if isinstance(e, ir._ProductNode):
            return "(%s * %s)" % (cexpr(e.a), cexpr(e.b))
        if isinstance(e, ir.Division):
            return "(%s / %s)" % (cexpr(e.a), cexpr(e.b))
        if isinstance(e, ir.Power):
            return "pow(%s, %s)" % (cexpr(e.a), cexpr(e.b))
        if isinstance(e, ir.MinValue):
            return "fmin(%s, %s)" % (cexpr(e.a), cexpr(e.b))
        if isinstance(e, ir.MaxValue):
            return "fmax(%s, %s)" % (cexpr(e.a), cexpr(e.b))
        if isinstance(e, ir.MathFunction):
            try:
                fname = _C_FUNCTIONS[e.fname]
            except KeyError:
                raise UnsupportedFunction(e.fname) from None
            return "%s(%s)" % (fname, cexpr(e.operand))
        if isinstance(e, ir.Comparison):
            return "((%s %s %s) ? 1.0 : 0.0)" % (cexpr(e.a), e.op, cexpr(e.b))
        if isinstance(e, ir.Conditional):
            return "((%s != 0.0) ? %s : %s)" % (
                cexpr(e.condition), cexpr(e.then), cexpr(e.orelse))
        raise UnloweredNode(type(e).__name__)

    lines = []
    indent = [1]

    def put(text):
        lines.append("    " * indent[0] + text)

    def emit(stmts):
        for st in stmts:
            if isinstance(st, Loop):
                v = iname(st.index)
                put("for (int %s = 0; %s < %d; ++%s) {" % (
                    v, v, st.index.extent, v))
                indent[0] += 1
                emit(st.body)
                indent[0] -= 1
                put("}")
            elif isinstance(st, ZeroFill):
                put("for (int z = 0; z < %d; ++z) %s[z] = 0.0;" % (
                    st.size, st.name))
            elif isinstance(st, Assign):
                put("%s[%s] = %s;" % (st.target.name,
                                      addr(st.target.offset, st.target.terms),
                                      cexpr(st.expr)))
            elif isinstance(st, Accumulate):
                put("%s[%s] += %s;" % (st.target.name,
                                       addr(st.target.offset, st.target.terms),
                                       cexpr(st.expr)))

    emit(program.body)

    header = ["#include <math.h>", ""]
    for h in table_order:
        name, lit = tables[h]
        values = ", ".join(_c_float(v) for v in lit.array.reshape(-1))
        header.append("static const double %s[%d] = {%s};" % (
            name, lit.array.size, values))
    if table_order:
        header.append("")
    args = ["double * restrict A"]
    for aname, _size in program.arguments:
        args.append("const double * restrict %s" % aname)
    header.append("void %s(%s)" % (program.name, ", ".join(args)))
    header.append("{")
    decls = ["    double %s[%d];" % (n, s) for n, s in program.temporaries]
    footer = ["}", ""]
    return "\n".join(header + decls + lines + footer)


def kernel_hash(program):
    return hashlib.sha256(emit_c(program).encode()).hexdigest()


def program_report(program):
    rep = count_flops(program)
    rep.kernel_hash = kernel_hash(program)
    return rep
