"""Reference interpreter for expressions and scheduled loop programs.

This is the oracle the whole test suite leans on: a vectorised numpy
evaluator for raw expressions, and a literal-minded tree-walking executor
for loop programs that performs exactly the scheduled operations (optionally
counting them).  Free indices become leading output axes in token-creation
order.
"""

from __future__ import annotations

import numpy as np

from . import ir
from .ir import (
    Index, RuntimeIndex, Literal, Zero, Identity, Variable, Delta,
    FlexiblyIndexed, ComponentTensor, IndexSum, ListTensor, Concatenate,
    MathFunction, Comparison, Conditional, LogicalAnd, LogicalOr, LogicalNot,
    Division, Power, MinValue, MaxValue, sorted_indices,
)


class UnboundVariable(Exception):
    pass


class ShapeMismatch(Exception):
    pass


_FUNCTIONS = {
    "sqrt": np.sqrt, "sin": np.sin, "cos": np.cos, "tan": np.tan,
    "exp": np.exp, "ln": np.log, "abs": np.abs,
}

_COMPARES = {
    ">": np.greater, ">=": np.greater_equal, "==": np.equal,
    "!=": np.not_equal, "<": np.less, "<=": np.less_equal,
}


class Environment:
    """Variable bindings plus externally fixed index values."""

    def __init__(self, bindings=None, index_values=None, runtime_indices=None):
        self.bindings = dict(bindings or {})
        self.index_values = dict(index_values or {})
        self.runtime_indices = dict(runtime_indices or {})

    def lookup(self, name, shape):
        try:
            value = self.bindings[name]
        except KeyError:
            raise UnboundVariable(name) from None
        arr = np.asarray(value, dtype=float)
        if arr.shape != tuple(shape):
            raise ShapeMismatch(
                "variable %s bound with shape %s, declared %s"
                % (name, arr.shape, tuple(shape)))
        return arr


def _to_union(arr, idx, union):
    """View of ``arr`` (axes idx ++ tail) with axes union ++ tail."""
    present = [i for i in union if i in idx]
    perm = [idx.index(i) for i in present] + list(range(len(idx), arr.ndim))
    arr = np.transpose(arr, perm)
    for pos, i in enumerate(union):
        if i not in idx:
            arr = np.expand_dims(arr, pos)
    return arr


def _union_of(*idx_tuples):
    union = []
    for idx in idx_tuples:
        for i in idx:
            if i not in union:
                union.append(i)
    return tuple(union)


def _binary(f, ra, rb):
    (aa, ia), (ab, ib) = ra, rb
    union = _union_of(ia, ib)
    return f(_to_union(aa, ia, union), _to_union(ab, ib, union)), union


def eval_expr(expr, env=None):
    """Evaluate to a dense array.

    Output axes are the free indices of ``expr`` in token-creation order
    (minus any fixed in the environment), followed by the shape axes.
    """
    env = env or Environment()
    arr, idx = _eval(expr, env, {})
    order = [i for i in sorted_indices(expr.free_indices)]
    arr = _to_union(arr, idx, tuple(order))
    arr = np.broadcast_to(arr, tuple(i.extent for i in order) + expr.shape)
    # fix externally pinned indices
    fixed = [k for k, i in enumerate(order) if i in env.index_values]
    for k in reversed(fixed):
        arr = np.take(arr, env.index_values[order[k]], axis=k)
    return np.asarray(arr, dtype=float).copy()


def _resolve_fixed(entry, env):
    if isinstance(entry, RuntimeIndex):
        try:
            return env.runtime_indices[entry.name]
        except KeyError:
            raise UnboundVariable("runtime index %s" % entry.name) from None
    return int(entry)


def _eval(expr, env, memo):
    key = id(expr)
    if key in memo:
        return memo[key]
    result = _eval_node(expr, env, memo)
    memo[key] = result
    return result


def _eval_node(expr, env, memo):
    if isinstance(expr, Literal):
        return expr.array, ()
    if isinstance(expr, Zero):
        return np.zeros(expr.shape), ()
    if isinstance(expr, Identity):
        return np.eye(expr.dim), ()
    if isinstance(expr, Variable):
        return env.lookup(expr.name, expr.shape), ()
    if isinstance(expr, Delta):
        i, j = expr.i, expr.j
        if isinstance(i, Index) and isinstance(j, Index):
            return np.eye(i.extent, j.extent), (i, j)
        if isinstance(i, Index):
            v = np.zeros(i.extent)
            v[_resolve_fixed(j, env)] = 1.0
            return v, (i,)
        v = np.zeros(j.extent)
        v[_resolve_fixed(i, env)] = 1.0
        return v, (j,)

    if isinstance(expr, ir._IndexedNode):
        arr, idx = _eval(expr.base, env, memo)
        arr = np.broadcast_to(
            arr, tuple(i.extent for i in idx) + expr.base.shape)
        idx = list(idx)
        off = len(idx)
        for entry in expr.multiindex:
            if isinstance(entry, Index):
                if entry in idx:
                    a1 = idx.index(entry)
                    arr = np.diagonal(arr, axis1=a1, axis2=off)
                    arr = np.moveaxis(arr, -1, a1)
                else:
                    arr = np.moveaxis(arr, off, len(idx))
                    idx.append(entry)
                    off += 1
            else:
                arr = arr.take(_resolve_fixed(entry, env), axis=off)
        return arr, tuple(idx)

    if isinstance(expr, FlexiblyIndexed):
        flat, bidx = _eval(expr.base, env, memo)
        if bidx:
            raise ShapeMismatch("flexibly indexed base with free indices")
        order = []
        for i, _ in expr.terms:
            if isinstance(i, Index) and i not in order:
                order.append(i)
        addr = np.zeros(tuple(i.extent for i in order), dtype=int) + expr.offset
        for i, s in expr.terms:
            if isinstance(i, Index):
                shape = [1] * len(order)
                shape[order.index(i)] = i.extent
                addr = addr + s * np.arange(i.extent).reshape(shape)
            else:
                addr = addr + s * _resolve_fixed(i, env)
        if addr.size and (addr.min() < 0 or addr.max() >= flat.shape[0]):
            raise ir.IndexOutOfRange("flexible index out of buffer")
        return flat[addr], tuple(order)

    if isinstance(expr, ComponentTensor):
        arr, idx = _eval(expr.expression, env, memo)
        arr = np.broadcast_to(arr, tuple(i.extent for i in idx))
        alpha = expr.indices
        rest = [i for i in idx if i not in alpha]
        present = [i for i in alpha if i in idx]
        perm = [idx.index(i) for i in rest] + [idx.index(i) for i in present]
        arr = np.transpose(arr, perm)
        if present != list(alpha):
            # bound-but-absent indices broadcast into shape axes
            for k, i in enumerate(alpha):
                if i not in present:
                    arr = np.expand_dims(arr, len(rest) + k)
            arr = np.broadcast_to(
                arr, tuple(i.extent for i in rest) + expr.shape)
        return arr, tuple(rest)

    if isinstance(expr, IndexSum):
        arr, idx = _eval(expr.body, env, memo)
        arr = np.broadcast_to(arr, tuple(i.extent for i in idx))
        axes = tuple(idx.index(i) for i in expr.indices)
        arr = np.sum(arr, axis=axes)
        return arr, tuple(i for i in idx if i not in expr.indices)

    if isinstance(expr, ListTensor):
        results = [_eval(e, env, memo) for e in expr.arrays.flat]
        union = _union_of(*[r[1] for r in results])
        ext = tuple(i.extent for i in union)
        stacked = [np.broadcast_to(_to_union(a, i, union), ext)
                   for a, i in results]
        arr = np.stack(stacked, axis=-1).reshape(ext + expr.shape)
        return arr, union

    if isinstance(expr, Concatenate):
        results = [_eval(o, env, memo) for o in expr.operands]
        union = _union_of(*[r[1] for r in results])
        ext = tuple(i.extent for i in union)
        pieces = []
        for (arr, idx), op in zip(results, expr.operands):
            full = np.broadcast_to(_to_union(arr, idx, union), ext + op.shape)
            pieces.append(full.reshape(ext + (-1,)) if op.shape else
                          full.reshape(ext + (1,)))
        return np.concatenate(pieces, axis=-1), union

    if isinstance(expr, ir._SumNode):
        return _binary(np.add, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, ir._ProductNode):
        return _binary(np.multiply, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, Division):
        return _binary(np.divide, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, Power):
        return _binary(np.power, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, MinValue):
        return _binary(np.minimum, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, MaxValue):
        return _binary(np.maximum, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, MathFunction):
        arr, idx = _eval(expr.operand, env, memo)
        try:
            f = _FUNCTIONS[expr.fname]
        except KeyError:
            raise ir.IllFormed("unknown function %r" % expr.fname) from None
        return f(arr), idx
    if isinstance(expr, Comparison):
        return _binary(_COMPARES[expr.op],
                       _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, LogicalAnd):
        return _binary(np.logical_and, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, LogicalOr):
        return _binary(np.logical_or, _eval(expr.a, env, memo), _eval(expr.b, env, memo))
    if isinstance(expr, LogicalNot):
        arr, idx = _eval(expr.operand, env, memo)
        return np.logical_not(arr), idx
    if isinstance(expr, Conditional):
        rc = _eval(expr.condition, env, memo)
        rt = _eval(expr.then, env, memo)
        rf = _eval(expr.orelse, env, memo)
        union = _union_of(rc[1], rt[1], rf[1])
        return (np.where(_to_union(rc[0], rc[1], union),
                         _to_union(rt[0], rt[1], union),
                         _to_union(rf[0], rf[1], union)), union)

    raise ir.IllFormed("cannot evaluate %r" % type(expr).__name__)


# ---------------------------------------------------------------------------
# loop program execution


class UnscheduledNode(Exception):
    pass


def run_kernel(program, inputs, instrument=False):
    """Execute a scheduled loop program exactly as written.

    ``inputs``: mapping argument name -> flat array.  Returns the flat return
    buffer, or ``(buffer, op_count)`` when ``instrument`` is set; the count
    increments once per arithmetic operation actually executed.
    """
    from . import scheduling  # deferred; scheduling does not import us

    buffers = {}
    rname, rsize = program.return_buffer
    buffers[rname] = np.zeros(rsize)
    for name, size in program.arguments:
        try:
            arr = np.asarray(inputs[name], dtype=float).reshape(-1)
        except KeyError:
            raise UnboundVariable(name) from None
        if arr.shape[0] != size:
            raise ShapeMismatch("argument %s has size %d, declared %d"
                                % (name, arr.shape[0], size))
        buffers[name] = arr
    for name, size in program.temporaries:
        buffers[name] = np.zeros(size)

    counter = [0]

    def sval(e, ienv):
        if isinstance(e, Literal):
            return float(e.array)
        if isinstance(e, ir._IndexedNode):
            base = e.base
            idx = tuple(ienv[i] if isinstance(i, Index) else int(i)
                        for i in e.multiindex)
            if isinstance(base, Literal):
                return float(base.array[idx])
            if isinstance(base, Variable):
                if len(idx) != 1:
                    raise UnscheduledNode("non-flat variable access")
                return float(buffers[base.name][idx[0]])
            raise UnscheduledNode(type(base).__name__)
        if isinstance(e, FlexiblyIndexed):
            addr = e.offset
            for i, s in e.terms:
                addr += s * (ienv[i] if isinstance(i, Index) else int(i))
            return float(buffers[e.base.name][addr])
        if isinstance(e, Delta):
            vi = ienv[e.i] if isinstance(e.i, Index) else int(e.i)
            vj = ienv[e.j] if isinstance(e.j, Index) else int(e.j)
            return 1.0 if vi == vj else 0.0
        if isinstance(e, ir._SumNode):
            v = sval(e.a, ienv) + sval(e.b, ienv)
        elif isinstance(e, ir._ProductNode):
            v = sval(e.a, ienv) * sval(e.b, ienv)
        elif isinstance(e, Division):
            v = sval(e.a, ienv) / sval(e.b, ienv)
        elif isinstance(e, Power):
            v = sval(e.a, ienv) ** sval(e.b, ienv)
        elif isinstance(e, MinValue):
            v = min(sval(e.a, ienv), sval(e.b, ienv))
        elif isinstance(e, MaxValue):
            v = max(sval(e.a, ienv), sval(e.b, ienv))
        elif isinstance(e, MathFunction):
            v = float(_FUNCTIONS[e.fname](sval(e.operand, ienv)))
        elif isinstance(e, Comparison):
            v = float(_COMPARES[e.op](sval(e.a, ienv), sval(e.b, ienv)))
        elif isinstance(e, Zero):
            return 0.0
        else:
            raise UnscheduledNode(type(e).__name__)
        counter[0] += 1
        return v

    def addr_of(ref, ienv):
        a = ref.offset
        for i, s in ref.terms:
            a += s * (ienv[i] if isinstance(i, Index) else int(i))
        return a

    def run(stmts, ienv):
        for st in stmts:
            if isinstance(st, scheduling.Loop):
                for v in range(st.index.extent):
                    ienv[st.index] = v
                    run(st.body, ienv)
                del ienv[st.index]
            elif isinstance(st, scheduling.ZeroFill):
                buffers[st.name][:] = 0.0
            elif isinstance(st, scheduling.Assign):
                buffers[st.target.name][addr_of(st.target, ienv)] = sval(st.expr, ienv)
            elif isinstance(st, scheduling.Accumulate):
                buffers[st.target.name][addr_of(st.target, ienv)] += sval(st.expr, ienv)
                counter[0] += 1
            else:
                raise UnscheduledNode(type(st).__name__)

    run(program.body, {})
    result = buffers[rname]
    if instrument:
        return result, counter[0]
    return result
