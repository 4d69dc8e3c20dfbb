"""Tensor-algebra intermediate representation.

Every expression node is immutable, carries a ``shape`` (ordered tuple of
extents) and a set of ``free_indices``, and is structurally hashable so that
identical subexpressions share storage in a DAG.  Scalar operations require
scalar-shaped operands; tensors are taken apart with ``Indexed`` and rebuilt
with ``ComponentTensor``.  Constructors fold the cheap, value-safe identities
(zero propagation, indexing into literals and component tensors) because the
rewrite passes rely on those folds firing during index substitution.
"""

from __future__ import annotations

import hashlib
import itertools

import numpy as np


class IllFormed(Exception):
    """Expression violates a structural rule (shape, index count, ...)."""


class ExtentMismatch(IllFormed):
    """Index substitution attempted with a replacement of different extent."""


class IndexOutOfRange(IllFormed):
    pass


_serial_counter = itertools.count()

SUPPORTED_FUNCTIONS = ("sqrt", "sin", "cos", "tan", "exp", "ln", "abs")
COMPARISON_OPS = (">", ">=", "==", "!=", "<", "<=")


class Index:
    """Free index: identity is the token, not the name.

    ``serial`` is drawn from a process-global atomic counter, which gives a
    deterministic total order over the indices minted by one compilation.
    """

    __slots__ = ("serial", "extent", "name")

    def __init__(self, extent, name=None):
        extent = int(extent)
        if extent <= 0:
            raise IllFormed("index extent must be positive, got %d" % extent)
        self.serial = next(_serial_counter)
        self.extent = extent
        self.name = name

    def __repr__(self):
        return self.name or "i%d" % self.serial


class RuntimeIndex:
    """Fixed index whose value is only known at run time (e.g. a facet id)."""

    __slots__ = ("name", "extent")

    def __init__(self, name, extent):
        self.name = name
        self.extent = int(extent)

    def __repr__(self):
        return self.name


def sorted_indices(indices):
    """Indices in token-creation order; the one deterministic ordering."""
    return tuple(sorted(indices, key=lambda i: i.serial))


def _as_scalar(op, *operands):
    for o in operands:
        if o.shape != ():
            raise IllFormed("%s requires scalar operands, got shape %s" % (op, o.shape))


def _union_free(children):
    free = frozenset()
    for c in children:
        free = free | c.free_indices
    return free


class Node:
    """Base expression node."""

    __slots__ = ("shape", "free_indices", "_hash", "_digest")

    def __init__(self, shape, free_indices):
        object.__setattr__(self, "shape", tuple(int(e) for e in shape))
        object.__setattr__(self, "free_indices", frozenset(free_indices))
        object.__setattr__(self, "_digest", None)
        object.__setattr__(self, "_hash", None)

    def __setattr__(self, name, value):
        raise AttributeError("expressions are immutable")

    # Subclasses provide _key() (hash/equality payload, children included)
    # and children (tuple of child Nodes).

    children = ()

    def _key(self):
        raise NotImplementedError

    def __hash__(self):
        h = self._hash
        if h is None:
            h = hash((type(self).__name__,) + self._key())
            object.__setattr__(self, "_hash", h)
        return h

    def __eq__(self, other):
        if self is other:
            return True
        if type(self) is not type(other):
            return False
        if hash(self) != hash(other):
            return False
        return self._key() == other._key()

    def __ne__(self, other):
        return not self.__eq__(other)

    def __repr__(self):
        return to_sexp(self)


# ---------------------------------------------------------------------------
# terminals


class Literal(Node):
    __slots__ = ("array",)

    def __init__(self, array):
        arr = np.asarray(array, dtype=float)
        arr.flags.writeable = False
        object.__setattr__(self, "array", arr)
        super().__init__(arr.shape, ())

    @property
    def value(self):
        return float(self.array) if self.shape == () else self.array

    def _key(self):
        return (self.array.shape, self.array.tobytes())


class Zero(Node):
    __slots__ = ()

    def __init__(self, shape=()):
        super().__init__(shape, ())

    def _key(self):
        return (self.shape,)


class Identity(Node):
    __slots__ = ("dim",)

    def __init__(self, n):
        object.__setattr__(self, "dim", int(n))
        super().__init__((n, n), ())

    def _key(self):
        return (self.dim,)


class Variable(Node):
    __slots__ = ("name",)

    def __init__(self, name, shape):
        object.__setattr__(self, "name", name)
        super().__init__(shape, ())

    def _key(self):
        return (self.name, self.shape)


def is_zero(expr):
    """Exact literal-zero test; no epsilon pruning."""
    if isinstance(expr, Zero):
        return True
    return isinstance(expr, Literal) and expr.shape == () and expr.array == 0.0


def _is_one(expr):
    return isinstance(expr, Literal) and expr.shape == () and expr.array == 1.0


# ---------------------------------------------------------------------------
# scalar operations


class _Scalar2(Node):
    __slots__ = ("a", "b")

    def __init__(self, a, b):
        _as_scalar(type(self).__name__, a, b)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        super().__init__((), _union_free((a, b)))

    @property
    def children(self):
        return (self.a, self.b)

    def _key(self):
        return (self.a, self.b)


class _SumNode(_Scalar2):
    pass


class _ProductNode(_Scalar2):
    pass


class Division(_Scalar2):
    pass


class Power(_Scalar2):
    pass


class MinValue(_Scalar2):
    pass


class MaxValue(_Scalar2):
    pass


def Sum(a, b):
    _as_scalar("Sum", a, b)
    if is_zero(a):
        return b
    if is_zero(b):
        return a
    return _SumNode(a, b)


def Product(a, b):
    _as_scalar("Product", a, b)
    if is_zero(a) or is_zero(b):
        return Zero()
    if _is_one(a):
        return b
    if _is_one(b):
        return a
    return _ProductNode(a, b)


class MathFunction(Node):
    __slots__ = ("fname", "operand")

    def __init__(self, fname, operand):
        _as_scalar("MathFunction", operand)
        object.__setattr__(self, "fname", fname)
        object.__setattr__(self, "operand", operand)
        super().__init__((), operand.free_indices)

    @property
    def children(self):
        return (self.operand,)

    def _key(self):
        return (self.fname, self.operand)


class Comparison(Node):
    __slots__ = ("op", "a", "b")

    def __init__(self, op, a, b):
        if op not in COMPARISON_OPS:
            raise IllFormed("unknown comparison %r" % op)
        _as_scalar("Comparison", a, b)
        object.__setattr__(self, "op", op)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        super().__init__((), _union_free((a, b)))

    @property
    def children(self):
        return (self.a, self.b)

    def _key(self):
        return (self.op, self.a, self.b)


class LogicalAnd(_Scalar2):
    pass


class LogicalOr(_Scalar2):
    pass


class LogicalNot(Node):
    __slots__ = ("operand",)

    def __init__(self, operand):
        _as_scalar("LogicalNot", operand)
        object.__setattr__(self, "operand", operand)
        super().__init__((), operand.free_indices)

    @property
    def children(self):
        return (self.operand,)

    def _key(self):
        return (self.operand,)


class Conditional(Node):
    __slots__ = ("condition", "then", "orelse")

    def __init__(self, condition, then, orelse):
        _as_scalar("Conditional", condition, then, orelse)
        object.__setattr__(self, "condition", condition)
        object.__setattr__(self, "then", then)
        object.__setattr__(self, "orelse", orelse)
        super().__init__((), _union_free((condition, then, orelse)))

    @property
    def children(self):
        return (self.condition, self.then, self.orelse)

    def _key(self):
        return (self.condition, self.then, self.orelse)


# ---------------------------------------------------------------------------
# index-structured nodes


def _check_entry(entry, extent, what):
    if isinstance(entry, (int, np.integer)):
        entry = int(entry)
        if not 0 <= entry < extent:
            raise IndexOutOfRange("%s index %d out of range [0, %d)" % (what, entry, extent))
        return entry
    if isinstance(entry, Index):
        if entry.extent != extent:
            raise ExtentMismatch(
                "%s index extent %d does not match dimension extent %d"
                % (what, entry.extent, extent))
        return entry
    if isinstance(entry, RuntimeIndex):
        return entry
    raise IllFormed("bad index entry %r" % (entry,))


class _IndexedNode(Node):
    __slots__ = ("base", "multiindex")

    def __init__(self, base, multiindex):
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "multiindex", tuple(multiindex))
        free = base.free_indices | frozenset(
            i for i in multiindex if isinstance(i, Index))
        super().__init__((), free)

    @property
    def children(self):
        return (self.base,)

    def _key(self):
        return (self.base, self.multiindex)


def Indexed(base, multiindex):
    multiindex = tuple(multiindex)
    if len(multiindex) != len(base.shape):
        raise IllFormed(
            "indexing rank-%d tensor with %d indices"
            % (len(base.shape), len(multiindex)))
    multiindex = tuple(
        _check_entry(e, ext, "Indexed") for e, ext in zip(multiindex, base.shape))
    if not multiindex:
        return base
    if isinstance(base, Zero):
        return Zero()
    if isinstance(base, Literal) and all(isinstance(i, int) for i in multiindex):
        return Literal(base.array[multiindex])
    if isinstance(base, Identity):
        return Delta(multiindex[0], multiindex[1])
    if isinstance(base, ListTensor) and all(isinstance(i, int) for i in multiindex):
        return base.arrays[multiindex]
    if isinstance(base, ComponentTensor):
        return substitute_indices(
            base.expression, dict(zip(base.indices, multiindex)))
    return _IndexedNode(base, multiindex)


class FlexiblyIndexed(Node):
    """Affine view into a rank-1 variable: offset + sum(stride * index)."""

    __slots__ = ("base", "offset", "terms")

    def __init__(self, base, offset, terms):
        if len(base.shape) != 1:
            raise IllFormed("FlexiblyIndexed base must be a flat (rank-1) tensor")
        terms = tuple((i, int(s)) for i, s in terms)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "offset", int(offset))
        object.__setattr__(self, "terms", terms)
        free = base.free_indices | frozenset(
            i for i, _ in terms if isinstance(i, Index))
        super().__init__((), free)

    @property
    def children(self):
        return (self.base,)

    def _key(self):
        return (self.base, self.offset, self.terms)


class Delta(Node):
    __slots__ = ("i", "j")

    def __new__(cls, i, j):
        if isinstance(i, (int, np.integer)) and isinstance(j, (int, np.integer)):
            return Literal(1.0 if int(i) == int(j) else 0.0)
        if isinstance(i, Index) and i is j:
            return Literal(1.0)
        return super().__new__(cls)

    def __init__(self, i, j):
        if hasattr(self, "shape"):
            return  # __new__ returned an already-built node
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        free = frozenset(k for k in (i, j) if isinstance(k, Index))
        super().__init__((), free)

    def _key(self):
        return (self.i if isinstance(self.i, Index) else int(self.i),
                self.j if isinstance(self.j, Index) else int(self.j))


class ComponentTensor(Node):
    """Bind free indices into shape; the inverse of Indexed.

    Indices that are not free in the child are permitted (broadcast); the
    public :func:`make_component_tensor` enforces the strict contract.
    """

    __slots__ = ("expression", "indices")

    def __new__(cls, expression, indices):
        indices = tuple(indices)
        if not indices:
            return expression
        if isinstance(expression, Zero) or (
                is_zero(expression) and not expression.free_indices):
            return Zero(tuple(i.extent for i in indices))
        return super().__new__(cls)

    def __init__(self, expression, indices):
        if hasattr(self, "shape"):
            return  # __new__ returned an already-built node
        indices = tuple(indices)
        _as_scalar("ComponentTensor", expression)
        if len(set(indices)) != len(indices):
            raise IllFormed("repeated index in ComponentTensor")
        object.__setattr__(self, "expression", expression)
        object.__setattr__(self, "indices", indices)
        super().__init__(tuple(i.extent for i in indices),
                         expression.free_indices - frozenset(indices))

    @property
    def children(self):
        return (self.expression,)

    def _key(self):
        return (self.expression, self.indices)


def make_component_tensor(expression, indices):
    """Strict ComponentTensor: every bound index must be free in the child."""
    indices = tuple(indices)
    missing = [i for i in indices if i not in expression.free_indices]
    if missing:
        raise IllFormed("indices %s not free in expression" % (missing,))
    return ComponentTensor(expression, indices)


class IndexSum(Node):
    __slots__ = ("body", "indices")

    def __new__(cls, body, indices):
        indices = tuple(indices)
        if not indices:
            return body
        if is_zero(body):
            return Zero()
        absent = [i for i in indices if i not in body.free_indices]
        if absent:
            # Folding may have removed the dependence; sum of a constant.
            scale = 1
            for i in absent:
                scale *= i.extent
            kept = tuple(i for i in indices if i in body.free_indices)
            return Product(Literal(float(scale)), IndexSum(body, kept))
        return super().__new__(cls)

    def __init__(self, body, indices):
        if hasattr(self, "shape"):
            return  # __new__ returned an already-built node
        indices = tuple(indices)
        _as_scalar("IndexSum", body)
        if len(set(indices)) != len(indices):
            raise IllFormed("repeated summation index")
        object.__setattr__(self, "body", body)
        object.__setattr__(self, "indices", indices)
        super().__init__((), body.free_indices - frozenset(indices))

    @property
    def children(self):
        return (self.body,)

    def _key(self):
        return (self.body, self.indices)


class ListTensor(Node):
    __slots__ = ("arrays",)

    def __init__(self, arrays):
        arrs = np.array(arrays, dtype=object)
        for e in arrs.flat:
            _as_scalar("ListTensor entry", e)
        arrs.flags.writeable = False
        object.__setattr__(self, "arrays", arrs)
        super().__init__(arrs.shape, _union_free(arrs.flat))

    @property
    def children(self):
        return tuple(self.arrays.flat)

    def _key(self):
        return (self.arrays.shape, tuple(self.arrays.flat))


def list_tensor(arrays):
    """ListTensor that collapses to a Literal when all entries are constant."""
    node = ListTensor(arrays)
    values = np.empty(node.shape, dtype=float)
    for idx, e in np.ndenumerate(node.arrays):
        if isinstance(e, Literal) and e.shape == ():
            values[idx] = float(e.array)
        elif isinstance(e, Zero):
            values[idx] = 0.0
        else:
            return node
    return Literal(values)


class Concatenate(Node):
    """Flattens each operand row-major and lays them out end to end."""

    __slots__ = ("operands",)

    def __init__(self, *operands):
        if not operands:
            raise IllFormed("Concatenate needs at least one operand")
        object.__setattr__(self, "operands", tuple(operands))
        size = sum(int(np.prod(o.shape, dtype=int)) for o in operands)
        super().__init__((size,), _union_free(operands))

    @property
    def children(self):
        return self.operands

    def _key(self):
        return self.operands


def concatenate(operands):
    return Concatenate(*operands)


def concatenate_offsets(concat):
    """Flat offset of each operand within the concatenated vector."""
    offsets = []
    pos = 0
    for o in concat.operands:
        offsets.append(pos)
        pos += int(np.prod(o.shape, dtype=int))
    return tuple(offsets)


# ---------------------------------------------------------------------------
# traversal, substitution, hashing


def iter_dag(expr):
    """Each reachable node exactly once, children before parents."""
    seen = set()
    stack = [(expr, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            yield node
        else:
            stack.append((node, True))
            for c in node.children:
                if id(c) not in seen:
                    stack.append((c, False))


def _index_entries(node):
    """Index-like entries attached to a node besides its children."""
    if isinstance(node, _IndexedNode):
        return node.multiindex
    if isinstance(node, Delta):
        return (node.i, node.j)
    if isinstance(node, FlexiblyIndexed):
        return tuple(i for i, _ in node.terms)
    if isinstance(node, (ComponentTensor, IndexSum)):
        return node.indices
    return ()


def substitute_indices(expr, mapping):
    """Replace free occurrences of the mapping's domain indices.

    Values may be Index objects (extents must match) or fixed integers.
    Rebuilding goes through the public constructors, so folds fire.
    """
    for k, v in mapping.items():
        if isinstance(v, Index) and v.extent != k.extent:
            raise ExtentMismatch(
                "substituting %r (extent %d) by %r (extent %d)"
                % (k, k.extent, v, v.extent))
        if isinstance(v, (int, np.integer)) and not 0 <= int(v) < k.extent:
            raise IndexOutOfRange("substituting %r by out-of-range %d" % (k, v))
    return _subst(expr, dict(mapping), {})


def _subst_entry(entry, mapping):
    if isinstance(entry, Index) and entry in mapping:
        return mapping[entry]
    return entry


def _subst(expr, mapping, memo):
    if not mapping or not (expr.free_indices & mapping.keys()):
        return expr
    key = id(expr)
    if key in memo:
        return memo[key]

    if isinstance(expr, _IndexedNode):
        result = Indexed(_subst(expr.base, mapping, memo),
                         tuple(_subst_entry(e, mapping) for e in expr.multiindex))
    elif isinstance(expr, FlexiblyIndexed):
        result = FlexiblyIndexed(
            _subst(expr.base, mapping, memo), expr.offset,
            tuple((_subst_entry(i, mapping), s) for i, s in expr.terms))
    elif isinstance(expr, Delta):
        result = Delta(_subst_entry(expr.i, mapping), _subst_entry(expr.j, mapping))
    elif isinstance(expr, (ComponentTensor, IndexSum)):
        bound = expr.indices
        inner = {k: v for k, v in mapping.items() if k not in bound}
        # Avoid capturing a replacement index by a binder of this node.
        targets = {v for v in inner.values() if isinstance(v, Index)}
        renames = {b: Index(b.extent, b.name) for b in bound if b in targets}
        child = expr.expression if isinstance(expr, ComponentTensor) else expr.body
        if renames:
            child = _subst(child, dict(renames), {})
            bound = tuple(renames.get(b, b) for b in bound)
        # The memo is only valid for the unshadowed mapping.
        child_memo = memo if (not renames and len(inner) == len(mapping)) else {}
        child = _subst(child, inner, child_memo)
        if isinstance(expr, ComponentTensor):
            result = ComponentTensor(child, bound)
        else:
            result = IndexSum(child, bound)
    elif isinstance(expr, _SumNode):
        result = Sum(_subst(expr.a, mapping, memo), _subst(expr.b, mapping, memo))
    elif isinstance(expr, _ProductNode):
        result = Product(_subst(expr.a, mapping, memo), _subst(expr.b, mapping, memo))
    elif isinstance(expr, (Division, Power, MinValue, MaxValue, LogicalAnd, LogicalOr)):
        result = type(expr)(_subst(expr.a, mapping, memo), _subst(expr.b, mapping, memo))
    elif isinstance(expr, MathFunction):
        result = MathFunction(expr.fname, _subst(expr.operand, mapping, memo))
    elif isinstance(expr, LogicalNot):
        result = LogicalNot(_subst(expr.operand, mapping, memo))
    elif isinstance(expr, Comparison):
        result = Comparison(expr.op, _subst(expr.a, mapping, memo),
                            _subst(expr.b, mapping, memo))
    elif isinstance(expr, Conditional):
        result = Conditional(_subst(expr.condition, mapping, memo),
                             _subst(expr.then, mapping, memo),
                             _subst(expr.orelse, mapping, memo))
    elif isinstance(expr, ListTensor):
        grid = np.empty(expr.shape, dtype=object)
        for idx, e in np.ndenumerate(expr.arrays):
            grid[idx] = _subst(e, mapping, memo)
        result = ListTensor(grid)
    elif isinstance(expr, Concatenate):
        result = Concatenate(*[_subst(o, mapping, memo) for o in expr.operands])
    else:
        raise IllFormed("cannot substitute into %r" % type(expr).__name__)

    memo[key] = result
    return result


def map_children(expr, fn):
    """Rebuild one node with ``fn`` applied to each child expression.

    Goes through the public constructors so folds fire; index entries are
    left untouched.
    """
    if not expr.children:
        return expr
    if isinstance(expr, _IndexedNode):
        return Indexed(fn(expr.base), expr.multiindex)
    if isinstance(expr, FlexiblyIndexed):
        return FlexiblyIndexed(fn(expr.base), expr.offset, expr.terms)
    if isinstance(expr, ComponentTensor):
        return ComponentTensor(fn(expr.expression), expr.indices)
    if isinstance(expr, IndexSum):
        return IndexSum(fn(expr.body), expr.indices)
    if isinstance(expr, _SumNode):
        return Sum(fn(expr.a), fn(expr.b))
    if isinstance(expr, _ProductNode):
        return Product(fn(expr.a), fn(expr.b))
    if isinstance(expr, (Division, Power, MinValue, MaxValue, LogicalAnd, LogicalOr)):
        return type(expr)(fn(expr.a), fn(expr.b))
    if isinstance(expr, MathFunction):
        return MathFunction(expr.fname, fn(expr.operand))
    if isinstance(expr, LogicalNot):
        return LogicalNot(fn(expr.operand))
    if isinstance(expr, Comparison):
        return Comparison(expr.op, fn(expr.a), fn(expr.b))
    if isinstance(expr, Conditional):
        return Conditional(fn(expr.condition), fn(expr.then), fn(expr.orelse))
    if isinstance(expr, ListTensor):
        grid = np.empty(expr.shape, dtype=object)
        for pos, e in np.ndenumerate(expr.arrays):
            grid[pos] = fn(e)
        return ListTensor(grid)
    if isinstance(expr, Concatenate):
        return Concatenate(*[fn(o) for o in expr.operands])
    raise IllFormed("cannot rebuild %r" % type(expr).__name__)


def infer_shape_free_indices(expr):
    """Recompute (shape, free indices) from the children; the reference rule.

    Constructors cache these at build time; this recomputation exists so the
    cache can be cross-checked.
    """
    if isinstance(expr, (Literal, Zero, Identity, Variable)):
        return expr.shape, frozenset()
    if isinstance(expr, Delta):
        return (), frozenset(i for i in (expr.i, expr.j) if isinstance(i, Index))
    if isinstance(expr, _IndexedNode):
        _, base_free = infer_shape_free_indices(expr.base)
        return (), base_free | frozenset(
            i for i in expr.multiindex if isinstance(i, Index))
    if isinstance(expr, FlexiblyIndexed):
        return (), frozenset(i for i, _ in expr.terms if isinstance(i, Index))
    if isinstance(expr, ComponentTensor):
        _, free = infer_shape_free_indices(expr.expression)
        return tuple(i.extent for i in expr.indices), free - frozenset(expr.indices)
    if isinstance(expr, IndexSum):
        _, free = infer_shape_free_indices(expr.body)
        return (), free - frozenset(expr.indices)
    if isinstance(expr, ListTensor):
        free = frozenset()
        for e in expr.arrays.flat:
            free |= infer_shape_free_indices(e)[1]
        return expr.arrays.shape, free
    if isinstance(expr, Concatenate):
        size = sum(int(np.prod(o.shape, dtype=int)) for o in expr.operands)
        free = frozenset()
        for o in expr.operands:
            free |= infer_shape_free_indices(o)[1]
        return (size,), free
    # remaining nodes are scalar operations
    free = frozenset()
    for c in expr.children:
        shape, cfree = infer_shape_free_indices(c)
        if shape != ():
            raise IllFormed("non-scalar operand in %s" % type(expr).__name__)
        free |= cfree
    return (), free


# ---------------------------------------------------------------------------
# serialization


_SEXP_NAMES = {
    _SumNode: "Sum", _ProductNode: "Product", _IndexedNode: "Indexed",
}


def _node_tag(expr):
    return _SEXP_NAMES.get(type(expr), type(expr).__name__)


def to_sexp(expr, index_names=None):
    """Deterministic S-expression rendering.

    Free and bound indices are numbered %0, %1, ... in order of first
    appearance, so the text does not depend on the global token counter.
    """
    names = dict(index_names) if index_names else {}

    def idx(e):
        if isinstance(e, Index):
            if e not in names:
                names[e] = "%%%d" % len(names)
            return "%s:%d" % (names[e], e.extent)
        if isinstance(e, RuntimeIndex):
            return "$%s" % e.name
        return str(int(e))

    def rec(e):
        tag = _node_tag(e)
        if isinstance(e, Literal):
            if e.shape == ():
                return "(Literal %r)" % float(e.array)
            digest = hashlib.sha256(e.array.tobytes()).hexdigest()[:12]
            return "(Literal %s #%s)" % ("x".join(map(str, e.shape)), digest)
        if isinstance(e, Zero):
            return "(Zero %s)" % ("x".join(map(str, e.shape)) or "scalar")
        if isinstance(e, Identity):
            return "(Identity %d)" % e.dim
        if isinstance(e, Variable):
            return "(Variable %s %s)" % (e.name, "x".join(map(str, e.shape)) or "scalar")
        if isinstance(e, Delta):
            return "(Delta %s %s)" % (idx(e.i), idx(e.j))
        if isinstance(e, _IndexedNode):
            return "(Indexed %s (%s))" % (rec(e.base), " ".join(idx(i) for i in e.multiindex))
        if isinstance(e, FlexiblyIndexed):
            terms = " ".join("(%s *%d)" % (idx(i), s) for i, s in e.terms)
            return "(FlexiblyIndexed %s +%d %s)" % (rec(e.base), e.offset, terms)
        if isinstance(e, ComponentTensor):
            return "(ComponentTensor %s (%s))" % (rec(e.expression), " ".join(idx(i) for i in e.indices))
        if isinstance(e, IndexSum):
            return "(IndexSum %s (%s))" % (rec(e.body), " ".join(idx(i) for i in e.indices))
        if isinstance(e, ListTensor):
            return "(ListTensor %s %s)" % ("x".join(map(str, e.shape)),
                                           " ".join(rec(c) for c in e.children))
        if isinstance(e, MathFunction):
            return "(MathFunction %s %s)" % (e.fname, rec(e.operand))
        if isinstance(e, Comparison):
            return "(Comparison %s %s %s)" % (e.op, rec(e.a), rec(e.b))
        return "(%s %s)" % (tag, " ".join(rec(c) for c in e.children))

    return rec(expr)


def structural_hash(expr):
    """Stable digest; distinguishes free-index tokens via their serials."""
    return hashlib.sha256(_serial_sexp(expr).encode()).hexdigest()


def _serial_sexp(expr):
    # Token-identity-sensitive rendering used only for hashing.
    def idx(e):
        if isinstance(e, Index):
            return "i%d" % e.serial
        if isinstance(e, RuntimeIndex):
            return "$%s" % e.name
        return str(int(e))

    def rec(e):
        if isinstance(e, Literal):
            if e.shape == ():
                return "(L %r)" % float(e.array)
            return "(L %s %s)" % (e.shape, hashlib.sha256(e.array.tobytes()).hexdigest()[:16])
        entries = " ".join(idx(i) for i in _index_entries(e))
        extra = ""
        if isinstance(e, Variable):
            extra = e.name + str(e.shape)
        elif isinstance(e, MathFunction):
            extra = e.fname
        elif isinstance(e, Comparison):
            extra = e.op
        elif isinstance(e, Zero):
            extra = str(e.shape)
        elif isinstance(e, Identity):
            extra = str(e.dim)
        elif isinstance(e, ListTensor):
            extra = str(e.shape)
        elif isinstance(e, FlexiblyIndexed):
            extra = "+%d %s" % (e.offset, ",".join(str(s) for _, s in e.terms))
        return "(%s %s [%s] %s)" % (
            _node_tag(e), extra, entries, " ".join(rec(c) for c in e.children))

    return rec(expr)


def canonical_key(expr):
    """Deterministic sort key, stable across compilations in one process.

    Combines the token-free rendering with the relative creation order of the
    free indices; order-isomorphic across repeated identical compilations.
    """
    return (to_sexp(expr),
            tuple(i.serial for i in sorted_indices(expr.free_indices)))
