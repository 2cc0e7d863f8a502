"""Minimal hash-consed expression graph with symbolic differentiation.

Node set: constant, variable, +, -, *, /, power (plus atan, needed by the
fisheye projection model; its derivative is rational, so gradients stay
inside the node set).  Graphs are built through an ExprGraph registry so
structurally identical subtrees are shared, and gradients are accumulated by
reverse sweeps over the shared DAG.
"""

from __future__ import annotations

import numpy as np

CONST, VAR, ADD, SUB, MUL, DIV, POW, ATAN = range(8)

_OP_NAMES = {CONST: "const", VAR: "var", ADD: "+", SUB: "-", MUL: "*",
             DIV: "/", POW: "pow", ATAN: "atan"}


class Expr:
    __slots__ = ("graph", "op", "a", "b", "value", "index", "id")

    def __init__(self, graph, op, a=None, b=None, value=0.0, index=-1, node_id=0):
        self.graph = graph
        self.op = op
        self.a = a
        self.b = b
        self.value = value
        self.index = index
        self.id = node_id

    def __repr__(self):
        if self.op == CONST:
            return f"{self.value:g}"
        if self.op == VAR:
            return f"x{self.index}"
        return f"({_OP_NAMES[self.op]} #{self.id})"

    # operator sugar; plain numbers are lifted to constants
    def __add__(self, other):
        return self.graph.add(self, self.graph.lift(other))

    def __radd__(self, other):
        return self.graph.add(self.graph.lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self.graph.lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self.graph.lift(other), self)

    def __mul__(self, other):
        return self.graph.mul(self, self.graph.lift(other))

    def __rmul__(self, other):
        return self.graph.mul(self.graph.lift(other), self)

    def __truediv__(self, other):
        return self.graph.div(self, self.graph.lift(other))

    def __rtruediv__(self, other):
        return self.graph.div(self.graph.lift(other), self)

    def __neg__(self):
        return self.graph.mul(self.graph.const(-1.0), self)

    def __pow__(self, exponent):
        return self.graph.pow(self, exponent)


class ExprGraph:
    """Registry of interned nodes over a flat variable vector."""

    def __init__(self, n_vars: int):
        self.n_vars = n_vars
        self._intern: dict = {}
        self._nodes: list[Expr] = []
        self.zero = self.const(0.0)
        self.one = self.const(1.0)
        self.vars = [self._make(VAR, index=i) for i in range(n_vars)]

    def _make(self, op, a=None, b=None, value=0.0, index=-1) -> Expr:
        if op == CONST:
            key = (op, value)
        elif op == VAR:
            key = (op, index)
        elif op == POW:
            key = (op, a.id, value)
        else:
            key = (op, a.id, b.id if b is not None else -1)
        hit = self._intern.get(key)
        if hit is not None:
            return hit
        node = Expr(self, op, a, b, value, index, len(self._nodes))
        self._nodes.append(node)
        self._intern[key] = node
        return node

    def __len__(self):
        return len(self._nodes)

    def lift(self, x):
        if isinstance(x, Expr):
            return x
        return self.const(float(x))

    def const(self, value: float) -> Expr:
        return self._make(CONST, value=float(value))

    def var(self, index: int) -> Expr:
        return self.vars[index]

    def add(self, a: Expr, b: Expr) -> Expr:
        if a.op == CONST and b.op == CONST:
            return self.const(a.value + b.value)
        if a.op == CONST and a.value == 0.0:
            return b
        if b.op == CONST and b.value == 0.0:
            return a
        if b.id < a.id:
            a, b = b, a
        return self._make(ADD, a, b)

    def sub(self, a: Expr, b: Expr) -> Expr:
        if a.op == CONST and b.op == CONST:
            return self.const(a.value - b.value)
        if b.op == CONST and b.value == 0.0:
            return a
        if a is b:
            return self.zero
        if a.op == CONST and a.value == 0.0:
            return self.mul(self.const(-1.0), b)
        return self._make(SUB, a, b)

    def mul(self, a: Expr, b: Expr) -> Expr:
        if a.op == CONST and b.op == CONST:
            return self.const(a.value * b.value)
        if a.op == CONST:
            if a.value == 0.0:
                return self.zero
            if a.value == 1.0:
                return b
        if b.op == CONST:
            if b.value == 0.0:
                return self.zero
            if b.value == 1.0:
                return a
        if b.id < a.id:
            a, b = b, a
        return self._make(MUL, a, b)

    def div(self, a: Expr, b: Expr) -> Expr:
        if a.op == CONST and a.value == 0.0:
            return self.zero
        if b.op == CONST:
            if b.value == 1.0:
                return a
            if a.op == CONST:
                return self.const(a.value / b.value)
        if a is b:
            return self.one
        return self._make(DIV, a, b)

    def pow(self, a: Expr, exponent: float) -> Expr:
        exponent = float(exponent)
        if exponent == 0.0:
            return self.one
        if exponent == 1.0:
            return a
        if a.op == CONST:
            return self.const(a.value ** exponent)
        return self._make(POW, a, b=None, value=exponent)

    def atan(self, a: Expr) -> Expr:
        if a.op == CONST:
            return self.const(np.arctan(a.value))
        return self._make(ATAN, a)

    # ------------------------------------------------------------- evaluation

    @staticmethod
    def _topological(roots) -> list[Expr]:
        order, seen, stack = [], set(), [(r, False) for r in roots]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            if node.a is not None:
                stack.append((node.a, False))
            if node.b is not None:
                stack.append((node.b, False))
        return order

    def evaluate(self, roots, x: np.ndarray, cache: dict | None = None) -> list:
        """Values of the given nodes at x; x may be (n_vars,) or (n_vars, k)
        for simultaneous evaluation at several points."""
        x = np.asarray(x, dtype=float)
        if cache is None:
            cache = {}
        todo = [r for r in roots if r.id not in cache]
        for node in self._topological(todo):
            if node.id in cache:
                continue
            if node.op == CONST:
                v = node.value if x.ndim == 1 else np.full(x.shape[1], node.value)
            elif node.op == VAR:
                v = x[node.index]
            else:
                va = cache[node.a.id]
                if node.op == ADD:
                    v = va + cache[node.b.id]
                elif node.op == SUB:
                    v = va - cache[node.b.id]
                elif node.op == MUL:
                    v = va * cache[node.b.id]
                elif node.op == DIV:
                    v = va / cache[node.b.id]
                elif node.op == POW:
                    v = va ** node.value
                else:
                    v = np.arctan(va)
            cache[node.id] = v
        return [cache[r.id] for r in roots]

    # ---------------------------------------------------------------- gradient

    def gradient(self, root: Expr) -> dict[int, Expr]:
        """Symbolic partial derivatives of root w.r.t. every reachable
        variable, by reverse accumulation; entries that fold to zero are
        omitted."""
        order = self._topological([root])
        adjoint: dict[int, Expr] = {root.id: self.one}
        grad: dict[int, Expr] = {}
        for node in reversed(order):
            adj = adjoint.get(node.id)
            if adj is None or (adj.op == CONST and adj.value == 0.0):
                continue
            if node.op == VAR:
                g = grad.get(node.index)
                grad[node.index] = adj if g is None else self.add(g, adj)
                continue
            if node.op in (CONST,):
                continue
            if node.op == ADD:
                self._accumulate(adjoint, node.a, adj)
                self._accumulate(adjoint, node.b, adj)
            elif node.op == SUB:
                self._accumulate(adjoint, node.a, adj)
                self._accumulate(adjoint, node.b, self.mul(self.const(-1.0), adj))
            elif node.op == MUL:
                self._accumulate(adjoint, node.a, self.mul(adj, node.b))
                self._accumulate(adjoint, node.b, self.mul(adj, node.a))
            elif node.op == DIV:
                self._accumulate(adjoint, node.a, self.div(adj, node.b))
                self._accumulate(adjoint, node.b,
                                 self.mul(self.const(-1.0),
                                          self.div(self.mul(adj, node),
                                                   node.b)))
            elif node.op == POW:
                self._accumulate(
                    adjoint, node.a,
                    self.mul(adj, self.mul(self.const(node.value),
                                           self.pow(node.a, node.value - 1.0))))
            elif node.op == ATAN:
                self._accumulate(
                    adjoint, node.a,
                    self.div(adj, self.add(self.one,
                                           self.mul(node.a, node.a))))
        return grad

    def _accumulate(self, adjoint: dict, node: Expr, term: Expr) -> None:
        cur = adjoint.get(node.id)
        adjoint[node.id] = term if cur is None else self.add(cur, term)
