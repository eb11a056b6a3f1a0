"""Define-by-run reverse-mode tape over small numpy arrays.

Values are float64 scalars (python floats), vectors (1-D arrays), and
matrices (2-D arrays). Every public function accepts either raw numpy
values or Node handles and mixes them freely: when at least one operand
lives on a tape, constants are lifted onto that tape automatically and the
result is a Node; with raw operands the same forward kernel runs directly,
so tape-tracked and untracked evaluation produce bit-identical numbers.

The tape is an append-only node list (parents always precede children),
rebuilt per forward pass. backward() seeds the scalar root with 1 and walks
the list once in reverse; gradient accumulation never mutates arrays in
place, which makes view-sharing between adjoints safe.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import expit

from . import linalg

EPS_NORM = 1e-8


class Node:
    """One tape entry: forward value plus an adjoint buffer."""

    __slots__ = ("tape", "op", "parents", "value", "ctx", "grad")

    # Make numpy defer to the reflected operators below instead of coercing.
    __array_ufunc__ = None

    def __init__(self, tape, op, parents, value, ctx=None):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.value = value
        self.ctx = ctx
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Node) or np.ndim(other) > 0:
            return emul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node) or np.ndim(other) > 0:
            return ediv(self, other)
        return scale(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return ediv(other, self)

    def __matmul__(self, other):
        rhs = other.value if isinstance(other, Node) else other
        return matvec(self, other) if np.ndim(rhs) == 1 else matmul(self, other)

    def __rmatmul__(self, other):
        return matvec(other, self) if np.ndim(self.value) == 1 else matmul(other, self)


class Tape:
    """Append-only record of one forward pass; rebuilt per trajectory."""

    def __init__(self):
        self.nodes: list[Node] = []
        # Lifted constants, keyed by id(); entries keep the object alive, so
        # ids stay valid. Arrays must not be mutated while the tape lives.
        self._consts: dict[int, Node] = {}

    def _push(self, op, parents, value, ctx=None) -> Node:
        node = Node(self, op, parents, value, ctx)
        self.nodes.append(node)
        return node

    def _leaf(self, value, op) -> Node:
        if np.ndim(value) == 0:
            v = float(value)
        else:
            v = np.asarray(value, dtype=float)
        return self._push(op, (), v)

    def leaf(self, value) -> Node:
        """Register a trainable parameter (appears in backward's gradient map)."""
        return self._leaf(value, "leaf")

    def const(self, value) -> Node:
        """Register a constant (lifted input; excluded from the gradient map)."""
        return self._leaf(value, "const")

    def backward(self, root: Node):
        """Reverse sweep from a scalar root.

        Returns {leaf_node: gradient}; leaves the root never touched get an
        all-zero gradient of matching shape.
        """
        if not isinstance(root, Node) or root.tape is not self:
            raise ValueError("backward root must be a node on this tape")
        if np.ndim(root.value) != 0:
            raise ValueError("backward root must be scalar")
        for node in self.nodes:
            node.grad = None
        root.grad = 1.0
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            vjp = _VJPS.get(node.op)
            if vjp is not None:
                vjp(node, g)
        grads = {}
        for node in self.nodes:
            if node.op == "leaf":
                if node.grad is None:
                    grads[node] = 0.0 if np.ndim(node.value) == 0 else np.zeros_like(node.value)
                else:
                    grads[node] = node.grad
        return grads


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise ValueError("cannot mix nodes from different tapes")
        return x
    key = id(x)
    entry = tape._consts.get(key)
    if entry is None:
        node = tape.const(x)
        tape._consts[key] = (x, node)  # hold x so its id cannot be recycled
        return node
    return entry[1]


def _acc(node: Node, g) -> None:
    # Never in place: adjoints may alias views of other adjoint buffers.
    node.grad = g if node.grad is None else node.grad + g


# ---------------------------------------------------------------------------
# forward kernels + VJPs

def add(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return a + b
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("add", (a, b), a.value + b.value)


def _vjp_add(n, g):
    _acc(n.parents[0], g)
    _acc(n.parents[1], g)


def sub(a, b):
    tape = _tape_of(a, b)
    if tape is None:
        return a - b
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("sub", (a, b), a.value - b.value)


def _vjp_sub(n, g):
    _acc(n.parents[0], g)
    _acc(n.parents[1], -g)


def neg(a):
    if not isinstance(a, Node):
        return -a
    return a.tape._push("neg", (a,), -a.value)


def _vjp_neg(n, g):
    _acc(n.parents[0], -g)


def scale(a, c: float):
    """Multiply by a python-float constant."""
    if not isinstance(a, Node):
        return c * a
    return a.tape._push("scale", (a,), c * a.value, ctx=c)


def _vjp_scale(n, g):
    _acc(n.parents[0], n.ctx * g)


def shift(a, c: float):
    """Add a python-float constant elementwise."""
    if not isinstance(a, Node):
        return a + c
    return a.tape._push("shift", (a,), a.value + c)


def _vjp_shift(n, g):
    _acc(n.parents[0], g)


def emul(a, b):
    """Elementwise product (same shape or scalar operands)."""
    tape = _tape_of(a, b)
    if tape is None:
        return a * b
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("emul", (a, b), a.value * b.value)


def _vjp_emul(n, g):
    a, b = n.parents
    _acc(a, g * b.value)
    _acc(b, g * a.value)


def ediv(a, b):
    """Elementwise quotient."""
    tape = _tape_of(a, b)
    if tape is None:
        return a / b
    a, b = _lift(tape, a), _lift(tape, b)
    return tape._push("ediv", (a, b), a.value / b.value)


def _vjp_ediv(n, g):
    a, b = n.parents
    _acc(a, g / b.value)
    _acc(b, -g * n.value / b.value)


def _matmul_shapes(av, bv):
    if np.ndim(av) != 2 or np.ndim(bv) != 2:
        raise linalg.ShapeError(f"matmul needs two matrices, got shapes "
                                f"{np.shape(av)} and {np.shape(bv)}")
    if av.shape[1] != bv.shape[0]:
        raise linalg.ShapeError(f"matmul inner dimensions differ: "
                                f"{av.shape} @ {bv.shape}")


def matmul(a, b):
    """Matrix product (2-D @ 2-D)."""
    tape = _tape_of(a, b)
    if tape is None:
        _matmul_shapes(a, b)
        return a @ b
    a, b = _lift(tape, a), _lift(tape, b)
    _matmul_shapes(a.value, b.value)
    return tape._push("matmul", (a, b), a.value @ b.value)


def _vjp_matmul(n, g):
    a, b = n.parents
    _acc(a, g @ b.value.T)
    _acc(b, a.value.T @ g)


def matvec(a, x):
    """Matrix-vector product (2-D @ 1-D)."""
    tape = _tape_of(a, x)
    if tape is None:
        if np.ndim(a) != 2 or np.ndim(x) != 1 or a.shape[1] != x.shape[0]:
            raise linalg.ShapeError(f"matvec shapes {np.shape(a)} @ {np.shape(x)}")
        return a @ x
    a, x = _lift(tape, a), _lift(tape, x)
    if np.ndim(a.value) != 2 or np.ndim(x.value) != 1 or a.value.shape[1] != x.value.shape[0]:
        raise linalg.ShapeError(f"matvec shapes {np.shape(a.value)} @ {np.shape(x.value)}")
    return tape._push("matvec", (a, x), a.value @ x.value)


def _vjp_matvec(n, g):
    a, x = n.parents
    _acc(a, np.outer(g, x.value))
    _acc(x, a.value.T @ g)


def affine(w, x, b):
    """Fused dense layer w @ x + b for 2-D w and 1-D x, b."""
    tape = _tape_of(w, x, b)
    if tape is None:
        return w @ x + b
    w, x, b = _lift(tape, w), _lift(tape, x), _lift(tape, b)
    return tape._push("affine", (w, x, b), w.value @ x.value + b.value)


def _vjp_affine(n, g):
    w, x, b = n.parents
    _acc(w, np.outer(g, x.value))
    _acc(x, w.value.T @ g)
    _acc(b, g)


def dense2(w1, b1, w2, b2, x):
    """Fused two-layer network w2 @ tanh(w1 @ x + b1) + b2."""
    tape = _tape_of(w1, b1, w2, b2, x)
    if tape is None:
        return w2 @ np.tanh(w1 @ x + b1) + b2
    w1, b1 = _lift(tape, w1), _lift(tape, b1)
    w2, b2, x = _lift(tape, w2), _lift(tape, b2), _lift(tape, x)
    hidden = np.tanh(w1.value @ x.value + b1.value)
    return tape._push("dense2", (w1, b1, w2, b2, x),
                      w2.value @ hidden + b2.value, ctx=hidden)


def _vjp_dense2(n, g):
    w1, b1, w2, b2, x = n.parents
    hidden = n.ctx
    _acc(w2, np.outer(g, hidden))
    _acc(b2, g)
    gu = (w2.value.T @ g) * (1.0 - hidden * hidden)
    _acc(w1, np.outer(gu, x.value))
    _acc(b1, gu)
    _acc(x, w1.value.T @ gu)


def outer(u, v):
    """Outer product of two vectors."""
    tape = _tape_of(u, v)
    if tape is None:
        return np.outer(u, v)
    u, v = _lift(tape, u), _lift(tape, v)
    return tape._push("outer", (u, v), np.outer(u.value, v.value))


def _vjp_outer(n, g):
    u, v = n.parents
    _acc(u, g @ v.value)
    _acc(v, g.T @ u.value)


def transpose(a):
    if not isinstance(a, Node):
        return a.T
    return a.tape._push("transpose", (a,), a.value.T)


def _vjp_transpose(n, g):
    _acc(n.parents[0], g.T)


def tanh(x):
    if not isinstance(x, Node):
        return np.tanh(x)
    y = np.tanh(x.value)
    return x.tape._push("tanh", (x,), y)


def _vjp_tanh(n, g):
    _acc(n.parents[0], g * (1.0 - n.value * n.value))


def sigmoid(x):
    if not isinstance(x, Node):
        return expit(x)
    return x.tape._push("sigmoid", (x,), expit(x.value))


def _vjp_sigmoid(n, g):
    _acc(n.parents[0], g * n.value * (1.0 - n.value))


def softplus(x):
    if not isinstance(x, Node):
        return np.logaddexp(0.0, x)
    return x.tape._push("softplus", (x,), np.logaddexp(0.0, x.value))


def _vjp_softplus(n, g):
    _acc(n.parents[0], g * expit(n.parents[0].value))


def softplus_shift(x, c: float):
    """Fused softplus(x) + c (positive covariance diagonals)."""
    if not isinstance(x, Node):
        return np.logaddexp(0.0, x) + c
    return x.tape._push("softplus_shift", (x,), np.logaddexp(0.0, x.value) + c)


def _vjp_softplus_shift(n, g):
    _acc(n.parents[0], g * expit(n.parents[0].value))


def sqrt(x):
    if not isinstance(x, Node):
        return np.sqrt(x)
    return x.tape._push("sqrt", (x,), np.sqrt(x.value))


def _vjp_sqrt(n, g):
    _acc(n.parents[0], g / (2.0 * n.value))


def atan2(y, x):
    tape = _tape_of(y, x)
    if tape is None:
        return np.arctan2(y, x)
    y, x = _lift(tape, y), _lift(tape, x)
    return tape._push("atan2", (y, x), np.arctan2(y.value, x.value))


def _vjp_atan2(n, g):
    y, x = n.parents
    d = x.value * x.value + y.value * y.value
    _acc(y, g * x.value / d)
    _acc(x, -g * y.value / d)


def concat(parts):
    """Concatenate 1-D vectors."""
    parts = list(parts)
    tape = _tape_of(*parts)
    if tape is None:
        return np.concatenate(parts)
    parts = [_lift(tape, p) for p in parts]
    value = np.concatenate([p.value for p in parts])
    return tape._push("concat", tuple(parts), value)


def _vjp_concat(n, g):
    off = 0
    for p in n.parents:
        size = p.value.shape[0]
        _acc(p, g[off:off + size])
        off += size


def vector(scalars):
    """Assemble a 1-D vector from scalar entries."""
    scalars = list(scalars)
    tape = _tape_of(*scalars)
    if tape is None:
        return np.array(scalars, dtype=float)
    scalars = [_lift(tape, s) for s in scalars]
    value = np.array([s.value for s in scalars], dtype=float)
    return tape._push("vector", tuple(scalars), value)


def _vjp_vector(n, g):
    for i, p in enumerate(n.parents):
        _acc(p, float(g[i]))


def item(v, i: int):
    """Scalar entry of a vector."""
    if not isinstance(v, Node):
        return float(v[i])
    return v.tape._push("item", (v,), float(v.value[i]), ctx=i)


def _vjp_item(n, g):
    v = n.parents[0]
    e = np.zeros_like(v.value)
    e[n.ctx] = g
    _acc(v, e)


def maxnorm(x):
    """Scale a vector by its largest absolute entry, guarded below EPS_NORM."""
    if not isinstance(x, Node):
        m = float(np.abs(x).max())
        return x / (m if m > EPS_NORM else EPS_NORM)
    v = x.value
    m = float(np.abs(v).max())
    if m > EPS_NORM:
        j = int(np.abs(v).argmax())
        ctx = (j, m, 1.0 if v[j] > 0 else -1.0)
        y = v / m
    else:
        ctx = (None, EPS_NORM, 0.0)
        y = v / EPS_NORM
    return x.tape._push("maxnorm", (x,), y, ctx=ctx)


def _vjp_maxnorm(n, g):
    j, m, sign = n.ctx
    gv = g / m
    if j is not None:
        gv[j] -= sign * float(g @ n.value) / m
    _acc(n.parents[0], gv)


def _add_diag_kernel(m, v):
    out = m.copy()
    out.ravel()[:: out.shape[0] + 1] += v
    return out


def add_diag(m, v):
    """m + diag(v) for square m and vector v."""
    tape = _tape_of(m, v)
    if tape is None:
        return _add_diag_kernel(m, v)
    m, v = _lift(tape, m), _lift(tape, v)
    return tape._push("add_diag", (m, v), _add_diag_kernel(m.value, v.value))


def _vjp_add_diag(n, g):
    m, v = n.parents
    _acc(m, g)
    _acc(v, np.diagonal(g).copy())


def sym(m):
    """Symmetric part (m + m.T) / 2."""
    if not isinstance(m, Node):
        return 0.5 * (m + m.T)
    return m.tape._push("sym", (m,), 0.5 * (m.value + m.value.T))


def _vjp_sym(n, g):
    _acc(n.parents[0], 0.5 * (g + g.T))


def solve_spd(a, b, name: str = "matrix"):
    """Solve a @ x = b for SPD a (jitter ladder on factorization failure).

    Differentiable: the adjoint reuses the cached factorization for one
    extra solve, then forms the matrix adjoint from the solution.
    """
    tape = _tape_of(a, b)
    if tape is None:
        return linalg.solve_spd(a, b, name)
    a, b = _lift(tape, a), _lift(tape, b)
    factor = linalg.spd_factor(a.value, name)
    x = cho_solve(factor, b.value, check_finite=False)
    return tape._push("solve", (a, b), x, ctx=factor)


def _vjp_solve(n, g):
    a, b = n.parents
    s = cho_solve(n.ctx, g, check_finite=False)
    _acc(b, s)
    x = n.value
    _acc(a, -np.outer(s, x) if x.ndim == 1 else -(s @ x.T))


def mix(coeffs, mats):
    """Linear combination sum_i coeffs[i] * mats[i] for a constant (d, n, m) stack."""
    mats = np.asarray(mats, dtype=float)
    if not isinstance(coeffs, Node):
        return np.tensordot(coeffs, mats, axes=([0], [0]))
    value = np.tensordot(coeffs.value, mats, axes=([0], [0]))
    return coeffs.tape._push("mix", (coeffs,), value, ctx=mats)


def _vjp_mix(n, g):
    _acc(n.parents[0], np.tensordot(n.ctx, g, axes=([1, 2], [0, 1])))


def vsum(x):
    """Sum of entries, as a scalar."""
    if not isinstance(x, Node):
        return float(np.sum(x))
    return x.tape._push("vsum", (x,), float(np.sum(x.value)))


def _vjp_vsum(n, g):
    p = n.parents[0]
    _acc(p, np.full_like(p.value, g))


def sumsq(x):
    """Sum of squared entries, as a scalar."""
    if not isinstance(x, Node):
        return float(np.sum(np.asarray(x) ** 2))
    v = x.value
    return x.tape._push("sumsq", (x,), float(np.sum(v * v)))


def _vjp_sumsq(n, g):
    p = n.parents[0]
    _acc(p, (2.0 * g) * p.value)


_VJPS = {
    "add": _vjp_add, "sub": _vjp_sub, "neg": _vjp_neg, "scale": _vjp_scale,
    "shift": _vjp_shift, "emul": _vjp_emul, "ediv": _vjp_ediv,
    "matmul": _vjp_matmul, "matvec": _vjp_matvec, "affine": _vjp_affine,
    "dense2": _vjp_dense2, "outer": _vjp_outer,
    "transpose": _vjp_transpose, "tanh": _vjp_tanh, "sigmoid": _vjp_sigmoid,
    "softplus": _vjp_softplus, "softplus_shift": _vjp_softplus_shift,
    "sqrt": _vjp_sqrt, "atan2": _vjp_atan2,
    "concat": _vjp_concat, "vector": _vjp_vector, "item": _vjp_item,
    "maxnorm": _vjp_maxnorm, "add_diag": _vjp_add_diag, "sym": _vjp_sym,
    "solve": _vjp_solve, "mix": _vjp_mix, "vsum": _vjp_vsum, "sumsq": _vjp_sumsq,
}


def value_of(x):
    """Raw numpy value of a node or passthrough for raw inputs."""
    return x.value if isinstance(x, Node) else x


def grad_check(build, params, step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build(values)`` must evaluate the scalar objective from a list of
    arrays; it receives Node leaves for the analytic pass and the raw
    (temporarily perturbed) arrays for the difference quotients. Non-finite
    values anywhere are reported as an infinite error.
    """
    params = [np.asarray(p, dtype=float) for p in params]
    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    root = build(leaves)
    grads = tape.backward(root)
    analytic = [np.atleast_1d(np.asarray(grads[leaf], dtype=float)) for leaf in leaves]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = build(params)
            flat[i] = orig - step
            f_minus = build(params)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            a = float(gflat[i])
            if not (np.isfinite(fd) and np.isfinite(a)):
                return float("inf")
            rel = abs(a - fd) / (abs(a) + abs(fd) + 1e-12)
            if rel > worst:
                worst = rel
    return worst
