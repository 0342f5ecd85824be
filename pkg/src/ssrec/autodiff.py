"""Reverse-mode differentiation over a small, closed set of numpy primitives.

A :class:`Tape` evaluates primitives eagerly. When recording, each result
also stores its inputs and a vector-Jacobian rule; :meth:`Tape.backward`
walks the records in reverse. The same primitive code runs with recording
off, so recorded and plain forward passes agree bit for bit.

Primitives: matmul, add, mul, sigmoid, softmax, leaky_relu, sqnorm,
logsumexp, gather, contract, normalize, concat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


class ShapeError(ValueError):
    pass


class Var:
    __slots__ = ("value", "name", "node")

    def __init__(self, value, name=None, node=None):
        self.value = value
        self.name = name
        self.node = node

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, name={self.name!r})"


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Var
    vjp: object


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _parse(subscripts):
    lhs, out = subscripts.replace(" ", "").split("->")
    a, b = lhs.split(",")
    for s in (a, b):
        if len(set(s)) != len(s):
            raise ShapeError(f"contract: repeated index in {s!r}")
    return a, b, out


def _einsum_grad(g, out_sub, other, other_sub, target_sub, target_shape):
    keep = "".join(c for c in target_sub if c in out_sub or c in other_sub)
    r = np.einsum(f"{out_sub},{other_sub}->{keep}", g, other, optimize=True)
    if keep != target_sub:
        expand = tuple(slice(None) if c in keep else None for c in target_sub)
        r = np.broadcast_to(r[expand], target_shape)
    return np.array(r, dtype=np.float64)


class Tape:
    def __init__(self, record=True, track_kinks=False):
        self.record = record
        self.nodes: list[Node] = []
        self.params: dict[str, Var] = {}
        # sign pattern of every piecewise-linear input, for kink detection
        self.kinks: list | None = [] if track_kinks else None

    # leaves -------------------------------------------------------------
    def param(self, name, value):
        v = Var(np.asarray(value, dtype=np.float64), name=name)
        self.params[name] = v
        return v

    def const(self, value):
        return Var(np.asarray(value, dtype=np.float64))

    def _wrap(self, x):
        return x if isinstance(x, Var) else self.const(x)

    def _emit(self, op, inputs, value, vjp):
        out = Var(value)
        if self.record:
            out.node = Node(op, inputs, out, vjp)
            self.nodes.append(out.node)
        return out

    # primitives ---------------------------------------------------------
    def matmul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        A, Bv = a.value, b.value
        if A.ndim < 1 or Bv.ndim != 2 or A.shape[-1] != Bv.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {A.shape} by {Bv.shape}")

        def vjp(g):
            ga = g @ Bv.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return self._emit("matmul", (a, b), A @ Bv, vjp)

    def add(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        try:
            val = a.value + b.value
        except ValueError as exc:
            raise ShapeError(f"add: {a.shape} and {b.shape} do not broadcast") from exc
        sa, sb = a.shape, b.shape
        return self._emit("add", (a, b), val, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def mul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        A, Bv = a.value, b.value
        try:
            val = A * Bv
        except ValueError as exc:
            raise ShapeError(f"mul: {a.shape} and {b.shape} do not broadcast") from exc
        return self._emit("mul", (a, b), val,
                          lambda g: (_unbroadcast(g * Bv, A.shape), _unbroadcast(g * A, Bv.shape)))

    def sigmoid(self, x):
        x = self._wrap(x)
        s = _sigmoid(x.value)
        return self._emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))

    def softmax(self, x, axis=-1):
        x = self._wrap(x)
        s = _softmax(x.value, axis)

        def vjp(g):
            return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

        return self._emit("softmax", (x,), s, vjp)

    def leaky_relu(self, x, slope=0.01):
        x = self._wrap(x)
        X = x.value
        # right derivative at 0
        pos = X >= 0
        if self.kinks is not None:
            self.kinks.append(pos)
        return self._emit("leaky_relu", (x,), np.where(pos, X, slope * X),
                          lambda g: (np.where(pos, g, slope * g),))

    def sqnorm(self, x, axis=None):
        """Sum of squares over ``axis`` (all axes when None)."""
        x = self._wrap(x)
        X = x.value
        val = np.sum(X * X, axis=axis)

        def vjp(g):
            g = np.asarray(g)
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (2.0 * X * g,)

        return self._emit("sqnorm", (x,), val, vjp)

    def logsumexp(self, x, axis=-1):
        x = self._wrap(x)
        X = x.value
        mx = X.max(axis=axis, keepdims=True)
        val = np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(X - mx), axis=axis))
        return self._emit("logsumexp", (x,), val,
                          lambda g: (np.expand_dims(g, axis) * _softmax(X, axis),))

    def gather(self, x, index):
        """``x[index]``: integer array on axis 0, or a tuple of arrays for leading axes."""
        x = self._wrap(x)
        X = x.value
        key = tuple(np.asarray(i, dtype=np.int64) for i in index) if isinstance(index, tuple) \
            else np.asarray(index, dtype=np.int64)
        try:
            val = X[key]
        except IndexError as exc:
            raise ShapeError(f"gather: {exc}") from exc

        def vjp(g):
            gx = np.zeros_like(X)
            np.add.at(gx, key, g)
            return (gx,)

        return self._emit("gather", (x,), val, vjp)

    def contract(self, subscripts, a, b):
        """Two-operand einsum (no repeated index within an operand)."""
        a, b = self._wrap(a), self._wrap(b)
        sa, sb, so = _parse(subscripts)
        try:
            val = np.einsum(subscripts, a.value, b.value, optimize=True)
        except ValueError as exc:
            raise ShapeError(f"contract {subscripts!r}: {a.shape}, {b.shape}: {exc}") from exc
        A, Bv = a.value, b.value

        def vjp(g):
            return (_einsum_grad(g, so, Bv, sb, sa, A.shape),
                    _einsum_grad(g, so, A, sa, sb, Bv.shape))

        return self._emit("contract", (a, b), np.asarray(val, dtype=np.float64), vjp)

    def normalize(self, x, axis=-1):
        """Unit-length slices along ``axis``; all-zero slices stay zero."""
        x = self._wrap(x)
        X = x.value
        norm = np.sqrt(np.sum(X * X, axis=axis, keepdims=True))
        safe = np.where(norm > 0, norm, 1.0)
        y = np.where(norm > 0, X / safe, 0.0)

        def vjp(g):
            proj = np.sum(g * y, axis=axis, keepdims=True)
            return (np.where(norm > 0, (g - y * proj) / safe, 0.0),)

        return self._emit("normalize", (x,), y, vjp)

    def concat(self, xs, axis=0, new_axis=False):
        """Join along ``axis``; ``new_axis=True`` stacks along a fresh axis."""
        xs = [self._wrap(x) for x in xs]
        vals = [x.value for x in xs]
        try:
            val = np.stack(vals, axis=axis) if new_axis else np.concatenate(vals, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat: {[x.shape for x in xs]} along axis {axis}: {exc}") from exc
        if new_axis:
            def vjp(g):
                return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))
        else:
            cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

            def vjp(g):
                return tuple(np.split(g, cuts, axis=axis))

        return self._emit("concat", tuple(xs), val, vjp)

    # composites (built only from primitives) ---------------------------
    def sum(self, x):
        x = self._wrap(x)
        letters = "abcdefgh"[: x.value.ndim]
        flat = self.contract(f"{letters},{letters}->", x, np.ones(x.shape))
        return flat

    def mean(self, x):
        x = self._wrap(x)
        return self.mul(self.sum(x), 1.0 / max(x.value.size, 1))

    def sub(self, a, b):
        return self.add(a, self.mul(b, -1.0))

    # reverse pass -------------------------------------------------------
    def backward(self, out: Var, seed=None) -> dict:
        """Gradients of ``out`` w.r.t. every parameter leaf, keyed by name."""
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if seed is None:
            if np.size(out.value) != 1:
                raise ShapeError("backward: non-scalar output needs an explicit seed")
            seed = np.ones_like(out.value)
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != np.shape(out.value):
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {np.shape(out.value)}")
        grads = {id(out): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if inp.node is None and inp.name is None:
                    continue  # constant
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        return {name: np.asarray(grads.get(id(v), np.zeros_like(v.value)), dtype=np.float64)
                .reshape(v.value.shape)
                for name, v in self.params.items()}


def forward_record(program, params: dict, inputs=None, record=True, track_kinks=False):
    """Run ``program(tape, param_vars, inputs) -> Var`` and return ``(output, tape)``."""
    tape = Tape(record=record, track_kinks=track_kinks)
    pv = {name: tape.param(name, value) for name, value in params.items()}
    out = program(tape, pv, inputs)
    return out, tape


def backward(tape: Tape, out: Var, seed=None) -> dict:
    return tape.backward(out, seed)


def value_and_grad(program, params, inputs=None):
    out, tape = forward_record(program, params, inputs)
    return float(out.value), tape.backward(out)


def grad_check(program, params: dict, inputs=None, eps=1e-4, tol=1e-4, n_coords=200, seed=0,
               kink_retries=3):
    """Compare analytic gradients with central differences on sampled coordinates.

    A tensor passes when every sampled coordinate has
    ``|ga - gfd| / max(1e-8, |ga| + |gfd|) <= tol``. The norm-wise error
    ``||ga - gfd|| / (||ga|| + ||gfd||)`` over the same coordinates is
    reported too. When the two probes fall on different sides of a leaky-ReLU
    kink the step is cut by 10 (up to ``kink_retries`` times); a coordinate
    still straddling a kink is non-differentiable there and is counted in
    ``n_kink_skipped`` instead.
    """
    rng = np.random.default_rng(seed)
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    loss, grads = value_and_grad(program, params, inputs)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss} at the base point")

    def f(p):
        out, tape = forward_record(program, p, inputs, record=False, track_kinks=True)
        return float(out.value), tape.kinks

    def same_side(a, b):
        return all(np.array_equal(x, y) for x, y in zip(a, b))

    report = {}
    for name, value in params.items():
        size = value.size
        coords = np.arange(size) if size <= n_coords else rng.choice(size, n_coords, replace=False)
        worst = 0.0
        worst_at = None
        skipped = 0
        ga_all, fd_all = [], []
        for flat in coords:
            idx = np.unravel_index(int(flat), value.shape)
            orig = value[idx]
            h = eps
            for _ in range(kink_retries + 1):
                value[idx] = orig + h
                fp, kp = f(params)
                value[idx] = orig - h
                fm, km = f(params)
                value[idx] = orig
                if same_side(kp, km):
                    break
                h /= 10.0
            else:
                skipped += 1
                continue
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite loss while probing {name}{list(map(int, idx))}")
            gfd = (fp - fm) / (2 * h)
            ga = grads[name][idx]
            ga_all.append(ga)
            fd_all.append(gfd)
            rel = abs(ga - gfd) / max(1e-8, abs(ga) + abs(gfd))
            if rel > worst:
                worst, worst_at = rel, [int(i) for i in idx]
        checked = len(coords) - skipped
        ga_all, fd_all = np.array(ga_all), np.array(fd_all)
        scale = np.linalg.norm(ga_all) + np.linalg.norm(fd_all)
        rel_t = float(np.linalg.norm(ga_all - fd_all) / scale) if scale > 0 else 0.0
        report[name] = {"max_rel_error": float(worst), "worst_coord": worst_at,
                        "norm_rel_error": rel_t, "n_coords": int(checked),
                        "n_kink_skipped": int(skipped), "passed": bool(worst <= tol and checked > 0)}
    return {"loss": loss, "eps": eps, "tol": tol,
            "passed": all(r["passed"] for r in report.values()), "tensors": report}
