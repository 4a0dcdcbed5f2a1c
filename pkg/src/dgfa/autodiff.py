"""A small reverse-mode differentiation engine over dense float64 arrays.

Only the primitives the segmentation network needs are provided. Shapes are
explicit: the only broadcast is a bias row added over leading axes.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict

import numpy as np
from scipy import sparse


class ShapeError(ValueError):
    pass


_dtype = np.float64


@contextlib.contextmanager
def precision(dtype):
    """Temporarily build new tensors in ``dtype`` (used by the finite-difference oracle)."""
    global _dtype
    saved, _dtype = _dtype, dtype
    try:
        yield
    finally:
        _dtype = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# Non-smooth primitives report their branch choices here while a recorder is
# active; grad_check uses it to skip elements whose perturbation crosses a kink.
_branch_log: list | None = None


@contextlib.contextmanager
def record_branches():
    global _branch_log
    saved, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = saved


def _log_branch(arr: np.ndarray):
    if _branch_log is not None:
        _branch_log.append(np.ascontiguousarray(arr).tobytes())


def _node(data, parents, backward_fn, op) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, needs, parents if needs else (), backward_fn if needs else None, op)


def _check_finite(*xs: Tensor):
    for x in xs:
        if not np.all(np.isfinite(x.data)):
            raise FloatingPointError("non-finite input")


class Tape:
    """Reverse topological order of the nodes reachable from a scalar output."""

    def __init__(self, root: Tensor):
        self.root = root
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.nodes = order[::-1]

    def __len__(self):
        return len(self.nodes)

    def backward(self):
        grads = {id(self.root): np.ones_like(self.root.data)}
        for node in self.nodes:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        return self


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every leaf's ``.grad``."""
    if loss.data.size != 1:
        raise ShapeError("backward needs a scalar output")
    return Tape(loss).backward()


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis of x (any number of leading axes)."""
    if x.shape[-1] != w.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: x {x.shape} vs w {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} vs w {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    lead = x.data.reshape(-1, x.shape[-1])

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ w.data.T) if x.requires_grad else None
        gw = lead.T @ g2 if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, back, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def concat(xs, axis: int = -1) -> Tensor:
    xs = list(xs)
    ax = axis % xs[0].data.ndim
    for x in xs[1:]:
        if x.data.ndim != xs[0].data.ndim or any(
            s != t for d, (s, t) in enumerate(zip(x.shape, xs[0].shape)) if d != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return _node(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def _scatter_rows(flat_idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    # sum rows of `values` into n buckets; a sparse product beats np.add.at here
    m = len(flat_idx)
    op = sparse.csr_matrix((np.ones(m), (flat_idx, np.arange(m))), shape=(n, m))
    return np.asarray(op @ values)


def neighbor_gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of a (n, c) tensor gathered by an integer array of any shape."""
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"neighbor_gather expects (n, c), got {x.shape}")
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"gather index out of range [0, {n})")
    flat = index.ravel()

    def back(g):
        return (_scatter_rows(flat, g.reshape(len(flat), -1), n),)

    return _node(x.data[index], (x,), back, "gather")


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along ``axis``; the gradient goes to the first maximal element."""
    ax = axis % x.data.ndim
    arg = np.argmax(x.data, axis=ax)
    _log_branch(arg)
    arg_k = np.expand_dims(arg, ax)
    out = np.take_along_axis(x.data, arg_k, axis=ax).squeeze(ax)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg_k, np.expand_dims(g, ax), axis=ax)
        return (gx,)

    return _node(out, (x,), back, "reduce_max")


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(x.data.sum(axis=axis), (x,), back, "reduce_sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (x,), back, "softmax")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels out of range [0, {c})")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    _check_finite(logits)
    logp = log_softmax(logits.data)
    rows = np.arange(len(labels))
    nll = -logp[rows, labels]
    norm = 1.0 / len(labels) if reduction == "mean" else 1.0
    loss = nll.sum() * norm

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (norm * float(g)),)

    return _node(np.asarray(loss), (logits,), back, "softmax_cross_entropy")


def idw_interpolate(coarse: Tensor, weights: np.ndarray, indices: np.ndarray) -> Tensor:
    """fine[i] = sum_j weights[i, j] * coarse[indices[i, j]]."""
    weights = np.asarray(weights, dtype=np.float64)
    indices = np.asarray(indices, dtype=np.int64)
    if weights.shape != indices.shape or coarse.data.ndim != 2:
        raise ShapeError(f"idw: weights {weights.shape}, indices {indices.shape}, coarse {coarse.shape}")
    n = coarse.shape[0]
    out = np.einsum("ij,ijc->ic", weights, coarse.data[indices])
    flat = indices.ravel()

    def back(g):
        contrib = (weights[:, :, None] * g[:, None, :]).reshape(len(flat), -1)
        return (_scatter_rows(flat, contrib, n),)

    return _node(out, (coarse,), back, "idw_interpolate")


# ------------------------------------------------------------- parameter store


class ParamStore:
    """Named parameters with gradients and optimizer slots."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.state: dict[str, dict[str, np.ndarray]] = {}
        self.step = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, op=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in self.params.items()}

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_dict(self, values: dict):
        missing = set(self.params) - set(values)
        extra = set(values) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in values.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} vs {self.params[k].shape}")
            self.params[k].data = v.copy()

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())


def grad_check(f, params: ParamStore, eps: float = 1e-6, skip_kinks: bool = True, names=None,
               fd_dtype=np.longdouble):
    """Largest elementwise relative error between tape and central-difference gradients.

    ``f`` rebuilds the scalar output from the current parameter values.
    Relative error is |a-b| / max(|a|, |b|, 1e-8). With ``skip_kinks``, an
    element is skipped when the +/-eps perturbation changes any relu sign or
    max argument. The perturbed forward passes run in ``fd_dtype`` so that
    the difference quotient is not swamped by float64 rounding of the output.
    Returns ``(max_error, n_checked, n_skipped)``.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-8, 1e-4]")
    params.zero_grad()
    with record_branches() as base_branches:
        out = f()
    backward(out)
    analytic = params.grads()
    names = params.names() if names is None else list(names)

    def probe():
        saved = {k: t.data for k, t in params}
        try:
            for _, t in params:
                t.data = t.data.astype(fd_dtype)
            with record_branches() as br, precision(fd_dtype):
                val = f().data.reshape(())
        finally:
            for k, t in params:
                t.data = saved[k]
        if not np.isfinite(val):
            raise FloatingPointError("non-finite value during finite differences")
        return val, br

    worst, checked, skipped = 0.0, 0, 0
    for name in names:
        p = params[name]
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = flat[i]
            fp, bp = probe()
            flat[i] = orig - eps
            down = flat[i]
            fm, bm = probe()
            flat[i] = orig
            if skip_kinks and (bp != base_branches or bm != base_branches):
                skipped += 1
                continue
            # divide by the step actually stored, not the nominal 2*eps
            num = float((fp - fm) / (np.longdouble(up) - np.longdouble(down)))
            err = abs(num - ga[i]) / max(abs(num), abs(ga[i]), 1e-8)
            worst = max(worst, err)
            checked += 1
    params.zero_grad()
    return worst, checked, skipped
