"""Tape-based reverse-mode differentiation for the signature model.

The node set is closed on purpose: dense affine blocks, batch
normalization, a handful of elementwise maps, row normalization, matrix
products, full reductions, and the reparameterized Poisson draw. A tape
records one forward execution in topological order; ``Tape.replay``
recomputes every node from the current parameter contents (reusing the
recorded noise), which is what the finite-difference checker relies on.

Shapes are fixed at record time except for the batch dimension, all
arithmetic is float64, and a tape is single-threaded by construction.
"""

from __future__ import annotations

import numpy as np

from .kernels import poisson_relax

__all__ = [
    "ShapeError",
    "Parameter",
    "BatchNormState",
    "Tape",
    "finite_difference_check",
    "sigmoid",
    "softplus",
    "softplus_inv",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for a tape operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inv(y):
    """Inverse of softplus for y > 0."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise ValueError("softplus_inv: arguments must be positive")
    return np.log(np.expm1(y))


class Parameter:
    """A trainable dense array with a same-shape gradient accumulator."""

    def __init__(self, value, name=""):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.value.shape})"


class BatchNormState:
    """Running statistics for one batch-normalization layer."""

    def __init__(self, width, momentum=0.9, eps=1e-5):
        self.running_mean = np.zeros(width, dtype=np.float64)
        self.running_var = np.ones(width, dtype=np.float64)
        self.momentum = float(momentum)
        self.eps = float(eps)

    def copy(self):
        other = BatchNormState(len(self.running_mean), self.momentum, self.eps)
        other.running_mean = self.running_mean.copy()
        other.running_var = self.running_var.copy()
        return other


class _Node:
    __slots__ = ("op", "inputs", "value", "meta", "grad", "param")

    def __init__(self, op, inputs, value, meta=None, param=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.meta = meta if meta is not None else {}
        self.grad = None
        self.param = param


class Tape:
    """Records one forward pass; node ids are indices in creation order."""

    def __init__(self):
        self.nodes = []

    # -- node constructors ------------------------------------------------

    def _append(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def _val(self, nid):
        return self.nodes[nid].value

    def value(self, nid):
        return self.nodes[nid].value

    def adjoint(self, nid):
        return self.nodes[nid].grad

    def constant(self, value):
        arr = np.array(value, dtype=np.float64)
        return self._append(_Node("const", (), arr, {"value": arr}))

    def parameter(self, param):
        return self._append(_Node("param", (), np.asarray(param.value), param=param))

    def affine(self, x, w, b):
        xv, wv, bv = self._val(x), self._val(w), self._val(b)
        if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0] or bv.shape != (wv.shape[1],):
            raise ShapeError("affine", xv.shape, wv.shape, bv.shape)
        return self._record("affine", (x, w, b))

    def matmul(self, a, b):
        av, bv = self._val(a), self._val(b)
        if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", av.shape, bv.shape)
        return self._record("matmul", (a, b))

    def _elementwise_pair(self, op, a, b):
        av, bv = self._val(a), self._val(b)
        if av.shape != bv.shape:
            raise ShapeError(op, av.shape, bv.shape)
        return self._record(op, (a, b))

    def add(self, a, b):
        return self._elementwise_pair("add", a, b)

    def sub(self, a, b):
        return self._elementwise_pair("sub", a, b)

    def mul(self, a, b):
        return self._elementwise_pair("mul", a, b)

    def div(self, a, b):
        return self._elementwise_pair("div", a, b)

    def scale(self, x, c):
        return self._record("scale", (x,), {"c": float(c)})

    def add_scalar(self, x, c):
        return self._record("add_scalar", (x,), {"c": float(c)})

    def relu(self, x):
        return self._record("relu", (x,))

    def softplus(self, x):
        return self._record("softplus", (x,))

    def exp(self, x):
        return self._record("exp", (x,))

    def log(self, x):
        if np.any(self._val(x) <= 0.0):
            raise ValueError("log: arguments must be positive")
        return self._record("log", (x,))

    def row_normalize(self, x, eps=1e-12):
        if self._val(x).ndim != 2:
            raise ShapeError("row_normalize", self._val(x).shape)
        return self._record("row_normalize", (x,), {"eps": float(eps)})

    def batchnorm(self, x, gamma, beta, state, training=True, update_running=True):
        xv, gv, bv = self._val(x), self._val(gamma), self._val(beta)
        width = xv.shape[1] if xv.ndim == 2 else -1
        if xv.ndim != 2 or gv.shape != (width,) or bv.shape != (width,):
            raise ShapeError("batchnorm", xv.shape, gv.shape, bv.shape)
        meta = {"state": state, "training": bool(training), "update_running": bool(update_running)}
        return self._record("batchnorm", (x, gamma, beta), meta)

    def poisson_sample(self, rates, draws, tau, relaxed=False):
        rv = self._val(rates)
        draws = np.ascontiguousarray(draws, dtype=np.float64)
        if draws.ndim != 2 or draws.shape[0] != rv.size or draws.shape[1] < 1:
            raise ShapeError("poisson_sample", rv.shape, draws.shape)
        if tau <= 0.0:
            raise ValueError("poisson_sample: relaxation temperature must be positive")
        meta = {"draws": draws, "tau": float(tau), "relaxed": bool(relaxed)}
        return self._record("poisson_sample", (rates,), meta)

    def sum(self, x):
        return self._record("sum", (x,))

    def _record(self, op, inputs, meta=None):
        node = _Node(op, tuple(inputs), None, meta)
        node.value = self._forward(node, record=True)
        return self._append(node)

    # -- forward evaluation (shared by record and replay) ------------------

    def _forward(self, node, record):
        op = node.op
        vals = [self.nodes[i].value for i in node.inputs]
        if op == "const":
            return node.meta["value"]
        if op == "param":
            return np.asarray(node.param.value, dtype=np.float64)
        if op == "affine":
            return vals[0] @ vals[1] + vals[2]
        if op == "matmul":
            return vals[0] @ vals[1]
        if op == "add":
            return vals[0] + vals[1]
        if op == "sub":
            return vals[0] - vals[1]
        if op == "mul":
            return vals[0] * vals[1]
        if op == "div":
            return vals[0] / vals[1]
        if op == "scale":
            return vals[0] * node.meta["c"]
        if op == "add_scalar":
            return vals[0] + node.meta["c"]
        if op == "relu":
            return np.maximum(vals[0], 0.0)
        if op == "softplus":
            return softplus(vals[0])
        if op == "exp":
            return np.exp(vals[0])
        if op == "log":
            return np.log(vals[0])
        if op == "row_normalize":
            s = vals[0].sum(axis=1) + node.meta["eps"]
            node.meta["rowsum"] = s
            return vals[0] / s[:, None]
        if op == "batchnorm":
            return self._forward_batchnorm(node, vals, record)
        if op == "poisson_sample":
            return self._forward_poisson(node, vals)
        if op == "sum":
            return np.asarray(vals[0].sum())
        raise AssertionError(f"unknown op {op}")

    def _forward_batchnorm(self, node, vals, record):
        x, gamma, beta = vals
        state = node.meta["state"]
        if node.meta["training"]:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            if record and node.meta["update_running"]:
                m = state.momentum
                state.running_mean = m * state.running_mean + (1.0 - m) * mean
                state.running_var = m * state.running_var + (1.0 - m) * var
        else:
            mean = state.running_mean
            var = state.running_var
        invstd = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mean) * invstd
        node.meta["xhat"] = xhat
        node.meta["invstd"] = invstd
        return gamma * xhat + beta

    def _forward_poisson(self, node, vals):
        rates = vals[0]
        if np.any(rates <= 0.0):
            raise ValueError("poisson_sample: rates must be strictly positive")
        flat = np.ascontiguousarray(rates.ravel())
        hard, soft, dsoft, truncated = poisson_relax(flat, node.meta["draws"], node.meta["tau"])
        node.meta["dsoft"] = dsoft.reshape(rates.shape)
        node.meta["truncated"] = truncated
        out = soft if node.meta["relaxed"] else hard
        return out.reshape(rates.shape)

    def replay(self):
        """Recompute all node values from current parameter contents.

        Recorded noise and running statistics are reused; batch-norm
        running statistics are never updated during replay.
        """
        for node in self.nodes:
            node.value = self._forward(node, record=False)
        return self.nodes[-1].value

    # -- reverse pass ------------------------------------------------------

    def backward(self, loss):
        """Accumulate d(loss)/d(parameter) into every tape Parameter."""
        loss_node = self.nodes[loss]
        if loss_node.value.ndim != 0:
            raise ShapeError("backward: loss must be scalar", loss_node.value.shape)
        for node in self.nodes:
            node.grad = None
        loss_node.grad = np.ones(())
        for node in reversed(self.nodes):
            if node.grad is not None:
                self._vjp(node)
        for node in self.nodes:
            if node.op == "param" and node.grad is not None:
                node.param.grad += node.grad

    def _acc(self, nid, contribution):
        node = self.nodes[nid]
        node.grad = contribution if node.grad is None else node.grad + contribution

    def _vjp(self, node):
        op, g = node.op, node.grad
        if op in ("const", "param"):
            return
        vals = [self.nodes[i].value for i in node.inputs]
        if op == "affine":
            x, w, _ = vals
            self._acc(node.inputs[0], g @ w.T)
            self._acc(node.inputs[1], x.T @ g)
            self._acc(node.inputs[2], g.sum(axis=0))
        elif op == "matmul":
            a, b = vals
            self._acc(node.inputs[0], g @ b.T)
            self._acc(node.inputs[1], a.T @ g)
        elif op == "add":
            self._acc(node.inputs[0], g)
            self._acc(node.inputs[1], g)
        elif op == "sub":
            self._acc(node.inputs[0], g)
            self._acc(node.inputs[1], -g)
        elif op == "mul":
            self._acc(node.inputs[0], g * vals[1])
            self._acc(node.inputs[1], g * vals[0])
        elif op == "div":
            self._acc(node.inputs[0], g / vals[1])
            self._acc(node.inputs[1], -g * node.value / vals[1])
        elif op == "scale":
            self._acc(node.inputs[0], g * node.meta["c"])
        elif op == "add_scalar":
            self._acc(node.inputs[0], g)
        elif op == "relu":
            self._acc(node.inputs[0], g * (vals[0] > 0.0))
        elif op == "softplus":
            self._acc(node.inputs[0], g * sigmoid(vals[0]))
        elif op == "exp":
            self._acc(node.inputs[0], g * node.value)
        elif op == "log":
            self._acc(node.inputs[0], g / vals[0])
        elif op == "row_normalize":
            s = node.meta["rowsum"]
            inner = (g * node.value).sum(axis=1, keepdims=True)
            self._acc(node.inputs[0], (g - inner) / s[:, None])
        elif op == "batchnorm":
            self._vjp_batchnorm(node, vals)
        elif op == "poisson_sample":
            self._acc(node.inputs[0], g * node.meta["dsoft"])
        elif op == "sum":
            self._acc(node.inputs[0], np.full(vals[0].shape, float(g)))
        else:
            raise AssertionError(f"unknown op {op}")

    def _vjp_batchnorm(self, node, vals):
        g = node.grad
        gamma = vals[1]
        xhat, invstd = node.meta["xhat"], node.meta["invstd"]
        self._acc(node.inputs[1], (g * xhat).sum(axis=0))
        self._acc(node.inputs[2], g.sum(axis=0))
        gx_hat = g * gamma
        if node.meta["training"]:
            n = xhat.shape[0]
            term = n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0)
            self._acc(node.inputs[0], invstd / n * term)
        else:
            self._acc(node.inputs[0], gx_hat * invstd)


def finite_difference_check(tape, loss, param, step=1e-5):
    """Max relative deviation between tape gradients and central differences.

    The analytic gradient comes from one backward pass; the numeric one
    perturbs each coordinate of ``param`` by ±step and replays the tape
    (fixed recorded noise). Deviation per coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if step <= 0.0:
        raise ValueError("finite_difference_check: step must be positive")
    if tape.nodes[loss].value.ndim != 0:
        raise ShapeError("finite_difference_check: loss must be scalar", tape.nodes[loss].value.shape)

    tape_params = {id(n.param): n.param for n in tape.nodes if n.op == "param"}
    saved = {key: p.grad.copy() for key, p in tape_params.items()}
    for p in tape_params.values():
        p.zero_grad()
    tape.backward(loss)
    analytic = param.grad.copy().ravel()
    for key, p in tape_params.items():
        p.grad = saved[key]

    flat = param.value.ravel()
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        tape.replay()
        hi = float(tape.nodes[loss].value)
        flat[i] = orig - step
        tape.replay()
        lo = float(tape.nodes[loss].value)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)
    tape.replay()

    dev = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(dev.max()) if dev.size else 0.0
