"""Dense tensors with reverse-mode automatic differentiation.

Every operation builds a node holding its numpy result, references to its
parents and a closure that scatters the output gradient back to them; calling
``backward()`` on a scalar loss topologically sorts the reachable subgraph and
runs the closures in reverse. Shapes are strict: binary elementwise ops demand
identical shapes, and the only implicit broadcasting is tensor-with-python-
scalar. The handful of broadcast patterns the models actually need are spelled
out as dedicated ops (add_rowvec, mul_colvec, ...) so shape bugs fail loudly.

The element dtype (float32 or float64) is fixed per graph: mixing dtypes in a
binary op raises. Gradients are recomputed from scratch on every backward
call (one backward per forward; repeated calls just redo the same work).

Gradient buffers are allocated lazily: the first contribution to a node binds
the incoming array (possibly a view of the consumer's gradient), later ones
add out-of-place. Nothing may ever mutate a gradient array in place - that is
what makes the binding safe.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_float_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _acc(node: "Tensor", g) -> None:
    """Add a gradient contribution; first one binds, later ones add a copy."""
    node.grad = g if node.grad is None else node.grad + g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad=False, name=None):
        arr = _as_float_array(data, dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or '<leaf>'}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data)

    def __repr__(self):
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{nm})"

    # -- graph construction ------------------------------------------------

    @staticmethod
    def _result(data, parents, backward_fn) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = False
        out.name = None
        out._parents = parents
        out._backward = backward_fn
        return out

    def grad_array(self) -> np.ndarray:
        """The accumulated gradient, or zeros if the loss never reached here."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return np.broadcast_to(self.grad, self.data.shape)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            out = Tensor._result(self.data + other, (self,), None)

            def bwd():
                _acc(self, out.grad)

            out._backward = bwd
            return out
        _binary_check(self, other, "add")
        out = Tensor._result(self.data + other.data, (self, other), None)

        def bwd():
            _acc(self, out.grad)
            _acc(other, out.grad)

        out._backward = bwd
        return out

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return self + (-other)
        _binary_check(self, other, "sub")
        out = Tensor._result(self.data - other.data, (self, other), None)

        def bwd():
            _acc(self, out.grad)
            _acc(other, -out.grad)

        out._backward = bwd
        return out

    def __rsub__(self, other):
        # other is a python scalar: other - self
        out = Tensor._result(other - self.data, (self,), None)

        def bwd():
            _acc(self, -out.grad)

        out._backward = bwd
        return out

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            out = Tensor._result(self.data * other, (self,), None)

            def bwd():
                _acc(self, other * out.grad)

            out._backward = bwd
            return out
        _binary_check(self, other, "mul")
        out = Tensor._result(self.data * other.data, (self, other), None)

        def bwd():
            _acc(self, other.data * out.grad)
            _acc(other, self.data * out.grad)

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __matmul__(self, other):
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(
                f"matmul needs 2-D operands, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {self.shape} @ {other.shape}")
        _dtype_check(self, other, "matmul")
        out = Tensor._result(self.data @ other.data, (self, other), None)

        def bwd():
            _acc(self, out.grad @ other.data.T)
            _acc(other, self.data.T @ out.grad)

        out._backward = bwd
        return out

    # -- nonlinearities -----------------------------------------------------

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor._result(y, (self,), None)

        def bwd():
            _acc(self, (1.0 - y * y) * out.grad)

        out._backward = bwd
        return out

    def sigmoid(self):
        # tanh form: stable for large |x| and branch-free
        y = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        out = Tensor._result(y, (self,), None)

        def bwd():
            _acc(self, y * (1.0 - y) * out.grad)

        out._backward = bwd
        return out

    def square(self):
        out = Tensor._result(self.data * self.data, (self,), None)

        def bwd():
            _acc(self, 2.0 * self.data * out.grad)

        out._backward = bwd
        return out

    def sqrt(self):
        if np.any(self.data < 0):
            raise NumericError("sqrt of negative values")
        y = np.sqrt(self.data)
        out = Tensor._result(y, (self,), None)

        def bwd():
            _acc(self, out.grad / (2.0 * y))

        out._backward = bwd
        return out

    def reciprocal(self):
        y = 1.0 / self.data
        out = Tensor._result(y, (self,), None)

        def bwd():
            _acc(self, -(y * y) * out.grad)

        out._backward = bwd
        return out

    # -- shape ops ------------------------------------------------------------

    def transpose(self):
        out = Tensor._result(self.data.T, (self,), None)

        def bwd():
            _acc(self, out.grad.T)

        out._backward = bwd
        return out

    @property
    def T(self):
        return self.transpose()

    def reshape(self, shape):
        out = Tensor._result(self.data.reshape(shape), (self,), None)

        def bwd():
            _acc(self, out.grad.reshape(self.shape))

        out._backward = bwd
        return out

    # -- reductions -------------------------------------------------------

    def sum(self):
        out = Tensor._result(self.data.sum(), (self,), None)

        def bwd():
            _acc(self, np.broadcast_to(out.grad, self.shape))

        out._backward = bwd
        return out

    def sum_axis0(self):
        if self.data.ndim != 2:
            raise ShapeError(f"sum_axis0 needs a 2-D tensor, got {self.shape}")
        out = Tensor._result(self.data.sum(axis=0), (self,), None)

        def bwd():
            _acc(self, np.broadcast_to(out.grad, self.shape))

        out._backward = bwd
        return out

    # -- autodiff ------------------------------------------------------------

    def backward(self):
        """Compute d(self)/d(node) for every node reachable from this scalar.

        Gradients are cleared before propagation, so calling backward twice
        on the same graph recomputes rather than accumulates.
        """
        if self.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        topo = _toposort(self)
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()


def _toposort(root: Tensor):
    # Iterative post-order DFS; graphs from unrolled recurrences get too deep
    # for the recursion limit.
    topo = []
    visited = set()
    stack = [(root, iter(root._parents))]
    visited.add(id(root))
    while stack:
        node, parents = stack[-1]
        advanced = False
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            topo.append(node)
            stack.pop()
    return topo


def _binary_check(a: Tensor, b: Tensor, op: str):
    if not isinstance(b, Tensor):
        raise TypeError(f"{op}: expected Tensor or scalar, got {type(b).__name__}")
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")
    _dtype_check(a, b, op)


def _dtype_check(a: Tensor, b: Tensor, op: str):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(
            f"{op}: mixed element dtypes {a.data.dtype} and {b.data.dtype}; "
            "the dtype is fixed per graph")


# -- broadcast helpers (the only non-scalar broadcasting allowed) -----------


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[M,N] + v[N], v added to every row."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {x.shape} and {v.shape}")
    _dtype_check(x, v, "add_rowvec")
    out = Tensor._result(x.data + v.data, (x, v), None)

    def bwd():
        _acc(x, out.grad)
        _acc(v, out.grad.sum(axis=0))

    out._backward = bwd
    return out


def mul_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[M,N] * v[N], column j scaled by v[j]."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError(f"mul_rowvec: incompatible shapes {x.shape} and {v.shape}")
    _dtype_check(x, v, "mul_rowvec")
    out = Tensor._result(x.data * v.data, (x, v), None)

    def bwd():
        _acc(x, out.grad * v.data)
        _acc(v, (out.grad * x.data).sum(axis=0))

    out._backward = bwd
    return out


def mul_colvec(x: Tensor, u: Tensor) -> Tensor:
    """x[M,N] * u[M], row i scaled by u[i]."""
    if x.data.ndim != 2 or u.data.ndim != 1 or x.shape[0] != u.shape[0]:
        raise ShapeError(f"mul_colvec: incompatible shapes {x.shape} and {u.shape}")
    _dtype_check(x, u, "mul_colvec")
    col = u.data[:, None]
    out = Tensor._result(x.data * col, (x, u), None)

    def bwd():
        _acc(x, out.grad * col)
        _acc(u, (out.grad * x.data).sum(axis=1))

    out._backward = bwd
    return out


def concat_rows(tensors) -> Tensor:
    """Stack 2-D tensors with equal widths along axis 0."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_rows of nothing")
    width = tensors[0].shape[1]
    for t in tensors[1:]:
        if t.data.ndim != 2 or t.shape[1] != width:
            raise ShapeError("concat_rows: widths differ")
        _dtype_check(tensors[0], t, "concat_rows")
    data = np.concatenate([t.data for t in tensors], axis=0)
    out = Tensor._result(data, tuple(tensors), None)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def bwd():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _acc(t, out.grad[lo:hi])

    out._backward = bwd
    return out


def concat_cols(tensors) -> Tensor:
    """Stack 2-D tensors with equal heights along axis 1."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_cols of nothing")
    height = tensors[0].shape[0]
    for t in tensors[1:]:
        if t.data.ndim != 2 or t.shape[0] != height:
            raise ShapeError("concat_cols: heights differ")
        _dtype_check(tensors[0], t, "concat_cols")
    data = np.concatenate([t.data for t in tensors], axis=1)
    out = Tensor._result(data, tuple(tensors), None)
    offsets = np.cumsum([0] + [t.shape[1] for t in tensors])

    def bwd():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _acc(t, out.grad[:, lo:hi])

    out._backward = bwd
    return out


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of x[M,N] by index, with scatter-add on backward."""
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got {x.shape}")
    out = Tensor._result(x.data[idx], (x,), None)

    def bwd():
        contrib = np.zeros_like(x.data)
        np.add.at(contrib, idx, out.grad)
        _acc(x, contrib)

    out._backward = bwd
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, max-subtracted for stability; rows sum to 1."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor._result(y, (x,), None)

    def bwd():
        g = out.grad
        dot = (g * y).sum(axis=1, keepdims=True)
        _acc(x, y * (g - dot))

    out._backward = bwd
    return out


# -- parameters and named gradients ------------------------------------------


class Graph:
    """Registry of named trainable parameters sharing one element dtype."""

    def __init__(self, dtype=np.float32):
        dt = np.dtype(dtype)
        if dt not in _FLOAT_DTYPES:
            raise ShapeError(f"graph dtype must be float32 or float64, got {dt}")
        self.dtype = dt
        self._params: dict[str, Tensor] = {}

    def parameter(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(data, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Backprop from a scalar loss; returns gradients per parameter name.

        Parameters the loss does not depend on get zero gradients. The
        returned arrays may be shared with graph internals: treat them as
        read-only (clip/copy before mutating).
        """
        for p in self._params.values():
            p.grad = None
        loss.backward()
        return {name: p.grad_array() for name, p in self._params.items()}


# -- randomness ----------------------------------------------------------------


class Rng:
    """Deterministic random source: PCG64 bit stream, ziggurat Gaussian.

    Identical seed and call sequence give identical values on every platform.
    Normal samples are always drawn as float64 and cast afterwards, so the
    stream does not depend on the graph dtype. The algorithm tag ("pcg64")
    is recorded in checkpoints alongside the serialized state.
    """

    ALGORITHM = "pcg64"

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape=(), sigma=1.0, dtype=np.float64) -> np.ndarray:
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        if sigma == 0:
            return np.zeros(shape, dtype=dtype)
        return (self._gen.standard_normal(shape) * sigma).astype(dtype)

    def integers(self, low: int, high: int) -> int:
        """One integer drawn uniformly from [low, high)."""
        return int(self._gen.integers(low, high))

    def uniform(self, shape=(), low=0.0, high=1.0, dtype=np.float64) -> np.ndarray:
        return (self._gen.uniform(low, high, size=shape)).astype(dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self) -> "Rng":
        """Child generator seeded from this stream (advances this stream)."""
        return Rng(self.integers(0, 2**63))

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "algorithm": self.ALGORITHM,
            "seed": self.seed,
            "state": str(st["state"]["state"]),
            "inc": str(st["state"]["inc"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict):
        if state.get("algorithm") != self.ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {state.get('algorithm')!r}")
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(state["state"]), "inc": int(state["inc"])},
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(0)
        rng.set_state(state)
        return rng


def gaussian(shape, sigma: float, rng: Rng, dtype=np.float64) -> Tensor:
    """Leaf tensor of N(0, sigma^2) samples; sigma=0 gives exact zeros."""
    return Tensor(rng.normal(shape, sigma, dtype=dtype))


# -- finite-difference oracle ---------------------------------------------------


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` builds a fresh forward pass and returns the scalar loss node; any
    noise inside must be frozen (same draw per call). All parameters must be
    float64. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    params = dict(params)
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ShapeError(f"grad_check requires float64 parameters ({name})")
    loss = f()
    for p in params.values():
        p.grad = None
    loss.backward()
    analytic = {name: p.grad_array().copy() for name, p in params.items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = float(f().data)
            flat[i] = saved - eps
            f_minus = float(f().data)
            flat[i] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
