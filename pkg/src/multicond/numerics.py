"""Dense float64 tensors with reverse-mode gradients and a finite-difference oracle.

Everything downstream (connector blocks, denoiser, training) builds on the small
op set here. Values are numpy arrays; gradients accumulate through an explicit
per-forward graph that is replayed in reverse, so there is no global tape and
disjoint forwards can run on separate threads.
"""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Small enough that rows with variance above 1e-6 still normalize to unit
# variance within 1e-8; large enough to keep constant rows finite.
LAYER_NORM_EPS = 1e-14


class NumericsError(ValueError):
    """Shape mismatch, non-finite value, or misuse of an op."""


def _check_finite(data: np.ndarray, op: str) -> None:
    # A single sum detects any NaN/Inf (mixed infinities cancel to NaN); the
    # slow exact scan only runs to rule out overflow of the sum itself.
    if not math.isfinite(data.sum()):
        if not np.all(np.isfinite(data)):
            raise NumericsError(f"non-finite values produced by {op}")


class Tensor:
    """A dense float64 array plus optional gradient.

    Tensors are immutable values after construction except for `.grad`, which
    `backward()` fills in. Ops record a backward closure on the output only when
    some input requires a gradient, so inference on detached parameters builds
    no graph at all.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._bwd = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """View of the same data with no gradient tracking."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._bwd = None
        return out

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g

    def backward(self) -> None:
        """Reverse-replay the op graph below this scalar, accumulating grads."""
        if self.data.shape != ():
            raise NumericsError("backward requires a scalar loss")
        order = _topo_order(self)
        self.grad = np.ones((), dtype=np.float64)
        for node in reversed(order):
            if node._bwd is not None:
                node._bwd(node.grad)

    # Operator sugar; the heavy lifting lives in the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _topo_order(root: Tensor) -> list:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: tuple, bwd, op: str) -> Tensor:
    if type(data) is not np.ndarray:  # numpy 2 collapses 0-d results to scalars
        data = np.asarray(data)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    requires_grad = False
    for p in parents:
        if p.requires_grad:
            requires_grad = True
            break
    out.requires_grad = requires_grad
    if requires_grad:
        out._parents = parents
        out._bwd = bwd
    else:
        out._parents = ()
        out._bwd = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced or stretched."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bwd(g):
        if a.requires_grad:
            a._accum(-g)

    return _make(-a.data, (a,), bwd, "neg")


def reshape(a: Tensor, shape) -> Tensor:
    src_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(src_shape))

    return _make(out_data, (a,), bwd, "reshape")


_INVERSE_PERM: dict = {}


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = _INVERSE_PERM.get(axes)
    if inverse is None:
        inverse = _INVERSE_PERM.setdefault(axes, tuple(int(i) for i in np.argsort(axes)))
    out_data = np.transpose(a.data, axes)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inverse))

    return _make(out_data, (a,), bwd, "transpose")


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _make(out_data, tuple(parts), bwd, "concat")


def tensor_sum(a: Tensor) -> Tensor:
    out_data = np.asarray(a.data.sum())

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), bwd, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    out_data = np.asarray(a.data.sum() / n)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out_data, (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# linear algebra and nonlinearities
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or stacked 3-D operands (equal batch)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (2, 3) or b.data.ndim != a.data.ndim:
        raise NumericsError(
            f"matmul expects matching 2-D or 3-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise NumericsError(f"matmul inner dims disagree: {a.data.shape} @ {b.data.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise NumericsError(f"matmul batch dims disagree: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), bwd, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; rows sum to 1."""
    x = _as_tensor(x)
    if x.data.shape[axis] == 0:
        raise NumericsError("softmax over an empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=axis, keepdims=True)
            x._accum(y * (g - dot))

    return _make(y, (x,), bwd, "softmax")


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row of the last axis to zero mean, unit variance (no affine)."""
    x = _as_tensor(x)
    d = x.data.shape[-1]
    if d < 2:
        raise NumericsError("layer_norm requires a last dimension of at least 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bwd(g):
        if x.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gx = (g * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv * (g - gm - xhat * gx))

    return _make(xhat, (x,), bwd, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    y = x.data * cdf

    def bwd(g):
        if x.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            x._accum(g * (cdf + x.data * pdf))

    return _make(y, (x,), bwd, "gelu")


def silu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def bwd(g):
        if x.requires_grad:
            x._accum(g * sig * (1.0 + x.data * (1.0 - sig)))

    return _make(y, (x,), bwd, "silu")


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Per-head softmax(q k^T / sqrt(d_head)) v for (heads, rows, d_head) stacks."""
    if q.data.ndim != 3 or k.data.ndim != 3 or v.data.ndim != 3:
        raise NumericsError("scaled_dot_attention expects (heads, rows, d_head) tensors")
    if q.data.shape[-1] != k.data.shape[-1] or k.data.shape[:2] != v.data.shape[:2]:
        raise NumericsError(
            f"scaled_dot_attention shape mismatch: q={q.data.shape} k={k.data.shape} v={v.data.shape}"
        )
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), scale)
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# deterministic RNG
# ---------------------------------------------------------------------------


@dataclass
class RngState:
    """Counter-based RNG: identical (seed, counter) gives identical draws anywhere.

    Every draw keys a fresh Philox generator with (seed, counter) and then bumps
    the counter, so streams replay exactly across runs and platforms.
    """

    seed: int
    counter: int = 0

    def _gen(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))
        self.counter += 1
        return gen

    def normal(self, shape=()) -> np.ndarray:
        return np.asarray(self._gen().standard_normal(shape))

    def uniform(self, shape=()) -> np.ndarray:
        return np.asarray(self._gen().random(shape))

    def integers(self, low: int, high: int | None = None, size=None) -> np.ndarray:
        return self._gen().integers(low, high, size=size)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self._gen().random(shape) < p

    def split(self, tag: str) -> "RngState":
        """Independent substream derived from (seed, tag); stable across runs."""
        digest = hashlib.sha256(f"{self.seed}:{tag}".encode()).digest()
        return RngState(seed=int.from_bytes(digest[:8], "little"))


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Worst-case disagreement between reverse-mode and central differences."""

    max_rel_err: float = 0.0
    worst_param: str = ""
    worst_index: int = -1
    per_param: dict = field(default_factory=dict)


def grad_check(f, params: dict, h: float = 1e-5) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar `f(params)` against central differences.

    `f` must be a deterministic function of the tensors in `params`. The relative
    error denominator is max(|analytic|, |numeric|, 1e-8) per coordinate.
    """
    if h <= 0:
        raise NumericsError("grad_check requires h > 0")
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    loss = f(params)
    if loss.data.shape != ():
        raise NumericsError("grad_check expects a scalar-valued function")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros(p.data.shape))
        for name, p in params.items()
    }

    # Finite differences run on detached views of the same buffers: no graph,
    # and in-place perturbations are visible to the forward pass.
    fd_params = {name: p.detach() for name, p in params.items()}

    def f_value() -> float:
        out = f(fd_params)
        return float(out.data)

    report = GradCheckReport()
    for name in sorted(params):
        flat = params[name].data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        worst_here = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f_value()
            flat[i] = orig - h
            f_minus = f_value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            rel = abs(a_flat[i] - numeric) / denom
            worst_here = max(worst_here, rel)
            if rel > report.max_rel_err:
                report.max_rel_err = rel
                report.worst_param = name
                report.worst_index = i
        report.per_param[name] = worst_here
    return report


def content_hash(arrays: dict) -> str:
    """Canonical sha256 over name-sorted arrays (shape + little-endian float64 bytes)."""
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()
