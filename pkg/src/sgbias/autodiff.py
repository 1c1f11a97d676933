"""Dense float64 tensors with reverse-mode differentiation.

Everything is double precision and shape-static. Each operation records its
inputs and a backward closure on the output tensor; ``backward`` walks the
reverse of the execution (topological) order and accumulates adjoints into
per-tensor ``grad`` buffers. A tensor graph is confined to one thread while
it is being built or differentiated; plain value arrays may be shared.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DivisionGuardError(ArithmeticError):
    """A normalization denominator underflowed to zero."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Run a block without recording operations (inference, numeric probes)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense row-major float64 array, optionally tracked for differentiation.

    A tensor with ``requires_grad`` owns a same-shape ``grad`` accumulator,
    initialized to zeros. ``backward`` only ever adds into it, so the grad of
    a leaf that does not reach the loss stays exactly zero.
    """

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._inputs: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor has shape {self.shape}, not a scalar")
        return float(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        """Constant copy that shares no storage and records nothing."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # light operator sugar over the functional ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    """Trainable tensor owning a private copy of ``data``."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    track = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out.grad = np.zeros_like(data) if track else None
    out._inputs = inputs if track else ()
    out._backward = backward_fn if track else None
    return out


class Tape:
    """Operations reaching a root tensor, in executable order.

    The node list is topologically sorted: every operation appears after all
    of its inputs. ``backward`` visits it in exact reverse order.
    """

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into every tracked tensor reachable from loss."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tracked tensor")
    loss.grad += np.ones_like(loss.data)
    for node in reversed(Tape.trace(loss).nodes):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` by summing added axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.data.shape} and {b.data.shape} do not align"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise sum. Equal shapes per contract; numpy broadcasting accepted."""
    _check_broadcast(a, b, "add")

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.data.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.data.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.data.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Pointwise product. Equal shapes per contract; broadcasting accepted."""
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.data, a.data.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.data, b.data.shape)

    return _result(a.data * b.data, (a, b), bw)


def scale(a: Tensor, k: float) -> Tensor:
    k = float(k)

    def bw(g):
        if a.requires_grad:
            a.grad += k * g

    return _result(k * a.data, (a,), bw)


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            a.grad += g * mask

    return _result(np.where(mask, a.data, 0.0), (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: cannot multiply shapes {a.data.shape} and {b.data.shape}"
        )

    def bw(g):
        if a.requires_grad:
            a.grad += g @ b.data.T
        if b.requires_grad:
            b.grad += a.data.T @ g

    return _result(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")

    def bw(g):
        if a.requires_grad:
            a.grad += g.T

    return _result(np.ascontiguousarray(a.data.T), (a,), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows."""
    return add(matmul(x, w), b)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape

    def bw(g):
        if a.requires_grad:
            a.grad += g.reshape(old)

    return _result(a.data.reshape(shape), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.grad += g[tuple(idx)]

    return _result(data, tuple(tensors), bw)


def gather_rows(w: Tensor, indices) -> Tensor:
    """Select rows of a matrix; backward scatter-adds into the source rows."""
    if w.data.ndim != 2:
        raise ShapeError(f"gather_rows: expected a matrix, got shape {w.data.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    data = w.data[idx]  # raises IndexError on out-of-range ids

    def bw(g):
        if w.requires_grad:
            np.add.at(w.grad, idx, g)

    return _result(data, (w,), bw)


# ---------------------------------------------------------------------------
# reductions and normalizations


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.grad += g  # scalar broadcast
        elif keepdims:
            x.grad += np.broadcast_to(g, x.data.shape)
        else:
            x.grad += np.broadcast_to(np.expand_dims(g, axis), x.data.shape)

    return _result(np.asarray(data), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Exponentials normalized along ``axis``, computed with max subtraction."""
    if x.data.ndim == 0:
        raise ShapeError("softmax: input must have at least one axis")
    ax = axis if axis >= 0 else x.data.ndim + axis
    if not 0 <= ax < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.data.shape}")
    if x.data.shape[ax] < 1:
        raise ShapeError("softmax: empty axis")
    m = x.data.max(axis=ax, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=ax, keepdims=True)
            x.grad += y * (g - dot)

    return _result(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per row (last axis), then a learned affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias must have shape ({d},), got "
            f"{gain.data.shape} and {bias.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    if np.any(sigma == 0.0):
        raise DivisionGuardError("layer_norm: zero variance and eps too small")
    y0 = (x.data - mu) / sigma
    out = y0 * gain.data + bias.data
    lead = tuple(range(x.data.ndim - 1))

    def bw(g):
        if gain.requires_grad:
            gain.grad += (g * y0).sum(axis=lead)
        if bias.requires_grad:
            bias.grad += g.sum(axis=lead)
        if x.requires_grad:
            gh = g * gain.data
            x.grad += (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - y0 * (gh * y0).mean(axis=-1, keepdims=True)
            ) / sigma

    return _result(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# spatial ops (channel-first layout)


def _as_batched_image(x: Tensor, op: str):
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ShapeError(f"{op}: expected C×H×W or B×C×H×W, got shape {x.data.shape}")


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an image stack with a kernel bank.

    ``x`` is C_in×H×W (or B×C_in×H×W); ``kernels`` is C_out×C_in×kh×kw with
    odd kh, kw. The output spatial size must come out integral.
    """
    x4, squeeze = _as_batched_image(x, "conv2d")
    k = kernels.data
    if k.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be 4-D, got shape {k.shape}")
    co, ci, kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel sides must be odd, got {kh}x{kw}")
    bsz, cin, h, w = x4.shape
    if cin != ci:
        raise ShapeError(f"conv2d: input has {cin} channels, kernels expect {ci}")
    s, p = int(stride), int(padding)
    if (h + 2 * p - kh) % s or (w + 2 * p - kw) % s or h + 2 * p < kh or w + 2 * p < kw:
        raise ShapeError(
            f"conv2d: non-integral output size for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {s}, padding {p}"
        )
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p))) if p else x4
    out = np.zeros((bsz, co, ho, wo))
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
            out += np.einsum("oc,bchw->bohw", k[:, :, i, j], win, optimize=True)

    def bw(g):
        g4 = g[None] if squeeze else g
        if kernels.requires_grad:
            for i in range(kh):
                for j in range(kw):
                    win = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
                    kernels.grad[:, :, i, j] += np.einsum(
                        "bohw,bchw->oc", g4, win, optimize=True
                    )
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
                        "oc,bohw->bchw", k[:, :, i, j], g4, optimize=True
                    )
            dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
            x.grad += dx[0] if squeeze else dx

    data = out[0] if squeeze else out
    return _result(data, (x, kernels), bw)


def pool2d(x: Tensor, mode: str = "avg", kernel: int | None = None,
           stride: int | None = None) -> Tensor:
    """Average pooling; ``global_avg`` collapses each channel to 1×1."""
    x4, squeeze = _as_batched_image(x, "pool2d")
    bsz, c, h, w = x4.shape

    if mode == "global_avg":
        out = x4.mean(axis=(2, 3), keepdims=True)

        def bw(g):
            if x.requires_grad:
                g4 = g[None] if squeeze else g
                gx = np.broadcast_to(g4 / (h * w), x4.shape)
                x.grad += gx[0] if squeeze else gx

        data = out[0] if squeeze else out
        return _result(data, (x,), bw)

    if mode != "avg":
        raise ShapeError(f"pool2d: unknown mode {mode!r}")
    if kernel is None:
        raise ShapeError("pool2d: avg mode needs a kernel size")
    k = int(kernel)
    s = k if stride is None else int(stride)
    if k > h or k > w:
        raise ShapeError(f"pool2d: kernel {k} larger than input {h}x{w}")
    if (h - k) % s or (w - k) % s:
        raise ShapeError(
            f"pool2d: kernel {k} stride {s} does not tile input {h}x{w}"
        )
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    out = np.zeros((bsz, c, ho, wo))
    for i in range(k):
        for j in range(k):
            out += x4[:, :, i : i + s * ho : s, j : j + s * wo : s]
    out /= k * k

    def bw(g):
        if not x.requires_grad:
            return
        g4 = (g[None] if squeeze else g) / (k * k)
        dx = np.zeros_like(x4)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += g4
        x.grad += dx[0] if squeeze else dx

    data = out[0] if squeeze else out
    return _result(data, (x,), bw)


# ---------------------------------------------------------------------------
# objectives


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine of the angle between vectors; row-wise when inputs are 2-D.

    Norms are stabilized with ``eps`` so zero vectors yield 0 instead of a
    fault; that makes the value for v against itself 1 only up to ~eps/|v|.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(
            f"cosine_similarity: shapes {a.data.shape} and {b.data.shape} differ"
        )
    if a.data.ndim not in (1, 2):
        raise ShapeError("cosine_similarity: expected vectors or row matrices")
    single = a.data.ndim == 1
    a2 = a.data[None] if single else a.data
    b2 = b.data[None] if single else b.data
    s = (a2 * b2).sum(axis=1)
    na = np.linalg.norm(a2, axis=1)
    nb = np.linalg.norm(b2, axis=1)
    denom = (na + eps) * (nb + eps)
    c = s / denom

    def bw(g):
        g2 = np.asarray(g).reshape(-1)[:, None]
        if a.requires_grad:
            ua = a2 / np.where(na > 0, na, 1.0)[:, None]
            ga = b2 / denom[:, None] - (c / (na + eps))[:, None] * ua
            a.grad += (g2 * ga)[0] if single else g2 * ga
        if b.requires_grad:
            ub = b2 / np.where(nb > 0, nb, 1.0)[:, None]
            gb = a2 / denom[:, None] - (c / (nb + eps))[:, None] * ub
            b.grad += (g2 * gb)[0] if single else g2 * gb

    data = np.asarray(c[0]) if single else c
    return _result(data, (a, b), bw)


def cross_entropy(logits: Tensor, target) -> Tensor:
    """−log softmax(logits)[target]; row-wise for a matrix plus index array."""
    z = logits.data
    if z.ndim == 1:
        t = int(target)
        if not 0 <= t < z.shape[0]:
            raise IndexError(f"cross_entropy: target {t} out of range {z.shape[0]}")
        m = z.max()
        e = np.exp(z - m)
        p = e / e.sum()
        loss = np.asarray(m + np.log(e.sum()) - z[t])

        def bw(g):
            if logits.requires_grad:
                d = p.copy()
                d[t] -= 1.0
                logits.grad += float(g) * d

        return _result(loss, (logits,), bw)

    if z.ndim == 2:
        idx = np.asarray(target, dtype=np.intp)
        if idx.shape != (z.shape[0],):
            raise ShapeError(
                f"cross_entropy: need one target per row, got {idx.shape} "
                f"for logits {z.shape}"
            )
        if idx.min() < 0 or idx.max() >= z.shape[1]:
            raise IndexError("cross_entropy: target index out of range")
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        se = e.sum(axis=1)
        p = e / se[:, None]
        rows = np.arange(z.shape[0])
        loss = m[:, 0] + np.log(se) - z[rows, idx]

        def bw(g):
            if logits.requires_grad:
                d = p.copy()
                d[rows, idx] -= 1.0
                logits.grad += np.asarray(g).reshape(-1, 1) * d

        return _result(loss, (logits,), bw)

    raise ShapeError(f"cross_entropy: logits must be 1-D or 2-D, got {z.shape}")


# ---------------------------------------------------------------------------
# training utilities


def sgd_step(params, lr: float):
    """In-place gradient descent: data -= lr·grad, then reset grads to zero."""
    for t in params:
        if t.requires_grad:
            t.data -= lr * t.grad
            t.grad[...] = 0.0


def grad_check(f, inputs, h: float = 1e-5, tol: float = 1e-5,
               max_entries: int | None = None, rng=None) -> dict:
    """Compare ``backward`` gradients of scalar ``f(*inputs)`` against central
    finite differences with step ``h``.

    ``f`` must be pure: it is re-evaluated many times while single input
    entries are perturbed in place. Relative error per coordinate is
    |a − n| / max(|a|, |n|, 1e-6); the report's ``passed`` flag requires the
    worst coordinate to be within ``tol``. ``max_entries`` caps the number of
    coordinates probed per input (sampled with ``rng``).
    """
    for t in inputs:
        if not t.requires_grad:
            raise ValueError("grad_check: all inputs must require gradients")
        t.grad[...] = 0.0
    out = f(*inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check: f must return a scalar")
    backward(out)
    analytic = [t.grad.copy().reshape(-1) for t in inputs]

    worst = 0.0
    worst_at = (None, None)
    checked = 0
    with no_grad():
        for which, (t, ana) in enumerate(zip(inputs, analytic)):
            flat = t.data.reshape(-1)
            if max_entries is not None and flat.size > max_entries:
                picker = rng if rng is not None else np.random.default_rng(0)
                coords = picker.choice(flat.size, size=max_entries, replace=False)
            else:
                coords = range(flat.size)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f(*inputs).data)
                flat[i] = orig - h
                fm = float(f(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                rel = abs(ana[i] - num) / max(abs(ana[i]), abs(num), 1e-6)
                checked += 1
                if rel > worst:
                    worst = rel
                    worst_at = (which, int(i))
    for t in inputs:
        t.grad[...] = 0.0
    return {
        "passed": worst <= tol,
        "max_rel_err": worst,
        "tol": tol,
        "h": h,
        "checked": checked,
        "worst_input": worst_at[0],
        "worst_entry": worst_at[1],
    }
