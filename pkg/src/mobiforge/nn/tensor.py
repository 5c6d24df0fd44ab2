"""Dense-tensor numeric core with reverse-mode automatic differentiation.

NumPy holds the arrays; this module owns the graph. Training runs in float32;
``use_float64()`` switches new tensors to double precision, which the
finite-difference gradient checks require. Every op traps NaN/Inf in its
output and aborts with the op name.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """An op produced NaN or Inf from finite inputs."""


_DTYPE = np.float32


@contextlib.contextmanager
def use_float64():
    """Create tensors in float64 inside the block (for gradient checks)."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.float64
    try:
        yield
    finally:
        _DTYPE = prev


def current_dtype():
    return _DTYPE


def _check(op: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"op {op!r} produced non-finite values")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tensor_slice(self, idx)


class Parameter(Tensor):
    """Trainable tensor with Adam moment buffers."""

    __slots__ = ("adam_m", "adam_v", "step_count")

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step_count = 0


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(_check(op, data))
    if any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + _unbroadcast(g, a.shape)
        grads[b] = grads.get(b, 0) + _unbroadcast(g, b.shape)

    return _make("add", data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + _unbroadcast(g, a.shape)
        grads[b] = grads.get(b, 0) - _unbroadcast(g, b.shape)

    return _make("sub", data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + _unbroadcast(g * b.data, a.shape)
        grads[b] = grads.get(b, 0) + _unbroadcast(g * a.data, b.shape)

    return _make("mul", data, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    data = a.data * c

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + g * c

    return _make("scale", data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul needs >=1-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g, grads):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.ndim > 1 \
            else np.multiply.outer(g, b.data)
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        grads[a] = grads.get(a, 0) + _unbroadcast(ga, a.shape)
        grads[b] = grads.get(b, 0) + _unbroadcast(gb, b.shape)

    return _make("matmul", data, (a, b), backward)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + g * data * (1.0 - data)

    return _make("sigmoid", data, (a,), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def backward(g, grads):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        dt = (1.0 - t ** 2) * dinner
        grads[a] = grads.get(a, 0) + g * (0.5 * (1.0 + t) + 0.5 * x * dt)

    return _make("gelu", data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g, grads):
        dot = (g * data).sum(axis=axis, keepdims=True)
        grads[a] = grads.get(a, 0) + data * (g - dot)

    return _make("softmax", data, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + g - sm * g.sum(axis=axis, keepdims=True)

    return _make("log_softmax", data, (a,), backward)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalization only (mean 0, variance 1 along axis); affine is separate."""
    a = _wrap(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = xc * inv
    n = a.data.shape[axis]

    def backward(g, grads):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * data).mean(axis=axis, keepdims=True)
        grads[a] = grads.get(a, 0) + inv * (g - gm - data * gxm)

    return _make("layer_norm", data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + g.reshape(a.shape)

    return _make("reshape", data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g, grads):
        grads[a] = grads.get(a, 0) + g.transpose(inv)

    return _make("transpose", data, (a,), backward)


def tensor_slice(a, idx) -> Tensor:
    a = _wrap(a)
    data = a.data[idx]

    def backward(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        grads[a] = grads.get(a, 0) + full

    return _make("slice", data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, grads):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            grads[t] = grads.get(t, 0) + piece

    return _make("concat", data, tuple(tensors), backward)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, grads):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        grads[a] = grads.get(a, 0) + np.broadcast_to(gg, a.shape).copy()

    return _make("sum", data, (a,), backward)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def embedding_lookup(table, indices) -> Tensor:
    """table: (vocab, dim); indices: int array of any shape."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for table {table.shape}")
    data = table.data[idx]

    def backward(g, grads):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        grads[table] = grads.get(table, 0) + full

    return _make("embedding_lookup", data, (table,), backward)


def dilated_causal_conv1d(x, weight, bias, dilation: int = 1) -> Tensor:
    """Length-preserving causal conv over (batch, seq, in_ch).

    weight: (kernel, in_ch, out_ch); output[t] sums over the current step and
    (kernel-1) earlier steps spaced ``dilation`` apart, with left zero
    padding of (kernel-1)*dilation.
    """
    x, weight, bias = _wrap(x), _wrap(weight), _wrap(bias)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise ShapeError(f"dilated_causal_conv1d: x {x.shape} vs weight {weight.shape}")
    kernel = weight.shape[0]
    pad = (kernel - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (pad, 0), (0, 0)))
    seq = x.shape[1]
    data = np.zeros((x.shape[0], seq, weight.shape[2]), dtype=x.data.dtype)
    for k in range(kernel):
        data += np.matmul(xp[:, k * dilation:k * dilation + seq], weight.data[k])
    data = data + bias.data

    def backward(g, grads):
        gb = g.sum(axis=(0, 1))
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(weight.data)
        for k in range(kernel):
            xk = xp[:, k * dilation:k * dilation + seq]
            gw[k] = np.einsum("bsi,bso->io", xk, g)
            gxp[:, k * dilation:k * dilation + seq] += np.matmul(g, weight.data[k].T)
        grads[x] = grads.get(x, 0) + gxp[:, pad:]
        grads[weight] = grads.get(weight, 0) + gw
        grads[bias] = grads.get(bias, 0) + gb

    return _make("dilated_causal_conv1d", data, (x, weight, bias), backward)


def multi_head_attention(q, k, v, wq, wk, wv, wo, n_heads: int, mask=None) -> Tensor:
    """Standard scaled dot-product attention over (batch, seq, d) inputs.

    Composed from the primitives above, so gradients come for free. ``mask``
    is an additive (seq_q, seq_k) array of 0 / -inf-like values.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    d_model = wq.shape[1]
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model {d_model} not divisible by heads {n_heads}")
    dh = d_model // n_heads
    b, sq = q.shape[0], q.shape[1]
    sk = k.shape[1]

    def split(x, s):
        # (b, s, d) -> (b, heads, s, dh)
        return transpose(reshape(x, (b, s, n_heads, dh)), (0, 2, 1, 3))

    qh = split(matmul(q, wq), sq)
    kh = split(matmul(k, wk), sk)
    vh = split(matmul(v, wv), sk)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask)))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)  # (b, heads, sq, dh)
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, sq, d_model))
    return matmul(out, wo)


# ---------------------------------------------------------------------------
# Losses

def mse(pred, target) -> Tensor:
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = sub(pred, target)
    return reduce_mean(mul(diff, diff))


def cross_entropy(logits, target_index) -> Tensor:
    """Mean negative log-likelihood; logits (batch, classes), int targets."""
    logits = _wrap(logits)
    idx = np.asarray(target_index)
    if logits.ndim != 2 or idx.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {idx.shape}")
    lp = log_softmax(logits, axis=-1)
    picked = tensor_slice(lp, (np.arange(logits.shape[0]), idx))
    return scale(reduce_mean(picked), -1.0)


def _validate_simplex(p: np.ndarray, axis: int = -1, tol: float = 1e-6):
    sums = p.sum(axis=axis)
    if np.any(p < -tol) or np.any(np.abs(sums - 1.0) > tol):
        raise ShapeError("target is not a valid probability simplex")


def kl_div(log_probs, target_probs) -> Tensor:
    """KL(target || exp(log_probs)), batch-mean over leading axes.

    Matches the usual KLDivLoss convention: the first argument carries
    log-probabilities of the prediction. 0*log 0 contributes 0.
    """
    log_probs = _wrap(log_probs)
    t = np.asarray(target_probs, dtype=log_probs.data.dtype)
    if log_probs.shape != t.shape:
        raise ShapeError(f"kl_div: shapes differ, {log_probs.shape} vs {t.shape}")
    _validate_simplex(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        tlogt = np.where(t > 0, t * np.log(np.maximum(t, 1e-300)), 0.0)
    n_batch = max(1, int(np.prod(log_probs.shape[:-1])))
    ent_term = float(tlogt.sum()) / n_batch
    cross = scale(reduce_sum(mul(log_probs, Tensor(t))), -1.0 / n_batch)
    return add(cross, ent_term)


# ---------------------------------------------------------------------------
# Backward pass

def backward(loss: Tensor) -> None:
    """Accumulate dloss/dparam into every reachable Parameter's .grad."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(node, None)
        if g is None or node._backward is None:
            if g is not None and node.requires_grad:
                node.grad += np.broadcast_to(g, node.data.shape)
            continue
        local: dict[Tensor, np.ndarray] = {}
        node._backward(np.broadcast_to(np.asarray(g), node.data.shape), local)
        for p, pg in local.items():
            if p.requires_grad:
                p.grad += np.broadcast_to(pg, p.data.shape)
            elif p._parents:
                grads[p] = grads.get(p, 0) + pg


# ---------------------------------------------------------------------------
# Initialization and optimization

def xavier_init(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform Xavier/Glorot init. For conv shapes (k, in, out), fans scale by k."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 3:
        fan_in, fan_out = shape[0] * shape[1], shape[0] * shape[2]
    else:
        raise ShapeError(f"xavier_init expects 2-d or 3-d shape, got {shape}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(_DTYPE)


class Adam:
    """Adam with bias correction over a list of Parameters."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p in self.params:
            p.step_count += 1
            t = p.step_count
            g = p.grad
            p.adam_m = self.beta1 * p.adam_m + (1 - self.beta1) * g
            p.adam_v = self.beta2 * p.adam_v + (1 - self.beta2) * (g * g)
            m_hat = p.adam_m / (1 - self.beta1 ** t)
            v_hat = p.adam_v / (1 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
