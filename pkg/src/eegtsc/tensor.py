"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the operators needed by the 1D convolutional classifiers are provided.
Forward passes are eager; every op whose inputs require gradients appends a
node to the active :class:`Tape`, and :func:`backward` sweeps that tape once
in reverse creation order.

Layout convention for sequence ops is channels-first: ``[batch, channels, length]``.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, int, Sequence]

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ELU_ALPHA = 1.0

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "active_tape", default=None
)
_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class Tensor:
    """An n-dimensional float64 array that can take part in a :class:`Tape`.

    Leaf tensors with ``requires_grad=True`` are parameters; after
    :func:`backward` their gradient is accumulated into ``.grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64, copy=True)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        # internal: adopt an array without copying
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mul(sum_all(self), 1.0 / self.size)


class Node:
    """One recorded operation: its kind, inputs, and a closure over saved values."""

    __slots__ = ("kind", "inputs", "backward_fn", "tape", "index")

    def __init__(self, kind, inputs, backward_fn, tape, index):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.tape = tape
        self.index = index


class Tape:
    """Ordered record of operations; creation order is a topological order.

    Usable as a context manager to scope recording explicitly. Without one,
    the first recorded op in a context creates a fresh tape, and a tape is
    retired after its single backward sweep.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, kind: str, inputs: tuple, backward_fn: Callable) -> Node:
        if self.consumed:
            raise RuntimeError("cannot record onto a tape that has already been swept")
        node = Node(kind, inputs, backward_fn, self, len(self.nodes))
        self.nodes.append(node)
        return node

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise RuntimeError("backward already called on this tape; run a new forward pass first")
        if loss.node is None or loss.node.tape is not self:
            raise RuntimeError("loss was not produced on this tape")
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node.index: np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                elif inp.node.tape is self:
                    idx = inp.node.index
                    grads[idx] = ig if idx not in grads else grads[idx] + ig
        self.consumed = True
        self.nodes = []
        if _active_tape.get() is self and self._token is None:
            _active_tape.set(None)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it."""
    if loss.node is None:
        raise RuntimeError("loss has no recorded history (does anything require grad?)")
    loss.node.tape.backward(loss)


def grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad():
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(kind: str, data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        tape = _active_tape.get()
        if tape is None or tape.consumed:
            tape = Tape()
            _active_tape.set(tape)
        out.requires_grad = True
        out.node = tape.record(kind, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result("add", a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result("mul", ad * bd, (a, b), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.asarray(x.data.sum()), (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _result("relu", x.data * mask, (x,), bw)


def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    neg_part = ELU_ALPHA * np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, neg_part)

    def bw(g):
        return (g * np.where(pos, 1.0, neg_part + ELU_ALPHA),)

    return _result("elu", out, (x,), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _result("reshape", x.data.reshape(shape), (x,), bw)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def _same_pad(kernel: int) -> tuple[int, int]:
    total = kernel - 1
    left = total // 2
    return left, total - left


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: str = "valid") -> Tensor:
    """Cross-correlation of ``x[B,C_in,L]`` with ``weight[C_out,C_in,K]``.

    ``padding="same"`` zero-pads so the output length equals ``L``; for even
    ``K`` the extra zero goes on the right.
    """
    if x.ndim != 3:
        raise ValueError(f"conv1d input must be [B, C_in, L], got shape {x.shape}")
    if weight.ndim != 3:
        raise ValueError(f"conv1d weight must be [C_out, C_in, K], got shape {weight.shape}")
    B, c_in, L = x.shape
    c_out, w_in, K = weight.shape
    if K < 1:
        raise ValueError("conv1d kernel size (weight axis 2) must be >= 1")
    if w_in != c_in:
        raise ValueError(
            f"conv1d channel mismatch on axis C_in: input has {c_in} (input axis 1), "
            f"weight expects {w_in} (weight axis 1)"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv1d bias must have shape ({c_out},) matching C_out (weight axis 0), got {bias.shape}")
    if padding == "same":
        left, right = _same_pad(K)
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    Lp = L + left + right
    l_out = Lp - K + 1
    if l_out < 1:
        raise ValueError(f"conv1d length L (input axis 2) = {L} is shorter than kernel {K}")

    xd = x.data
    w2 = weight.data.reshape(c_out, c_in * K)
    if K == 1:
        cols = xd.transpose(0, 2, 1).reshape(B * L, c_in)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (left, right))) if (left or right) else xd
        cols = sliding_window_view(xp, K, axis=2).transpose(0, 2, 1, 3).reshape(B * l_out, c_in * K)
    out = (cols @ w2.T).reshape(B, l_out, c_out).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.transpose(0, 2, 1).reshape(B * l_out, c_out)
        gw = (g2.T @ cols).reshape(c_out, c_in, K) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            if K == 1:
                gx = np.ascontiguousarray((g2 @ w2).reshape(B, L, c_in).transpose(0, 2, 1))
            else:
                # full correlation of g with the flipped kernel, cropped to the unpadded input
                gpad = np.pad(g, ((0, 0), (0, 0), (K - 1 - left, K - 1 - right)))
                gwin = sliding_window_view(gpad, K, axis=2).transpose(0, 2, 1, 3).reshape(B * L, c_out * K)
                wflip = weight.data[:, :, ::-1].transpose(0, 2, 1).reshape(c_out * K, c_in)
                gx = np.ascontiguousarray((gwin @ wflip).reshape(B, L, c_in).transpose(0, 2, 1))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _result("conv1d", out, inputs, bw)


def batchnorm1d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation of ``x[B,C,L]`` over batch and time.

    In training mode the running statistics are updated in place
    (unbiased variance, PyTorch convention).
    """
    if x.ndim != 3:
        raise ValueError(f"batchnorm1d input must be [B, C, L], got shape {x.shape}")
    B, C, L = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm1d affine parameters must have shape ({C},)")
    n = B * L
    xd = x.data
    if training:
        if n < 2:
            raise ValueError(f"batchnorm1d in train mode needs B*L >= 2, got {n}")
        mean = xd.mean(axis=(0, 2))
        centered = xd - mean[None, :, None]
        var = (centered * centered).mean(axis=(0, 2))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mean, var = running_mean.copy(), running_var.copy()
        centered = xd - mean[None, :, None]
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std[None, :, None]
    gd = gamma.data
    out = xhat * gd[None, :, None] + beta.data[None, :, None]

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2))
        gbeta = g.sum(axis=(0, 2))
        dxhat = g * gd[None, :, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2))[None, :, None]
            s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
            gx = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std[None, :, None]
        return gx, ggamma, gbeta

    return _result("batchnorm1d", out, (x, gamma, beta), bw)


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    if not training or p == 0.0:
        return x
    if p == 1.0:
        mask = np.zeros(x.shape)
    else:
        if rng is None:
            raise ValueError("dropout in train mode needs an explicit rng")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        return (g * mask,)

    return _result("dropout", x.data * mask, (x,), bw)


def pool1d(x: Tensor, kind: str, window: int, stride: Optional[int] = None, padding: str = "valid") -> Tensor:
    """Max or average pooling along the last axis of ``x[B,C,L]``.

    ``padding="same"`` gives ``ceil(L / stride)`` outputs; max pooling pads
    with ``-inf``, average pooling pads with zeros that count toward the mean.
    """
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.ndim != 3:
        raise ValueError(f"pool1d input must be [B, C, L], got shape {x.shape}")
    stride = window if stride is None else stride
    if window < 1 or stride < 1:
        raise ValueError("pool window and stride must be >= 1")
    B, C, L = x.shape
    if padding == "same":
        l_out = -(-L // stride)
        total = max((l_out - 1) * stride + window - L, 0)
        left, right = total // 2, total - total // 2
    elif padding == "valid":
        left = right = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)), constant_values=fill) if (left or right) else x.data
    Lp = xp.shape[2]
    if Lp < window:
        raise ValueError(f"pool1d length {L} is shorter than window {window}")
    l_out = (Lp - window) // stride + 1
    span = stride * (l_out - 1) + 1
    # reduce over window offsets with shifted strided slices; first maximum wins
    out = xp[:, :, 0:span:stride].copy()
    if kind == "max":
        arg = np.zeros(out.shape, dtype=np.int64)
        for k in range(1, window):
            cand = xp[:, :, k:k + span:stride]
            better = cand > out
            np.copyto(out, cand, where=better)
            arg[better] = k
    else:
        for k in range(1, window):
            out += xp[:, :, k:k + span:stride]
        out /= window

    def bw(g):
        gxp = np.zeros((B, C, Lp))
        for k in range(window):
            contrib = g * (arg == k) if kind == "max" else g / window
            gxp[:, :, k:k + span:stride] += contrib
        return (gxp[:, :, left:left + L],)

    return _result("pool1d", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ValueError(f"global_avg_pool input must be [B, C, L], got shape {x.shape}")
    L = x.shape[2]

    def bw(g):
        return (np.repeat(g[:, :, None] / L, L, axis=2),)

    return _result("global_avg_pool", x.data.mean(axis=2), (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear expects x[B, F_in] and weight[F_out, F_in], got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear feature mismatch on axis F_in: input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ValueError(f"linear bias must have shape ({wd.shape[0]},), got {bias.shape}")
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _result("linear", out, inputs, bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (the channel axis by default)."""
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref):
            raise ValueError("concat inputs must have the same rank")
        for ax, (a, b) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and a != b:
                raise ValueError(f"concat shape mismatch on axis {ax}: {a} vs {b}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel-axis concatenation: axis 1 for batched tensors, axis 0 for vectors."""
    a, b = as_tensor(a), as_tensor(b)
    return concat((a, b), axis=0 if a.ndim == 1 else 1)


def broadcast_time(z: Tensor, length: int) -> Tensor:
    """Repeat ``z[B,E]`` along a new trailing time axis -> ``[B,E,length]``."""
    if z.ndim != 2:
        raise ValueError(f"broadcast_time expects [B, E], got shape {z.shape}")

    def bw(g):
        return (g.sum(axis=2),)

    out = np.repeat(z.data[:, :, None], length, axis=2)
    return _result("broadcast_time", out, (z,), bw)


def embedding_lookup(table: Tensor, index) -> Tensor:
    """Row lookup with 1-based indices; an int gives ``[E]``, an array ``[B,E]``."""
    if table.ndim != 2:
        raise ValueError(f"embedding table must be [S, E], got shape {table.shape}")
    S = table.shape[0]
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    if idx.size and (idx.min() < 1 or idx.max() > S):
        raise IndexError(f"embedding index out of range 1:{S}: {idx.min() if idx.min() < 1 else idx.max()}")
    rows = idx - 1
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape)
        np.add.at(gt, rows, g)
        return (gt,)

    return _result("embedding_lookup", table.data[rows], (table,), bw)


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    if not np.issubdtype(lab.dtype, np.integer):
        raise TypeError("labels must be integers in 1:Y")
    if lab.size and (lab.min() < 1 or lab.max() > n_classes):
        raise ValueError(f"labels must lie in 1:{n_classes}")
    return lab - 1


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of ``logits[B,Y]`` against 1-based ``labels``."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [B, Y], got shape {logits.shape}")
    B, Y = logits.shape
    rows = _check_labels(labels, B, Y)
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(B), rows].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(B), rows] -= 1.0
        return (grad * (g / B),)

    return _result("softmax_cross_entropy", np.asarray(loss), (logits,), bw)
