"""Dense N-d arrays with reverse-mode differentiation.

Everything is numpy underneath; each op allocates a fresh output and, when
gradients are being tracked, registers a closure that routes the output
gradient back to its parents. Values are 64-bit by default (so finite
difference checks are meaningful); float32 is available via
``set_default_dtype``.

Gradients accumulate: a tensor used at several call sites ends up with the
sum of the per-site gradients after one ``backward``, which is what makes
weight sharing work without any special casing.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_DEBUG_CHECKS = False
_node_ids = itertools.count()

# Running total of scalar multiplications issued by conv2d, for cross-checking
# the analytic cost model against what actually executed.
_mult_count = 0


def set_default_dtype(dtype) -> None:
    """Select the numeric type for newly created tensors ('float64'/'float32')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dt.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening of every op output (off by default)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def reset_mult_count() -> None:
    global _mult_count
    _mult_count = 0


def mult_count() -> int:
    return _mult_count


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _check_finite(arr: np.ndarray, opname: str) -> None:
    if _DEBUG_CHECKS and not np.all(np.isfinite(arr)):
        raise ContractError(f"{opname} produced NaN/Inf values")


class Tensor:
    """A dense array node (rank <= 4, N x C x H x W for feature maps).

    ``grad`` is populated by ``backward`` and matches ``data`` in shape.
    ``id`` is the node handle on the differentiation tape; parents are kept
    as an ordered tuple so gradient accumulation order is deterministic.
    """

    __slots__ = ("data", "grad", "requires_grad", "id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        # everything in one context shares the session dtype; mixing 32/64-bit
        # operands would silently upcast and wreck both speed and determinism
        arr = np.asarray(data)
        if arr.dtype != _DEFAULT_DTYPE:
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim > 4:
            raise ConfigError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.id = next(_node_ids)
        self._parents = _parents if self.requires_grad else ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse sweep from a scalar root; fills ``grad`` on every ancestor."""
        backward(self)

    # Arithmetic sugar; the named module-level ops are the real surface.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -other)

    def relu(self) -> "Tensor":
        return relu(self)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, grad={'yes' if self.grad is not None else 'no'})"


def _wrap(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, opname: str) -> Tensor:
    _check_finite(out_data, opname)
    tracked = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=tracked, _parents=tuple(parents) if tracked else ())
    if tracked:
        out._backward = backward_fn
    return out


class Parameter:
    """A named trainable tensor.

    ``shared_ref_count`` records at how many call sites the tensor is wired
    in; after one backward pass the gradient is the sum over those sites.
    """

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.tensor = Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE), requires_grad=True)
        self.shared_ref_count = 1
        self.velocity: Optional[np.ndarray] = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.tensor.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, refs={self.shared_ref_count})"


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum. Shapes must match exactly (no broadcasting)."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
        out_data = a.data + b.data

        def bwd(g):
            a.accumulate_grad(g)
            b.accumulate_grad(g)

        return _wrap(out_data, (a, b), bwd, "add")

    out_data = a.data + float(b)

    def bwd_scalar(g):
        a.accumulate_grad(g)

    return _wrap(out_data, (a,), bwd_scalar, "add")


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with a same-shape tensor or a scalar."""
    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise ConfigError(f"mul shape mismatch: {a.shape} vs {b.shape}")
        out_data = a.data * b.data

        def bwd(g):
            a.accumulate_grad(g * b.data)
            b.accumulate_grad(g * a.data)

        return _wrap(out_data, (a, b), bwd, "mul")
    return scale(a, float(b))


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out_data = x.data * s

    def bwd(g):
        x.accumulate_grad(g * s)

    return _wrap(out_data, (x,), bwd, "scale")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        x.accumulate_grad(g * (x.data > 0))

    return _wrap(out_data, (x,), bwd, "relu")


def mean_n(xs: Sequence[Tensor]) -> Tensor:
    """Mean of same-shape tensors; backward hands each input grad/n."""
    if len(xs) == 0:
        raise ConfigError("mean_n of an empty list")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise ConfigError(f"mean_n shape mismatch: {shape} vs {t.shape}")
    n = len(xs)
    # shifted mean: exact (bit-identical) when the inputs are all equal
    acc = np.zeros_like(xs[0].data)
    for t in xs[1:]:
        acc += t.data - xs[0].data
    out_data = xs[0].data + acc / n

    def bwd(g):
        share = g / n
        for t in xs:
            t.accumulate_grad(share)

    return _wrap(out_data, tuple(xs), bwd, "mean_n")


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum())

    def bwd(g):
        x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype))

    return _wrap(out_data, (x,), bwd, "sum_all")


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        x.accumulate_grad(g.reshape(x.shape))

    return _wrap(out_data, (x,), bwd, "reshape")


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        x.accumulate_grad(np.ascontiguousarray(g.transpose(inverse)))

    return _wrap(out_data, (x,), bwd, "permute")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    if len(xs) == 0:
        raise ConfigError("concat of an empty list")
    out_data = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.shape[axis] for t in xs]

    def bwd(g):
        start = 0
        for t, size in zip(xs, sizes):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + size)
            t.accumulate_grad(g[tuple(index)])
            start += size

    return _wrap(out_data, tuple(xs), bwd, "concat")


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 0. Repeated indices sum their gradients."""
    idx = np.asarray(idx, dtype=np.intp)
    out_data = x.data[idx]

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x.accumulate_grad(full)

    return _wrap(out_data, (x,), bwd, "take_rows")


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window of an N,C,H,W tensor."""
    if h > x.shape[2] or w > x.shape[3]:
        raise ConfigError(f"crop2d target {(h, w)} exceeds input {x.shape[2:]}")
    out_data = np.ascontiguousarray(x.data[:, :, :h, :w])

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, :, :h, :w] = g
        x.accumulate_grad(full)

    return _wrap(out_data, (x,), bwd, "crop2d")


def upsample_nearest_2x(x: Tensor) -> Tensor:
    """Replicate every cell into a 2x2 block; backward sums each block."""
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h2, w2 = g.shape
        x.accumulate_grad(g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5)))

    return _wrap(out_data, (x,), bwd, "upsample_nearest_2x")


# ---------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _patches(xp: np.ndarray, k: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, k, k, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    # reshape forces the copy into GEMM-friendly layout
    return view.reshape(n, c * k * k, ho * wo)


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Dilated 2-d cross-correlation (no kernel flip).

    x is N,Cin,H,W; w is Cout,Cin,k,k. One layer sees dilation*(k-1)+1
    input pixels per side. Output size follows the usual floor formula and
    must stay positive. Differentiable in x, w and bias; the input gradient
    is scattered back through the same dilated taps, so cells outside a
    given output's footprint never receive anything from it.
    """
    global _mult_count
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigError("conv2d expects 4-d input and weight")
    n, cin, h, ww = x.shape
    cout, cin_w, k, k2 = w.shape
    if k != k2:
        raise ConfigError(f"conv2d kernel must be square, got {k}x{k2}")
    if cin != cin_w:
        raise ConfigError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if k < 1 or dilation < 1 or stride < 1 or padding < 0:
        raise ConfigError("conv2d requires k>=1, dilation>=1, stride>=1, padding>=0")
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(ww, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d output size {ho}x{wo} is not positive")
    if bias is not None and bias.shape != (cout,):
        raise ConfigError(f"conv2d bias shape {bias.shape} != ({cout},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _patches(xp, k, stride, dilation, ho, wo)
    w2 = w.data.reshape(cout, cin * k * k)
    out_data = np.matmul(w2, cols)
    if bias is not None:
        out_data += bias.data[:, None]
    out_data = out_data.reshape(n, cout, ho, wo)
    _mult_count += n * cout * cin * k * k * ho * wo

    parents = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        xp_b = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        cols_b = _patches(xp_b, k, stride, dilation, ho, wo)
        if w.requires_grad:
            dw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0)
            w.accumulate_grad(dw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2).reshape(n, cin, k, k, ho, wo)
            dxp = np.zeros_like(xp_b)
            for i in range(k):
                r0 = i * dilation
                r1 = r0 + stride * (ho - 1) + 1
                for j in range(k):
                    c0 = j * dilation
                    c1 = c0 + stride * (wo - 1) + 1
                    dxp[:, :, r0:r1:stride, c0:c1:stride] += dcols[:, :, i, j]
            if padding:
                x.accumulate_grad(dxp[:, :, padding:padding + h, padding:padding + ww])
            else:
                x.accumulate_grad(dxp)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _wrap(out_data, parents, bwd, "conv2d")


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    if logits.data.ndim != 2:
        raise ConfigError("softmax_cross_entropy expects (rows, classes) logits")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (logits.shape[0],):
        raise ConfigError(f"labels shape {labels.shape} != ({logits.shape[0]},)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_norm
    rows = np.arange(labels.shape[0])
    out_data = np.asarray(-logp[rows, labels].mean())

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        logits.accumulate_grad(p * (float(g) / labels.shape[0]))

    return _wrap(out_data, (logits,), bwd, "softmax_cross_entropy")


def smooth_l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean elementwise smooth-L1 against a constant target.

    Per element: 0.5 d^2 when |d| < 1, else |d| - 0.5.
    """
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ConfigError(f"smooth_l1 target shape {target.shape} != {pred.shape}")
    d = pred.data - target
    a = np.abs(d)
    elem = np.where(a < 1.0, 0.5 * d * d, a - 0.5)
    out_data = np.asarray(elem.mean())

    def bwd(g):
        pred.accumulate_grad(np.clip(d, -1.0, 1.0) * (float(g) / d.size))

    return _wrap(out_data, (pred,), bwd, "smooth_l1_loss")


# ---------------------------------------------------------------------------
# the reverse sweep and the optimizer


def backward(root: Tensor) -> None:
    """Propagate d(root)/d(node) to every reachable node.

    The root must be scalar. Topological order is built over the ordered
    parent tuples, so accumulation order (and hence bit-level results) is
    reproducible run to run.
    """
    if root.data.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
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

    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            _check_finite(node.grad, "backward")


def sgd_step(
    params: Iterable[Parameter], lr: float, momentum: float = 0.0, weight_decay: float = 0.0
) -> None:
    """In-place SGD(+momentum) update; clears gradients afterwards.

    weight_decay adds the usual L2 pull (g + wd * value) before the
    momentum buffer, as in the SSD-lineage training recipes.
    """
    for p in params:
        g = p.tensor.grad
        if g is None:
            raise ContractError(f"sgd_step: parameter {p.name!r} has no gradient")
        if weight_decay != 0.0:
            g = g + weight_decay * p.tensor.data
        if momentum != 0.0:
            if p.velocity is None:
                p.velocity = np.zeros_like(p.tensor.data)
            p.velocity *= momentum
            p.velocity += g
            p.tensor.data -= lr * p.velocity
        else:
            p.tensor.data -= lr * g
        p.tensor.grad = None
