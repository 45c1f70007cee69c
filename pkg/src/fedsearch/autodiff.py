"""Minimal reverse-mode autodiff over numpy arrays.

Implements exactly the operators the convolutional autoencoder needs:
strided 2-D convolution, its adjoint (transpose convolution), dense
layers, ReLU, sigmoid, elementwise add, reshape, and mean squared error.
Graphs are built dynamically; ``backward`` walks the tape once and
accumulates gradients into parameter tensors.

All operators are pure functions of immutable inputs and are
deterministic: the same inputs produce bit-identical outputs for a fixed
dtype.  Convolutions accept a single image ``[C, H, W]`` or a batch
``[N, C, H, W]``; gradients over a batch are accumulated in a fixed
order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GraphError, TrainingError


class Tensor:
    """A node in the computation graph wrapping an ``np.ndarray``.

    ``is_param`` marks trainable leaves: only those (and nodes that
    depend on them) participate in the backward pass.  Frozen leaves
    never receive a gradient.
    """

    __slots__ = ("data", "grad", "is_param", "name", "_parents", "_backward", "_needs_grad")

    def __init__(self, data, *, is_param=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.is_param = is_param
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._needs_grad = is_param or any(p._needs_grad for p in _parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        tag = self.name or ("param" if self.is_param else "tensor")
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"


def as_tensor(x, *, is_param=False, name=None) -> Tensor:
    """Wrap raw array data in a graph leaf; passes an existing Tensor through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), is_param=is_param, name=name)


# -- im2col machinery ------------------------------------------------------
#
# Patches are gathered/scattered with kh*kw strided slice operations rather
# than per-site loops; overlapping windows make writeable strided views
# unsafe, so col2im adds slice-by-slice.

def _conv_out_size(size, k, stride, padding):
    return (size + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, out_shape, kh, kw, stride, padding):
    n, c, h, w = out_shape
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            padded[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if padding:
        return padded[:, :, padding : padding + h, padding : padding + w]
    return padded


def _check_spatial(name, h, w, kh, kw, stride, padding):
    if stride < 1:
        raise DimensionError(f"{name}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise DimensionError(f"{name}: padding must be >= 0, got {padding}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"{name}: kernel {kh}x{kw} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )


def conv2d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Strided 2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, kH, kW]``; ``bias`` is ``[C_out]`` or None.  Output
    spatial size is ``floor((H + 2*padding - kH) / stride) + 1``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    bias = as_tensor(bias) if bias is not None else None
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be 4-D, got shape {kernel.shape}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"conv2d: input must be 3-D or 4-D, got shape {x.shape}")
    x4 = x.data if batched else x.data[None]
    n, c, h, w = x4.shape
    c_out, c_in, kh, kw = kernel.shape
    if c != c_in:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    _check_spatial("conv2d", h, w, kh, kw, stride, padding)

    cols, ho, wo = _im2col(x4, kh, kw, stride, padding)
    kmat = kernel.data.reshape(c_out, c_in * kh * kw)
    out_flat = np.matmul(kmat, cols)
    if bias is not None:
        out_flat = out_flat + bias.data[:, None]
    out_data = out_flat.reshape(n, c_out, ho, wo)
    if not batched:
        out_data = out_data[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(out_data, _parents=parents)

    def _backward():
        g = out.grad if batched else out.grad[None]
        g_flat = g.reshape(n, c_out, ho * wo)
        if kernel._needs_grad:
            k_grad = np.matmul(g_flat, cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(k_grad.reshape(kernel.shape))
        if bias is not None and bias._needs_grad:
            bias._accumulate(g_flat.sum(axis=(0, 2)))
        if x._needs_grad:
            col_grad = np.matmul(kmat.T, g_flat)
            x_grad = _col2im(col_grad, (n, c, h, w), kh, kw, stride, padding)
            x._accumulate(x_grad if batched else x_grad[0])

    out._backward = _backward
    return out


def transpose_conv2d(x, kernel, bias=None, stride=1, padding=0) -> Tensor:
    """Adjoint of ``conv2d`` with the same kernel and geometry.

    ``kernel`` keeps the ``[C_out, C_in, kH, kW]`` layout of the paired
    convolution, so the input here carries ``C_out`` channels and the
    output ``C_in``.  Output spatial size is
    ``(H - 1) * stride - 2*padding + kH``.  For zero bias,
    ``<conv2d(a, k), b> == <a, transpose_conv2d(b, k)>`` holds exactly in
    exact arithmetic.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    bias = as_tensor(bias) if bias is not None else None
    if kernel.data.ndim != 4:
        raise DimensionError(f"transpose_conv2d: kernel must be 4-D, got shape {kernel.shape}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise DimensionError(f"transpose_conv2d: input must be 3-D or 4-D, got shape {x.shape}")
    x4 = x.data if batched else x.data[None]
    n, c, h, w = x4.shape
    c_up, c_dn, kh, kw = kernel.shape
    if c != c_up:
        raise DimensionError(f"transpose_conv2d: input has {c} channels, kernel expects {c_up}")
    if bias is not None and bias.shape != (c_dn,):
        raise DimensionError(f"transpose_conv2d: bias shape {bias.shape} != ({c_dn},)")
    if stride < 1:
        raise DimensionError(f"transpose_conv2d: stride must be >= 1, got {stride}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"transpose_conv2d: output size {ho}x{wo} not positive for input {h}x{w}"
        )

    x_flat = x4.reshape(n, c_up, h * w)
    kmat = kernel.data.reshape(c_up, c_dn * kh * kw)
    cols = np.matmul(kmat.T, x_flat)
    out_data = _col2im(cols, (n, c_dn, ho, wo), kh, kw, stride, padding)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]
    if not batched:
        out_data = out_data[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = Tensor(out_data, _parents=parents)

    def _backward():
        g = out.grad if batched else out.grad[None]
        g_cols, _, _ = _im2col(g, kh, kw, stride, padding)
        if x._needs_grad:
            x_grad = np.matmul(kmat, g_cols).reshape(n, c_up, h, w)
            x._accumulate(x_grad if batched else x_grad[0])
        if kernel._needs_grad:
            k_grad = np.matmul(x_flat, g_cols.transpose(0, 2, 1)).sum(axis=0)
            kernel._accumulate(k_grad.reshape(kernel.shape))
        if bias is not None and bias._needs_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    out._backward = _backward
    return out


def dense(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape ``[F]`` or ``[N, F]``."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if weight.data.ndim != 2:
        raise DimensionError(f"dense: weight must be 2-D, got shape {weight.shape}")
    f_in, f_out = weight.shape
    if x.data.ndim not in (1, 2) or x.shape[-1] != f_in:
        raise DimensionError(f"dense: input shape {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (f_out,):
        raise DimensionError(f"dense: bias shape {bias.shape} != ({f_out},)")

    out_data = x.data @ weight.data
    if bias is not None:
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor(out_data, _parents=parents)

    def _backward():
        g = out.grad
        if x._needs_grad:
            x._accumulate(g @ weight.data.T)
        if weight._needs_grad:
            if x.data.ndim == 1:
                weight._accumulate(np.outer(x.data, g))
            else:
                weight._accumulate(x.data.T @ g)
        if bias is not None and bias._needs_grad:
            bias._accumulate(g if g.ndim == 1 else g.sum(axis=0))

    out._backward = _backward
    return out


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = Tensor(np.maximum(x.data, 0), _parents=(x,))

    def _backward():
        if x._needs_grad:
            x._accumulate(out.grad * (x.data > 0))

    out._backward = _backward
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # Branch on sign to avoid overflow in exp for large |x|.
    d = x.data
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    s = s.astype(d.dtype, copy=False)
    out = Tensor(s, _parents=(x,))

    def _backward():
        if x._needs_grad:
            x._accumulate(out.grad * s * (1 - s))

    out._backward = _backward
    return out


def add(x, y) -> Tensor:
    x = as_tensor(x)
    y = as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"add: shapes {x.shape} and {y.shape} differ")
    out = Tensor(x.data + y.data, _parents=(x, y))

    def _backward():
        if x._needs_grad:
            x._accumulate(out.grad)
        if y._needs_grad:
            y._accumulate(out.grad)

    out._backward = _backward
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), _parents=(x,))

    def _backward():
        if x._needs_grad:
            x._accumulate(out.grad.reshape(x.shape))

    out._backward = _backward
    return out


def mse(a, b) -> Tensor:
    """Mean of squared elementwise differences; the training loss."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    out = Tensor(np.asarray((diff * diff).mean(), dtype=a.dtype), _parents=(a, b))

    def _backward():
        scale = out.grad * 2.0 / n
        if a._needs_grad:
            a._accumulate(scale * diff)
        if b._needs_grad:
            b._accumulate(-scale * diff)

    out._backward = _backward
    return out


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar root.

    Populates ``.grad`` on every parameter tensor reachable from
    ``root``.  Frozen leaves keep ``grad is None``.
    """
    if root.data.size != 1:
        raise GraphError(f"backward root must be a scalar, got shape {root.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent._needs_grad:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward is not None and node._needs_grad:
            node._backward()


# -- optimizers ------------------------------------------------------------

SGD = "sgd"
ADAM = "adam"


@dataclass
class OptimizerState:
    """Flat-vector optimizer state; moments exist only for Adam."""

    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in (SGD, ADAM):
            raise DimensionError(f"unknown optimizer kind: {self.kind!r}")
        if self.lr <= 0:
            raise DimensionError(f"learning rate must be positive, got {self.lr}")
        if self.kind == SGD and (self.m is not None or self.v is not None):
            raise DimensionError("SGD state must not carry moment accumulators")


def sgd(lr: float) -> OptimizerState:
    return OptimizerState(kind=SGD, lr=lr)


def adam(lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(kind=ADAM, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def _locate_layer(index: int, layout) -> str:
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        if index < offset + size:
            return name
        offset += size
    return f"offset {index}"


def optimizer_step(state: OptimizerState, weights: np.ndarray, grad: np.ndarray, layout=None) -> np.ndarray:
    """One update on a flat weight vector; returns the new vector.

    ``state`` is advanced in place.  A non-finite gradient aborts with
    the offending layer name when ``layout`` is given.
    """
    weights = np.asarray(weights)
    grad = np.asarray(grad)
    if weights.shape != grad.shape:
        raise DimensionError(f"optimizer_step: weights {weights.shape} vs grad {grad.shape}")
    finite = np.isfinite(grad)
    if not finite.all():
        index = int(np.argmin(finite))
        where = _locate_layer(index, layout) if layout else f"index {index}"
        raise TrainingError(f"non-finite gradient in {where}")

    if state.kind == SGD:
        return weights - state.lr * grad

    if state.m is None:
        state.m = np.zeros_like(weights)
        state.v = np.zeros_like(weights)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.step)
    v_hat = state.v / (1 - state.beta2**state.step)
    return weights - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
