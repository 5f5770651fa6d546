"""Dense float32 tensors with reverse-mode automatic differentiation.

The operator set covers small residual CNNs: convolution, linear, batch
norm, ReLU, residual add, global average pooling, log-softmax, and the
reductions needed for classification and distillation losses. Gradients
accumulate by summation when a node feeds several consumers, so a shared
feature map receives the sum of the contributions from every branch that
consumed it.

Reduction order is fixed: elementwise reductions use numpy's pairwise
summation and matrix products go through the BLAS gemm numpy ships with,
so repeated runs in one environment are bit-identical.

Internal forward kernels (the ``_*_forward`` helpers) follow the dtype of
their inputs; the public Tensor API stores float32. Tests exploit this to
run finite-difference oracles in float64.
"""

from __future__ import annotations

import itertools

import numpy as np

_node_ids = itertools.count()


class Tensor:
    """A numpy-backed array node in a reverse-mode differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_node_ids)
        self._parents = ()
        self._grad_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, excluded from differentiation; shares storage."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return _scalar_affine(self, 1.0, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return _scalar_affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __neg__(self):
        return _scalar_affine(self, -1.0, 0.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, -other)
        return _scalar_affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        return _scalar_affine(self, -1.0, float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not part of the op set; divide by a scalar")
        return _scalar_affine(self, 1.0 / float(other), 0.0)

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum(dtype=np.float32)).reshape(())

        def grad_fn(g):
            return (np.broadcast_to(g, self.data.shape).astype(np.float32, copy=True),)

        return custom_op("sum", out_data, (self,), grad_fn)

    def mean(self) -> "Tensor":
        inv = np.float32(1.0 / self.data.size)
        out_data = np.asarray(self.data.sum(dtype=np.float32) * inv).reshape(())

        def grad_fn(g):
            return (np.broadcast_to(g * inv, self.data.shape).astype(np.float32, copy=True),)

        return custom_op("mean", out_data, (self,), grad_fn)

    # -- backward -----------------------------------------------------------

    def backward(self):
        """Assign ``grad`` on every reachable tensor with ``requires_grad``.

        The loss must be scalar. Each operation record in the graph is
        visited exactly once, in reverse topological order; multi-consumer
        nodes therefore receive their full summed gradient before their own
        rule runs.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _reverse_topo(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)


def _reverse_topo(root: Tensor):
    """Iterative post-order DFS, reversed: consumers before producers."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


def _accumulate(t: Tensor, g):
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        t.grad += g


def custom_op(op: str, out_data, inputs, grad_fn) -> Tensor:
    """Wire an externally computed array into the graph.

    ``grad_fn(upstream)`` must return one gradient array per input (or None
    for inputs that get nothing). This is the hook the quantizer uses to
    install its straight-through rule; all built-in ops route through it
    too.
    """
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if out.requires_grad:
        def _backward(g):
            for t, gi in zip(inputs, grad_fn(g)):
                if gi is not None:
                    _accumulate(t, gi)

        out._parents = tuple(inputs)
        out._grad_fn = _backward
        out._op = op
    return out


def _scalar_affine(t: Tensor, a: float, b: float) -> Tensor:
    a32 = np.float32(a)

    def grad_fn(g):
        return (g * a32,)

    return custom_op("affine", t.data * a32 + np.float32(b), (t,), grad_fn)


# -- elementwise ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

    def grad_fn(g):
        return g, g

    return custom_op("add", a.data + b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shapes {a.data.shape} and {b.data.shape} differ")

    def grad_fn(g):
        ga = g * b.data if a.requires_grad else None
        gb = g * a.data if b.requires_grad else None
        return ga, gb

    return custom_op("mul", a.data * b.data, (a, b), grad_fn)


def relu(t: Tensor) -> Tensor:
    # Subgradient at 0 is defined as 0 (strict > in the mask).
    def grad_fn(g):
        return (g * (t.data > 0),)

    return custom_op("relu", np.maximum(t.data, 0), (t,), grad_fn)


# -- linear operators --------------------------------------------------------


def _conv_out_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    """(N,C,Hp,Wp) -> (N*oh*ow, C*kh*kw) patch matrix; one copy."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c = xp.shape[0], xp.shape[1]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)


def _conv2d_forward(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, i, kh, kw = w.shape
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wd, kw, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = cols @ w.reshape(o, -1).T
    if b is not None:
        out = out + b
    return out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2), xp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2d cross-correlation over NCHW input with an OIkk kernel."""
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be NCHW, got {x.ndim}d shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be OIkk, got {weight.ndim}d shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {weight.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(
            f"conv2d: bias shape {bias.shape} does not match {weight.shape[0]} output channels")

    n, _, h, wd = x.shape
    o, c, kh, kw = weight.shape
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} does not fit {h}x{wd} input at padding {padding}")

    out_data, xp = _conv2d_forward(x.data, weight.data,
                                   bias.data if bias is not None else None, stride, padding)
    inputs = (x, weight) if bias is None else (x, weight, bias)
    # The padded input is only needed for the weight gradient; dropping it
    # for frozen-weight convs keeps graft branches through the frozen model
    # from retaining every activation buffer.
    xp_shape = xp.shape
    saved_xp = xp if weight.requires_grad else None

    def grad_fn(g):
        gout = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gx = gw = gb = None
        if weight.requires_grad:
            cols = _im2col(saved_xp, kh, kw, stride, oh, ow)
            gw = (gout.T @ cols).reshape(weight.data.shape)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=0)
        if x.requires_grad:
            gcols = gout @ weight.data.reshape(o, -1)
            # contiguous before the 9 strided adds below; one copy beats
            # nine gathers from a transposed view
            gwin = np.ascontiguousarray(
                gcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5))
            gxp = np.zeros(xp_shape, dtype=np.float32)
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki:ki + stride * oh:stride,
                        kj:kj + stride * ow:stride] += gwin[:, :, :, :, ki, kj]
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    return custom_op("conv2d", out_data, inputs, grad_fn)


def _linear_forward(x, w, b):
    out = x @ w.T
    if b is not None:
        out = out + b
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x (N,D) @ weight (C,D)^T + bias (C,)."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"linear: need 2d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"linear: input feature size {x.shape[1]} does not match weight's {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias shape {bias.shape} vs {weight.shape[0]} outputs")

    out_data = _linear_forward(x.data, weight.data, bias.data if bias is not None else None)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return custom_op("linear", out_data, inputs, grad_fn)


def _batchnorm2d_forward(x, gamma, beta, running_mean, running_var,
                         training, momentum, eps):
    """Returns (out, xhat, inv_std). Mutates running stats in train mode."""
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, xhat, inv


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor,
                running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-wise batch normalization over an NCHW tensor.

    Train mode normalizes with batch statistics and folds them into the
    running buffers (running variance uses the unbiased estimate, the
    normalization itself the biased one). Eval mode normalizes with the
    running buffers and is still differentiable w.r.t. input and affine
    parameters, which grafted frozen blocks rely on.
    """
    if eps <= 0:
        raise ValueError(f"batchnorm2d: eps must be positive, got {eps}")
    if x.ndim != 4:
        raise ValueError(f"batchnorm2d: input must be NCHW, got shape {x.shape}")
    if training and x.shape[0] == 0:
        raise ValueError("batchnorm2d: zero batch size in train mode")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm2d: affine shapes {gamma.shape}/{beta.shape} vs {c} channels")

    out_data, xhat, inv = _batchnorm2d_forward(
        x.data, gamma.data, beta.data, running_mean, running_var, training, momentum, eps)

    def grad_fn(g):
        axes = (0, 2, 3)
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            if training:
                m = np.float32(x.shape[0] * x.shape[2] * x.shape[3])
                gx = (inv[None, :, None, None] / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes)[None, :, None, None]
                    - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None])
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return custom_op("batchnorm2d", out_data, (x, gamma, beta), grad_fn)


# -- reductions and classifier head ------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> NC spatial mean."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: input must be NCHW, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    inv = np.float32(1.0 / (h * w))

    def grad_fn(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.data.shape).astype(np.float32, copy=True),)

    return custom_op("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), grad_fn)


def _log_softmax_forward(x):
    m = x.max(axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    return x - lse


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log softmax on an (N, C) tensor; logsumexp of each row is 0."""
    if x.ndim != 2:
        raise ValueError(f"log_softmax: input must be (N, C), got shape {x.shape}")
    out_data = _log_softmax_forward(x.data)

    def grad_fn(g):
        return (g - np.exp(out_data) * g.sum(axis=1, keepdims=True),)

    return custom_op("log_softmax", out_data, (x,), grad_fn)


def nll_loss(log_probs: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under row log-probs."""
    labels = np.asarray(labels)
    n, c = log_probs.shape
    if labels.shape != (n,):
        raise ValueError(f"nll_loss: labels shape {labels.shape} vs batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"nll_loss: label out of class range [0, {c})")
    picked = log_probs.data[np.arange(n), labels]
    out_data = np.asarray(-picked.sum(dtype=np.float32) / np.float32(n)).reshape(())

    def grad_fn(g):
        gx = np.zeros_like(log_probs.data)
        gx[np.arange(n), labels] = -g / np.float32(n)
        return (gx,)

    return custom_op("nll_loss", out_data, (log_probs,), grad_fn)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between logits rows and integer labels."""
    return nll_loss(log_softmax(logits), labels)
