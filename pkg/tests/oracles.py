"""Independent reference implementations used as test oracles.

Forward values are checked against brute-force loops or scipy routines;
gradients are checked against central finite differences computed in
float64 on independently written forward functions. Nothing in this file
imports the kernels under test except the thin graph-building wrappers
inside the FD case registry.
"""

import math

import numpy as np
from scipy.signal import correlate2d
from scipy.special import log_softmax as sp_log_softmax

from bwrf import tensor as T
from bwrf.tensor import Tensor

# -- forward-value oracles ----------------------------------------------------


def conv2d_bruteforce(x, w, b, stride, padding):
    """Nested-loop cross-correlation, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[ni, ci, yi * stride + ki, xi * stride + kj] * w[oi, ci, ki, kj]
                    out[ni, oi, yi, xi] = acc + (b[oi] if b is not None else 0.0)
    return out


def conv2d_f64(x, w, b, stride, padding):
    """scipy.correlate2d based convolution, float64; independent of im2col."""
    n, c = x.shape[0], x.shape[1]
    o = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    rows = []
    for ni in range(n):
        chans = []
        for oi in range(o):
            acc = sum(correlate2d(xp[ni, ci], w[oi, ci], mode="valid") for ci in range(c))
            chans.append(acc[::stride, ::stride])
        rows.append(np.stack(chans))
    out = np.stack(rows)
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def linear_bruteforce(x, w, b):
    n, d = x.shape
    c = w.shape[0]
    out = np.zeros((n, c))
    for ni in range(n):
        for ci in range(c):
            acc = 0.0
            for di in range(d):
                acc += float(x[ni, di]) * float(w[ci, di])
            out[ni, ci] = acc + (float(b[ci]) if b is not None else 0.0)
    return out


def linear_f64(x, w, b):
    out = x @ w.T
    return out if b is None else out + b


def batchnorm_f64(x, gamma, beta, rm, rv, training, eps=1e-5):
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = rm, rv
    xhat = (x - mean[None, :, None, None]) / np.sqrt(var + eps)[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def gap_f64(x):
    return x.mean(axis=(2, 3))


def relu_f64(x):
    return np.maximum(x, 0.0)


def log_softmax_f64(x):
    return sp_log_softmax(x, axis=1)


def cross_entropy_f64(logits, labels):
    lp = sp_log_softmax(logits, axis=1)
    return -lp[np.arange(len(labels)), labels].mean()


def kd_loss_f64(student, teacher, temp):
    """temp^2 * mean-over-batch KL(softmax(teacher/T) || softmax(student/T))."""
    ls = sp_log_softmax(np.asarray(student, dtype=np.float64) / temp, axis=1)
    lt = sp_log_softmax(np.asarray(teacher, dtype=np.float64) / temp, axis=1)
    pt = np.exp(lt)
    kl_rows = (pt * (lt - ls)).sum(axis=1)
    return temp * temp * kl_rows.mean()


def cosine_f64(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- quantizer oracles --------------------------------------------------------


def round_half_away_f64(x):
    """Exact round-to-nearest, ties away from zero, on a float64 scalar."""
    t = math.trunc(x)
    f = x - t
    if f >= 0.5:
        return t + 1
    if f <= -0.5:
        return t - 1
    return t


def quantize_scalar_ref(v, s, qmin, qmax):
    """Scalar evaluation of the fake-quantization forward in float32 steps.

    Division and the final multiply use float32 arithmetic so the result is
    bit-comparable to the vectorized kernel; clip and the tie-away round are
    exact in float64 on the exactly-upcast float32 quotient.
    """
    vs = np.float32(v) / np.float32(s)
    x = min(max(float(vs), float(qmin)), float(qmax))
    z = round_half_away_f64(x)
    return np.float32(np.float64(z) * np.float64(np.float32(s)))


def ste_mask_scalar_ref(v, s, qmin, qmax):
    vs = float(np.float32(v) / np.float32(s))
    return 1.0 if qmin < vs < qmax else 0.0


def scale_grad_scalar_ref(v, s, qmin, qmax):
    """Per-element analytic scale gradient (no upstream, no 1/sqrt(n P))."""
    vs = float(np.float32(v) / np.float32(s))
    if vs <= qmin:
        return float(qmin)
    if vs >= qmax:
        return float(qmax)
    return float(round_half_away_f64(vs)) - vs


def scale_grad_fd_ref(v, s, qmin, qmax, h):
    """Central finite difference of the straight-through forward in s.

    The training-time gradient treats round as identity plus a constant
    residual, so the differenced function freezes the rounding residual at
    the base scale: f(s') = s' * (clip(v/s', qmin, qmax) + k) with
    k = round(clip(v/s)) - clip(v/s). Differencing the raw forward instead
    would produce the locally-constant round value, which is not the
    gradient the estimator defines.
    """
    v = float(v)
    s = float(s)
    base = min(max(v / s, qmin), qmax)
    k = round_half_away_f64(base) - base

    def f(sv):
        return sv * (min(max(v / sv, qmin), qmax) + k)

    return (f(s + h) - f(s - h)) / (2.0 * h)


# -- finite-difference harness -------------------------------------------------


def fd_gradient(f, arrays, idx, h=1e-3):
    """Central-difference gradient of scalar f w.r.t. arrays[idx], float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    g = np.zeros_like(arrays[idx])
    flat = arrays[idx].reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*arrays)
        flat[i] = orig - h
        fm = f(*arrays)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def run_fd_case(arrays, op32, op64, rng, h=1e-3):
    """Max norm-relative error between graph gradients and FD, over inputs.

    A fixed random projection turns non-scalar outputs into a scalar loss so
    upstream gradients are non-uniform.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op32(*tensors)
    if out.data.ndim == 0:
        proj = None
        loss = out
    else:
        proj = rng.standard_normal(out.data.shape).astype(np.float32)
        loss = T.mul(out, Tensor(proj)).sum()
    loss.backward()

    def f(*arrs):
        o = op64(*arrs)
        return float((o * proj).sum()) if proj is not None else float(o)

    worst = 0.0
    for i, a in enumerate(arrays):
        g_fd = fd_gradient(f, arrays, i, h=h)
        g_an = np.asarray(tensors[i].grad, dtype=np.float64)
        denom = max(np.linalg.norm(g_fd), 1e-8)
        worst = max(worst, float(np.linalg.norm(g_an - g_fd) / denom))
    return worst


def _draw(rng, shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def _draw_nonkink(rng, shape, margin=0.05):
    x = rng.standard_normal(shape).astype(np.float32)
    x = np.where(np.abs(x) < margin, x + np.sign(x) * 2 * margin, x)
    x = np.where(x == 0, np.float32(2 * margin), x)
    return x.astype(np.float32)


def _case_conv2d(rng):
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    arrays = (_draw(rng, (2, 2, 5, 5)), _draw(rng, (3, 2, 3, 3)), _draw(rng, (3,)))
    return arrays, (
        lambda x, w, b: T.conv2d(x, w, b, stride=stride, padding=padding),
        lambda x, w, b: conv2d_f64(x, w, b, stride, padding),
    )


def _case_conv2d_nobias(rng):
    arrays = (_draw(rng, (2, 2, 4, 4)), _draw(rng, (2, 2, 3, 3)))
    return arrays, (
        lambda x, w: T.conv2d(x, w, stride=1, padding=1),
        lambda x, w: conv2d_f64(x, w, None, 1, 1),
    )


def _case_linear(rng):
    arrays = (_draw(rng, (3, 4)), _draw(rng, (5, 4)), _draw(rng, (5,)))
    return arrays, (T.linear, linear_f64)


def _case_batchnorm_train(rng):
    arrays = (_draw(rng, (2, 2, 2, 2)), _draw(rng, (2,)) + 1.0, _draw(rng, (2,)))

    def op32(x, g, b):
        return T.batchnorm2d(x, g, b, np.zeros(2, np.float32), np.ones(2, np.float32),
                             training=True)

    def op64(x, g, b):
        return batchnorm_f64(x, g, b, None, None, training=True)

    return arrays, (op32, op64)


def _case_batchnorm_eval(rng):
    rm = _draw(rng, (3,))
    rv = np.abs(_draw(rng, (3,))) + 0.5
    arrays = (_draw(rng, (2, 3, 2, 2)), _draw(rng, (3,)) + 1.0, _draw(rng, (3,)))

    def op32(x, g, b):
        return T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=False)

    def op64(x, g, b):
        return batchnorm_f64(x, g, b, rm.astype(np.float64), rv.astype(np.float64),
                             training=False)

    return arrays, (op32, op64)


def _case_relu(rng):
    arrays = (_draw_nonkink(rng, (4, 5)),)
    return arrays, (T.relu, relu_f64)


def _case_add(rng):
    arrays = (_draw(rng, (3, 4)), _draw(rng, (3, 4)))
    return arrays, (T.add, lambda a, b: a + b)


def _case_mul(rng):
    arrays = (_draw(rng, (3, 4)), _draw(rng, (3, 4)))
    return arrays, (T.mul, lambda a, b: a * b)


def _case_gap(rng):
    arrays = (_draw(rng, (2, 3, 4, 4)),)
    return arrays, (T.global_avg_pool, gap_f64)


def _case_log_softmax(rng):
    arrays = (_draw(rng, (4, 6)),)
    return arrays, (T.log_softmax, log_softmax_f64)


def _case_cross_entropy(rng):
    labels = rng.integers(0, 7, size=5)
    arrays = (_draw(rng, (5, 7)),)
    return arrays, (
        lambda x: T.cross_entropy(x, labels),
        lambda x: cross_entropy_f64(x, labels),
    )


def _case_sum(rng):
    arrays = (_draw(rng, (3, 4)),)
    return arrays, (lambda x: x.sum(), lambda x: x.sum())


def _case_mean(rng):
    arrays = (_draw(rng, (3, 4)),)
    return arrays, (lambda x: x.mean(), lambda x: x.mean())


def _case_chain(rng):
    """Composed multi-op chain: conv -> relu -> gap -> linear -> log_softmax."""
    stride = int(rng.integers(1, 3))
    # Redraw until no conv output sits near the relu kink, where central
    # differences disagree with the subgradient.
    for _ in range(100):
        arrays = (_draw(rng, (2, 2, 5, 5)), _draw(rng, (3, 2, 3, 3)), _draw(rng, (4, 3)))
        pre = conv2d_f64(arrays[0].astype(np.float64), arrays[1].astype(np.float64),
                         None, stride, 1)
        if np.abs(pre).min() > 0.05:
            break

    def op32(x, w, w2):
        h = T.relu(T.conv2d(x, w, stride=stride, padding=1))
        return T.log_softmax(T.linear(T.global_avg_pool(h), w2))

    def op64(x, w, w2):
        h = relu_f64(conv2d_f64(x, w, None, stride, 1))
        return log_softmax_f64(linear_f64(gap_f64(h), w2, None))

    return arrays, (op32, op64)


FD_CASES = {
    "conv2d": _case_conv2d,
    "conv2d_nobias": _case_conv2d_nobias,
    "linear": _case_linear,
    "batchnorm2d_train": _case_batchnorm_train,
    "batchnorm2d_eval": _case_batchnorm_eval,
    "relu": _case_relu,
    "add": _case_add,
    "mul": _case_mul,
    "global_avg_pool": _case_gap,
    "log_softmax": _case_log_softmax,
    "cross_entropy": _case_cross_entropy,
    "sum": _case_sum,
    "mean": _case_mean,
    "chain": _case_chain,
}
