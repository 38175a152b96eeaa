"""Differentiable layer kernels: forward passes paired with hand-derived backwards.

Every forward returns (output, cache); the paired backward consumes the cache
and returns gradients in the same order as its differentiable inputs. Kernels
are pure apart from two explicitly passed pieces of state: the dropout rng and
the batchnorm running statistics (mutated only in train mode).

Layout convention is NCHW for feature maps, (rows=samples, cols=features) for
dense activations. Convolution is valid (unpadded); pooling windows are
non-overlapping with trailing remainder rows/cols dropped.
"""

import numpy as np

from .errors import ConfigurationError, UninitializedStatisticsError, ValidationError
from .tensor import ensure_finite


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw, stride):
    """(N, C, H, W) -> (C*kh*kw, N*H'*W') patch matrix.

    One slab copy per kernel offset keeps every inner run contiguous, which
    makes the subsequent GEMM the dominant cost rather than the gather. For
    stride > 1 the input is split into its stride phases first so the slabs
    stay contiguous instead of degrading to per-element strided reads.
    """
    n, c, h, w = x.shape
    hp = (h - kh) // stride + 1
    wp = (w - kw) // stride + 1
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, hp, wp), dtype=x.dtype)
    if stride == 1:
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xt[:, :, i:i + hp, j:j + wp]
    else:
        s = stride
        phases = {}
        for pi in range(min(s, kh)):
            for pj in range(min(s, kw)):
                phases[pi, pj] = np.ascontiguousarray(xt[:, :, pi::s, pj::s])
        for i in range(kh):
            for j in range(kw):
                ph = phases[i % s, j % s]
                cols[:, i, j] = ph[:, :, i // s:i // s + hp, j // s:j // s + wp]
    return cols.reshape(c * kh * kw, n * hp * wp), hp, wp


def _col2im(dcols, x_shape, kh, kw, stride, hp, wp):
    """Scatter-add the (C*kh*kw, N*H'*W') gradient back onto the input."""
    n, c, h, w = x_shape
    dcols = dcols.reshape(c, kh, kw, n, hp, wp)
    dxt = np.zeros((c, n, h, w), dtype=dcols.dtype)
    if stride == 1:
        for i in range(kh):
            for j in range(kw):
                dxt[:, :, i:i + hp, j:j + wp] += dcols[:, i, j]
    else:
        s = stride
        for pi in range(min(s, kh)):
            for pj in range(min(s, kw)):
                acc = np.zeros_like(dxt[:, :, pi::s, pj::s])
                for i in range(pi, kh, s):
                    for j in range(pj, kw, s):
                        acc[:, :, i // s:i // s + hp, j // s:j // s + wp] += dcols[:, i, j]
                dxt[:, :, pi::s, pj::s] = acc
    return np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))


def conv2d_forward(x, w, b, stride=1):
    """Valid 2-D cross-correlation.

    x: (N, C, H, W), w: (F, C, kh, kw), b: (F,).
    Output spatial size: floor((H - kh) / stride) + 1.
    """
    ensure_finite(x, "conv2d input")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise ConfigurationError(f"conv2d channel mismatch: input has {c}, kernel expects {cw}")
    if b.shape != (f,):
        raise ConfigurationError(f"conv2d bias shape {b.shape} does not match {f} filters")
    if kh > h or kw > wd:
        raise ConfigurationError(f"conv2d kernel {kh}x{kw} does not fit input {h}x{wd}")
    if stride < 1:
        raise ConfigurationError("conv2d stride must be >= 1")
    cols, hp, wp = _im2col(x, kh, kw, stride)
    y_mat = w.reshape(f, -1) @ cols                       # (F, N*H'*W')
    # the broadcast add also materializes the (N, F, H', W') layout
    y = y_mat.reshape(f, n, hp, wp).transpose(1, 0, 2, 3) + b[None, :, None, None]
    return y, (x.shape, cols, w, stride, hp, wp)


def conv2d_backward(dy, cache):
    """Gradients for conv2d_forward. Returns (dx, dw, db)."""
    x_shape, cols, w, stride, hp, wp = cache
    f, c, kh, kw = w.shape
    db = dy.sum(axis=(0, 2, 3))
    dy_mat = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(f, -1)
    dw = (dy_mat @ cols.T).reshape(f, c, kh, kw)
    dcols = w.reshape(f, -1).T @ dy_mat                   # (C*kh*kw, N*H'*W')
    dx = _col2im(dcols, x_shape, kh, kw, stride, hp, wp)
    return dx, dw, db


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2d_forward(x, k):
    """Non-overlapping k x k max pooling; remainder rows/cols are dropped."""
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ConfigurationError(f"pool window {k} larger than spatial extent {h}x{w}")
    ho, wo = h // k, w // k
    trimmed = x[:, :, : ho * k, : wo * k]
    blocks = trimmed.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    # argmax picks the first maximum, i.e. the lowest flat index within the window
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, k, idx)


def maxpool2d_backward(dy, cache):
    """Route the upstream gradient to each window's argmax cell."""
    in_shape, k, idx = cache
    n, c, h, w = in_shape
    ho, wo = h // k, w // k
    dblocks = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
    np.put_along_axis(dblocks, idx[..., None], dy[..., None], axis=-1)
    dx = np.zeros(in_shape, dtype=dy.dtype)
    dx[:, :, : ho * k, : wo * k] = (
        dblocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
    )
    return dx


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

class BatchNormState:
    """Running statistics handle for one batchnorm layer.

    Mutated only by train-mode forwards; eval mode reads it and raises if no
    train pass has populated it yet.
    """

    def __init__(self, channels, dtype):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.count = 0  # train-mode passes seen

    def copy(self):
        out = BatchNormState(self.mean.shape[0], self.mean.dtype)
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        out.count = self.count
        return out


def batchnorm2d_forward(x, gamma, beta, state, mode, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over (N, H, W).

    Train mode normalizes with batch statistics and folds them into the
    running stats via exponential moving average (keep `momentum` of the old
    value). Eval mode uses the running stats only.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigurationError("batchnorm gamma/beta must have one entry per channel")
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ConfigurationError("batchnorm train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        state.mean = momentum * state.mean + (1.0 - momentum) * mean.astype(state.mean.dtype)
        state.var = momentum * state.var + (1.0 - momentum) * var.astype(state.var.dtype)
        state.count += 1
    elif mode == "eval":
        if state.count == 0:
            raise UninitializedStatisticsError(
                "batchnorm eval mode before any train-mode pass; running stats are unpopulated"
            )
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
    else:
        raise ValidationError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, mode)


def batchnorm2d_backward(dy, cache):
    """Gradients for batchnorm2d_forward. Returns (dx, dgamma, dbeta)."""
    xhat, inv_std, gamma, mode = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if mode == "eval":
        dx = dxhat * inv_std[None, :, None, None]
        return dx, dgamma, dbeta
    n, c, h, w = dy.shape
    m = n * h * w
    sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def elu_forward(x, alpha=1.0):
    """x for x >= 0, alpha * (exp(x) - 1) below."""
    if alpha <= 0:
        raise ConfigurationError("elu alpha must be positive")
    neg = x < 0
    y = x.copy()
    np.expm1(x, out=y, where=neg)  # transcendental only on the negative part
    if alpha != 1.0:
        np.multiply(y, np.asarray(alpha, dtype=y.dtype), out=y, where=neg)
    return y, (neg, y, alpha)


def elu_backward(dy, cache):
    # derivative is 1 for x >= 0 and alpha * exp(x) = y + alpha below
    neg, y, alpha = cache
    dx = dy.copy()
    np.multiply(dy, y + np.asarray(alpha, dtype=y.dtype), out=dx, where=neg)
    return dx


def softmax_forward(z):
    """Row-wise softmax, overflow-safe via max subtraction."""
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    g = e / e.sum(axis=1, keepdims=True)
    return g, (g,)


def softmax_backward(dy, cache):
    """Jacobian-vector product: dz_i = g_i * (dy_i - sum_j dy_j g_j)."""
    (g,) = cache
    dot = (dy * g).sum(axis=1, keepdims=True)
    return g * (dy - dot)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense_forward(x, w, b):
    """Row-wise affine map. x: (N, D), w: (D, M), b: (M,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigurationError(f"dense shape mismatch: input {x.shape}, weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise ConfigurationError(f"dense bias shape {b.shape} does not match width {w.shape[1]}")
    return x @ w + b, (x, w)


def dense_backward(dy, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# dropout
# ---------------------------------------------------------------------------

def dropout_forward(x, rate, mode, rng=None):
    """Inverted dropout: train mode zeroes with probability `rate` and scales
    survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x, (None, 1.0)
    if rng is None:
        raise ValidationError("train-mode dropout requires a seeded rng")
    keep = rng.random(x.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep.astype(x.dtype) * np.asarray(scale, dtype=x.dtype)
    return x * mask, (mask, scale)


def dropout_backward(dy, cache):
    mask, _ = cache
    if mask is None:
        return dy
    return dy * mask
