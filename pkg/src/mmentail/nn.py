"""Differentiable building blocks shared by all networks.

Everything runs in float64 on plain numpy arrays. Each block has a forward
function returning (output, cache) and a matching backward function that
consumes the cache; the analytic gradients are verified against central
finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max subtraction before exponentiation)."""
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    ez = np.exp(shifted)
    return ez / ez.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# Scaled dot-product attention
# ---------------------------------------------------------------------------

def sdp_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray):
    """softmax(Q K^T / sqrt(d_k)) V.

    Works on [a,d_k]/[b,d_k]/[b,d_v] matrices or with a leading batch axis.
    Returns (output, cache); weight rows sum to 1.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    d_k = Q.shape[-1]
    if d_k <= 0:
        raise ShapeError("d_k must be positive")
    if K.shape[-1] != d_k:
        raise ShapeError(f"query dim {d_k} != key dim {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"key count {K.shape[-2]} != value count {V.shape[-2]}")
    scores = Q @ K.swapaxes(-1, -2) / np.sqrt(d_k)
    weights = softmax(scores, axis=-1)
    out = weights @ V
    return out, (Q, K, V, weights)


def sdp_attention_backward(cache, d_out: np.ndarray):
    Q, K, V, weights = cache
    d_k = Q.shape[-1]
    dV = weights.swapaxes(-1, -2) @ d_out
    dW = d_out @ V.swapaxes(-1, -2)
    # softmax backward, rowwise over the key axis
    d_scores = weights * (dW - (dW * weights).sum(axis=-1, keepdims=True))
    dQ = d_scores @ K / np.sqrt(d_k)
    dK = d_scores.swapaxes(-1, -2) @ Q / np.sqrt(d_k)
    return dQ, dK, dV


def self_attention(X: np.ndarray):
    """sdp_attention(X, X, X); cache goes to self_attention_backward."""
    return sdp_attention(X, X, X)


def self_attention_backward(cache, d_out: np.ndarray) -> np.ndarray:
    dQ, dK, dV = sdp_attention_backward(cache, d_out)
    return dQ + dK + dV


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------

def dense(x: np.ndarray, w: np.ndarray, b: np.ndarray, activation: str = "none"):
    """Affine map over the last axis, with optional ReLU."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"input dim {x.shape[-1]} != weight rows {w.shape[0]}")
    if activation not in ("none", "relu"):
        raise ValueError(f"unknown activation {activation!r}")
    pre = x @ w + b
    out = relu(pre) if activation == "relu" else pre
    return out, (x, w, pre, activation)


def dense_backward(cache, d_out: np.ndarray):
    x, w, pre, activation = cache
    d_pre = d_out * (pre > 0) if activation == "relu" else d_out
    x2 = x.reshape(-1, x.shape[-1])
    d2 = d_pre.reshape(-1, d_pre.shape[-1])
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    dx = d_pre @ w.T
    return dx, dw, db


# ---------------------------------------------------------------------------
# Valid-mode 2D convolution (cross-correlation) and max pooling
# ---------------------------------------------------------------------------

def conv2d_valid(X: np.ndarray, kernels: np.ndarray, bias: np.ndarray):
    """Cross-correlation with no padding.

    X is [h,w,c_in] or [batch,h,w,c_in]; kernels [k,k,c_in,c_out].
    Activation is the caller's job.
    """
    squeeze = X.ndim == 3
    if squeeze:
        X = X[None]
    B, H, W, c_in = X.shape
    k = kernels.shape[0]
    if kernels.shape[1] != k or kernels.shape[2] != c_in:
        raise ShapeError(f"kernels {kernels.shape} incompatible with input channels {c_in}")
    if H < k or W < k:
        raise ShapeError(f"input {H}x{W} smaller than kernel {k}x{k}")
    c_out = kernels.shape[3]
    h_out, w_out = H - k + 1, W - k + 1
    win = sliding_window_view(X, (k, k), axis=(1, 2))      # [B,ho,wo,c_in,k,k]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B, h_out * w_out, k * k * c_in)
    wm = kernels.reshape(k * k * c_in, c_out)
    out = (cols @ wm + bias).reshape(B, h_out, w_out, c_out)
    cache = (cols, X.shape, kernels, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_valid_backward(cache, d_out: np.ndarray):
    cols, x_shape, kernels, squeeze = cache
    if squeeze:
        d_out = d_out[None]
    B, H, W, c_in = x_shape
    k, _, _, c_out = kernels.shape
    h_out, w_out = H - k + 1, W - k + 1
    d_flat = d_out.reshape(B, h_out * w_out, c_out)
    d_kernels = np.tensordot(cols, d_flat, axes=([0, 1], [0, 1])).reshape(kernels.shape)
    d_bias = d_flat.sum(axis=(0, 1))
    d_cols = d_flat @ kernels.reshape(k * k * c_in, c_out).T
    d_win = d_cols.reshape(B, h_out, w_out, k, k, c_in)
    dX = np.zeros(x_shape, dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dX[:, i:i + h_out, j:j + w_out, :] += d_win[:, :, :, i, j, :]
    return (dX[0] if squeeze else dX), d_kernels, d_bias


def maxpool2d(X: np.ndarray, pool: tuple[int, int]):
    """Non-overlapping window maxima; trailing rows/cols not filling a window drop."""
    p_h, p_w = pool
    if p_h < 1 or p_w < 1:
        raise ShapeError(f"pool sizes must be >= 1, got {pool}")
    squeeze = X.ndim == 3
    if squeeze:
        X = X[None]
    B, H, W, C = X.shape
    h_out, w_out = H // p_h, W // p_w
    if h_out == 0 or w_out == 0:
        raise ShapeError(f"input {H}x{W} smaller than pool {p_h}x{p_w}")
    Xc = X[:, :h_out * p_h, :w_out * p_w, :]
    Xr = (Xc.reshape(B, h_out, p_h, w_out, p_w, C)
            .transpose(0, 1, 3, 5, 2, 4)
            .reshape(B, h_out, w_out, C, p_h * p_w))
    idx = Xr.argmax(axis=-1)    # first occurrence wins on ties
    out = np.take_along_axis(Xr, idx[..., None], axis=-1)[..., 0]
    cache = (idx, X.shape, pool, squeeze)
    return (out[0] if squeeze else out), cache


def maxpool2d_backward(cache, d_out: np.ndarray) -> np.ndarray:
    idx, x_shape, (p_h, p_w), squeeze = cache
    if squeeze:
        d_out = d_out[None]
    B, H, W, C = x_shape
    h_out, w_out = H // p_h, W // p_w
    d_windows = np.zeros((B, h_out, w_out, C, p_h * p_w), dtype=np.float64)
    np.put_along_axis(d_windows, idx[..., None], d_out[..., None], axis=-1)
    dX = np.zeros(x_shape, dtype=np.float64)
    dX[:, :h_out * p_h, :w_out * p_w, :] = (
        d_windows.reshape(B, h_out, w_out, C, p_h, p_w)
                 .transpose(0, 1, 4, 2, 5, 3)
                 .reshape(B, h_out * p_h, w_out * p_w, C))
    return dX[0] if squeeze else dX


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------

@dataclass
class GruParams:
    """Per-gate weights for a GRU with input dim d and output dim o.

    Update/reset/candidate gates:
        z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
        r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
        c_t = tanh(x_t Wc + r_t * (h_{t-1} Uc) + bc)
        h_t = (1 - z_t) * h_{t-1} + z_t * c_t
    """

    w_z: np.ndarray
    w_r: np.ndarray
    w_c: np.ndarray
    u_z: np.ndarray
    u_r: np.ndarray
    u_c: np.ndarray
    b_z: np.ndarray
    b_r: np.ndarray
    b_c: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_out: int) -> "GruParams":
        def w(shape, fan_in):
            return he_uniform(rng, shape, fan_in)
        return cls(
            w_z=w((d_in, d_out), d_in), w_r=w((d_in, d_out), d_in), w_c=w((d_in, d_out), d_in),
            u_z=w((d_out, d_out), d_out), u_r=w((d_out, d_out), d_out), u_c=w((d_out, d_out), d_out),
            b_z=np.zeros(d_out), b_r=np.zeros(d_out), b_c=np.zeros(d_out),
        )

    @property
    def d_in(self) -> int:
        return self.w_z.shape[0]

    @property
    def d_out(self) -> int:
        return self.w_z.shape[1]

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("w_z", "w_r", "w_c", "u_z", "u_r", "u_c", "b_z", "b_r", "b_c")}


def gru_forward(X: np.ndarray, params: GruParams):
    """Run a GRU over a sequence.

    X is [t,d] or [batch,t,d]. Returns ((context, final_state), cache) where
    context row t depends only on input rows <= t and final_state equals the
    last context row.
    """
    squeeze = X.ndim == 2
    if squeeze:
        X = X[None]
    B, T, d = X.shape
    if d != params.d_in:
        raise ShapeError(f"input dim {d} != GRU input dim {params.d_in}")
    o = params.d_out
    xz = X @ params.w_z + params.b_z
    xr = X @ params.w_r + params.b_r
    xc = X @ params.w_c + params.b_c
    h = np.zeros((B, o), dtype=np.float64)
    context = np.zeros((B, T, o), dtype=np.float64)
    steps = []
    for t in range(T):
        z = sigmoid(xz[:, t] + h @ params.u_z)
        r = sigmoid(xr[:, t] + h @ params.u_r)
        hc_lin = h @ params.u_c
        c = np.tanh(xc[:, t] + r * hc_lin)
        steps.append((h, z, r, c, hc_lin))
        h = (1.0 - z) * h + z * c
        context[:, t] = h
    cache = (X, params, steps, squeeze)
    if squeeze:
        return (context[0], h[0]), cache
    return (context, h), cache


def gru_backward(cache, d_context: np.ndarray, d_final: np.ndarray | None = None):
    """Backprop through time. Returns (dX, grads) with grads keyed like GruParams."""
    X, params, steps, squeeze = cache
    if squeeze:
        d_context = d_context[None]
        if d_final is not None:
            d_final = d_final[None]
    B, T, d = X.shape
    o = params.d_out
    d_xz = np.zeros((B, T, o))
    d_xr = np.zeros((B, T, o))
    d_xc = np.zeros((B, T, o))
    g = {k: np.zeros_like(getattr(params, k))
         for k in ("w_z", "w_r", "w_c", "u_z", "u_r", "u_c", "b_z", "b_r", "b_c")}
    dh = np.zeros((B, o)) if d_final is None else d_final.copy()
    for t in range(T - 1, -1, -1):
        dh = dh + d_context[:, t]
        h_prev, z, r, c, hc_lin = steps[t]
        dz = dh * (c - h_prev)
        dc = dh * z
        dh_prev = dh * (1.0 - z)
        dc_pre = dc * (1.0 - c * c)
        dr = dc_pre * hc_lin
        dhc_lin = dc_pre * r
        dz_pre = dz * z * (1.0 - z)
        dr_pre = dr * r * (1.0 - r)
        d_xz[:, t] = dz_pre
        d_xr[:, t] = dr_pre
        d_xc[:, t] = dc_pre
        g["u_z"] += h_prev.T @ dz_pre
        g["u_r"] += h_prev.T @ dr_pre
        g["u_c"] += h_prev.T @ dhc_lin
        dh = (dh_prev + dz_pre @ params.u_z.T + dr_pre @ params.u_r.T
              + dhc_lin @ params.u_c.T)
    x2 = X.reshape(-1, d)
    g["w_z"] = x2.T @ d_xz.reshape(-1, o)
    g["w_r"] = x2.T @ d_xr.reshape(-1, o)
    g["w_c"] = x2.T @ d_xc.reshape(-1, o)
    g["b_z"] = d_xz.sum(axis=(0, 1))
    g["b_r"] = d_xr.sum(axis=(0, 1))
    g["b_c"] = d_xc.sum(axis=(0, 1))
    dX = d_xz @ params.w_z.T + d_xr @ params.w_r.T + d_xc @ params.w_c.T
    return (dX[0] if squeeze else dX), g


# ---------------------------------------------------------------------------
# Batch normalization and dropout
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, dim: int) -> "BatchNormParams":
        return cls(gamma=np.ones(dim), beta=np.zeros(dim),
                   running_mean=np.zeros(dim), running_var=np.ones(dim))


def batchnorm(x: np.ndarray, params: BatchNormParams, train: bool):
    """Feature-wise normalization over the batch axis.

    Training mode uses batch statistics and updates the running averages;
    inference mode uses the frozen running statistics.
    """
    if train:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        params.running_mean = BN_MOMENTUM * params.running_mean + (1 - BN_MOMENTUM) * mean
        params.running_var = BN_MOMENTUM * params.running_var + (1 - BN_MOMENTUM) * var
    else:
        mean = params.running_mean
        var = params.running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    out = params.gamma * xhat + params.beta
    return out, (xhat, inv_std, params.gamma, train)


def batchnorm_backward(cache, d_out: np.ndarray):
    xhat, inv_std, gamma, train = cache
    d_gamma = (d_out * xhat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_xhat = d_out * gamma
    if train:
        B = d_out.shape[0]
        dx = (inv_std / B) * (B * d_xhat - d_xhat.sum(axis=0)
                              - xhat * (d_xhat * xhat).sum(axis=0))
    else:
        dx = d_xhat * inv_std
    return dx, d_gamma, d_beta


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity at inference or rate 0."""
    if not train or rate <= 0.0:
        return x, None
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def dropout_backward(cache, d_out: np.ndarray) -> np.ndarray:
    return d_out if cache is None else d_out * cache


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, label_idx: np.ndarray):
    """Mean cross-entropy over the batch.

    Returns (loss, probs, d_logits); d_logits already includes the 1/batch
    factor.
    """
    probs = softmax(logits, axis=-1)
    B = logits.shape[0]
    eps = 1e-12
    loss = -np.log(probs[np.arange(B), label_idx] + eps).mean()
    d_logits = probs.copy()
    d_logits[np.arange(B), label_idx] -= 1.0
    d_logits /= B
    return loss, probs, d_logits
