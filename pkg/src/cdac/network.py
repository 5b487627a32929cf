"""Self-contained numeric core: parameter initialization, forward operators
(embedding lookup, full-width 1-D convolution over time, masked max-pooling,
batch normalization, ReLU, fully connected, dropout, softmax), categorical
cross-entropy, matching reverse-mode gradients, and the Adam optimizer.

Every operator comes as a `*_forward(...) -> (out, cache)` /
`*_backward(d_out, cache) -> grads` pair; the model layer composes them by
hand. Arrays keep whatever dtype they are given: float32 for training,
float64 for finite-difference checks.

Convolution geometry: kernels span the full embedding width, so a kernel of
size k applied to a (T, d) token matrix is a (k*d,) dot product slid over
time, yielding T-k+1 positions per filter. Max-pooling is masked to the
positions covered by real tokens (at least one window), padding rows are
zeroed before convolution, and an empty utterance yields a zero branch
output; together these make the branch output invariant to the embedding
values at padding positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def glorot_uniform(shape, fan_in, fan_out, rng, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def uniform_init(shape, limit, rng, dtype=np.float32) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Embedding lookup
# ---------------------------------------------------------------------------


def embedding_forward(ids: np.ndarray, table: np.ndarray):
    """ids: (B, T) integer array; table: (V, d). Returns (B, T, d)."""
    out = table[ids]
    return out, (ids, table.shape)


def embedding_backward(d_out: np.ndarray, cache):
    ids, shape = cache
    d_table = np.zeros(shape, dtype=d_out.dtype)
    np.add.at(d_table, ids.reshape(-1), d_out.reshape(-1, shape[1]))
    return d_table


# ---------------------------------------------------------------------------
# Convolution over time + masked max-pool
# ---------------------------------------------------------------------------


def length_mask(lengths: np.ndarray, max_len: int) -> np.ndarray:
    """(B, T, 1) float mask that is 1 on real-token rows, 0 on padding."""
    return (np.arange(max_len)[None, :] < lengths[:, None])[:, :, None]


def conv1d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    """Valid convolution of full-width kernels over time.

    x: (B, T, d); weights: (k*d, F); bias: (F,). Output: (B, T-k+1, F).
    """
    batch, max_len, dim = x.shape
    k = weights.shape[0] // dim
    positions = max_len - k + 1
    if positions < 1:
        raise NumericError(f"kernel size {k} exceeds sequence length {max_len}")
    windows = np.concatenate([x[:, i : i + positions, :] for i in range(k)], axis=2)
    maps = windows @ weights + bias
    return maps, (windows, weights, x.shape, k)


def conv1d_backward(d_maps: np.ndarray, cache):
    windows, weights, x_shape, k = cache
    dim = x_shape[2]
    positions = windows.shape[1]
    flat_w = windows.reshape(-1, windows.shape[2])
    flat_d = d_maps.reshape(-1, d_maps.shape[2])
    d_weights = flat_w.T @ flat_d
    d_bias = flat_d.sum(axis=0)
    d_windows = d_maps @ weights.T
    d_x = np.zeros(x_shape, dtype=d_maps.dtype)
    for i in range(k):
        d_x[:, i : i + positions, :] += d_windows[:, :, i * dim : (i + 1) * dim]
    return d_x, d_weights, d_bias


def masked_max_pool_forward(maps: np.ndarray, lengths: np.ndarray, kernel_size: int):
    """Max over time restricted to windows that start inside the utterance
    (at least the first window, so empty inputs stay defined)."""
    batch, positions, filters = maps.shape
    valid = np.clip(lengths - kernel_size + 1, 1, positions)
    mask = np.arange(positions)[None, :] < valid[:, None]
    shielded = np.where(mask[:, :, None], maps, -np.inf)
    idx = np.argmax(shielded, axis=1)
    out = np.take_along_axis(maps, idx[:, None, :], axis=1).squeeze(1)
    return out, (idx, maps.shape)


def masked_max_pool_backward(d_out: np.ndarray, cache):
    idx, shape = cache
    d_maps = np.zeros(shape, dtype=d_out.dtype)
    np.put_along_axis(d_maps, idx[:, None, :], d_out[:, None, :], axis=1)
    return d_maps


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


def batch_norm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    mode: str,
):
    """Per-channel batch normalization over a (B, C) activation matrix.

    Train mode normalizes by batch statistics (population variance) and
    updates the running statistics in place:
    running <- momentum * running + (1 - momentum) * batch_stat.
    Eval mode normalizes by the running statistics.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise NumericError("batch normalization in train mode needs batch >= 2")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = (x - mu) * inv_std
        out = gamma * x_hat + beta
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
        cache = ("train", x_hat, inv_std, gamma)
    elif mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        x_hat = (x - running_mean) * inv_std
        out = gamma * x_hat + beta
        cache = ("eval", x_hat, inv_std, gamma)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return out, cache


def batch_norm_backward(d_out: np.ndarray, cache):
    mode, x_hat, inv_std, gamma = cache
    d_gamma = (d_out * x_hat).sum(axis=0)
    d_beta = d_out.sum(axis=0)
    d_x_hat = d_out * gamma
    if mode == "eval":
        d_x = d_x_hat * inv_std
    else:
        batch = d_out.shape[0]
        d_x = (
            inv_std
            / batch
            * (
                batch * d_x_hat
                - d_x_hat.sum(axis=0)
                - x_hat * (d_x_hat * x_hat).sum(axis=0)
            )
        )
    return d_x, d_gamma, d_beta


# ---------------------------------------------------------------------------
# Dense layers, activations, dropout
# ---------------------------------------------------------------------------


def fc_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray):
    if x.shape[-1] != weights.shape[0]:
        raise NumericError(
            f"fully-connected shape mismatch: input {x.shape[-1]} vs weights {weights.shape[0]}"
        )
    return x @ weights + bias, (x, weights)


def fc_backward(d_out: np.ndarray, cache):
    x, weights = cache
    return d_out @ weights.T, x.T @ d_out, d_out.sum(axis=0)


def fully_connected(x, weights, bias):
    out, _ = fc_forward(np.asarray(x), weights, bias)
    return out


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), (x > 0)


def relu_backward(d_out: np.ndarray, cache):
    return d_out * cache


def relu(x):
    return np.maximum(np.asarray(x), 0)


def dropout_forward(x: np.ndarray, rate: float, mode: str, rng=None):
    """Inverted dropout: train mode zeroes units with probability `rate`
    and scales survivors by 1/(1-rate); eval mode is exactly the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if mode == "eval" or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(d_out: np.ndarray, cache):
    if cache is None:
        return d_out
    return d_out * cache


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.result_type(logits, np.float32))
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, gold_index: int) -> float:
    probs = np.asarray(probs)
    if not 0 <= gold_index < probs.shape[-1]:
        raise NumericError(f"gold index {gold_index} out of range {probs.shape[-1]}")
    return float(-np.log(max(float(probs[gold_index]), 1e-12)))


def softmax_xent_forward(logits: np.ndarray, gold: np.ndarray):
    """Mean categorical cross-entropy over a batch; returns (loss, probs, cache)."""
    probs = softmax(logits)
    batch = logits.shape[0]
    if np.any(gold < 0) or np.any(gold >= logits.shape[1]):
        raise NumericError("gold index out of range")
    picked = np.clip(probs[np.arange(batch), gold], 1e-12, None)
    loss = float(-np.log(picked).mean())
    return loss, probs, (probs, gold)


def softmax_xent_backward(cache):
    probs, gold = cache
    batch = probs.shape[0]
    d_logits = probs.copy()
    d_logits[np.arange(batch), gold] -= 1.0
    return d_logits / batch


# ---------------------------------------------------------------------------
# Composed convolution branch (one kernel size)
# ---------------------------------------------------------------------------


def conv_branch_batch_forward(
    x: np.ndarray,
    lengths: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float,
    eps: float,
    mode: str,
):
    """conv -> masked max-pool -> batch norm -> ReLU for a batch.

    Zeroes padding rows of `x` first; rows with length 0 produce a zero
    output vector and receive no gradient.
    """
    dim = x.shape[2]
    k = weights.shape[0] // dim
    row_mask = length_mask(lengths, x.shape[1]).astype(x.dtype)
    x_masked = x * row_mask
    maps, conv_cache = conv1d_forward(x_masked, weights, bias)
    pooled, pool_cache = masked_max_pool_forward(maps, lengths, k)
    normed, bn_cache = batch_norm_forward(
        pooled, gamma, beta, running_mean, running_var, momentum, eps, mode
    )
    activated, relu_cache = relu_forward(normed)
    active = (lengths > 0).astype(x.dtype)[:, None]
    out = activated * active
    return out, (conv_cache, pool_cache, bn_cache, relu_cache, active, row_mask)


def conv_branch_batch_backward(d_out: np.ndarray, cache):
    conv_cache, pool_cache, bn_cache, relu_cache, active, row_mask = cache
    d_act = d_out * active
    d_normed = relu_backward(d_act, relu_cache)
    d_pooled, d_gamma, d_beta = batch_norm_backward(d_normed, bn_cache)
    d_maps = masked_max_pool_backward(d_pooled, pool_cache)
    d_x, d_weights, d_bias = conv1d_backward(d_maps, conv_cache)
    d_x *= row_mask
    return d_x, d_weights, d_bias, d_gamma, d_beta


def conv_branch_forward(
    token_matrix: np.ndarray,
    length: int,
    weights: np.ndarray,
    bias: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    momentum: float = 0.997,
    eps: float = 1e-5,
    mode: str = "eval",
) -> np.ndarray:
    """Single-utterance convenience wrapper around the batched branch."""
    out, _ = conv_branch_batch_forward(
        token_matrix[None, :, :],
        np.array([length]),
        weights,
        bias,
        gamma,
        beta,
        running_mean,
        running_var,
        momentum,
        eps,
        mode,
    )
    return out[0]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam with per-parameter first/second moments."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """One optimizer step, in place. `grads` may cover a subset of params;
    untouched entries keep their values."""
    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name in sorted(grads):
        grad = grads[name]
        param = params[name]
        if grad.shape != param.shape:
            raise NumericError(f"gradient shape mismatch for {name}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(param)
            state.m[name] = m
        v = state.v.get(name)
        if v is None:
            v = np.zeros_like(param)
            state.v[name] = v
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(loss_fn, array: np.ndarray, indices=None, h: float = 1e-5) -> dict:
    """Central differences of `loss_fn()` w.r.t. selected flat indices of
    `array` (all of them when `indices` is None). Mutates and restores."""
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = {}
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn()
        flat[i] = orig - h
        down = loss_fn()
        flat[i] = orig
        grads[i] = (up - down) / (2.0 * h)
    return grads


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(1e-8, abs(analytic) + abs(numeric))
    return abs(analytic - numeric) / denom


def max_gradient_error(loss_fn, params: dict, analytic: dict, rng=None, samples=20, h=1e-5):
    """Worst relative error between analytic gradients and central
    differences, sampling up to `samples` coordinates per parameter."""
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name in sorted(analytic):
        array = params[name]
        size = array.size
        if size <= samples:
            indices = list(range(size))
        else:
            indices = sorted(rng.choice(size, size=samples, replace=False).tolist())
        numeric = numerical_gradient(loss_fn, array, indices, h)
        flat_analytic = analytic[name].reshape(-1)
        for i, num in numeric.items():
            worst = max(worst, relative_error(float(flat_analytic[i]), num))
    return worst


def assert_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {name}")
