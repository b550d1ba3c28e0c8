"""Layer kernels with explicit forward and backward passes.

Every forward function returns ``(output, cache)``; the matching backward
function takes the upstream gradient and that cache. Nothing is stored on
module level, so the functions are safe to call from several threads.

Arrays follow the (batch, channel, row, column) layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def output_extent(size: int, kernel: int, stride: int) -> int:
    """Extent of a valid (unpadded) window scan."""
    if kernel > size:
        raise ShapeError(f"window {kernel} exceeds input extent {size}")
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    return (size - kernel) // stride + 1


# ---------------------------------------------------------------- convolution


def _strided(x, u, v, count_h, count_w, stride):
    # every stride-th position starting at (u, v) over the last two axes
    return x[..., u:u + stride * (count_h - 1) + 1:stride, v:v + stride * (count_w - 1) + 1:stride]


def conv2d_forward(x, w, b, stride=1):
    """Valid cross-correlation of ``x`` (N,C,H,W) with ``w`` (F,C,kh,kw).

    Patches are unrolled channels-last, so a column is ordered (u, v, c).
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernels")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if c != ck:
        raise ShapeError(f"input has {c} channels, kernels expect {ck}")
    if b.shape != (f,):
        raise ShapeError(f"bias shape {b.shape} does not match {f} kernels")
    ho = output_extent(h, kh, stride)
    wo = output_extent(wd, kw, stride)

    xt = x.reshape(n, h, wd, 1) if c == 1 else np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    win = sliding_window_view(xt, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)
    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    out = cols @ wmat.T
    out += b
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    cache = {"x_shape": x.shape, "cols": cols, "w": w, "stride": stride}
    return out, cache


def conv2d_backward(dout, cache, need_dx=True):
    """Return ``(dx, dw, db)``; ``dx`` is None when ``need_dx`` is false."""
    n, c, h, wd = cache["x_shape"]
    w = cache["w"]
    s = cache["stride"]
    f, _, kh, kw = w.shape
    _, _, ho, wo = dout.shape

    g = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dw = (cache["cols"].T @ g).T.reshape(f, kh, kw, c).transpose(0, 3, 1, 2)
    dw = np.ascontiguousarray(dw)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dw, db

    wmat = w.transpose(0, 2, 3, 1).reshape(f, -1)
    dcols = (g @ wmat).reshape(n, ho, wo, kh, kw, c).transpose(0, 5, 3, 4, 1, 2)
    dx = np.zeros((n, c, h, wd), dtype=dout.dtype)
    for u in range(kh):
        for v in range(kw):
            _strided(dx, u, v, ho, wo, s)[...] += dcols[:, :, u, v]
    return dx, dw, db


# ---------------------------------------------------------------- activations


def relu_forward(x):
    return np.maximum(x, 0), {"mask": x > 0}


def relu_backward(dout, cache):
    return dout * cache["mask"]


# ---------------------------------------------------------------- pooling


def maxpool2d_forward(x, window=2, stride=2):
    n, c, h, w = x.shape
    ho = output_extent(h, window, stride)
    wo = output_extent(w, window, stride)
    taps = [_strided(x, u, v, ho, wo, stride) for u in range(window) for v in range(window)]
    out = taps[0].copy()
    for t in taps[1:]:
        np.maximum(out, t, out=out)
    # scan backwards so the first maximum in row-major order wins ties
    arg = np.full(out.shape, len(taps) - 1, dtype=np.int16)
    for i in range(len(taps) - 2, -1, -1):
        np.copyto(arg, np.int16(i), where=taps[i] == out)
    cache = {"x_shape": x.shape, "arg": arg, "window": window, "stride": stride}
    return out, cache


def maxpool2d_backward(dout, cache):
    k, s, arg = cache["window"], cache["stride"], cache["arg"]
    _, _, ho, wo = dout.shape
    dx = np.zeros(cache["x_shape"], dtype=dout.dtype)
    for u in range(k):
        for v in range(k):
            _strided(dx, u, v, ho, wo, s)[...] += np.where(arg == u * k + v, dout, 0)
    return dx


def energy_pool_forward(x):
    """Mean of the rectified activations of each map: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ShapeError("energy pooling expects a 4-D input")
    mask = x > 0
    area = x.shape[2] * x.shape[3]
    n, c = x.shape[:2]
    out = np.maximum(x, 0).reshape(n, c, -1).sum(axis=-1) / x.dtype.type(area)
    return out, {"mask": mask, "area": area}


def energy_pool_backward(dout, cache):
    scale = dout / dout.dtype.type(cache["area"])
    return cache["mask"] * scale[:, :, None, None]


def global_max_forward(x):
    """Per-map spatial maximum, an alternative texture-path reduction."""
    n, c, h, w = x.shape
    flat = x.reshape(n, c, h * w)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, {"x_shape": x.shape, "arg": arg}


def global_max_backward(dout, cache):
    n, c, h, w = cache["x_shape"]
    dx = np.zeros((n, c, h * w), dtype=dout.dtype)
    np.put_along_axis(dx, cache["arg"][..., None], dout[..., None], axis=-1)
    return dx.reshape(n, c, h, w)


# ---------------------------------------------------------------- dense / concat


def dense_forward(x, w, b):
    """Affine map ``x @ w + b`` with ``w`` of shape (D, M)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match {w.shape[1]} outputs")
    return x @ w + b, {"x": x, "w": w}


def dense_backward(dout, cache):
    x, w = cache["x"], cache["w"]
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def concat_forward(parts):
    if not parts:
        raise ShapeError("nothing to concatenate")
    batch = {p.shape[0] for p in parts}
    if len(batch) != 1:
        raise ShapeError(f"batch extents differ: {sorted(batch)}")
    widths = [p.shape[1] for p in parts]
    return np.concatenate(parts, axis=1), {"widths": widths}


def concat_backward(dout, cache):
    edges = np.cumsum(cache["widths"])[:-1]
    return np.split(dout, edges, axis=1)


# ---------------------------------------------------------------- loss


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, targets):
    """Mean cross-entropy of integer ``targets``.

    Returns ``(probabilities, loss, grad_logits)`` where the gradient is
    ``(p - onehot) / N``.
    """
    n, k = logits.shape
    targets = np.asarray(targets)
    if k < 2:
        raise ShapeError("need at least two classes")
    if targets.shape != (n,):
        raise ShapeError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target index out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    probs = np.exp(log_p)
    rows = np.arange(n)
    loss = -log_p[rows, targets].mean()
    grad = probs.copy()
    grad[rows, targets] -= 1
    grad /= n
    return probs, float(loss), grad


def onehot_mse(probs, targets):
    """Mean squared error between probabilities and one-hot targets."""
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(targets)), targets] = 1
    return float(((probs - onehot) ** 2).mean())


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerConfig:
    """Update rules, fixed so runs are reproducible.

    ``sgd``:  v <- momentum * v - lr * g;  p <- p + v
    ``adam``: m <- b1 m + (1-b1) g;  s <- b2 s + (1-b2) g^2;
              p <- p - lr * (m / (1-b1^t)) / (sqrt(s / (1-b2^t)) + eps)
    """

    kind: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def optimizer_step(params, grads, state, config):
    """Update ``params`` in place. Refuses the whole step on a non-finite gradient."""
    if set(params) != set(grads):
        raise ShapeError("parameter and gradient names differ")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}; step refused")

    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if config.kind == "sgd":
            v = state.first.get(name)
            if v is None:
                v = state.first[name] = np.zeros_like(p)
            v *= config.momentum
            v -= config.lr * g
            p += v
        elif config.kind == "adam":
            m = state.first.setdefault(name, np.zeros_like(p))
            s = state.second.setdefault(name, np.zeros_like(p))
            m *= config.beta1
            m += (1 - config.beta1) * g
            s *= config.beta2
            s += (1 - config.beta2) * g * g
            m_hat = m / (1 - config.beta1 ** t)
            s_hat = s / (1 - config.beta2 ** t)
            p -= (config.lr * m_hat / (np.sqrt(s_hat) + config.eps)).astype(p.dtype, copy=False)
        else:
            raise ValueError(f"unknown optimizer {config.kind!r}")
    return params, state


# ---------------------------------------------------------------- gradient check


def relative_error(analytic, numeric, floor=1e-6):
    """Max of |a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by 0."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0


def grad_check(forward, backward, inputs, eps=1e-5, seed=0):
    """Compare analytic gradients against central differences.

    ``forward(*inputs)`` returns ``(output, cache)`` and ``backward(dout, cache)``
    returns one gradient per input (or a single array for one input). The
    scalar objective is ``sum(R * output)`` for a fixed random ``R``. Inputs
    must be float64. Returns the maximum relative error over all coordinates.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    out, cache = forward(*inputs)
    proj = rng.standard_normal(out.shape)
    analytic = backward(proj, cache)
    if isinstance(analytic, np.ndarray):
        analytic = [analytic]

    worst = 0.0
    for arr, ga in zip(inputs, analytic):
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            plus = float((forward(*inputs)[0] * proj).sum())
            flat[i] = keep - eps
            minus = float((forward(*inputs)[0] * proj).sum())
            flat[i] = keep
            nflat[i] = (plus - minus) / (2 * eps)
        worst = max(worst, relative_error(ga, numeric))
    return worst
