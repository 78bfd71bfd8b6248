"""Differentiable primitives on channel-last feature maps.

Every function takes :class:`~msmlp.tensor.Tensor` inputs, returns a new
Tensor and, when a tape is active and some input requires a gradient,
records a vector-Jacobian product for the backward pass.  All spatial ops
use zero padding.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from scipy import special

from .tensor import Tensor, as_tensor, maybe_record

AXES = {"vertical": 1, "horizontal": 2}

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _check4(x: Tensor, op: str):
    if x.ndim != 4:
        raise ValueError(f"{op} expects a (n, h, w, c) tensor, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{op}: all dimensions must be >= 1, got {x.shape}")


def axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}; expected 'horizontal' or 'vertical'") from None
    if axis in (1, 2):
        return int(axis)
    raise ValueError(f"spatial axis must be 1 or 2, got {axis!r}")


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return maybe_record("add", out, (a, b), lambda g: (g, g))


def scale_samples(x: Tensor, factors) -> Tensor:
    """Multiply sample ``k`` of the batch by the constant ``factors[k]``."""
    f = np.asarray(factors, dtype=x.dtype).reshape((-1,) + (1,) * (x.ndim - 1))
    if f.shape[0] != x.shape[0]:
        raise ValueError("scale_samples: one factor per sample required")
    out = Tensor(x.data * f)
    return maybe_record("scale_samples", out, (x,), lambda g: (g * f,))


def weighted_sum(x: Tensor, weights=None) -> Tensor:
    """Scalar ``sum(x * weights)``; plain sum when ``weights`` is None."""
    if weights is None:
        out = Tensor(np.asarray(x.data.sum()))
        return maybe_record("sum", out, (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    w = np.asarray(weights, dtype=x.dtype)
    if w.shape != x.shape:
        raise ValueError("weighted_sum: weights must match x")
    out = Tensor(np.asarray((x.data * w).sum()))
    return maybe_record("weighted_sum", out, (x,), lambda g: (g * w,))


def split_channels(x: Tensor, sections: Sequence[int]) -> list[Tensor]:
    """Split the last axis into consecutive slices of the given widths."""
    if sum(sections) != x.shape[-1] or any(s < 1 for s in sections):
        raise ValueError(f"split_channels: sections {list(sections)} do not partition {x.shape[-1]} channels")
    outs = []
    start = 0
    for width in sections:
        stop = start + width
        piece = Tensor(x.data[..., start:stop].copy())

        def vjp(g, start=start, stop=stop):
            full = np.zeros_like(x.data)
            full[..., start:stop] = g
            return (full,)

        outs.append(maybe_record("split_channels", piece, (x,), vjp))
        start = stop
    return outs


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("concat_channels: nothing to concatenate")
    widths = [t.shape[-1] for t in xs]
    out = Tensor(np.concatenate([t.data for t in xs], axis=-1))
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(xs)))

    return maybe_record("concat_channels", out, tuple(xs), vjp)


# ---------------------------------------------------------------------------
# spatial shift
# ---------------------------------------------------------------------------

def shift_array(a: np.ndarray, offset: int, axis: int) -> np.ndarray:
    """``out[..., i, ...] = a[..., i - offset, ...]`` with zero fill.

    Offsets at least as large as the extent simply produce zeros.
    """
    out = np.zeros_like(a)
    n = a.shape[axis]
    if offset == 0:
        out[...] = a
        return out
    if abs(offset) >= n:
        return out
    dst = [slice(None)] * a.ndim
    src = [slice(None)] * a.ndim
    if offset > 0:
        dst[axis] = slice(offset, n)
        src[axis] = slice(0, n - offset)
    else:
        dst[axis] = slice(0, n + offset)
        src[axis] = slice(-offset, n)
    out[tuple(dst)] = a[tuple(src)]
    return out


def shift2d(x: Tensor, offset: int, axis="vertical", allow_vacate: bool = False) -> Tensor:
    """Translate a feature map by ``offset`` tokens along one spatial axis.

    ``vertical`` moves along height, ``horizontal`` along width.  Vacated
    positions are zero.  ``|offset|`` must be smaller than the extent unless
    ``allow_vacate`` is set, in which case the result is all zeros.
    """
    _check4(x, "shift2d")
    ax = axis_index(axis)
    offset = int(offset)
    if abs(offset) >= x.shape[ax] and not allow_vacate:
        raise ValueError(f"shift2d: |offset|={abs(offset)} must be < extent {x.shape[ax]}")
    out = Tensor(shift_array(x.data, offset, ax))
    return maybe_record("shift2d", out, (x,), lambda g: (shift_array(g, -offset, ax),))


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _kernel_size(r: int, op: str) -> int:
    if r < 1 or r % 2 == 0:
        raise ValueError(f"{op}: kernel size must be odd and >= 1, got {r}")
    return r


def _pad_hw(a: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return a
    return np.pad(a, ((0, 0), (p, p), (p, p), (0, 0)))


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel ``r x r`` cross-correlation with same-size zero padding.

    ``weight`` has shape ``(c, r, r)``; ``bias`` (optional) shape ``(c,)``.
    """
    _check4(x, "depthwise_conv2d")
    c = x.shape[3]
    if weight.ndim != 3 or weight.shape[0] != c or weight.shape[1] != weight.shape[2]:
        raise ValueError(f"depthwise_conv2d: weight shape {weight.shape} incompatible with {c} channels")
    if bias is not None and bias.shape != (c,):
        raise ValueError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)")
    r = _kernel_size(weight.shape[1], "depthwise_conv2d")
    p = (r - 1) // 2
    n, h, w, _ = x.shape
    xp = _pad_hw(x.data, p)
    wt = weight.data
    out = np.zeros_like(x.data)
    for a in range(r):
        for b in range(r):
            out += xp[:, a:a + h, b:b + w, :] * wt[:, a, b]
    if bias is not None:
        out += bias.data

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wt)
        for a in range(r):
            for b in range(r):
                dxp[:, a:a + h, b:b + w, :] += g * wt[:, a, b]
                dw[:, a, b] = np.einsum("nhwc,nhwc->c", xp[:, a:a + h, b:b + w, :], g)
        dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
        db = g.sum(axis=(0, 1, 2)) if bias is not None else None
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return maybe_record("depthwise_conv2d", Tensor(out), inputs, vjp)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Dense ``r x r`` convolution, weight shape ``(c_out, c_in, r, r)``."""
    _check4(x, "conv2d")
    if weight.ndim != 4 or weight.shape[1] != x.shape[3] or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d: weight shape {weight.shape} incompatible with input {x.shape}")
    c_out = weight.shape[0]
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    r = _kernel_size(weight.shape[2], "conv2d")
    p = (r - 1) // 2
    n, h, w, c_in = x.shape
    xp = _pad_hw(x.data, p)
    wt = weight.data
    out = np.zeros((n, h, w, c_out), dtype=x.dtype)
    for a in range(r):
        for b in range(r):
            out += xp[:, a:a + h, b:b + w, :] @ wt[:, :, a, b].T
    if bias is not None:
        out += bias.data

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(wt)
        g2 = g.reshape(-1, c_out)
        for a in range(r):
            for b in range(r):
                dxp[:, a:a + h, b:b + w, :] += g @ wt[:, :, a, b]
                xs = xp[:, a:a + h, b:b + w, :].reshape(-1, c_in)
                dw[:, :, a, b] = g2.T @ xs
        dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
        db = g2.sum(axis=0) if bias is not None else None
        return (dx, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return maybe_record("conv2d", Tensor(out), inputs, vjp)


# ---------------------------------------------------------------------------
# channel ops
# ---------------------------------------------------------------------------

def channel_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Apply ``y = x W^T + b`` along the last axis (any leading shape)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ValueError(f"channel_linear: input width {x.shape[-1]} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"channel_linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    wt = weight.data
    out = x.data @ wt.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        c_in = wt.shape[1]
        g2 = g.reshape(-1, wt.shape[0])
        dw = g2.T @ x.data.reshape(-1, c_in)
        db = g2.sum(axis=0) if bias is not None else None
        return (g @ wt, dw, db)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return maybe_record("channel_linear", Tensor(out), inputs, vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each token's channel vector, then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)

    return maybe_record("layer_norm", Tensor(out), (x, gamma, beta), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    cdf = special.ndtr(x.data)
    out = Tensor(x.data * cdf)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return maybe_record("gelu", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over height and width: ``(n, h, w, c) -> (n, c)``."""
    _check4(x, "global_avg_pool")
    n, h, w, c = x.shape
    out = Tensor(x.data.mean(axis=(1, 2)))

    def vjp(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return maybe_record("global_avg_pool", out, (x,), vjp)


def patchify(x: Tensor, p: int) -> Tensor:
    """Flatten non-overlapping ``p x p`` patches into the channel axis.

    ``(n, h, w, c) -> (n, h/p, w/p, p*p*c)``; within a patch the layout is
    (row, col, channel).
    """
    _check4(x, "patchify")
    n, h, w, c = x.shape
    if p < 1 or h % p or w % p:
        raise ValueError(f"patchify: spatial size {h}x{w} not divisible by patch ratio {p}")
    hp, wp = h // p, w // p
    out = x.data.reshape(n, hp, p, wp, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, hp, wp, p * p * c)

    def vjp(g):
        return (g.reshape(n, hp, wp, p, p, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, c),)

    return maybe_record("patchify", Tensor(out), (x,), vjp)


__all__ = [
    "add", "scale_samples", "weighted_sum", "split_channels", "concat_channels",
    "shift_array", "shift2d", "depthwise_conv2d", "conv2d", "channel_linear",
    "layer_norm", "gelu", "global_avg_pool", "patchify", "axis_index", "as_tensor",
]
