"""Differentiable layer primitives.

Spatial ops take ``[C, H, W]`` or batched ``[N, C, H, W]`` inputs; dense
takes ``[n]`` or ``[N, n]``.  Gradients are written as explicit
vector-Jacobian products and recorded on the active tape.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from .autodiff import Tensor, as_tensor, record
from .rng import PrngState

Padding = Literal["same", "valid"]


def _batched(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.data.ndim == 3:
        return x.data[None], True
    if x.data.ndim == 4:
        return x.data, False
    raise ValueError(f"{op} expects [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, dilation: int, pad: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, dilation: int = 1, padding: Padding = "same") -> Tensor:
    """2-D cross-correlation with dilation; same-padding uses ``dilation*(k-1)/2``."""
    x, w = as_tensor(x), as_tensor(w)
    xd, squeeze = _batched(x, "conv2d")
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d weight must be [C_out,C_in,k,k], got {w.shape}")
    n, c, h, wd = xd.shape
    c_out, c_in, k, _ = w.shape
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects C_in={c_in}")
    if k % 2 == 0:
        raise ValueError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    pad = dilation * (k - 1) // 2 if padding == "same" else 0
    ho = conv_output_size(h, k, stride, dilation, pad)
    wo = conv_output_size(wd, k, stride, dilation, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {h}x{wd} too small for kernel {k} dilation {dilation}")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))).transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            r, q = i * dilation, j * dilation
            cols[:, i, j] = xp[:, :, r:r + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride]
    w2 = w.data.reshape(c_out, -1)
    out = (w2 @ cols.reshape(c * k * k, -1)).reshape(c_out, n, ho, wo).transpose(1, 0, 2, 3)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (c_out,):
            raise ValueError(f"conv2d bias must have shape ({c_out},), got {b.shape}")
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]
    geom = (xd.shape, stride, dilation, pad, squeeze)
    return record("conv2d", out, parents,
                  lambda g: _conv2d_backward(g, cols, w.data, geom, b is not None))


def _conv2d_backward(g, cols, w, geom, has_bias):
    (n, c, h, wd), stride, dilation, pad, squeeze = geom
    if squeeze:
        g = g[None]
    c_out, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
    dw = (g2 @ cols.reshape(c * k * k, -1).T).reshape(w.shape)
    dcols = (w.reshape(c_out, -1).T @ g2).reshape(c, k, k, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * pad, wd + 2 * pad), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            r, q = i * dilation, j * dilation
            dxp[:, :, r:r + stride * (ho - 1) + 1:stride, q:q + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
    if squeeze:
        dx = dx[0]
    grads = [np.ascontiguousarray(dx), dw]
    if has_bias:
        grads.append(g2.sum(axis=1))
    return grads


def maxpool2d(x, k: int = 2, stride: int | None = None) -> Tensor:
    """Max over ``k x k`` windows; ties route the gradient to the first cell in row-major order."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    xd, squeeze = _batched(x, "maxpool2d")
    n, c, h, w = xd.shape
    if k > h or k > w:
        raise ValueError(f"maxpool2d window {k} exceeds input {h}x{w}")
    if k < 1 or stride < 1:
        raise ValueError("maxpool2d window and stride must be >= 1")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    if squeeze:
        out = out[0]

    def vjp(g):
        gd = g[None] if squeeze else g
        if k == stride:
            onehot = np.zeros((n, c, ho, wo, k * k), dtype=gd.dtype)
            np.put_along_axis(onehot, arg[..., None], gd[..., None], axis=-1)
            block = onehot.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
            dx = np.zeros_like(xd)
            dx[:, :, :ho * k, :wo * k] = block
        else:
            dx = np.zeros_like(xd)
            rows = np.arange(ho)[:, None] * stride + arg // k
            cols = np.arange(wo)[None, :] * stride + arg % k
            nn, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
            np.add.at(dx, (nn[..., None, None], cc[..., None, None], rows, cols), gd)
        return (dx[0] if squeeze else dx,)

    return record("maxpool2d", np.ascontiguousarray(out), (x,), vjp)


def avgpool_to_grid(x, g: int) -> Tensor:
    """Average-pool each map down to a ``g x g`` grid (``g=1`` is global average pooling)."""
    x = as_tensor(x)
    xd, squeeze = _batched(x, "avgpool_to_grid")
    n, c, h, w = xd.shape
    if g < 1 or h % g or w % g:
        raise ValueError(f"grid size {g} must divide map size {h}x{w}")
    bh, bw = h // g, w // g
    out = xd.reshape(n, c, g, bh, g, bw).mean(axis=(3, 5), dtype=np.float64).astype(xd.dtype)
    if squeeze:
        out = out[0]

    def vjp(grad):
        gd = grad[None] if squeeze else grad
        dx = np.broadcast_to((gd / (bh * bw))[:, :, :, None, :, None], (n, c, g, bh, g, bw)).reshape(n, c, h, w)
        return (np.ascontiguousarray(dx[0] if squeeze else dx),)

    return record("avgpool_to_grid", out, (x,), vjp)


def upsample_nearest(x, factor: int) -> Tensor:
    x = as_tensor(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    xd, squeeze = _batched(x, "upsample_nearest")
    n, c, h, w = xd.shape
    out = np.repeat(np.repeat(xd, factor, axis=2), factor, axis=3)
    if squeeze:
        out = out[0]

    def vjp(g):
        gd = g[None] if squeeze else g
        dx = gd.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5))
        return (dx[0] if squeeze else dx,)

    return record("upsample_nearest", out, (x,), vjp)


def dense(x, w, b=None) -> Tensor:
    """Affine map ``w @ x + b`` over the last axis of ``x``."""
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ValueError(f"dense shape mismatch: x {x.shape}, w {w.shape}")
    # unoptimized einsum gives each row the same reduction order regardless of its
    # position in the batch; BLAS kernels do not, which breaks exact equivariance
    out = np.einsum("...i,oi->...o", x.data, w.data, optimize=False)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ValueError(f"dense bias must have shape ({w.shape[0]},), got {b.shape}")
        out = out + b.data
        parents.append(b)

    def vjp(g):
        gx = g @ w.data
        if x.data.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    return record("dense", out, parents, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return record("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def _check_binary(targets: np.ndarray) -> None:
    if not np.all((targets == 0) | (targets == 1)):
        bad = np.unique(targets[(targets != 0) & (targets != 1)])
        raise ValueError(f"targets must be binary 0/1, found {bad[:5].tolist()}")


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, in the overflow-free fused form."""
    z = as_tensor(logits)
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != z.shape:
        raise ValueError(f"bce_with_logits shape mismatch: logits {z.shape}, targets {y.shape}")
    _check_binary(y)
    zd = z.data.astype(np.float64)
    per = np.maximum(zd, 0) - zd * y + np.log1p(np.exp(-np.abs(zd)))
    out = np.asarray(per.mean(), dtype=z.dtype)
    n = z.size
    return record("bce_with_logits", out, (z,),
                  lambda g: ((g * (_sigmoid(z.data) - y) / n).astype(z.dtype),))


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data.astype(np.float64) - b.data
    out = np.asarray(np.mean(diff * diff), dtype=a.dtype)
    n = a.size

    def vjp(g):
        ga = (2.0 * g / n * diff).astype(a.dtype)
        return ga, -ga

    return record("mse", out, (a, b), vjp)


def spatial_dropout(x, p: float, mode: str, rng: PrngState | None) -> Tensor:
    """Zero whole channels with probability ``p`` in train mode.

    One uniform draw per (example, channel), in row-major order, from
    ``rng``; a channel survives when its draw is ``>= p`` and is then
    scaled by ``1/(1-p)``.
    """
    x = as_tensor(x)
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs a PRNG stream")
    lead = x.shape[:-2]
    keep = (rng.uniform(int(np.prod(lead))) >= p).reshape(lead)
    mask = (keep / (1.0 - p)).astype(x.dtype)[..., None, None]
    return record("spatial_dropout", x.data * mask, (x,), lambda g: (g * mask,))
