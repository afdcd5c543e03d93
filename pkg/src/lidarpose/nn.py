"""Differentiable building blocks for the two-stage network.

All ops take and return Tensors (see autodiff.py) and register their own
backward closures.  Feature maps are (C, H, W); RoI crops are (N, C, h, w).
Spatial coordinates follow the convention that array element [r, c] sits at
continuous position (x=c, y=r); samples outside the map read zero.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

GROUP_NORM_EPS = 1e-5


def constant(value, name: str = "const") -> Tensor:
    return Tensor(value, name=name)


def parameter(value, name: str) -> Tensor:
    return Tensor(value, name=name)


def add(a: Tensor, b: Tensor, name: str = "add") -> Tensor:
    out = Tensor(a.value + b.value, parents=(a, b), name=name)

    def backward(node):
        a.ensure_grad()
        a.grad += _unbroadcast(node.grad, a.value.shape)
        b.ensure_grad()
        b.grad += _unbroadcast(node.grad, b.value.shape)

    out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def relu(x: Tensor, name: str = "relu") -> Tensor:
    mask = x.value > 0
    out = Tensor(np.where(mask, x.value, 0.0), parents=(x,), name=name)

    def backward(node):
        x.ensure_grad()
        x.grad += node.grad * mask

    out._backward = backward
    return out


def reshape(x: Tensor, shape, name: str = "reshape") -> Tensor:
    out = Tensor(x.value.reshape(shape), parents=(x,), name=name)

    def backward(node):
        x.ensure_grad()
        x.grad += node.grad.reshape(x.value.shape)

    out._backward = backward
    return out


def linear(x: Tensor, w: Tensor, b: Tensor, name: str = "linear") -> Tensor:
    """(N, F) @ (F, M) + (M,) -> (N, M)."""
    out = Tensor(x.value @ w.value + b.value, parents=(x, w, b), name=name)

    def backward(node):
        x.ensure_grad()
        x.grad += node.grad @ w.value.T
        w.ensure_grad()
        w.grad += x.value.T @ node.grad
        b.ensure_grad()
        b.grad += node.grad.sum(axis=0)

    out._backward = backward
    return out


def conv2d(
    x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1, name: str = "conv"
) -> Tensor:
    """2D convolution: x (C_in, H, W), w (C_out, C_in, k, k), b (C_out,)."""
    c_in, h, wd = x.value.shape
    c_out, c_in_w, k, k2 = w.value.shape
    if c_in_w != c_in or k != k2:
        raise ValueError(f"kernel shape {w.value.shape} incompatible with input {x.value.shape}")
    s, p = stride, padding
    h_out = (h + 2 * p - k) // s + 1
    w_out = (wd + 2 * p - k) // s + 1
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p : p + h, p : p + wd] = x.value
    cols = np.empty((c_in, k, k, h_out, w_out))
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, ki : ki + s * h_out : s, kj : kj + s * w_out : s]
    cols2 = cols.reshape(c_in * k * k, h_out * w_out)
    w2 = w.value.reshape(c_out, c_in * k * k)
    y = (w2 @ cols2).reshape(c_out, h_out, w_out) + b.value[:, None, None]
    out = Tensor(y, parents=(x, w, b), name=name)

    def backward(node):
        g2 = node.grad.reshape(c_out, h_out * w_out)
        w.ensure_grad()
        w.grad += (g2 @ cols2.T).reshape(w.value.shape)
        b.ensure_grad()
        b.grad += node.grad.sum(axis=(1, 2))
        dcols = (w2.T @ g2).reshape(c_in, k, k, h_out, w_out)
        dxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki : ki + s * h_out : s, kj : kj + s * w_out : s] += dcols[:, ki, kj]
        x.ensure_grad()
        x.grad += dxp[:, p : p + h, p : p + wd]

    out._backward = backward
    return out


def group_norm(
    x: Tensor, gamma: Tensor, beta: Tensor, groups: int, name: str = "gn"
) -> Tensor:
    """Group normalization over (C, H, W) with per-channel affine."""
    c, h, w = x.value.shape
    if c % groups != 0:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    xg = x.value.reshape(groups, c // groups, h, w)
    mean = xg.mean(axis=(1, 2, 3), keepdims=True)
    var = xg.var(axis=(1, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + GROUP_NORM_EPS)
    xhat = ((xg - mean) * inv_std).reshape(c, h, w)
    y = gamma.value[:, None, None] * xhat + beta.value[:, None, None]
    out = Tensor(y, parents=(x, gamma, beta), name=name)
    m = (c // groups) * h * w

    def backward(node):
        gamma.ensure_grad()
        gamma.grad += (node.grad * xhat).sum(axis=(1, 2))
        beta.ensure_grad()
        beta.grad += node.grad.sum(axis=(1, 2))
        dxhat = (node.grad * gamma.value[:, None, None]).reshape(groups, c // groups, h, w)
        xhat_g = xhat.reshape(groups, c // groups, h, w)
        # d/dx of (x - mean) * inv_std with mean/var both functions of x.
        sum_dxhat = dxhat.sum(axis=(1, 2, 3), keepdims=True)
        sum_dxhat_xhat = (dxhat * xhat_g).sum(axis=(1, 2, 3), keepdims=True)
        dxg = inv_std * (dxhat - sum_dxhat / m - xhat_g * sum_dxhat_xhat / m)
        x.ensure_grad()
        x.grad += dxg.reshape(c, h, w)

    out._backward = backward
    return out


def concat_channels(a: Tensor, b: Tensor, name: str = "concat") -> Tensor:
    """Stack two (N, C, h, w) crops along the channel axis."""
    if a.value.shape[0] != b.value.shape[0] or a.value.shape[2:] != b.value.shape[2:]:
        raise ValueError(f"cannot concat shapes {a.value.shape} and {b.value.shape}")
    ca = a.value.shape[1]
    out = Tensor(np.concatenate([a.value, b.value], axis=1), parents=(a, b), name=name)

    def backward(node):
        a.ensure_grad()
        a.grad += node.grad[:, :ca]
        b.ensure_grad()
        b.grad += node.grad[:, ca:]

    out._backward = backward
    return out


def mean_fuse(a: Tensor, b: Tensor, name: str = "mean_fuse") -> Tensor:
    """Elementwise average of two equally shaped crops."""
    if a.value.shape != b.value.shape:
        raise ValueError(f"cannot average shapes {a.value.shape} and {b.value.shape}")
    out = Tensor(0.5 * (a.value + b.value), parents=(a, b), name=name)

    def backward(node):
        a.ensure_grad()
        a.grad += 0.5 * node.grad
        b.ensure_grad()
        b.grad += 0.5 * node.grad

    out._backward = backward
    return out


def _clip_boxes(boxes: np.ndarray, h: int, w: int) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    boxes[:, 0] = np.clip(boxes[:, 0], 0.0, w - 1.0)
    boxes[:, 2] = np.clip(boxes[:, 2], 0.0, w - 1.0)
    boxes[:, 1] = np.clip(boxes[:, 1], 0.0, h - 1.0)
    boxes[:, 3] = np.clip(boxes[:, 3], 0.0, h - 1.0)
    # Degenerate after clipping: keep a point box so the crop is defined.
    boxes[:, 2] = np.maximum(boxes[:, 2], boxes[:, 0])
    boxes[:, 3] = np.maximum(boxes[:, 3], boxes[:, 1])
    return boxes


def roi_align_many(
    fmap: Tensor, boxes, out_size: tuple[int, int], name: str = "roi_align"
) -> Tensor:
    """Bilinear RoI crops: fmap (C, H, W), boxes (N, 4) -> (N, C, oh, ow).

    Each output cell averages 2x2 regularly spaced bilinear samples (at 1/4
    and 3/4 of the cell), with no coordinate quantization anywhere.  Boxes are
    clipped to the feature extent; samples outside the map read zero.
    """
    c, h, w = fmap.value.shape
    boxes = _clip_boxes(boxes, h, w)
    n = boxes.shape[0]
    oh, ow = out_size
    out = np.zeros((n, c, oh, ow))
    if n == 0:
        t = Tensor(out, parents=(fmap,), name=name)
        t._backward = lambda node: fmap.ensure_grad()
        return t

    cell_w = (boxes[:, 2] - boxes[:, 0]) / ow
    cell_h = (boxes[:, 3] - boxes[:, 1]) / oh
    # Sample coordinates: (N, oh/ow, 2) for the two offsets per cell.
    offs = np.array([0.25, 0.75])
    sx = boxes[:, 0, None, None] + (np.arange(ow)[None, :, None] + offs[None, None, :]) \
        * cell_w[:, None, None]
    sy = boxes[:, 1, None, None] + (np.arange(oh)[None, :, None] + offs[None, None, :]) \
        * cell_h[:, None, None]
    # Broadcast to full sample lattices (N, oh, ow, 2, 2): sy varies over
    # rows/row-offset, sx over cols/col-offset.
    sy_full = sy[:, :, None, :, None]
    sx_full = sx[:, None, :, None, :]
    x0 = np.floor(sx_full)
    y0 = np.floor(sy_full)
    fx = sx_full - x0
    fy = sy_full - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    vals = np.zeros((n, c, oh, ow, 2, 2))
    weights = []
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            wgt = np.broadcast_to(wgt, (n, oh, ow, 2, 2))
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            inside = np.broadcast_to(inside, (n, oh, ow, 2, 2))
            yc = np.broadcast_to(np.clip(yy, 0, h - 1), (n, oh, ow, 2, 2))
            xc = np.broadcast_to(np.clip(xx, 0, w - 1), (n, oh, ow, 2, 2))
            gathered = fmap.value[:, yc, xc]  # (C, N, oh, ow, 2, 2)
            contrib = np.where(inside, wgt, 0.0)[None] * gathered
            vals += np.moveaxis(contrib, 0, 1)
            weights.append((yc, xc, np.where(inside, wgt, 0.0)))
    out = vals.mean(axis=(4, 5))
    t = Tensor(out, parents=(fmap,), name=name)

    def backward(node):
        fmap.ensure_grad()
        grad2 = fmap.grad.reshape(c, h * w)
        g = node.grad[:, :, :, :, None, None] / 4.0  # (N, C, oh, ow, 1, 1)
        ch = np.arange(c)[None, :, None]
        for yc, xc, wgt in weights:
            pix = (yc * w + xc).reshape(n, 1, -1)
            contrib = (g * wgt[:, None]).reshape(n, c, -1)
            np.add.at(grad2, (ch, pix), contrib)

    t._backward = backward
    return t


def roi_pool_many(
    fmap: Tensor, boxes, out_size: tuple[int, int], name: str = "roi_pool"
) -> Tensor:
    """Quantized max-pool RoI crops: fmap (C, H, W), boxes (N, 4) -> (N, C, oh, ow).

    Box corners and bin boundaries are rounded to integer indices (the
    rounding that roi_align exists to avoid); each bin takes the max.
    """
    c, h, w = fmap.value.shape
    boxes = _clip_boxes(boxes, h, w)
    n = boxes.shape[0]
    oh, ow = out_size
    out = np.zeros((n, c, oh, ow))
    argmax = np.zeros((n, c, oh, ow, 2), dtype=np.int64)
    for i in range(n):
        # Corners round to integer indices and are inclusive: the whole-map
        # box (0, 0, w-1, h-1) pools every pixel.
        x0 = int(np.round(boxes[i, 0]))
        y0 = int(np.round(boxes[i, 1]))
        x1 = max(int(np.round(boxes[i, 2])), x0)
        y1 = max(int(np.round(boxes[i, 3])), y0)
        bw = x1 - x0 + 1
        bh = y1 - y0 + 1
        for bi in range(oh):
            r0 = y0 + (bi * bh) // oh
            r1 = y0 + max(((bi + 1) * bh) // oh, (bi * bh) // oh + 1)
            for bj in range(ow):
                c0 = x0 + (bj * bw) // ow
                c1 = x0 + max(((bj + 1) * bw) // ow, (bj * bw) // ow + 1)
                patch = fmap.value[:, r0:r1, c0:c1].reshape(c, -1)
                flat = np.argmax(patch, axis=1)
                out[i, :, bi, bj] = patch[np.arange(c), flat]
                pw = c1 - c0
                argmax[i, :, bi, bj, 0] = r0 + flat // pw
                argmax[i, :, bi, bj, 1] = c0 + flat % pw
    t = Tensor(out, parents=(fmap,), name=name)

    def backward(node):
        fmap.ensure_grad()
        ch_idx = np.broadcast_to(np.arange(c)[None, :, None, None], (n, c, oh, ow))
        np.add.at(
            fmap.grad,
            (ch_idx.ravel(), argmax[..., 0].ravel(), argmax[..., 1].ravel()),
            node.grad.ravel(),
        )

    t._backward = backward
    return t


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    scale = np.sqrt(2.0 / (c_in * k * k))
    return rng.normal(0.0, scale, (c_out, c_in, k, k))


def he_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, scale, (fan_in, fan_out))
