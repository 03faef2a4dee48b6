"""Pure-NumPy reference versions of the hot kernels.

Shapes: feature maps are ``(batch, channels, height, width)``, 3x3 filters are
``(c_out, c_in, 3, 3)``. Convolutions use zero "same" padding and stride 1.
"""
import numpy as np


def group_shrink(v, starts, stops, weights, scale):
    for a, b, w in zip(starts, stops, weights):
        seg = v[a:b]
        norm = np.sqrt(np.dot(seg, seg))
        thr = scale * w
        if norm <= thr:
            seg[:] = 0.0
        else:
            seg *= 1.0 - thr / norm


def _im2col(x):
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((B, C, 3, 3, H, W), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = xp[:, :, dy:dy + H, dx:dx + W]
    return cols.reshape(B, C * 9, H * W)


def conv3x3_forward(x, weight, bias):
    B, C, H, W = x.shape
    cout = weight.shape[0]
    cols = _im2col(x)
    out = np.matmul(weight.reshape(cout, C * 9), cols)
    out += bias[None, :, None]
    return out.reshape(B, cout, H, W)


def conv3x3_backward(x, weight, dout):
    B, C, H, W = x.shape
    cout = weight.shape[0]
    cols = _im2col(x)
    d = dout.reshape(B, cout, H * W)
    dw = np.einsum("bop,bkp->ok", d, cols).reshape(weight.shape)
    db = d.sum(axis=(0, 2))
    dcols = np.matmul(weight.reshape(cout, C * 9).T, d).reshape(B, C, 3, 3, H, W)
    dxp = np.zeros((B, C, H + 2, W + 2), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            dxp[:, :, dy:dy + H, dx:dx + W] += dcols[:, :, dy, dx]
    return dxp[:, :, 1:-1, 1:-1].copy(), dw, db


def maxpool2_forward(x):
    B, C, H, W = x.shape
    blocks = (
        x.reshape(B, C, H // 2, 2, W // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H // 2, W // 2, 4)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def maxpool2_backward(dout, idx, shape):
    B, C, H, W = shape
    onehot = np.zeros((B, C, H // 2, W // 2, 4), dtype=dout.dtype)
    np.put_along_axis(onehot, idx.astype(np.intp)[..., None], dout[..., None], axis=-1)
    return (
        onehot.reshape(B, C, H // 2, W // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(B, C, H, W)
    )
