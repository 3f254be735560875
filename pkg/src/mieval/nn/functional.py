"""Differentiable layer operations on NCHW tensors."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mieval.nn.tensor import ShapeError, Tensor, add, make_node, matmul, mean, mul, relu, reshape, sigmoid

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CE_CLAMP = 1e-7
DICE_SMOOTH = 1.0


def _check_nchw(x: Tensor, what: str):
    if x.data.ndim != 4:
        raise ShapeError(f"{what} expects an (N, C, H, W) tensor, got {x.shape}")


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H*W, k*k*C) patches for a same-padded k x k window.

    Patch layout is (ki, kj, c), matching ``_kernel_matrix``.
    """
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + h, p : p + w] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, h, w, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i : i + h, j : j + w]
    return cols.reshape(n * h * w, k * k * c)


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """(Cout, Cin, k, k) -> (Cout, k*k*Cin)."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _cols_to_nchw(y: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(y.reshape(n, h, w, -1).transpose(0, 3, 1, 2))


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-1 cross-correlation with 'same' zero padding (odd kernels)."""
    _check_nchw(x, "conv2d")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
    if b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape}, expected ({cout},)")
    k = kh
    cols = _im2col(x.data, k)
    wmat = _kernel_matrix(w.data)
    out = _cols_to_nchw(cols @ wmat.T + b.data, n, h, wd)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * wd, cout)
        gw = np.ascontiguousarray((g2.T @ cols).reshape(cout, k, k, cin).transpose(0, 3, 1, 2))
        gb = g2.sum(axis=0)
        if not x.requires_grad:
            return None, gw, gb
        # input gradient = same-padded correlation of g with the flipped,
        # channel-transposed kernel
        wflip = _kernel_matrix(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gx = _cols_to_nchw(_im2col(g, k) @ wflip.T, n, h, wd)
        return gx, gw, gb

    return make_node(out, (x, w, b), backward)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = x.data <= 0
    ex = np.exp(np.minimum(x.data, 0))
    out = np.where(neg, alpha * (ex - 1), x.data).astype(x.dtype)
    return make_node(out, (x,), lambda g: (np.where(neg, g * alpha * ex, g).astype(x.dtype),))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running statistics are updated in place as
    ``r = momentum * r + (1 - momentum) * batch_stat``.
    """
    _check_nchw(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but params {gamma.shape}, {beta.shape}")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = inv.reshape(bshape) * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return make_node(out.astype(x.dtype), (x, gamma, beta), backward)


def se_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze-and-excitation: channel gates from globally pooled features."""
    _check_nchw(x, "se_block")
    n, c = x.shape[:2]
    if w1.shape[0] != c or w2.shape[1] != c:
        raise ShapeError(f"se_block: {c} channels but weights {w1.shape}, {w2.shape}")
    squeezed = mean(x, (2, 3))  # N, C
    hidden = relu(add(matmul(squeezed, w1), b1))
    gates = sigmoid(add(matmul(hidden, w2), b2))
    return mul(x, reshape(gates, (n, c, 1, 1)))


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties send the gradient to the first element."""
    _check_nchw(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_node(out, (x,), backward)


def upconv2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """2x2 transposed convolution with stride 2; kernel shape (Cin, Cout, 2, 2)."""
    _check_nchw(x, "upconv2")
    n, cin, h, wd = x.shape
    if w.shape[0] != cin or w.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2: input {x.shape} incompatible with kernel {w.shape}")
    cout = w.shape[1]
    xm = x.data.transpose(0, 2, 3, 1).reshape(n * h * wd, cin)
    wm = w.data.reshape(cin, cout * 4)
    y = (xm @ wm).reshape(n, h, wd, cout, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, cout, 2 * h, 2 * wd) + b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gy = g.reshape(n, cout, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * wd, cout * 4)
        gw = (xm.T @ gy).reshape(w.shape)
        gx = (gy @ wm.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(gx), gw, gb

    return make_node(np.ascontiguousarray(out), (x, w, b), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_nchw(a, "concat_channels")
    _check_nchw(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} vs {b.shape}")
    if a.shape[1] == 0 or b.shape[1] == 0:
        raise ShapeError("concat_channels: empty channel axis")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_node(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_node(s, (x,), backward)


def _check_pair(p: Tensor, target: np.ndarray, what: str):
    if p.shape != target.shape:
        raise ShapeError(f"{what}: prediction {p.shape} vs target {target.shape}")


def dice_loss(p: Tensor, target: np.ndarray, smooth: float = DICE_SMOOTH, include_background: bool = True) -> Tensor:
    """1 - mean soft Dice over classes; sums run over batch and pixels."""
    target = np.asarray(target, dtype=p.dtype)
    _check_pair(p, target, "dice_loss")
    axes = tuple(i for i in range(p.data.ndim) if i != 1)
    first = 0 if include_background else 1
    pd = p.data[:, first:]
    gd = target[:, first:]
    inter = (pd * gd).sum(axis=axes)
    denom = pd.sum(axis=axes) + gd.sum(axis=axes) + smooth
    numer = 2 * inter + smooth
    k = pd.shape[1]
    loss = 1.0 - (numer / denom).mean()

    def backward(g):
        bshape = (1, k) + (1,) * (p.data.ndim - 2)
        dd = (2 * gd * denom.reshape(bshape) - numer.reshape(bshape)) / denom.reshape(bshape) ** 2
        out = np.zeros_like(p.data)
        out[:, first:] = -g * dd / k
        return (out,)

    return make_node(np.asarray(loss, dtype=p.dtype), (p,), backward)


def cross_entropy_loss(p: Tensor, target: np.ndarray, clamp: float = CE_CLAMP) -> Tensor:
    """Mean over pixels of -sum_c g log(max(p, clamp))."""
    target = np.asarray(target, dtype=p.dtype)
    _check_pair(p, target, "cross_entropy_loss")
    npix = p.data.size // p.shape[1]
    pc = np.maximum(p.data, clamp)
    loss = -(target * np.log(pc)).sum() / npix

    def backward(g):
        return (np.where(p.data > clamp, -g * target / pc / npix, 0.0).astype(p.dtype),)

    return make_node(np.asarray(loss, dtype=p.dtype), (p,), backward)


def combined_loss(p: Tensor, target: np.ndarray, include_background: bool = True) -> Tensor:
    d = dice_loss(p, target, include_background=include_background)
    c = cross_entropy_loss(p, target)
    return mul(add(d, c), 0.5)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """(N, H, W) integer labels -> (N, K, H, W) one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1, axis=1)
    return out
