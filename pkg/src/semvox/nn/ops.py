"""Differentiable array primitives: dense, transposed 3D convolution, rectifier, MSE.

Activations are channels-last, shape (N, D, H, W, C), so every channel mixing
is a plain matmul over the trailing axis. Transposed convolution weights are
(in_ch, out_ch, kd, kh, kw). All backward passes are exact analytic gradients;
the rectifier subgradient at 0 is 0. Loops run over the k^3 kernel offsets in
a fixed order, keeping accumulation deterministic.
"""

from __future__ import annotations

import numpy as np


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(pre: np.ndarray, grad: np.ndarray) -> np.ndarray:
    return np.where(pre > 0, grad, 0)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, grad: np.ndarray):
    gx = grad @ w.T
    gw = x.T @ grad
    gb = grad.sum(axis=0)
    return gx, gw, gb


def conv_transpose3d_output_shape(
    in_shape: tuple[int, int, int], kernel: int, stride: int, padding: int
) -> tuple[int, int, int]:
    return tuple((s - 1) * stride - 2 * padding + kernel for s in in_shape)


def _is_fast_case(w: np.ndarray, stride: int, padding: int) -> bool:
    return stride == 2 and padding == 1 and w.shape[2:] == (4, 4, 4)


def _taps(w: np.ndarray) -> np.ndarray:
    """Weights rearranged tap-major: (kd, kh, kw, in_ch, out_ch), contiguous.

    Slicing one tap of the (in_ch, out_ch, k, k, k) layout leaves a strided
    (in_ch, out_ch) matrix that defeats the matmul kernels; this one copy per
    call keeps every tap contiguous.
    """
    return np.ascontiguousarray(np.transpose(w, (2, 3, 4, 0, 1)))


def _taps_t(w: np.ndarray) -> np.ndarray:
    """Transposed taps: (kd, kh, kw, out_ch, in_ch), contiguous."""
    return np.ascontiguousarray(np.transpose(w, (2, 3, 4, 1, 0)))


def _ct3d_forward_fast(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Phase-decomposed transposed conv for stride 2, kernel 4, padding 1.

    Output voxels of parity (qx, qy, qz) form a stride-1 correlation of the
    zero-padded input with the 2x2x2 sub-kernel at offsets 2j + (1 - q), so
    the accumulation runs over contiguous blocks instead of strided scatter.
    """
    n, d, h, wd, ic = x.shape
    oc = w.shape[1]
    wt = _taps(w)
    xp = np.zeros((n, d + 2, h + 2, wd + 2, ic), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1, :] = x
    out = np.empty((n, 2 * d, 2 * h, 2 * wd, oc), dtype=x.dtype)
    for qx in (0, 1):
        for qy in (0, 1):
            for qz in (0, 1):
                acc = None
                for jx in (0, 1):
                    for jy in (0, 1):
                        for jz in (0, 1):
                            ox, oy, oz = 1 - jx + qx, 1 - jy + qy, 1 - jz + qz
                            kx, ky, kz = 2 * jx + 1 - qx, 2 * jy + 1 - qy, 2 * jz + 1 - qz
                            term = (
                                xp[:, ox : ox + d, oy : oy + h, oz : oz + wd, :]
                                @ wt[kx, ky, kz]
                            )
                            acc = term if acc is None else acc + term
                out[:, qx::2, qy::2, qz::2, :] = acc
    out += b
    return out


def conv_transpose3d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, *, stride: int = 2, padding: int = 1
) -> np.ndarray:
    """Transposed 3D convolution, scatter formulation.

    Each kernel offset contributes ``x @ w[:, :, a, b, c]`` to a stride-spaced
    slice of the uncropped output; cropping by ``padding`` then yields the
    standard (in-1)*stride - 2*padding + kernel output extent.
    """
    n, d, h, wd, ic = x.shape
    ic_w, oc, kd, kh, kw = w.shape
    if ic_w != ic:
        raise ValueError(f"weight expects {ic_w} input channels, activations have {ic}")
    if _is_fast_case(w, stride, padding):
        return _ct3d_forward_fast(x, w, b)
    s, p = stride, padding
    wt = _taps(w)
    full = np.zeros(
        (n, (d - 1) * s + kd, (h - 1) * s + kh, (wd - 1) * s + kw, oc), dtype=x.dtype
    )
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                full[:, a : a + s * d : s, bb : bb + s * h : s, c : c + s * wd : s, :] += (
                    x @ wt[a, bb, c]
                )
    od, oh, ow = conv_transpose3d_output_shape((d, h, wd), kd, s, p)
    out = full[:, p : p + od, p : p + oh, p : p + ow, :] + b
    return out


def _ct3d_backward_fast(x: np.ndarray, w: np.ndarray, grad: np.ndarray):
    """Phase-decomposed gradients for the stride-2/kernel-4/padding-1 case.

    Each parity class of the re-padded output gradient is copied contiguous
    once, then both the input and weight gradients reduce to block matmuls.
    """
    n, d, h, wd, ic = x.shape
    oc = w.shape[1]
    wt_t = _taps_t(w)
    g_full = np.zeros(
        (n, 2 * d + 2, 2 * h + 2, 2 * wd + 2, oc), dtype=grad.dtype
    )
    g_full[:, 1:-1, 1:-1, 1:-1, :] = grad
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    x2d = x.reshape(-1, ic)
    for px in (0, 1):
        for py in (0, 1):
            for pz in (0, 1):
                gphase = np.ascontiguousarray(g_full[:, px::2, py::2, pz::2, :])
                for jx in (0, 1):
                    for jy in (0, 1):
                        for jz in (0, 1):
                            kx, ky, kz = 2 * jx + px, 2 * jy + py, 2 * jz + pz
                            view = gphase[:, jx : jx + d, jy : jy + h, jz : jz + wd, :]
                            gx += view @ wt_t[kx, ky, kz]
                            gw[:, :, kx, ky, kz] = x2d.T @ np.ascontiguousarray(
                                view
                            ).reshape(-1, oc)
    gb = grad.sum(axis=(0, 1, 2, 3))
    return gx, gw, gb


def conv_transpose3d_backward(
    x: np.ndarray, w: np.ndarray, grad: np.ndarray, *, stride: int = 2, padding: int = 1
):
    """Gradients of the scatter-form transposed convolution.

    Embedding ``grad`` back into the uncropped buffer makes each offset's
    backward a gather with the same stride pattern as the forward scatter.
    """
    n, d, h, wd, ic = x.shape
    _, oc, kd, kh, kw = w.shape
    if _is_fast_case(w, stride, padding):
        return _ct3d_backward_fast(x, w, grad)
    s, p = stride, padding
    wt_t = _taps_t(w)
    full_shape = (n, (d - 1) * s + kd, (h - 1) * s + kh, (wd - 1) * s + kw, oc)
    g_full = np.zeros(full_shape, dtype=grad.dtype)
    g_full[
        :, p : p + grad.shape[1], p : p + grad.shape[2], p : p + grad.shape[3], :
    ] = grad
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    x2d = x.reshape(-1, ic)
    for a in range(kd):
        for bb in range(kh):
            for c in range(kw):
                g_view = g_full[
                    :, a : a + s * d : s, bb : bb + s * h : s, c : c + s * wd : s, :
                ]
                gx += g_view @ wt_t[a, bb, c]
                gw[:, :, a, bb, c] = x2d.T @ np.ascontiguousarray(g_view).reshape(
                    -1, oc
                )
    gb = grad.sum(axis=(0, 1, 2, 3))
    return gx, gw, gb


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared error over all elements, accumulated in float64."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(np.square(diff), dtype=np.float64))


def mse_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """d(mean squared error)/d(pred), in pred's dtype."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    scale = np.asarray(2.0 / pred.size, dtype=pred.dtype)
    return (pred - target) * scale
