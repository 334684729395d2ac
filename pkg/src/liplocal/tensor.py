"""Dense numeric kernels.

Tensors are plain float64 ``numpy.ndarray`` values. Convolutions use the
cross-correlation convention with zero padding, on ``(C, H, W)`` inputs or
batched ``(N, C, H, W)`` inputs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from liplocal.errors import ShapeError

DTYPE = np.float64


def as_tensor(x, dtype=DTYPE):
    t = np.asarray(x, dtype=dtype)
    if not np.all(np.isfinite(t)):
        raise ValueError("tensor contains NaN or Inf")
    return t


def matmul(a, b):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
        squeeze = 0
    else:
        squeeze = None
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = a @ b
    return out[0] if squeeze is not None else out


def conv_output_size(size, kernel_size, stride, padding):
    return (size + 2 * padding - kernel_size) // stride + 1


def _check_conv(x, kernel, stride, padding):
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"kernel must be O x C x k x k, got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"invalid stride/padding {stride}/{padding}")
    if x.ndim != 4:
        raise ShapeError(f"conv input must be C x H x W or N x C x H x W, got {x.shape[1:]}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, kernel expects {kernel.shape[1]}")
    k = kernel.shape[2]
    oh = conv_output_size(x.shape[2], k, stride, padding)
    ow = conv_output_size(x.shape[3], k, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv output extent {oh}x{ow} is not positive")
    return oh, ow


def _windows(x, k, stride, padding, oh, ow):
    # (N, C, oh, ow, k, k) view over the padded input
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """Cross-correlate ``x`` with ``kernel``; accepts a single image or a batch."""
    x = np.asarray(x, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    single = x.ndim == 3
    if single:
        x = x[None]
    oh, ow = _check_conv(x, kernel, stride, padding)
    win = _windows(x, kernel.shape[2], stride, padding, oh, ow)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # N, oh, ow, O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE).reshape(1, -1, 1, 1)
    return out[0] if single else out


def conv2d_transpose(y, kernel, stride=1, padding=0, output_size=None):
    """Adjoint of :func:`conv2d` with respect to its input.

    ``output_size`` is the ``(H, W)`` of the forward input; when omitted the
    smallest size consistent with ``y`` is used.
    """
    y = np.asarray(y, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE)
    single = y.ndim == 3
    if single:
        y = y[None]
    if y.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"bad conv_transpose operands {y.shape}, {kernel.shape}")
    n, o, oh, ow = y.shape
    if o != kernel.shape[0]:
        raise ShapeError(f"input has {o} channels, kernel produces {kernel.shape[0]}")
    c, k = kernel.shape[1], kernel.shape[2]
    if output_size is None:
        output_size = ((oh - 1) * stride + k - 2 * padding, (ow - 1) * stride + k - 2 * padding)
    h, w = output_size
    if conv_output_size(h, k, stride, padding) != oh or conv_output_size(w, k, stride, padding) != ow:
        raise ShapeError(f"output size {output_size} inconsistent with {y.shape[2:]}")
    cols = np.tensordot(y, kernel, axes=([1], [0]))  # N, oh, ow, C, k, k
    hp, wp = h + 2 * padding, w + 2 * padding
    out = np.zeros((n, c, hp + stride, wp + stride), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out[:, :, padding : padding + h, padding : padding + w])
    return out[0] if single else out


def conv2d_kernel_grad(x, grad_out, kernel_size, stride=1, padding=0):
    """Gradient of ``<conv2d(x, K), grad_out>`` with respect to ``K``."""
    x = np.asarray(x, dtype=DTYPE)
    grad_out = np.asarray(grad_out, dtype=DTYPE)
    if x.ndim == 3:
        x, grad_out = x[None], grad_out[None]
    oh, ow = grad_out.shape[2:]
    win = _windows(x, kernel_size, stride, padding, oh, ow)
    return np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, k, k


def l2_norm(t):
    t = np.asarray(t, dtype=DTYPE)
    return float(np.sqrt(np.sum(t * t)))
