"""Forward and backward kernels for the layer primitives.

Tensors are plain 4-D numpy arrays laid out (batch, channel, height, width).
float64 is used for gradient checks, float32 is fine for training. Backward
functions return gradients and never mutate their inputs.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy a layer's contract."""


def check_tensor4(x, name="x"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name}: expected a 4-D (n, c, h, w) array, got "
                         f"{getattr(x, 'shape', type(x).__name__)}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name}: all dimensions must be >= 1, got {x.shape}")
    return np.ascontiguousarray(x)


def _pair(v):
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: tuple = (3, 3)
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    dilation: tuple = (1, 1)

    def __post_init__(self):
        for field in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, field, _pair(getattr(self, field)))
        if min(self.kernel + self.stride + self.dilation) < 1:
            raise ValueError(f"kernel, stride and dilation must be >= 1: {self}")
        if min(self.padding) < 0:
            raise ValueError(f"padding must be >= 0: {self}")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError(f"channel counts must be >= 1: {self}")

    @classmethod
    def same(cls, in_ch, out_ch, k, dilation=1):
        """Stride-1 spec whose padding preserves the spatial size (odd k)."""
        if k % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got {k}")
        return cls(in_ch, out_ch, (k, k), (1, 1),
                   (dilation * (k - 1) // 2,) * 2, (dilation, dilation))

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch) + self.kernel

    def output_size(self, h, w):
        (kh, kw), (sh, sw) = self.kernel, self.stride
        (ph, pw), (dh, dw) = self.padding, self.dilation
        span_h = h + 2 * ph - dh * (kh - 1) - 1
        span_w = w + 2 * pw - dw * (kw - 1) - 1
        if span_h < 0 or span_w < 0 or span_h % sh or span_w % sw:
            raise ShapeError(f"{self} does not tile a {h}x{w} input to an integer output size")
        return span_h // sh + 1, span_w // sw + 1

    def _geom(self, ho, wo):
        return self.kernel + self.stride + self.padding + self.dilation + (ho, wo)

    def is_pointwise(self):
        return (self.kernel == (1, 1) and self.stride == (1, 1)
                and self.padding == (0, 0))


def _check_weights(weights, expected, what):
    if weights.shape != expected:
        raise ShapeError(f"{what}: weights shaped {weights.shape}, expected {expected}")


def _im2col(x, spec, ho, wo):
    if spec.is_pointwise():
        n, c, h, w = x.shape
        return x.reshape(n, c, h * w)
    return kernels.im2col(x, *spec._geom(ho, wo))


def _col2im(cols, c, h, w, spec, ho, wo):
    if spec.is_pointwise():
        return np.ascontiguousarray(cols).reshape(cols.shape[0], c, h, w)
    return kernels.col2im(np.ascontiguousarray(cols), c, h, w, *spec._geom(ho, wo))


def conv2d(x, weights, bias, spec, return_cols=False):
    """Cross-correlation with stride, zero padding and dilation."""
    x = check_tensor4(x)
    n, c, h, w = x.shape
    if c != spec.in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, spec expects {spec.in_ch}")
    _check_weights(weights, spec.weight_shape, "conv2d")
    ho, wo = spec.output_size(h, w)
    cols = _im2col(x, spec, ho, wo)
    out = np.matmul(weights.reshape(spec.out_ch, -1), cols)
    if bias is not None:
        out += bias.reshape(-1, 1)
    out = out.reshape(n, spec.out_ch, ho, wo)
    return (out, cols) if return_cols else out


def conv2d_backward(x, weights, spec, grad_out, cols=None):
    """Returns (grad_x, grad_w, grad_b). ``cols`` may reuse the forward im2col."""
    x = check_tensor4(x)
    n, c, h, w = x.shape
    _check_weights(weights, spec.weight_shape, "conv2d_backward")
    ho, wo = spec.output_size(h, w)
    if grad_out.shape != (n, spec.out_ch, ho, wo):
        raise ShapeError(f"conv2d_backward: grad_out shaped {grad_out.shape}, "
                         f"forward output is {(n, spec.out_ch, ho, wo)}")
    if cols is None:
        cols = _im2col(x, spec, ho, wo)
    g = np.ascontiguousarray(grad_out).reshape(n, spec.out_ch, ho * wo)
    w2 = weights.reshape(spec.out_ch, -1)
    grad_w = g[0] @ cols[0].T
    for b in range(1, n):
        grad_w += g[b] @ cols[b].T
    grad_b = g.sum(axis=(0, 2))
    grad_x = _col2im(np.matmul(w2.T, g), c, h, w, spec, ho, wo)
    return grad_x, grad_w.reshape(weights.shape), grad_b


def _check_deconv(x, weights, spec):
    x = check_tensor4(x)
    n, c, h, w = x.shape
    if c != spec.in_ch:
        raise ShapeError(f"deconv2d: input has {c} channels, spec expects {spec.in_ch}")
    _check_weights(weights, (spec.in_ch, spec.out_ch) + spec.kernel, "deconv2d")
    # the trellis runs at constant resolution, so only size-preserving specs are legal
    if spec.stride != (1, 1) or spec.output_size(h, w) != (h, w):
        raise ShapeError(f"deconv2d: {spec} changes the spatial size of a {h}x{w} map")
    return x


def deconv2d(x, weights, bias, spec):
    """Transposed convolution; weights are shaped (in_ch, out_ch, kh, kw).

    This is the adjoint of ``conv2d`` run with the same weight array and the
    channel roles swapped.
    """
    x = _check_deconv(x, weights, spec)
    n, c, h, w = x.shape
    w2 = weights.reshape(spec.in_ch, -1)
    cols = np.matmul(w2.T, x.reshape(n, c, h * w))
    out = _col2im(cols, spec.out_ch, h, w, spec, h, w)
    if bias is not None:
        out += bias.reshape(1, -1, 1, 1)
    return out


def deconv2d_backward(x, weights, spec, grad_out):
    """Returns (grad_x, grad_w, grad_b) for ``deconv2d``."""
    x = _check_deconv(x, weights, spec)
    n, c, h, w = x.shape
    if grad_out.shape != (n, spec.out_ch, h, w):
        raise ShapeError(f"deconv2d_backward: grad_out shaped {grad_out.shape}, "
                         f"forward output is {(n, spec.out_ch, h, w)}")
    gcols = _im2col(np.ascontiguousarray(grad_out), spec, h, w)
    w2 = weights.reshape(spec.in_ch, -1)
    grad_x = np.matmul(w2, gcols).reshape(n, c, h, w)
    xf = x.reshape(n, c, h * w)
    grad_w = xf[0] @ gcols[0].T
    for b in range(1, n):
        grad_w += xf[b] @ gcols[b].T
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w.reshape(weights.shape), grad_b


def _check_divisible(x, k, what):
    if x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"{what}: spatial size {x.shape[2]}x{x.shape[3]} "
                         f"is not divisible by {k}")


def maxpool2(x):
    """2x2 / stride-2 max pooling. Returns (out, argmax) where argmax holds the
    winning window offset 0..3 (row-major; first maximum wins ties)."""
    x = check_tensor4(x)
    _check_divisible(x, 2, "maxpool2")
    return kernels.maxpool2_forward(x)


def maxpool2_backward(grad_out, argmax):
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"maxpool2_backward: grad {grad_out.shape} vs argmax {argmax.shape}")
    return kernels.maxpool2_backward(np.ascontiguousarray(grad_out), argmax)


def avgpool(x, k):
    """Average pooling with window = stride = k."""
    x = check_tensor4(x)
    if k < 1:
        raise ValueError(f"avgpool factor must be >= 1, got {k}")
    _check_divisible(x, k, "avgpool")
    return kernels.avgpool_forward(x, k)


def avgpool_backward(grad_out, k):
    return kernels.avgpool_backward(check_tensor4(grad_out, "grad_out"), k)


def upsample_nearest(x, factor):
    x = check_tensor4(x)
    if factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    return kernels.upsample_forward(x, factor)


def upsample_nearest_backward(grad_out, factor):
    grad_out = check_tensor4(grad_out, "grad_out")
    if factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {factor}")
    _check_divisible(grad_out, factor, "upsample_nearest_backward")
    return kernels.upsample_backward(grad_out, factor)


def concat_channels(a, b):
    """Stack channels of ``a`` then ``b``."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis")
    return np.concatenate([a, b], axis=1)


def concat_backward(grad_out, left_channels):
    return (np.ascontiguousarray(grad_out[:, :left_channels]),
            np.ascontiguousarray(grad_out[:, left_channels:]))


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)
