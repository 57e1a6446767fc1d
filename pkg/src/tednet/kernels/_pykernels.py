"""Pure numpy versions of the loop-heavy kernels.

Every routine here accumulates in the same per-element order as its compiled
twin in ``_ckernels.pyx`` (kernel taps in row-major order), so the two
backends produce bit-identical results.
"""
import numpy as np


def im2col(x, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
    n, c, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            cols[:, :, i, j] = x[:, :, r0:r0 + sh * (ho - 1) + 1:sh,
                                 c0:c0 + sw * (wo - 1) + 1:sw]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, c, h, w, kh, kw, sh, sw, ph, pw, dh, dw, ho, wo):
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            out[:, :, r0:r0 + sh * (ho - 1) + 1:sh,
                c0:c0 + sw * (wo - 1) + 1:sw] += cols[:, :, i, j]
    return np.ascontiguousarray(out[:, :, ph:ph + h, pw:pw + w])


def maxpool2_forward(x):
    # candidates in row-major window order; argmax keeps the first maximum
    cand = np.stack([x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
                     x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]])
    idx = np.argmax(cand, axis=0).astype(np.int8)
    out = np.take_along_axis(cand, idx[None].astype(np.intp), axis=0)[0]
    return np.ascontiguousarray(out), idx


def maxpool2_backward(grad_out, idx):
    n, c, ho, wo = grad_out.shape
    grad_x = np.zeros((n, c, 2 * ho, 2 * wo), dtype=grad_out.dtype)
    for k in range(4):
        di, dj = divmod(k, 2)
        grad_x[:, :, di::2, dj::2] = np.where(idx == k, grad_out, 0)
    return grad_x


def _window_sum(x, k):
    # pairwise tree over the k*k taps in row-major order; exact for constant
    # windows when k is a power of two
    parts = [x[:, :, i::k, j::k] for i in range(k) for j in range(k)]
    while len(parts) > 1:
        merged = [parts[t] + parts[t + 1] for t in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return np.array(parts[0], copy=True)


def avgpool_forward(x, k):
    return _window_sum(x, k) / (k * k)


def avgpool_backward(grad_out, k):
    g = grad_out / (k * k)
    return upsample_forward(g, k)


def upsample_forward(x, f):
    n, c, h, w = x.shape
    out = np.empty((n, c, h * f, w * f), dtype=x.dtype)
    for i in range(f):
        for j in range(f):
            out[:, :, i::f, j::f] = x
    return out


def upsample_backward(grad_out, f):
    return _window_sum(grad_out, f)
