"""Density-map losses with analytic gradients.

Every loss takes a prediction ``z`` and target ``y`` of equal shape
(any (n, 1, h, w) batch) and returns ``(value, grad_z)``. Batched values are
sums of the per-sample losses, taken in sample order.
"""
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

SCL_EPS = 1e-12
LOSS_KINDS = ("mse", "sal", "sal+scl")


def _check_pair(z, y, what):
    if z.shape != y.shape:
        raise L.ShapeError(f"{what}: prediction {z.shape} and target {y.shape} differ")


def _per_sample(fn, z, y, *args):
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.ndim != 4:
        return fn(z, y, *args)
    total, grad = 0.0, np.empty_like(z)
    for b in range(z.shape[0]):
        v, grad[b] = fn(z[b], y[b], *args)
        total += v
    return total, grad


def _mse(z, y):
    diff = z - y
    return float(np.sum(diff * diff) / diff.size), 2.0 * diff / diff.size


def mse_loss(z, y):
    """(1/N) ||z - y||^2 per sample."""
    _check_pair(z, y, "mse_loss")
    return _per_sample(_mse, z, y)


def _sal(z, y, k):
    # level 0 is the plain MSE, levels 1..k are cascaded 2x2 max pools
    value, grad = _mse(z, y)
    shape4 = (1,) * (4 - z.ndim) + z.shape
    zk, yk = z.reshape(shape4), y.reshape(shape4)
    routes = []
    for _ in range(k):
        zk, zi = L.maxpool2(zk)
        yk, _ = L.maxpool2(yk)
        routes.append(zi)
        v, g = _mse(zk, yk)
        value += v
        for idx in reversed(routes):
            g = L.maxpool2_backward(g, idx)
        grad = grad + g.reshape(z.shape)
    return value, grad


def sal_loss(z, y, k=3):
    """MSE summed over abstraction levels 0..k (max-pooled pyramids)."""
    _check_pair(z, y, "sal_loss")
    h, w = z.shape[-2:]
    if h % 2 ** k or w % 2 ** k:
        raise L.ShapeError(f"sal_loss: {h}x{w} map is not divisible by 2^{k}")
    return _per_sample(_sal, z, y, k)


def _scl(z, y):
    zz = float(np.sum(z * z))
    yy = float(np.sum(y * y))
    norm = np.sqrt(zz * yy)
    if norm < SCL_EPS:
        return 0.0, np.zeros_like(z)
    zy = float(np.sum(z * y))
    value = 1.0 - zy / norm
    grad = -(y / norm) + (zy / (norm * zz)) * z
    return value, grad


def scl_loss(z, y):
    """1 - <z, y> / (||z|| ||y||) per sample (un-centered correlation)."""
    _check_pair(z, y, "scl_loss")
    return _per_sample(_scl, z, y)


def combinatorial_loss(z, y, lam=1.0, k=3):
    """SAL + lam * SCL."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    v1, g1 = sal_loss(z, y, k)
    if lam == 0:
        return v1, g1
    v2, g2 = scl_loss(z, y)
    return v1 + lam * v2, g1 + lam * g2


def head_loss(kind, z, y, lam=1.0, k=3):
    """Per-head objective for the three loss ablations."""
    if kind == "mse":
        return mse_loss(z, y)
    if kind == "sal":
        return sal_loss(z, y, k)
    if kind == "sal+scl":
        return combinatorial_loss(z, y, lam, k)
    raise ValueError(f"unknown loss {kind!r}; choose from {LOSS_KINDS}")


@dataclass
class LossReport:
    total: float = 0.0
    per_head: dict = field(default_factory=dict)
    per_term: dict = field(default_factory=dict)

    CSV_HEADER = ("total", "loss_2D", "loss_3D", "loss_4D", "loss_Z", "sal", "scl")

    def csv_values(self):
        heads = [self.per_head.get(h, 0.0) for h in ("2D", "3D", "4D", "Z")]
        sal = sum(t[0] for t in self.per_term.values())
        scl = sum(t[1] for t in self.per_term.values())
        return [self.total, *heads, sal, scl]


def distributed_loss(outputs, y_full, lam=1.0, k=3, kind="sal+scl", heads=None):
    """Loss over every supervised head; returns (LossReport, {head: grad}).

    Intermediate heads are compared with the target average-pooled by 4.
    ``heads`` restricts supervision (e.g. ``("Z",)`` for single supervision).
    """
    y_full = np.asarray(y_full, dtype=np.float64)
    if outputs.z is None or y_full.shape != outputs.z.shape:
        raise L.ShapeError(f"distributed_loss: target {y_full.shape} does not match the "
                           f"full-resolution head {None if outputs.z is None else outputs.z.shape}")
    available = outputs.heads()
    active = [h for h in ("2D", "3D", "4D", "Z") if h in available and (heads is None or h in heads)]
    y_quarter = L.avgpool(y_full, 4) if any(h != "Z" for h in active) else None
    report, grads = LossReport(), {}
    for h in active:
        z = available[h]
        y = y_full if h == "Z" else y_quarter
        if z.shape != y.shape:
            raise L.ShapeError(f"head {h}: prediction {z.shape} vs target {y.shape}")
        if kind == "sal+scl":
            (sal, g_sal), (scl, g_scl) = sal_loss(z, y, k), scl_loss(z, y)
            value, grads[h] = sal + lam * scl, g_sal + lam * g_scl
            report.per_term[h] = (sal, scl)
        else:
            value, grads[h] = head_loss(kind, z, y, lam, k)
            report.per_term[h] = (value, 0.0) if kind == "sal" else (0.0, 0.0)
        report.per_head[h] = value
    report.total = sum(report.per_head[h] for h in active)
    return report, grads
