"""Central finite-difference oracle for the analytic backward passes."""
import numpy as np

from . import layers as L


def max_relative_error(analytic, numeric):
    """||a - n||_inf / max(||a||_inf, ||n||_inf); 0 when both vanish."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def numeric_grad(f, x, eps=1e-6):
    """d f / d x by central differences; ``f`` maps the (mutated) array to a scalar."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(layer, inputs, eps=1e-6, seed=0):
    """Worst relative error between ``layer.backward`` and finite differences.

    ``layer.forward(*inputs)`` returns an array; ``layer.backward(grad_out)``
    returns one gradient per input (``None`` for inputs that are not
    differentiated). The scalar probed is <forward(inputs), R> for a fixed
    random R.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out = layer.forward(*inputs)
    proj = np.random.default_rng(seed).uniform(-1, 1, size=np.shape(out))
    analytic = layer.backward(proj.copy())

    def objective():
        return float(np.sum(layer.forward(*inputs) * proj))

    worst = 0.0
    for x, g in zip(inputs, analytic):
        if g is None:
            continue
        worst = max(worst, max_relative_error(g, numeric_grad(objective, x, eps)))
    return worst


class Conv2d:
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, w, b):
        self.x, self.w = x, w
        return L.conv2d(x, w, b, self.spec)

    def backward(self, g):
        return L.conv2d_backward(self.x, self.w, self.spec, g)


class Deconv2d:
    def __init__(self, spec):
        self.spec = spec

    def forward(self, x, w, b):
        self.x, self.w = x, w
        return L.deconv2d(x, w, b, self.spec)

    def backward(self, g):
        return L.deconv2d_backward(self.x, self.w, self.spec, g)


class MaxPool2:
    def forward(self, x):
        out, self.idx = L.maxpool2(x)
        return out

    def backward(self, g):
        return (L.maxpool2_backward(g, self.idx),)


class AvgPool:
    def __init__(self, k):
        self.k = k

    def forward(self, x):
        return L.avgpool(x, self.k)

    def backward(self, g):
        return (L.avgpool_backward(g, self.k),)


class Upsample:
    def __init__(self, factor):
        self.factor = factor

    def forward(self, x):
        return L.upsample_nearest(x, self.factor)

    def backward(self, g):
        return (L.upsample_nearest_backward(g, self.factor),)


class Concat:
    def forward(self, a, b):
        self.ca = a.shape[1]
        return L.concat_channels(a, b)

    def backward(self, g):
        return L.concat_backward(g, self.ca)


class Relu:
    def forward(self, x):
        self.x = x.copy()
        return L.relu(x)

    def backward(self, g):
        return (L.relu_backward(self.x, g),)


class Loss:
    """Adapts a ``(value, grad)`` loss of (Z, Y) to the layer protocol; only Z
    is differentiated."""

    def __init__(self, fn, **kwargs):
        self.fn, self.kwargs = fn, kwargs

    def forward(self, z, y):
        value, self.grad = self.fn(z, y, **self.kwargs)
        return np.array(value)

    def backward(self, g):
        return (self.grad * float(g), None)


def tensor_core_checks(rng, shape=(2, 3, 6, 6)):
    """(name, layer, inputs) cases covering every primitive, inputs in [-1, 1]."""
    n, c, h, w = shape

    def u(*s):
        return rng.uniform(-1, 1, size=s)

    def away_from_zero(*s):
        # relu is probed away from its kink: |x| >= 0.1
        return rng.uniform(0.1, 1, size=s) * rng.choice([-1.0, 1.0], size=s)

    def distinct(*s):
        # a permutation keeps max-pool windows free of near-ties
        return (rng.permutation(int(np.prod(s))).reshape(s) / np.prod(s)) * 2 - 1

    cases = []
    for name, spec in [
        ("conv2d 3x3", L.ConvSpec.same(c, 4, 3)),
        ("conv2d 1x1", L.ConvSpec(c, 4, 1)),
        ("conv2d 3x3 dil2", L.ConvSpec.same(c, 2, 3, dilation=2)),
        ("conv2d 4x2 stride2", L.ConvSpec(c, 2, (4, 2), stride=2, padding=(1, 0))),
    ]:
        cases.append((name, Conv2d(spec),
                      [u(n, c, h, w), u(*spec.weight_shape), u(spec.out_ch)]))
    dspec = L.ConvSpec.same(c, 2, 3)
    cases.append(("deconv2d 3x3", Deconv2d(dspec),
                  [u(n, c, h, w), u(c, 2, 3, 3), u(2)]))
    cases.append(("maxpool2", MaxPool2(), [distinct(n, c, h, w)]))
    cases.append(("avgpool 2", AvgPool(2), [u(n, c, h, w)]))
    cases.append(("avgpool 3", AvgPool(3), [u(n, c, h, w)]))
    cases.append(("upsample x2", Upsample(2), [u(n, c, h, w)]))
    cases.append(("concat", Concat(), [u(n, c, h, w), u(n, 2, h, w)]))
    cases.append(("relu", Relu(), [away_from_zero(n, c, h, w)]))
    return cases


class Corrupted:
    """Test hook: perturbs the analytic gradient so the harness must fail."""

    def __init__(self, layer, factor=1.01):
        self.layer, self.factor = layer, factor

    def forward(self, *inputs):
        return self.layer.forward(*inputs)

    def backward(self, g):
        return tuple(None if d is None else d * self.factor for d in self.layer.backward(g))


def loss_checks(rng, shape=(2, 1, 8, 8)):
    from . import losses

    def target():
        return rng.uniform(0.1, 1, size=shape)

    def pred():
        # a permutation keeps max-pool windows free of near-ties
        n = int(np.prod(shape))
        return (rng.permutation(n).reshape(shape) + 1.0) / n

    return [
        ("mse", Loss(losses.mse_loss), [pred(), target()]),
        ("sal K=3", Loss(losses.sal_loss, k=3), [pred(), target()]),
        ("scl", Loss(losses.scl_loss), [pred(), target()]),
        ("sal+scl lambda=1", Loss(losses.combinatorial_loss, lam=1.0, k=3), [pred(), target()]),
        ("sal+scl lambda=0.3", Loss(losses.combinatorial_loss, lam=0.3, k=2), [pred(), target()]),
    ]


def model_check(config=None, size=16, batch=1, coords_per_tensor=3, eps=1e-6, seed=0):
    """Finite differences on sampled parameter coordinates of a float64 model.

    The probed scalar is sum over heads of <head, R_head>. Returns the worst
    relative error over the sampled coordinates (infinity-norm ratio).
    """
    from .model import TEDNet, TrellisConfig
    config = config or TrellisConfig(base_channels=2)
    rng = np.random.default_rng(seed)
    net = TEDNet(config, seed=seed, dtype=np.float64)
    # small positive biases keep most relu units active so every layer is probed
    for name, p in net.params.items():
        if name.endswith(".b"):
            p[...] = rng.uniform(0.01, 0.1, size=p.shape)
    x = rng.uniform(0, 1, size=(batch, 3, size, size))
    out = net.forward(x)
    proj = {h: rng.uniform(-1, 1, size=z.shape) for h, z in out.heads().items()}
    grads = net.backward(out, proj)

    def objective():
        o = net.forward(x)
        return float(sum(np.sum(z * proj[h]) for h, z in o.heads().items()))

    analytic, numeric = [], []
    for name, p in net.params.items():
        flat = p.reshape(-1)
        picks = rng.choice(flat.size, size=min(coords_per_tensor, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            fp = objective()
            flat[i] = orig - eps
            fm = objective()
            flat[i] = orig
            numeric.append((fp - fm) / (2 * eps))
            analytic.append(grads[name].reshape(-1)[i])
    return max_relative_error(np.array(analytic), np.array(numeric))


def run_all(seed=0, corrupt=False, coords_per_tensor=3):
    """{component: worst relative error} for tensor core, losses and tiny models."""
    rng = np.random.default_rng(seed)
    results = {}
    for group, cases in (("tensor-core", tensor_core_checks(rng)), ("losses", loss_checks(rng))):
        for name, layer, inputs in cases:
            if corrupt and group == "tensor-core" and name == "conv2d 3x3":
                layer = Corrupted(layer)
            results[f"{group}: {name}"] = grad_check(layer, inputs, seed=seed)
    from .model import TrellisConfig
    results["model: trellis c=2 16x16"] = model_check(
        TrellisConfig(base_channels=2), coords_per_tensor=coords_per_tensor, seed=seed)
    results["model: single-path c=2 16x16"] = model_check(
        TrellisConfig(base_channels=2, single_path=True), coords_per_tensor=coords_per_tensor,
        seed=seed)
    return results
