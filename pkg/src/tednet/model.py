"""Trellis encoder-decoder network: encoder stages, decoding grid, heads.

Parameters live in a flat ordered dict keyed by layer path, e.g.
``enc.s5.b2.k7.w`` or ``dec.34.f2.b``. Forward passes return a
:class:`ForwardOutputs` holding the four density maps plus everything the
backward pass needs.
"""
from dataclasses import dataclass, field

import numpy as np

from . import layers as L

HEADS = ("2D", "3D", "4D", "Z")

# cells of the triangular grid in evaluation order; each fuses
# left = Z[i-1, j-1] with right = Z[i-1, j]
GRID_CELLS = ((2, 2), (2, 3), (2, 4), (3, 3), (3, 4), (4, 4))
SINGLE_PATH_CELLS = ((2, 4), (3, 4), (4, 4))
HEAD_CELLS = {"2D": (2, 2), "3D": (3, 3), "4D": (4, 4)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrellisConfig:
    base_channels: int = 32
    blocks_per_stage: tuple = (1, 2, 2, 2, 2)
    branch_kernels: tuple = (1, 3, 5, 7)
    sal_levels: int = 3
    lam: float = 1.0
    single_path: bool = False

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "branch_kernels", tuple(int(k) for k in self.branch_kernels))
        if len(self.blocks_per_stage) != 5 or sum(self.blocks_per_stage) != 9 \
                or min(self.blocks_per_stage) < 1:
            raise ConfigError(f"blocks_per_stage must be five positive counts summing to 9, "
                              f"got {self.blocks_per_stage}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if not self.branch_kernels or any(k < 1 or k % 2 == 0 for k in self.branch_kernels):
            raise ConfigError(f"branch kernels must be odd and positive, got {self.branch_kernels}")
        nb = len(self.branch_kernels)
        for width in self.stage_channels:
            # narrow stages (tiny test configs) give every branch one channel
            if width >= nb and width % nb:
                raise ConfigError(f"stage width {width} is not divisible by the "
                                  f"{nb} encoding-block branches")
        if self.sal_levels < 0:
            raise ConfigError(f"sal_levels must be >= 0, got {self.sal_levels}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")

    @property
    def stage_channels(self):
        c = self.base_channels
        return (c, c, 2 * c, 4 * c, 8 * c)

    def branch_width(self, out_ch):
        return max(1, out_ch // len(self.branch_kernels))

    def encoding_blocks(self):
        """(stage, block, in_ch, out_ch, dilation) for all nine blocks."""
        blocks, in_ch = [], 3
        for s, (count, out_ch) in enumerate(zip(self.blocks_per_stage, self.stage_channels), 1):
            for b in range(1, count + 1):
                blocks.append([s, b, in_ch, out_ch, 1])
                in_ch = out_ch
        blocks[-2][4], blocks[-1][4] = 2, 4
        return [tuple(b) for b in blocks]

    def seed_channels(self):
        """Channels of the grid seeds Z[1,1..4] = E2..E5."""
        return {(1, j): ch for j, ch in zip(range(1, 5), self.stage_channels[1:])}

    def as_dict(self):
        return {
            "base_channels": str(self.base_channels),
            "blocks_per_stage": ",".join(map(str, self.blocks_per_stage)),
            "branch_kernels": ",".join(map(str, self.branch_kernels)),
            "sal_levels": str(self.sal_levels),
            "lambda": repr(float(self.lam)),
            "single_path": str(int(self.single_path)),
        }

    @classmethod
    def from_dict(cls, d):
        def ints(v):
            return tuple(int(t) for t in str(v).split(","))
        kw = {}
        if "base_channels" in d:
            kw["base_channels"] = int(d["base_channels"])
        if "blocks_per_stage" in d:
            kw["blocks_per_stage"] = ints(d["blocks_per_stage"])
        if "branch_kernels" in d:
            kw["branch_kernels"] = ints(d["branch_kernels"])
        if "sal_levels" in d:
            kw["sal_levels"] = int(d["sal_levels"])
        if "lambda" in d:
            kw["lam"] = float(d["lambda"])
        if "single_path" in d:
            kw["single_path"] = str(d["single_path"]).lower() in ("1", "true", "yes")
        return cls(**kw)


def _enc_name(s, b):
    return f"enc.s{s}.b{b}"


def layer_specs(config):
    """Ordered map of layer name -> (kind, ConvSpec); kind is "conv" or "deconv"."""
    specs = {}
    for s, b, cin, cout, dil in config.encoding_blocks():
        name, bw = _enc_name(s, b), config.branch_width(cout)
        for k in config.branch_kernels:
            specs[f"{name}.k{k}"] = ("conv", L.ConvSpec.same(cin, bw, k, dilation=dil if k > 1 else 1))
        specs[f"{name}.fuse"] = ("conv", L.ConvSpec(bw * len(config.branch_kernels), cout, 1))
    ch = config.seed_channels()
    cells = SINGLE_PATH_CELLS if config.single_path else GRID_CELLS
    if config.single_path:
        # chain down the rightmost column without skip inputs
        right = ch[(1, 4)]
        for i, j in cells:
            half = right // 2
            specs[f"dec.{i}{j}.f2"] = ("deconv", L.ConvSpec.same(right, half, 3))
            specs[f"dec.{i}{j}.f3"] = ("conv", L.ConvSpec(half, half, 1))
            right = half
    else:
        for i, j in cells:
            left, right = ch[(i - 1, j - 1)], ch[(i - 1, j)]
            if right != 2 * left:
                raise ConfigError(f"grid cell ({i},{j}): right input has {right} channels, "
                                  f"expected 2 x {left}")
            specs[f"dec.{i}{j}.f1"] = ("conv", L.ConvSpec(left, left, 1))
            specs[f"dec.{i}{j}.f2"] = ("deconv", L.ConvSpec.same(right, right // 2, 3))
            specs[f"dec.{i}{j}.f3"] = ("conv", L.ConvSpec(2 * left, left, 1))
            ch[(i, j)] = left
        for head, cell in HEAD_CELLS.items():
            specs[f"head.{head}"] = ("conv", L.ConvSpec(ch[cell], 1, 1))
    top = config.base_channels
    specs["up.1"] = ("conv", L.ConvSpec.same(top, top, 3))
    specs["up.2"] = ("conv", L.ConvSpec.same(top, top, 3))
    specs["head.Z"] = ("conv", L.ConvSpec(top, 1, 1))
    return specs


def param_shapes(config):
    shapes = {}
    for name, (kind, spec) in layer_specs(config).items():
        if kind == "conv":
            shapes[name + ".w"] = spec.weight_shape
        else:
            shapes[name + ".w"] = (spec.in_ch, spec.out_ch) + spec.kernel
        shapes[name + ".b"] = (spec.out_ch,)
    return shapes


def parameter_count(config):
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def xavier_init(config, seed=0, dtype=np.float32):
    """Uniform Xavier weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        a, b, kh, kw = shape
        # conv weights are (out, in, ...), deconv (in, out, ...); the sum is symmetric
        limit = np.sqrt(6.0 / ((a + b) * kh * kw))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


@dataclass
class ForwardOutputs:
    """Density maps (n, 1, h, w); intermediate heads are at 1/4 resolution and
    are ``None`` in single-path mode."""
    z2d: np.ndarray = None
    z3d: np.ndarray = None
    z4d: np.ndarray = None
    z: np.ndarray = None
    cache: dict = field(default_factory=dict, repr=False)

    def head(self, name):
        return {"2D": self.z2d, "3D": self.z3d, "4D": self.z4d, "Z": self.z}[name]

    def heads(self):
        return {h: self.head(h) for h in HEADS if self.head(h) is not None}


class TEDNet:
    def __init__(self, config, params=None, seed=0, dtype=np.float32):
        self.config = config
        self.specs = layer_specs(config)
        self.params = params if params is not None else xavier_init(config, seed, dtype)
        expected = param_shapes(config)
        if list(self.params) != list(expected):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ConfigError(f"parameter set does not match config: missing {missing}, "
                              f"unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: shape {self.params[name].shape}, config needs {shape}")

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    # -- building blocks --------------------------------------------------

    def _conv(self, name, x, cache, relu=True):
        kind, spec = self.specs[name]
        w, b = self.params[name + ".w"], self.params[name + ".b"]
        if kind == "conv":
            out, cols = L.conv2d(x, w, b, spec, return_cols=True)
        else:
            out, cols = L.deconv2d(x, w, b, spec), None
        if relu:
            out = L.relu(out)
        cache[name] = (x, cols, out if relu else None)
        return out

    def _conv_back(self, name, g, cache, grads):
        kind, spec = self.specs[name]
        x, cols, out = cache[name]
        if out is not None:
            g = L.relu_backward(out, g)
        w = self.params[name + ".w"]
        if kind == "conv":
            gx, gw, gb = L.conv2d_backward(x, w, spec, g, cols=cols)
        else:
            gx, gw, gb = L.deconv2d_backward(x, w, spec, g)
        grads[name + ".w"] += gw
        grads[name + ".b"] += gb
        return gx

    def encoding_block(self, x, s, b, cache):
        """Parallel multi-kernel branches -> channel concat -> 1x1 fuse."""
        name = _enc_name(s, b)
        branches = [self._conv(f"{name}.k{k}", x, cache) for k in self.config.branch_kernels]
        return self._conv(f"{name}.fuse", np.concatenate(branches, axis=1), cache)

    def _encoding_block_back(self, g, s, b, cache, grads):
        name = _enc_name(s, b)
        gcat = self._conv_back(f"{name}.fuse", g, cache, grads)
        bw = gcat.shape[1] // len(self.config.branch_kernels)
        gx = None
        for t, k in enumerate(self.config.branch_kernels):
            part = self._conv_back(f"{name}.k{k}", gcat[:, t * bw:(t + 1) * bw], cache, grads)
            gx = part if gx is None else gx + part
        return gx

    def decoding_block(self, left, right, i, j, cache):
        """F3([F1(left), F2(right)]); ``left`` is None on the single-path chain."""
        if left is not None and right.shape[1] != 2 * left.shape[1]:
            raise L.ShapeError(f"grid cell ({i},{j}): right input has {right.shape[1]} "
                               f"channels, expected 2 x {left.shape[1]}")
        if left is not None and right.shape[2:] != left.shape[2:]:
            raise L.ShapeError(f"grid cell ({i},{j}): spatial sizes {left.shape[2:]} "
                               f"and {right.shape[2:]} differ")
        r = self._conv(f"dec.{i}{j}.f2", right, cache)
        if left is None:
            return self._conv(f"dec.{i}{j}.f3", r, cache)
        l_ = self._conv(f"dec.{i}{j}.f1", left, cache)
        return self._conv(f"dec.{i}{j}.f3", L.concat_channels(l_, r), cache)

    def _decoding_block_back(self, g, i, j, has_left, cache, grads):
        gcat = self._conv_back(f"dec.{i}{j}.f3", g, cache, grads)
        if not has_left:
            return None, self._conv_back(f"dec.{i}{j}.f2", gcat, cache, grads)
        gl, gr = L.concat_backward(gcat, gcat.shape[1] // 2)
        return (self._conv_back(f"dec.{i}{j}.f1", gl, cache, grads),
                self._conv_back(f"dec.{i}{j}.f2", gr, cache, grads))

    # -- whole network ----------------------------------------------------

    def encoder_forward(self, image, cache):
        """Returns (E2, E3, E4, E5); pooling follows stages 1 and 2 only."""
        if image.shape[2] % 4 or image.shape[3] % 4:
            raise L.ShapeError(f"image size {image.shape[2]}x{image.shape[3]} "
                               f"is not divisible by 4")
        x = L.check_tensor4(image, "image").astype(self.dtype, copy=False)
        outs = {}
        for s, b, _, _, _ in self.config.encoding_blocks():
            x = self.encoding_block(x, s, b, cache)
            last = b == self.config.blocks_per_stage[s - 1]
            if last and s <= 2:
                x, idx = L.maxpool2(x)
                cache[f"pool{s}"] = idx
            if last:
                outs[s] = x
        return outs[2], outs[3], outs[4], outs[5]

    def trellis_forward(self, seeds, cache):
        grid = {(1, j): e for j, e in zip(range(1, 5), seeds)}
        if self.config.single_path:
            right = grid[(1, 4)]
            for i, j in SINGLE_PATH_CELLS:
                right = grid[(i, j)] = self.decoding_block(None, right, i, j, cache)
            return grid
        for i, j in GRID_CELLS:
            grid[(i, j)] = self.decoding_block(grid[(i - 1, j - 1)], grid[(i - 1, j)], i, j, cache)
        return grid

    def heads_forward(self, grid, cache):
        out = ForwardOutputs(cache=cache)
        if not self.config.single_path:
            out.z2d = self._conv("head.2D", grid[HEAD_CELLS["2D"]], cache)
            out.z3d = self._conv("head.3D", grid[HEAD_CELLS["3D"]], cache)
            out.z4d = self._conv("head.4D", grid[HEAD_CELLS["4D"]], cache)
        u = self._conv("up.1", L.upsample_nearest(grid[(4, 4)], 2), cache)
        u = self._conv("up.2", L.upsample_nearest(u, 2), cache)
        out.z = self._conv("head.Z", u, cache)
        return out

    def forward(self, image):
        cache = {}
        seeds = self.encoder_forward(image, cache)
        grid = self.trellis_forward(seeds, cache)
        cache["grid_shapes"] = {k: v.shape for k, v in grid.items()}
        return self.heads_forward(grid, cache)

    def predict(self, image):
        """Full-resolution density map(s), shape (n, h, w)."""
        return self.forward(image).z[:, 0]

    def backward(self, outputs, head_grads):
        """Parameter gradients given d loss / d head for each supervised head.

        ``head_grads`` maps head name ("2D", "3D", "4D", "Z") to an array
        shaped like that head; absent or ``None`` entries contribute nothing.
        """
        cache = outputs.cache
        if not cache:
            raise ValueError("backward needs the cached activations of a forward pass")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        shapes = cache["grid_shapes"]
        dtype = self.dtype
        gz = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}

        def head_grad(h):
            g = head_grads.get(h)
            if g is None:
                return None
            ref = outputs.head(h)
            if ref is None:
                raise ValueError(f"head {h} is not produced by this configuration")
            if g.shape != ref.shape:
                raise L.ShapeError(f"gradient for head {h} shaped {g.shape}, head is {ref.shape}")
            return g.astype(dtype, copy=False)

        g = head_grad("Z")
        if g is not None:
            g = self._conv_back("head.Z", g, cache, grads)
            g = L.upsample_nearest_backward(self._conv_back("up.2", g, cache, grads), 2)
            g = L.upsample_nearest_backward(self._conv_back("up.1", g, cache, grads), 2)
            gz[(4, 4)] += g
        for h, cell in HEAD_CELLS.items():
            g = head_grad(h)
            if g is not None:
                gz[cell] += self._conv_back(f"head.{h}", g, cache, grads)

        if self.config.single_path:
            for i, j in reversed(SINGLE_PATH_CELLS):
                _, gr = self._decoding_block_back(gz[(i, j)], i, j, False, cache, grads)
                gz[(i - 1, j)] += gr
        else:
            for i, j in reversed(GRID_CELLS):
                gl, gr = self._decoding_block_back(gz[(i, j)], i, j, True, cache, grads)
                gz[(i - 1, j - 1)] += gl
                gz[(i - 1, j)] += gr

        # encoder, deepest stage first; E2..E4 also receive skip gradients
        g = None
        for s, b, _, _, _ in reversed(self.config.encoding_blocks()):
            last = b == self.config.blocks_per_stage[s - 1]
            if last and s >= 2:
                seed = gz[(1, s - 1)]
                g = seed if g is None else g + seed
            if last and s <= 2:
                g = L.maxpool2_backward(g, cache[f"pool{s}"])
            g = self._encoding_block_back(g, s, b, cache, grads)
        return grads
