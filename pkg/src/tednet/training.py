"""Adam, data ingestion, synthetic scenes, augmentation and the train loop."""
import hashlib
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import io
from .groundtruth import (DEFAULT_KSIZE, DEFAULT_SIGMA, Annotation, AnnotationError,
                          render_density)
from .losses import LOSS_KINDS, distributed_loss
from .metrics import EvalReport, psnr, ssim
from .model import TEDNet, TrellisConfig, param_shapes

log = logging.getLogger(__name__)

LR_DECAY = 0.8
LR_DECAY_EVERY = 10_000
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".bmp")


class DatasetError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, value):
        self.step = step
        super().__init__(f"non-finite loss {value} at step {step}")


# -- optimizer ---------------------------------------------------------------

@dataclass
class TrainState:
    m: dict
    v: dict
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    rng_seed: int = 0

    @classmethod
    def for_params(cls, params, lr0=1e-3, rng_seed=0):
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   lr0=lr0, rng_seed=rng_seed)

    def lr(self, step=None):
        """Step-wise schedule: lr0 * 0.8 ** floor(step / 10000)."""
        t = self.step if step is None else step
        return self.lr0 * LR_DECAY ** (t // LR_DECAY_EVERY)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place; returns (params, state)."""
    if grads.keys() != params.keys():
        raise ValueError("gradient keys do not match parameter keys")
    lr = state.lr()
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params, state


# -- data ---------------------------------------------------------------------

@dataclass
class Sample:
    image: np.ndarray          # (3, h, w) in [0, 1]
    density: np.ndarray        # (h, w), integrates to the head count
    id: str
    annotation: Annotation = None

    @property
    def count(self):
        return float(self.density.sum())


def center_crop_to_multiple(image, ann, multiple=4):
    """Crop an image (and its points) so both sides divide ``multiple``."""
    _, h, w = image.shape
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise ValueError(f"{ann.image_id}: image {h}x{w} is smaller than {multiple} px")
    top, left = (h - nh) // 2, (w - nw) // 2
    return image[:, top:top + nh, left:left + nw], ann.crop(top, left, nh, nw)


def make_sample(image, ann, sigma=DEFAULT_SIGMA, ksize=DEFAULT_KSIZE):
    image, ann = center_crop_to_multiple(np.asarray(image, dtype=np.float64), ann)
    return Sample(image, render_density(ann, sigma, ksize), ann.image_id, ann)


def load_dataset(directory, sigma=DEFAULT_SIGMA, ksize=DEFAULT_KSIZE, strict=False):
    """Samples for every ``*.json`` annotation in ``directory`` (sorted by name).

    Per-file problems are collected; with ``strict`` they are raised together
    as a :class:`DatasetError` after the scan, otherwise logged and skipped.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DatasetError([f"{directory}: not a directory"])
    samples, errors = [], []
    for path in sorted(directory.glob("*.json")):
        try:
            ann = Annotation.load(path)
            image_path = directory / Path(ann.image_id).name
            ann.image_id = image_path.stem
            if not image_path.exists():
                raise FileNotFoundError(f"image {image_path.name} not found")
            image = io.read_image(image_path)
            if image.shape[1:] != ann.image_size:
                raise AnnotationError(f"annotated size {ann.image_size} but image is "
                                      f"{image.shape[1:]}")
            sample = make_sample(image, ann, sigma, ksize)
            if sample.image.shape[1:] != image.shape[1:]:
                log.warning("%s: center-cropped %dx%d -> %dx%d", path.name, *image.shape[1:],
                            *sample.image.shape[1:])
            samples.append(sample)
        except (OSError, ValueError) as exc:
            errors.append(f"{path.name}: {exc}")
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in IMAGE_SUFFIXES and not path.with_suffix(".json").exists():
            errors.append(f"{path.name}: missing annotation {path.with_suffix('.json').name}")
    if errors:
        if strict:
            raise DatasetError(errors)
        for e in errors:
            log.warning("skipped %s", e)
    if not samples:
        log.warning("%s: no usable samples", directory)
    return samples


def _smooth_noise(rng, h, w, cell):
    coarse = rng.uniform(0, 1, (h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def synth_scene(rng, n_points, h, w, clutter=0.3, radius=3.0):
    """Synthetic crowd: dark round blobs on a textured background.

    Returns ((3, h, w) image in [0, 1], Annotation with the exact blob centers).
    """
    if n_points < 0:
        raise ValueError(f"n_points must be >= 0, got {n_points}")
    tint = rng.uniform(0.85, 1.0, size=3)
    texture = 0.6 * _smooth_noise(rng, h, w, 16) + 0.4 * _smooth_noise(rng, h, w, 4)
    base = 0.55 + clutter * (texture - 0.5) + 0.02 * rng.standard_normal((h, w))
    image = base[None] * tint[:, None, None]
    pts = np.column_stack([rng.uniform(0, w, n_points), rng.uniform(0, h, n_points)])
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    reach = int(math.ceil(radius)) + 2
    for x, y in pts:
        r = radius * rng.uniform(0.8, 1.2)
        depth = rng.uniform(0.55, 0.85)
        y0, y1 = max(int(y) - reach, 0), min(int(y) + reach + 1, h)
        x0, x1 = max(int(x) - reach, 0), min(int(x) + reach + 1, w)
        dist = np.hypot(yy[y0:y1, x0:x1] - y, xx[y0:y1, x0:x1] - x)
        blob = np.clip(r + 0.5 - dist, 0, 1)  # anti-aliased disc
        image[:, y0:y1, x0:x1] *= 1 - depth * blob
    image = np.clip(image, 0, 1)
    ann = Annotation("", (h, w), [tuple(p) for p in pts])
    return image, ann


def synth_dataset(n, size=128, seed=0, min_heads=5, max_heads=50, sigma=DEFAULT_SIGMA,
                  ksize=DEFAULT_KSIZE, clutter=0.3):
    """``n`` in-memory synthetic samples with ids ``synth_0000`` ..."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        image, ann = synth_scene(rng, int(rng.integers(min_heads, max_heads + 1)),
                                 size, size, clutter)
        ann.image_id = f"synth_{i:04d}"
        samples.append(make_sample(image, ann, sigma, ksize))
    return samples


def write_dataset(samples, directory):
    """Write PNG images plus JSON annotations in the loader's format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        name = f"{s.id}.png"
        io.write_image(directory / name, s.image)
        (directory / f"{s.id}.json").write_text(s.annotation.to_json(name) + "\n")


def hflip(sample):
    """Horizontal mirror of image, density and points (an involution).

    Mirrored points keep their in-pixel offset, so the density map still
    renders exactly from the flipped annotation."""
    ann = sample.annotation
    if ann is not None:
        w = ann.image_size[1]
        ann = Annotation(ann.image_id, ann.image_size,
                         [(w - 1 - 2 * math.floor(x) + x, y) for x, y in ann.points])
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]),
                  np.ascontiguousarray(sample.density[:, ::-1]), sample.id, ann)


def augment(sample, rng, crop=None, flip=True):
    """Random crop (one window for image and density), then a coin-flip mirror."""
    _, h, w = sample.image.shape
    ch, cw = (h, w) if crop is None else crop
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} is larger than the {h}x{w} image")
    if ch % 4 or cw % 4:
        raise ValueError(f"crop {ch}x{cw} must be divisible by 4")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    ann = sample.annotation.crop(top, left, ch, cw) if sample.annotation else None
    out = Sample(np.ascontiguousarray(sample.image[:, top:top + ch, left:left + cw]),
                 np.ascontiguousarray(sample.density[top:top + ch, left:left + cw]),
                 sample.id, ann)
    if flip and rng.random() < 0.5:
        out = hflip(out)
    return out


def is_test_id(image_id, test_fraction=0.2):
    """Deterministic hold-out membership from a hash of the id."""
    digest = hashlib.sha256(image_id.encode()).digest()
    return int.from_bytes(digest[:8], "little") / 2 ** 64 < test_fraction


def split_samples(samples, test_fraction=0.2):
    train = [s for s in samples if not is_test_id(s.id, test_fraction)]
    test = [s for s in samples if is_test_id(s.id, test_fraction)]
    return train, test


# -- training -----------------------------------------------------------------

def _int_tuple(v):
    return tuple(int(t) for t in str(v).split(",")) if not isinstance(v, tuple) else v


@dataclass
class TrainConfig:
    c: int = 8
    blocks_per_stage: tuple = (1, 2, 2, 2, 2)
    sigma: float = DEFAULT_SIGMA
    ksize: int = DEFAULT_KSIZE
    lam: float = 1.0
    K: int = 3
    loss: str = "sal+scl"
    lr0: float = 1e-3
    batch: int = 4
    steps: int = 2000
    crop: int = 0                  # 0 -> half the image size
    seed: int = 0
    density_scale: float = 100.0
    eval_every: int = 500
    single_path: bool = False
    single_supervision: bool = False
    test_fraction: float = 0.2
    dataset: str = ""
    out: str = ""

    KEY_ALIASES = {"lambda": "lam", "base_channels": "c", "sal_levels": "K"}

    def __post_init__(self):
        self.blocks_per_stage = _int_tuple(self.blocks_per_stage)
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.batch < 1 or self.steps < 0 or self.density_scale <= 0:
            raise ValueError("batch must be >= 1, steps >= 0 and density_scale > 0")
        if self.crop % self.crop_multiple():
            raise ValueError(f"crop must be divisible by {self.crop_multiple()} for this "
                             f"loss and supervision, got {self.crop}")

    def crop_multiple(self):
        # quarter-resolution heads need 2^K pooling levels after the stride-4 encoder
        pyramid = 1 if self.loss == "mse" else 2 ** self.K
        return 4 * pyramid if self.supervised_heads() is None else max(4, pyramid)

    @classmethod
    def from_mapping(cls, mapping, base=None):
        """Build from string key=value pairs layered over ``base``."""
        kw = {} if base is None else {f.name: getattr(base, f.name) for f in fields(cls)}
        types = {f.name: f.type for f in fields(cls)}
        for key, value in mapping.items():
            key = cls.KEY_ALIASES.get(key, key)
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            if kind is bool:
                kw[key] = str(value).lower() in ("1", "true", "yes", "on")
            elif kind is int:
                kw[key] = int(value)
            elif kind is float:
                kw[key] = float(value)
            elif kind is tuple:
                kw[key] = _int_tuple(value)
            else:
                kw[key] = str(value)
        return cls(**kw)

    def as_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            elif isinstance(v, bool):
                v = int(v)
            elif isinstance(v, float):
                v = repr(v)
            out[f.name] = str(v)
        return out

    def model_config(self):
        return TrellisConfig(base_channels=self.c, blocks_per_stage=self.blocks_per_stage,
                             sal_levels=self.K, lam=self.lam, single_path=self.single_path)

    def supervised_heads(self):
        return ("Z",) if self.single_supervision or self.single_path else None


def checkpoint_config(cfg):
    """Header written into checkpoints: model shape plus how to read its output."""
    header = cfg.model_config().as_dict()
    header.update(density_scale=repr(cfg.density_scale), sigma=repr(cfg.sigma),
                  ksize=str(cfg.ksize), dtype="float32")
    return header


def save_model(path, net, cfg):
    io.write_checkpoint(path, checkpoint_config(cfg), net.params)


def load_model(path):
    """Returns (TEDNet, density_scale) from a checkpoint file."""
    header, stored = io.read_checkpoint(path)
    mcfg = TrellisConfig.from_dict(header)
    shapes = param_shapes(mcfg)
    if list(stored) != list(shapes):
        raise ValueError(f"{path}: stored tensors do not match the header's model config")
    params = {}
    for name, shape in shapes.items():
        arr = stored[name]
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"{path}: {name} holds {arr.size} values, config needs {shape}")
        params[name] = arr.reshape(shape).copy()
    return TEDNet(mcfg, params), float(header.get("density_scale", 1.0))


def evaluate(net, samples, density_scale=1.0):
    """Per-image full-size inference; returns an :class:`EvalReport`."""
    rows = []
    for s in samples:
        z = net.predict(s.image[None])[0].astype(np.float64) / density_scale
        gt = s.density
        if gt.max() > 0:
            p, q = psnr(z, gt), ssim(z, gt)
        else:
            p, q = float("nan"), float("nan")
        rows.append((s.id, float(z.sum()), float(gt.sum()), p, q))
    return EvalReport.from_rows(rows)


def constant_baseline_mae(train, test):
    """MAE of predicting the mean training count for every test image."""
    mean = float(np.mean([s.count for s in train]))
    return float(np.mean([abs(s.count - mean) for s in test]))


@dataclass
class TrainResult:
    net: TEDNet
    config: TrainConfig
    log_rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    report: EvalReport = None
    baseline_mae: float = float("nan")
    checkpoint: Path = None


LOG_HEADER = ("step", "lr", "total", "loss_2D", "loss_3D", "loss_4D", "loss_Z", "sal", "scl",
              "mae", "mse", "psnr", "ssim")


def _fmt(v):
    return "" if v is None else repr(float(v))


def model_seed(seed):
    """Initialization seed derived from the run seed (data order uses a sibling stream)."""
    return int(np.random.SeedSequence(seed).spawn(2)[0].generate_state(1)[0])


def train(cfg, samples=None, out_dir=None, progress=None):
    """Seeded end-to-end training run.

    ``samples`` overrides ``cfg.dataset``. When ``out_dir`` (or ``cfg.out``)
    is set, ``model.ckpt`` and ``train_log.csv`` are written there.
    """
    if samples is None:
        if not cfg.dataset:
            raise DatasetError(["no dataset given"])
        samples = load_dataset(cfg.dataset, cfg.sigma, cfg.ksize)
    train_set, test_set = split_samples(samples, cfg.test_fraction)
    if not train_set:
        raise DatasetError(["training split is empty"])
    net = TEDNet(cfg.model_config(), seed=model_seed(cfg.seed), dtype=np.float32)
    data_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    state = TrainState.for_params(net.params, cfg.lr0, cfg.seed)
    heads = cfg.supervised_heads()
    result = TrainResult(net, cfg)
    if test_set:
        result.baseline_mae = constant_baseline_mae(train_set, test_set)

    order, cursor = data_rng.permutation(len(train_set)), 0
    for step in range(1, cfg.steps + 1):
        batch = []
        for _ in range(cfg.batch):
            if cursor == len(order):
                order, cursor = data_rng.permutation(len(train_set)), 0
            s = train_set[order[cursor]]
            cursor += 1
            _, h, w = s.image.shape
            if cfg.crop:
                crop = (cfg.crop, cfg.crop)
            else:
                m = cfg.crop_multiple()
                crop = (h // 2 - (h // 2) % m, w // 2 - (w // 2) % m)
            batch.append(augment(s, data_rng, crop=crop))
        shapes = {b.image.shape for b in batch}
        if len(shapes) != 1:
            raise DatasetError([f"batch mixes image sizes {sorted(shapes)}; set a fixed crop"])
        x = np.stack([b.image for b in batch]).astype(np.float32)
        y = np.stack([b.density for b in batch])[:, None] * cfg.density_scale
        lr = state.lr()
        outputs = net.forward(x)
        report, head_grads = distributed_loss(outputs, y, cfg.lam, cfg.K, cfg.loss, heads)
        if not math.isfinite(report.total):
            raise TrainingDiverged(step, report.total)
        grads = net.backward(outputs, head_grads)
        adam_step(net.params, grads, state)
        result.losses.append(report.total)
        row = [str(step), _fmt(lr), *map(_fmt, report.csv_values())]
        due = step == cfg.steps or (cfg.eval_every > 0 and step % cfg.eval_every == 0)
        if test_set and due:
            rep = evaluate(net, test_set, cfg.density_scale)
            result.report = rep
            row += [_fmt(rep.mae), _fmt(rep.mse), _fmt(rep.psnr), _fmt(rep.ssim)]
            if progress:
                progress(f"step {step}: loss {report.total:.4f}  test MAE {rep.mae:.3f}  "
                         f"PSNR {rep.psnr:.2f}")
        else:
            row += [""] * 4
        result.log_rows.append(row)
    if test_set and result.report is None:
        result.report = evaluate(net, test_set, cfg.density_scale)

    out_dir = out_dir or cfg.out
    if out_dir:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint = out_dir / "model.ckpt"
        save_model(result.checkpoint, net, cfg)
        lines = [",".join(LOG_HEADER)] + [",".join(r) for r in result.log_rows]
        (out_dir / "train_log.csv").write_text("\n".join(lines) + "\n")
    return result
