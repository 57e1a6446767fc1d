"""``tednet`` command line: synth, gt-gen, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numerical failure (diverged training or a failed gradient check).
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, io, training
from .groundtruth import DEFAULT_KSIZE, DEFAULT_SIGMA, Annotation, render_density
from .losses import LOSS_KINDS
from .model import ConfigError, TrellisConfig, parameter_count

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4

log = logging.getLogger("tednet")


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="tednet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic crowd dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--min-heads", type=int, default=5)
    s.add_argument("--max-heads", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gt-gen", help="render ground-truth density maps")
    g.add_argument("--dataset", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    g.add_argument("--ksize", type=int, default=DEFAULT_KSIZE)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--sal-levels", type=int)
    t.add_argument("--loss", choices=LOSS_KINDS)
    t.add_argument("--single-path", action="store_true", default=None)
    t.add_argument("--single-supervision", action="store_true", default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", help="CSV path (default: stdout)")

    r = sub.add_parser("predict", help="density map and count for one image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--coords", type=int, default=3,
                   help="sampled coordinates per model parameter tensor")
    c.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    return p


def cmd_synth(a):
    if a.n < 1 or a.size < 16 or a.size % 4 or not 0 <= a.min_heads <= a.max_heads:
        raise UsageError("need n >= 1, size >= 16 and divisible by 4, 0 <= min-heads <= max-heads")
    samples = training.synth_dataset(a.n, a.size, a.seed, a.min_heads, a.max_heads)
    training.write_dataset(samples, a.out)
    print(f"wrote {len(samples)} scenes to {a.out}")


def cmd_gt_gen(a):
    src, out = Path(a.dataset), Path(a.out)
    if not src.is_dir():
        raise training.DatasetError([f"{src}: not a directory"])
    anns = sorted(src.glob("*.json"))
    if not anns:
        raise training.DatasetError([f"{src}: no *.json annotations"])
    out.mkdir(parents=True, exist_ok=True)
    errors = []
    for path in anns:
        try:
            ann = Annotation.load(path)
            density = render_density(ann, a.sigma, a.ksize)
        except ValueError as exc:
            errors.append(f"{path.name}: {exc}")
            continue
        io.save_tensor(out / f"{path.stem}.ted", density)
        io.write_density_visual(out / f"{path.stem}.png", density)
        print(f"{path.stem}: {ann.count} points, integral {density.sum():.6f}")
    if errors:
        raise training.DatasetError(errors)


def _train_config(a):
    base = training.TrainConfig()
    if a.config:
        base = training.TrainConfig.from_mapping(io.read_config(a.config), base)
    overrides = {"dataset": a.dataset, "out": a.out, "seed": a.seed, "steps": a.steps,
                 "c": a.base_channels, "lam": a.lam, "K": a.sal_levels, "loss": a.loss,
                 "single_path": a.single_path, "single_supervision": a.single_supervision}
    return training.TrainConfig.from_mapping(
        {k: v for k, v in overrides.items() if v is not None}, base)


def cmd_train(a):
    try:
        cfg = _train_config(a)
        cfg.model_config()
    except (ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    if not cfg.dataset or not cfg.out:
        raise UsageError("train needs a dataset and an output directory (flags or config)")
    samples = training.load_dataset(cfg.dataset, cfg.sigma, cfg.ksize)
    if not samples:
        raise training.DatasetError([f"{cfg.dataset}: no usable samples"])
    print(f"{len(samples)} samples; model has {parameter_count(cfg.model_config()):,} parameters")
    result = training.train(cfg, samples, progress=print)
    if result.report is not None:
        print(f"test MAE {result.report.mae:.3f} (constant-mean baseline "
              f"{result.baseline_mae:.3f})")
    print(f"checkpoint: {result.checkpoint}")


def cmd_eval(a):
    net, scale = _load(a.checkpoint)
    samples = training.load_dataset(a.dataset, strict=False)
    if not samples:
        raise training.DatasetError([f"{a.dataset}: dataset is empty"])
    report = training.evaluate(net, samples, scale)
    text = "\n".join(report.csv_lines()) + "\n"
    if a.out:
        Path(a.out).write_text(text)
        print(report.table())
    else:
        sys.stdout.write(text)


def _load(path):
    try:
        return training.load_model(path)
    except (OSError, ValueError) as exc:
        raise training.DatasetError([f"checkpoint {path}: {exc}"]) from exc


def cmd_predict(a):
    net, scale = _load(a.checkpoint)
    try:
        image = io.read_image(a.image)
    except OSError as exc:
        raise training.DatasetError([f"{a.image}: {exc}"]) from exc
    _, h, w = image.shape
    nh, nw = h - h % 4, w - w % 4
    if (nh, nw) != (h, w):
        top, left = (h - nh) // 2, (w - nw) // 2
        print(f"warning: center-cropped {h}x{w} to {nh}x{nw} (top {top}, left {left})")
        image = image[:, top:top + nh, left:left + nw]
    z = net.predict(image[None].astype(net.dtype))[0].astype(np.float64) / scale
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("prediction contains non-finite values")
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(a.image).stem
    io.save_tensor(out / f"{stem}_density.ted", z)
    io.write_density_visual(out / f"{stem}_density.png", z)
    print(f"{z.sum():.2f}")


def cmd_gradcheck(a):
    results = gradcheck.run_all(seed=a.seed, corrupt=a.corrupt, coords_per_tensor=a.coords)
    width = max(map(len, results))
    failed = 0
    for name, err in results.items():
        ok = err < GRADCHECK_TOL
        failed += not ok
        print(f"{name:<{width}}  {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"tiny model: {parameter_count(TrellisConfig(base_channels=2)):,} parameters; "
          f"tolerance {GRADCHECK_TOL:g}")
    if failed:
        raise FloatingPointError(f"{failed} gradient check(s) above tolerance")


COMMANDS = {"synth": cmd_synth, "gt-gen": cmd_gt_gen, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "gradcheck": cmd_gradcheck}


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.DatasetError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
