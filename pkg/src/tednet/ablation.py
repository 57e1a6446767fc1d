"""The five ablation configurations on the synthetic toy setup.

1. single decoding path, single supervision, MSE
2. trellis decoder, single supervision, MSE
3. trellis decoder, distributed supervision, MSE
4. trellis decoder, distributed supervision, SAL
5. trellis decoder, distributed supervision, SAL + SCL (lambda = 1)
"""
from dataclasses import dataclass

import numpy as np

from .training import TrainConfig, synth_dataset, train

TOY_IMAGES = 200
TOY_SIZE = 128
TOY_DATA_SEED = 1234
TOY_STEPS = 2000


@dataclass(frozen=True)
class Ablation:
    label: str
    decoder: str
    supervision: str
    loss: str
    overrides: tuple

    def config(self, seed=0, steps=TOY_STEPS, **extra):
        return TrainConfig(**{**dict(self.overrides), "seed": seed, "steps": steps,
                              "eval_every": steps, **extra})


ABLATIONS = {
    1: Ablation("single path + MSE", "single path", "single", "MSE",
                (("single_path", True), ("loss", "mse"))),
    2: Ablation("trellis + MSE", "trellis", "single", "MSE",
                (("single_supervision", True), ("loss", "mse"))),
    3: Ablation("trellis + distributed MSE", "trellis", "distributed", "MSE",
                (("loss", "mse"),)),
    4: Ablation("trellis + distributed SAL", "trellis", "distributed", "SAL",
                (("loss", "sal"),)),
    5: Ablation("trellis + distributed SAL+SCL", "trellis", "distributed", "SAL+SCL",
                (("loss", "sal+scl"), ("lam", 1.0))),
}


def toy_samples():
    """200 synthetic 128x128 scenes with 5..50 heads, fixed seed."""
    return synth_dataset(TOY_IMAGES, TOY_SIZE, seed=TOY_DATA_SEED, min_heads=5, max_heads=50)


def run(config_id, seed=0, steps=TOY_STEPS, samples=None, **extra):
    """Train one configuration; returns a dict of test metrics and the baseline."""
    samples = toy_samples() if samples is None else samples
    result = train(ABLATIONS[config_id].config(seed, steps, **extra), samples)
    rep = result.report
    return {"config": config_id, "seed": seed, "steps": steps, "mae": rep.mae, "mse": rep.mse,
            "psnr": rep.psnr, "ssim": rep.ssim, "baseline_mae": result.baseline_mae,
            "final_loss": float(result.losses[-1]) if result.losses else float("nan")}


def summarize(records):
    """Mean and sample std per configuration: {id: {metric: (mean, std, n)}}."""
    out = {}
    for cid in sorted({r["config"] for r in records}):
        rows = [r for r in records if r["config"] == cid]
        out[cid] = {}
        for m in ("mae", "mse", "psnr", "ssim"):
            v = np.array([r[m] for r in rows], dtype=np.float64)
            out[cid][m] = (float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0, v.size)
    return out


def markdown_table(records):
    summary = summarize(records)
    lines = ["| # | decoder | supervision | loss | MAE | MSE | PSNR (dB) | SSIM |",
             "|---|---|---|---|---|---|---|---|"]
    for cid, stats in summary.items():
        a = ABLATIONS[cid]
        cells = [f"{stats[m][0]:.2f} ± {stats[m][1]:.2f}" for m in ("mae", "mse", "psnr")]
        cells.append(f"{stats['ssim'][0]:.3f} ± {stats['ssim'][1]:.3f}")
        lines.append(f"| {cid} | {a.decoder} | {a.supervision} | {a.loss} | " + " | ".join(cells)
                     + " |")
    return "\n".join(lines)
