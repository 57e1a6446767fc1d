"""Counting accuracy (MAE, RMS "MSE") and density-map quality (PSNR, SSIM)."""
import math
from dataclasses import dataclass, field

import numpy as np

PSNR_IDENTICAL = math.inf
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 255.0


def count_metrics(pred_counts, gt_counts):
    """Returns (MAE, MSE) where MSE is the root of the mean squared error."""
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.size == 0 or pred.shape != gt.shape:
        raise ValueError(f"need equal-length, nonempty count lists (got {pred.size} and {gt.size})")
    err = pred - gt
    return float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err * err)))


def to_image_scale(z, y):
    """Scale both maps by 255 / max(y) and clip to [0, 255]."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError(f"maps differ in shape: {z.shape} vs {y.shape}")
    peak = y.max()
    if peak <= 0:
        raise ValueError("ground-truth map is all zero; PSNR/SSIM scaling is undefined")
    s = DATA_RANGE / peak
    return np.clip(z * s, 0, DATA_RANGE), np.clip(y * s, 0, DATA_RANGE)


def psnr(z, y):
    """PSNR in dB after image scaling; identical maps give ``inf``."""
    zs, ys = to_image_scale(z, y)
    mse = float(np.mean((zs - ys) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(DATA_RANGE ** 2 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    g /= g.sum()
    return g


def _valid_filter(img, g):
    # separable valid-mode correlation with a symmetric 1-D kernel
    k = g.size
    rows = sum(g[i] * img[i:img.shape[0] - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:rows.shape[1] - k + 1 + j] for j in range(k))


def ssim_scaled(a, b):
    """Mean SSIM of two maps already on the 0..255 scale (valid windows only)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ValueError(f"ssim needs two equal 2-D maps, got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"map {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * DATA_RANGE) ** 2, (SSIM_K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a ** 2
    var_b = _valid_filter(b * b, g) - mu_b ** 2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(z, y):
    """Mean local SSIM after the same 255/max(y) scaling as :func:`psnr`."""
    zs, ys = to_image_scale(z, y)
    return ssim_scaled(np.squeeze(zs), np.squeeze(ys))


def _mean_defined(values):
    # images with an empty ground truth have no PSNR/SSIM (NaN); skip them
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (image_id, pred, gt, psnr, ssim)
    mae: float = 0.0
    mse: float = 0.0
    psnr: float = 0.0
    ssim: float = 0.0

    HEADER = ("image", "pred_count", "gt_count", "abs_err", "psnr", "ssim", "mae", "mse")

    @classmethod
    def from_rows(cls, rows):
        rows = sorted(((str(i), float(p), float(g), float(ps), float(ss))
                       for i, p, g, ps, ss in rows), key=lambda r: r[0])
        if not rows:
            raise ValueError("cannot summarize an empty evaluation")
        mae, mse = count_metrics([r[1] for r in rows], [r[2] for r in rows])
        return cls(rows=rows, mae=mae, mse=mse, psnr=_mean_defined([r[3] for r in rows]),
                   ssim=_mean_defined([r[4] for r in rows]))

    def csv_lines(self):
        """Header, one row per image, then a ``summary`` row carrying MAE/MSE."""
        lines = [",".join(self.HEADER)]
        for image_id, pred, gt, p, s in self.rows:
            lines.append(f"{image_id},{pred!r},{gt!r},{abs(pred - gt)!r},{p!r},{s!r},,")
        lines.append(f"summary,,,,{self.psnr!r},{self.ssim!r},{self.mae!r},{self.mse!r}")
        return lines

    def table(self):
        out = [f"{'image':<24}{'pred':>10}{'gt':>10}{'|err|':>10}{'psnr':>9}{'ssim':>8}"]
        for image_id, pred, gt, p, s in self.rows:
            out.append(f"{image_id:<24}{pred:>10.2f}{gt:>10.2f}{abs(pred - gt):>10.2f}"
                       f"{p:>9.2f}{s:>8.3f}")
        out.append(f"{'MAE':<24}{self.mae:>10.3f}   MSE {self.mse:.3f}   "
                   f"PSNR {self.psnr:.2f} dB   SSIM {self.ssim:.3f}")
        return "\n".join(out)
