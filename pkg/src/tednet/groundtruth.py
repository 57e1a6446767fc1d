"""Ground-truth density maps rendered from head-point annotations."""
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import layers as L

DEFAULT_SIGMA = 4.0
DEFAULT_KSIZE = 15


class AnnotationError(ValueError):
    pass


@dataclass
class Annotation:
    image_id: str
    image_size: tuple
    points: list = field(default_factory=list)

    def __post_init__(self):
        h, w = self.image_size
        self.image_size = (int(h), int(w))
        self.points = [(float(x), float(y)) for x, y in self.points]
        for x, y in self.points:
            if not (0 <= x < w and 0 <= y < h):
                raise AnnotationError(f"{self.image_id}: point ({x}, {y}) lies outside "
                                      f"the {w}x{h} image")

    @property
    def count(self):
        return len(self.points)

    def to_json(self, image_name=None):
        return json.dumps({"image": image_name or self.image_id,
                           "size": list(self.image_size),
                           "points": [list(p) for p in self.points]})

    @classmethod
    def from_json(cls, text, image_id=None):
        doc = json.loads(text)
        try:
            return cls(image_id or doc["image"], tuple(doc["size"]), doc["points"])
        except KeyError as exc:
            raise AnnotationError(f"annotation is missing the {exc.args[0]!r} field") from None

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())

    def crop(self, top, left, h, w):
        """Annotation of a sub-window; points falling outside it are dropped."""
        pts = [(x - left, y - top) for x, y in self.points
               if left <= x < left + w and top <= y < top + h]
        return Annotation(self.image_id, (h, w), pts)


def gaussian_stamp(sigma, ksize):
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError(f"ksize must be a positive odd integer, got {ksize}")
    r = np.arange(ksize) - ksize // 2
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return np.outer(g, g)


def render_density(ann, sigma=DEFAULT_SIGMA, ksize=DEFAULT_KSIZE):
    """Sum of per-head Gaussian stamps, each renormalized to unit mass after
    clipping at the image border. Returns an (h, w) float64 map."""
    h, w = ann.image_size
    stamp = gaussian_stamp(sigma, ksize)
    half = ksize // 2
    out = np.zeros((h, w))
    # pixel (i, j) covers [j, j+1) x [i, i+1), so the nearest center is the floor;
    # sorting makes the accumulation independent of the input order
    centers = sorted((int(np.floor(y)), int(np.floor(x))) for x, y in ann.points)
    for cy, cx in centers:
        y0, y1 = max(cy - half, 0), min(cy + half + 1, h)
        x0, x1 = max(cx - half, 0), min(cx + half + 1, w)
        piece = stamp[y0 - cy + half:y1 - cy + half, x0 - cx + half:x1 - cx + half]
        out[y0:y1, x0:x1] += piece / piece.sum()
    return out


def downsample_gt(density, factor):
    """Average-pool a 2-D map by ``factor``; the integral shrinks by factor**2."""
    d = np.asarray(density, dtype=np.float64)
    if factor == 1:
        return d.copy()
    return L.avgpool(d[None, None], factor)[0, 0]
