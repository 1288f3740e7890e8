"""Grad-CAM heatmaps over the final convolutional stage."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from cxrnet.errors import UsageError
from cxrnet.models import ResNet, meta_array
from cxrnet.tensor import Tensor, no_grad


@dataclass
class Heatmap:
    grid: np.ndarray  # [g, g], rectified
    rendering: np.ndarray  # [S, S] in [0, 1]
    label: int
    image_ref: str | None = None

    @property
    def peak(self) -> tuple[int, int]:
        """Row, column of the rendering's maximum.

        Edge clamping renders a border cell as a flat plateau reaching the
        image edge. The cell's own centre lies on the plateau's inner rim, so
        among tied maxima the pixel nearest the image centre is returned.
        """
        r = self.rendering
        rows, cols = np.nonzero(r == r.max())
        mid = (np.asarray(r.shape) - 1) / 2.0
        k = np.argmin((rows - mid[0]) ** 2 + (cols - mid[1]) ** 2)
        return int(rows[k]), int(cols[k])


def upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear interpolation of a square grid to ``size x size``."""
    g = np.asarray(grid, dtype=np.float64)
    n = g.shape[0]
    pos = (np.arange(size) + 0.5) * n / size - 0.5
    pos = np.clip(pos, 0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    w = pos - lo
    rows = g[lo] * (1 - w)[:, None] + g[hi] * w[:, None]
    return rows[:, lo] * (1 - w)[None, :] + rows[:, hi] * w[None, :]


def normalize(m: np.ndarray) -> np.ndarray:
    top = float(m.max()) if m.size else 0.0
    return m / top if top > 0 else np.zeros_like(m)


def cam_from(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """``relu(sum_c mean_xy(grad_c) * act_c)`` for ``[C, g, g]`` inputs."""
    weights = gradients.reshape(gradients.shape[0], -1).mean(axis=1)
    return np.maximum(np.tensordot(weights, activations, axes=1), 0.0)


def grad_cam(model: ResNet, image: np.ndarray, meta=None, label_index: int = 0,
             image_ref: str | None = None) -> Heatmap:
    """Heatmap for one ``[C, S, S]`` image and one label.

    The gradient is taken of the pre-sigmoid logit with respect to the final
    conv-stage activation; the model runs in eval mode.
    """
    if not 0 <= label_index < model.config.num_labels:
        raise UsageError(f"label index must lie in [0, {model.config.num_labels}), got {label_index}")
    x = np.asarray(image, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    m = meta_array(None if meta is None else np.atleast_2d(np.asarray(meta, dtype=np.float32)))
    x, m = model._check_inputs(x, m)
    with no_grad():
        fmap = model.features(x, training=False).data
    leaf = Tensor(fmap, requires_grad=True)
    logits = model.head_logits(leaf, m)
    seed = np.zeros(logits.shape, dtype=np.float32)
    seed[0, label_index] = 1.0
    logits.backward(seed)
    grid = cam_from(fmap[0].astype(np.float64), leaf.grad[0].astype(np.float64))
    model.zero_grad()
    rendering = normalize(upsample_bilinear(grid, x.shape[-1]))
    return Heatmap(grid, rendering, label_index, image_ref)


def export_heatmap(hm: Heatmap, image: np.ndarray, stem, alpha: float = 0.5) -> dict[str, Path]:
    """Write ``<stem>_grid.csv``, ``<stem>_cam.png`` and ``<stem>_overlay.png``.

    ``image`` is the model input ``[C, S, S]`` (or ``[S, S]``) in [0, 1]; the
    overlay blends it in gray with the heatmap in the red channel.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = {k: stem.with_name(f"{stem.name}_{k}") for k in ("grid.csv", "cam.png", "overlay.png")}
    with paths["grid.csv"].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in hm.grid:
            w.writerow([repr(float(v)) for v in row])
    cam8 = np.round(255 * hm.rendering).astype(np.uint8)
    Image.fromarray(cam8).save(paths["cam.png"])
    base = np.asarray(image, dtype=np.float64)
    base = base[0] if base.ndim == 3 else base
    gray = np.repeat(base[..., None], 3, axis=2)
    heat = np.zeros_like(gray)
    heat[..., 0] = hm.rendering
    blend = np.clip((1 - alpha) * gray + alpha * heat, 0, 1)
    Image.fromarray(np.round(255 * blend).astype(np.uint8)).save(paths["overlay.png"])
    return paths
