"""Naive per-pixel compositing used as an independent check of the tile rasterizer.

Every splat is evaluated at every pixel in global depth order, with no tiling,
support cut-off or early termination.
"""

from __future__ import annotations

import numpy as np

from .kernels import ALPHA_MAX


def render_naive(means, cov2d, depth, colors, opacity, width: int, height: int):
    means = np.asarray(means, dtype=np.float64)
    cov2d = np.asarray(cov2d, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    opacity = np.asarray(opacity, dtype=np.float64)
    order = sorted(range(len(depth)), key=lambda i: (float(depth[i]), i))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    for i in order:
        inv = np.linalg.inv(cov2d[i])
        dx = xs - means[i, 0]
        dy = ys - means[i, 1]
        power = -0.5 * (inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy)
        a = np.minimum(ALPHA_MAX, opacity[i] * np.exp(power))
        rgb += colors[i] * (a * trans)[..., None]
        trans = trans * (1.0 - a)
    return rgb, 1.0 - trans
