"""Projection of posed 3D Gaussians and the differentiable tile rasterizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .camera import Camera
from .sh import sh_to_color

TILE = 16
LOWPASS = 0.3
MIN_TRANSMITTANCE = 1e-6
# splat support is cut where opacity * gaussian drops below this
SUPPORT_ALPHA = 1e-9
# screen culling uses the widest possible support (opacity 1) so crops render like the full frame
CULL_SIGMA = math.sqrt(2.0 * math.log(1.0 / SUPPORT_ALPHA))


@dataclass
class Splat2D:
    mean: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha_peak: float


@dataclass
class RenderedImage:
    rgb: torch.Tensor
    alpha: torch.Tensor

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.rgb.detach().cpu().numpy(), self.alpha.detach().cpu().numpy()


def depth_sort(depths) -> np.ndarray:
    """Stable ascending order; equal depths keep their original id order."""
    d = np.asarray(depths, dtype=np.float64)
    if np.isnan(d).any():
        raise ValueError("NaN depth")
    return np.argsort(d, kind="stable")


def project_gaussians(centers: torch.Tensor, covs: torch.Tensor, cam: Camera):
    """EWA projection. Returns (means2d, cov2d, depth, visible) for every input Gaussian."""
    dtype = centers.dtype
    w = torch.as_tensor(cam.rotation, dtype=dtype)
    t = torch.as_tensor(cam.translation, dtype=dtype)
    pc = centers @ w.T + t
    x, y, z = pc.unbind(-1)
    in_depth = (z > cam.near) & (z < cam.far)
    zs = torch.where(in_depth, z, torch.ones_like(z))
    inv_z = 1.0 / zs
    zero = torch.zeros_like(z)
    j = torch.stack([
        torch.stack([cam.fx * inv_z, zero, -cam.fx * x * inv_z * inv_z], -1),
        torch.stack([zero, cam.fy * inv_z, -cam.fy * y * inv_z * inv_z], -1),
    ], -2)
    m = j @ w
    cov2d = m @ covs @ m.transpose(-1, -2)
    cov2d = cov2d + LOWPASS * torch.eye(2, dtype=dtype)
    means = torch.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], -1)
    with torch.no_grad():
        sx = CULL_SIGMA * torch.sqrt(cov2d[:, 0, 0])
        sy = CULL_SIGMA * torch.sqrt(cov2d[:, 1, 1])
        on_screen = ((means[:, 0] + sx >= -0.5) & (means[:, 0] - sx <= cam.width - 0.5)
                     & (means[:, 1] + sy >= -0.5) & (means[:, 1] - sy <= cam.height - 0.5))
        visible = in_depth & on_screen & torch.isfinite(means).all(-1)
    return means, cov2d, z, visible


def project_gaussian(center, covariance, cam: Camera, color=(0.5, 0.5, 0.5), opacity: float = 1.0):
    """Single-Gaussian projection; ``None`` when culled."""
    c = torch.as_tensor(np.asarray(center, dtype=np.float64)).reshape(1, 3)
    s = torch.as_tensor(np.asarray(covariance, dtype=np.float64)).reshape(1, 3, 3)
    means, cov2d, depth, visible = project_gaussians(c, s, cam)
    if not bool(visible[0]):
        return None
    return Splat2D(means[0].numpy(), cov2d[0].numpy(), float(depth[0]),
                   np.asarray(color, dtype=np.float64), float(opacity))


def cov_to_conic(cov2d: torch.Tensor) -> torch.Tensor:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], -1)


def _alpha_at(splat: Splat2D, pixel) -> float:
    d = np.asarray(pixel, dtype=np.float64) - splat.mean
    power = -0.5 * d @ np.linalg.solve(splat.cov2d, d)
    return min(kernels.ALPHA_MAX, splat.alpha_peak * math.exp(power))


def composite_pixel(splats: list[Splat2D], pixel, min_transmittance: float = MIN_TRANSMITTANCE):
    """Front-to-back blend of depth-ordered splats at one pixel; returns (rgb, alpha)."""
    rgb = np.zeros(3)
    trans = 1.0
    for s in splats:
        a = _alpha_at(s, pixel)
        rgb += s.color * a * trans
        trans *= 1.0 - a
        if trans < min_transmittance:
            break
    return rgb, 1.0 - trans


class _Layout:
    """Tile binning for one forward pass, reused by the backward pass."""

    def __init__(self, means, cov2d, depth, opacity, visible, cam: Camera, tile: int):
        self.width, self.height, self.tile = cam.width, cam.height, tile
        self.n_tiles_x = (cam.width + tile - 1) // tile
        self.n_tiles_y = (cam.height + tile - 1) // tile
        op = np.clip(opacity, 1e-300, None)
        r_sigma = np.sqrt(np.clip(2.0 * np.log(op / SUPPORT_ALPHA), 0.0, None))
        hx = r_sigma * np.sqrt(cov2d[:, 0, 0])
        hy = r_sigma * np.sqrt(cov2d[:, 1, 1])
        live = visible & (op > SUPPORT_ALPHA)
        live &= (means[:, 0] + hx + 0.5 >= 0) & (means[:, 0] - hx + 0.5 < self.n_tiles_x * tile)
        live &= (means[:, 1] + hy + 0.5 >= 0) & (means[:, 1] - hy + 0.5 < self.n_tiles_y * tile)
        x0 = np.floor((means[:, 0] - hx + 0.5) / tile)
        x1 = np.floor((means[:, 0] + hx + 0.5) / tile)
        y0 = np.floor((means[:, 1] - hy + 0.5) / tile)
        y1 = np.floor((means[:, 1] + hy + 0.5) / tile)
        x0 = np.clip(np.nan_to_num(x0, nan=0), 0, self.n_tiles_x - 1).astype(np.int64)
        x1 = np.clip(np.nan_to_num(x1, nan=-1), -1, self.n_tiles_x - 1).astype(np.int64)
        y0 = np.clip(np.nan_to_num(y0, nan=0), 0, self.n_tiles_y - 1).astype(np.int64)
        y1 = np.clip(np.nan_to_num(y1, nan=-1), -1, self.n_tiles_y - 1).astype(np.int64)
        x1[~live] = -1
        ids = np.flatnonzero(live)
        order = ids[depth_sort(depth[ids])]
        self.pair_splat, self.tile_start = kernels.bin_splats(
            x0, x1, y0, y1, order.astype(np.int64), self.n_tiles_x, self.n_tiles_y)


class _Rasterize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, means, conic, colors, opacity, layout: _Layout, min_transmittance: float):
        m = means.detach().double().numpy()
        q = conic.detach().double().numpy()
        o = opacity.detach().double().numpy()
        c = colors.detach().double().numpy()
        h, w = layout.height, layout.width
        rgb = np.zeros((h, w, 3))
        trans = np.ones((h, w))
        count = np.zeros((h, w), dtype=np.int64)
        kernels.composite_forward(m, q, o, c, layout.pair_splat, layout.tile_start,
                                  w, h, layout.tile, min_transmittance, rgb, trans, count)
        ctx.layout = layout
        ctx.arrays = (m, q, o, c, count)
        ctx.dtype = means.dtype
        return torch.as_tensor(rgb).to(means.dtype), torch.as_tensor(1.0 - trans).to(means.dtype)

    @staticmethod
    def backward(ctx, grad_rgb, grad_alpha):
        layout = ctx.layout
        m, q, o, c, count = ctx.arrays
        g_rgb = np.ascontiguousarray(grad_rgb.detach().double().numpy())
        g_a = np.ascontiguousarray(grad_alpha.detach().double().numpy())
        pair = np.zeros((len(layout.pair_splat), 9))
        kernels.composite_backward(m, q, o, c, layout.pair_splat, layout.tile_start,
                                   layout.width, layout.height, layout.tile, count, g_rgb, g_a, pair)
        g = torch.as_tensor(kernels.reduce_pairs(layout.pair_splat, pair, len(m))).to(ctx.dtype)
        return g[:, 0:2], g[:, 2:5], g[:, 6:9], g[:, 5], None, None


def rasterize(means2d, cov2d, depth, colors, opacity, visible, cam: Camera, *,
              tile: int = TILE, min_transmittance: float = MIN_TRANSMITTANCE) -> RenderedImage:
    """Composite projected splats (premultiplied output, transparent background)."""
    n = means2d.shape[0]
    dtype = means2d.dtype
    if n == 0:
        return RenderedImage(torch.zeros(cam.height, cam.width, 3, dtype=dtype),
                             torch.zeros(cam.height, cam.width, dtype=dtype))
    vis = visible.detach().numpy().astype(bool)
    # conic only matters for visible splats; keep culled ones finite
    vis_t = torch.as_tensor(vis)
    safe_cov = torch.where(vis_t[:, None, None], cov2d, torch.eye(2, dtype=dtype).expand_as(cov2d))
    conic = cov_to_conic(safe_cov)
    layout = _Layout(means2d.detach().double().numpy(), safe_cov.detach().double().numpy(),
                     depth.detach().double().numpy(), opacity.detach().double().numpy(), vis, cam, tile)
    safe_means = torch.where(vis_t[:, None], means2d, torch.zeros_like(means2d))
    rgb, alpha = _Rasterize.apply(safe_means, conic, colors, opacity, layout, min_transmittance)
    return RenderedImage(rgb, alpha)


def view_directions(centers: torch.Tensor, cam: Camera, view_rotation: torch.Tensor | None = None):
    """Unit camera-to-kernel directions, optionally expressed in each kernel's canonical frame."""
    pos = torch.as_tensor(cam.position, dtype=centers.dtype)
    d = centers - pos
    d = d / torch.linalg.norm(d, dim=-1, keepdim=True)
    if view_rotation is not None:
        d = (view_rotation.transpose(-1, -2) @ d.unsqueeze(-1)).squeeze(-1)
    return d


def render_gaussians(centers, covs, sh, opacity, cam: Camera, *, view_rotation=None,
                     sh_degree: int | None = None, **kw) -> RenderedImage:
    """Full forward pass for world-space Gaussians with SH colour."""
    means, cov2d, depth, visible = project_gaussians(centers, covs, cam)
    colors = sh_to_color(sh, view_directions(centers, cam, view_rotation), sh_degree)
    return rasterize(means, cov2d, depth, colors, opacity, visible, cam, **kw)
