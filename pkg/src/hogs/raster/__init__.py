from .camera import Camera, look_at, orbit_camera
from .render import (
    RenderedImage,
    Splat2D,
    composite_pixel,
    depth_sort,
    project_gaussian,
    project_gaussians,
    rasterize,
    render_gaussians,
)
from .sh import sh_to_color

__all__ = [
    "Camera", "look_at", "orbit_camera", "RenderedImage", "Splat2D", "composite_pixel",
    "depth_sort", "project_gaussian", "project_gaussians", "rasterize", "render_gaussians", "sh_to_color",
]
