"""Pinhole camera (OpenCV convention: x right, y down, z forward; pixel centers on integers)."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    w2c: np.ndarray
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "w2c", np.asarray(self.w2c, dtype=np.float64).reshape(4, 4))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.w2c[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.w2c[:3, 3]

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def project(self, points) -> np.ndarray:
        """Pixel coordinates of world points, shape (..., 2)."""
        c = self.world_to_camera(points)
        return np.stack([self.fx * c[..., 0] / c[..., 2] + self.cx,
                         self.fy * c[..., 1] / c[..., 2] + self.cy], axis=-1)

    def shifted(self, dx: float, dy: float, width: int | None = None, height: int | None = None) -> "Camera":
        """Camera of a crop whose top-left corner sits at pixel (dx, dy)."""
        return replace(self, cx=self.cx - dx, cy=self.cy - dy,
                       width=width or self.width, height=height or self.height)

    def to_json(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "w2c": self.w2c.reshape(-1).tolist(), "near": self.near, "far": self.far}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), d["w2c"],
                   float(d.get("near", 0.01)), float(d.get("far", 100.0)))

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_json(json.loads(Path(path).read_text()))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` whose optical axis hits ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    f = target - eye
    f /= np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up vector
        right = np.cross(f, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    r = np.stack([right, down, f])
    w2c = np.eye(4)
    w2c[:3, :3] = r
    w2c[:3, 3] = -r @ eye
    return w2c


def orbit_camera(target, azimuth: float, elevation: float, radius: float, *, width: int, height: int,
                 fx: float, fy: float | None = None, near: float = 0.01, far: float = 100.0) -> Camera:
    target = np.asarray(target, dtype=np.float64)
    direction = np.array([np.cos(elevation) * np.cos(azimuth),
                          np.cos(elevation) * np.sin(azimuth),
                          np.sin(elevation)])
    eye = target + radius * direction
    return Camera(fx, fy if fy is not None else fx, (width - 1) / 2.0, (height - 1) / 2.0,
                  width, height, look_at(eye, target), near, far)
