"""Fitting scene models to posed multi-view images.

Loss: (1 - l_ssim) * L1 + l_ssim * (1 - SSIM) + l_r * mean vertex-to-template
distance. Parameters are updated with a hand-written Adam; opacity and
scale_factor are stepped in logit and log space respectively, and barycentric
weights are projected back onto the simplex after every step.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .gaussians import SCALE_FLOOR, project_beta
from .geometry import point_mesh_distance
from .mesh import TriangleMesh
from .raster.camera import Camera
from .scene import PARAM_NAMES, SceneModel, pose_tensors, scene_from_bytes, scene_to_bytes

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP = 99.0
OPACITY_EPS = 1e-6

DEFAULT_LR = {"vertices": 1.6e-4, "beta": 2e-3, "scale_factor": 5e-3, "sh": 2.5e-3, "opacity": 5e-2}


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_l1(rendered, target) -> torch.Tensor:
    rendered, target = torch.as_tensor(rendered), torch.as_tensor(target)
    _check_pair(rendered, target)
    return (rendered - target.to(rendered.dtype)).abs().mean()


def _gauss_window(dtype) -> torch.Tensor:
    x = torch.arange(SSIM_WINDOW, dtype=torch.float64) - SSIM_WINDOW // 2
    g = torch.exp(-(x * x) / (2 * SSIM_SIGMA ** 2))
    g = g / g.sum()
    return torch.outer(g, g).to(dtype)


def ssim_map(a, b) -> torch.Tensor:
    """Per-pixel SSIM of HxWxC images over valid 11x11 Gaussian windows; shape (C, H-10, W-10)."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _check_pair(a, b)
    b = b.to(a.dtype)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w, c = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = a.permute(2, 0, 1).unsqueeze(1)
    y = b.permute(2, 0, 1).unsqueeze(1)
    win = _gauss_window(a.dtype)[None, None]
    mx, my = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mx * mx
    syy = F.conv2d(y * y, win) - my * my
    sxy = F.conv2d(x * y, win) - mx * my
    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return s[:, 0]


def ssim(a, b) -> torch.Tensor:
    return ssim_map(a, b).mean()


def loss_ssim(rendered, target) -> torch.Tensor:
    return 1.0 - ssim(rendered, target)


def loss_distreg(vertices, template) -> torch.Tensor:
    """Mean distance of each vertex to the template surface.

    ``vertices``/``template`` may be single items or parallel sequences (one per
    entity); the mean then runs over all vertices together.
    """
    if isinstance(template, TriangleMesh):
        vertices, template = [vertices], [template]
    total, count = None, 0
    for v, m in zip(vertices, template, strict=True):
        if m.n_faces == 0:
            raise ValueError("empty template")
        v = torch.as_tensor(v)
        d = point_mesh_distance(v, m).sum()
        total = d if total is None else total + d
        count += v.shape[0]
    if count == 0:
        raise ValueError("no vertices")
    return total / count


def total_loss(rendered, target, vertices, template, lambda_ssim: float = 0.2, lambda_r: float = 0.5):
    """Returns (total, {"l1", "ssim", "distreg"})."""
    if lambda_ssim < 0 or lambda_r < 0:
        raise ValueError("loss weights must be non-negative")
    l1 = loss_l1(rendered, target)
    ls = loss_ssim(rendered, target)
    lr = loss_distreg(vertices, template)
    total = (1.0 - lambda_ssim) * l1 + lambda_ssim * ls + lambda_r * lr
    return total, {"l1": l1, "ssim": ls, "distreg": lr}


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


# ---------------------------------------------------------------- config and data


@dataclass
class TrainConfig:
    iterations: int = 2000
    lambda_ssim: float = 0.2
    lambda_r: float = 0.5
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    k: int = 2
    sh_degree: int = 2
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 0
    # vertex learning rate decays log-linearly to this fraction of its start value
    vertex_lr_decay: float = 0.01

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.lambda_ssim < 0 or self.lambda_r < 0:
            raise ValueError("loss weights must be non-negative")
        lr = dict(DEFAULT_LR)
        lr.update(self.lr or {})
        unknown = set(lr) - set(DEFAULT_LR)
        if unknown:
            raise ValueError(f"unknown learning-rate keys {sorted(unknown)}")
        if any(v < 0 for v in lr.values()):
            raise ValueError("learning rates must be non-negative")
        if not 0 < self.vertex_lr_decay <= 1:
            raise ValueError("vertex_lr_decay must be in (0, 1]")
        self.lr = lr

    def lr_at(self, name: str, iteration: int) -> float:
        base = self.lr[name]
        if name != "vertices":
            return base
        return base * self.vertex_lr_decay ** min(iteration / self.iterations, 1.0)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainFrame:
    image: np.ndarray
    camera: Camera
    pose: object
    frame_id: str = ""
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.shape != (self.camera.height, self.camera.width, 3):
            raise ValueError(f"frame {self.frame_id!r}: image {self.image.shape} does not match camera "
                             f"{self.camera.height}x{self.camera.width}")


# ---------------------------------------------------------------- optimizer


class Adam:
    """Adam over named tensors; moments are kept in float64."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lrs: dict[str, float]) -> dict[str, np.ndarray]:
        """Returns the update (to be added) for every key."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for k, g in grads.items():
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            out[k] = -lrs[k] * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_sections(self) -> dict[str, bytes]:
        sec = {"adam": json.dumps({"t": self.t, "keys": sorted(self.m)}).encode()}
        for k in sorted(self.m):
            sec[f"adam:m:{k}"] = self.m[k].astype("<f8").tobytes()
            sec[f"adam:v:{k}"] = self.v[k].astype("<f8").tobytes()
        return sec

    def load_sections(self, sec: dict[str, bytes], shapes: dict[str, tuple]) -> None:
        meta = json.loads(sec["adam"])
        self.t = meta["t"]
        for k in meta["keys"]:
            self.m[k] = np.frombuffer(sec[f"adam:m:{k}"], "<f8").reshape(shapes[k]).copy()
            self.v[k] = np.frombuffer(sec[f"adam:v:{k}"], "<f8").reshape(shapes[k]).copy()


def _to_opt_space(name: str, x: np.ndarray) -> np.ndarray:
    if name == "opacity":
        return np.log(x) - np.log1p(-x)
    if name == "scale_factor":
        return np.log(x)
    return x


def _from_opt_space(name: str, u: np.ndarray) -> np.ndarray:
    if name == "opacity":
        return np.clip(1.0 / (1.0 + np.exp(-u)), OPACITY_EPS, 1.0 - OPACITY_EPS)
    if name == "scale_factor":
        return np.maximum(np.exp(u), SCALE_FLOOR)
    if name == "beta":
        return project_beta(u)
    return u


def _chain(name: str, x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the optimization-space variable."""
    if name == "opacity":
        return g * x * (1.0 - x)
    if name == "scale_factor":
        return g * x
    return g


# ---------------------------------------------------------------- training


@dataclass
class TrainState:
    model: SceneModel
    optimizer: Adam = field(default_factory=Adam)
    iteration: int = 0


def train_step(state: TrainState, frame: TrainFrame, config: TrainConfig) -> dict:
    """One render/loss/backward/update cycle. Returns the float loss terms."""
    model = state.model
    leaves = model.leaves(requires_grad=True)
    pose_t = pose_tensors(frame.pose, model.dtype)
    img = model.render(pose_t, frame.camera, leaves)
    target = torch.as_tensor(frame.image, dtype=img.rgb.dtype)
    names = list(model.entities)
    verts = [leaves[n]["vertices"] for n in names]
    templates = [model.entities[n].template for n in names]
    total, terms = total_loss(img.rgb, target, verts, templates, config.lambda_ssim, config.lambda_r)
    value = float(total.detach())
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at iteration {state.iteration}, frame {frame.frame_id!r}; "
                            f"terms={ {k: float(v.detach()) for k, v in terms.items()} }")
    flat = [leaves[n][p] for n in names for p in PARAM_NAMES]
    grads = torch.autograd.grad(total, flat, allow_unused=True)
    g_np, x_np = {}, {}
    it = iter(grads)
    for n in names:
        for p in PARAM_NAMES:
            g = next(it)
            x = getattr(model.entities[n].cloud, p).detach().double().numpy()
            g = np.zeros_like(x) if g is None else g.detach().double().numpy()
            if not np.isfinite(g).all():
                raise TrainingError(f"non-finite gradient for {n}.{p} at iteration {state.iteration}, "
                                    f"frame {frame.frame_id!r}")
            key = f"{n}.{p}"
            x_np[key] = x
            g_np[key] = _chain(p, x, g)
    lrs = {key: config.lr_at(key.split(".", 1)[1], state.iteration) for key in g_np}
    updates = state.optimizer.step(g_np, lrs)
    for key, upd in updates.items():
        if lrs[key] == 0.0:
            continue
        n, p = key.split(".", 1)
        cloud = model.entities[n].cloud
        u = _to_opt_space(p, x_np[key]) + upd
        setattr(cloud, p, torch.as_tensor(_from_opt_space(p, u), dtype=cloud.dtype))
    state.iteration += 1
    out = {k: float(v.detach()) for k, v in terms.items()}
    out["total"] = value
    return out


def frame_order(n_frames: int, iteration: int, seed: int) -> int:
    """Frame index used at ``iteration``: a fresh seeded permutation per pass over the frames."""
    epoch, pos = divmod(iteration, n_frames)
    perm = np.random.default_rng([seed, epoch]).permutation(n_frames)
    return int(perm[pos])


def evaluate(model: SceneModel, frames) -> dict:
    """Mean PSNR/SSIM over frames. ``lpips`` is a placeholder slot and always None."""
    if not frames:
        return {"psnr": None, "ssim": None, "lpips": None}
    ps, ss = [], []
    with torch.no_grad():
        for f in frames:
            rgb = model.render(f.pose, f.camera).rgb.double()
            ps.append(psnr(rgb.numpy(), f.image))
            ss.append(float(ssim(rgb, torch.as_tensor(f.image))))
    return {"psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "lpips": None}


def save_checkpoint(path, state: TrainState, config: TrainConfig) -> None:
    extra = {"train": json.dumps({"iteration": state.iteration, "config": config.to_json()},
                                 sort_keys=True).encode()}
    extra.update(state.optimizer.state_sections())
    Path(path).write_bytes(scene_to_bytes(state.model, extra))


def load_checkpoint(path, dtype=torch.float32) -> tuple[TrainState, TrainConfig | None]:
    model, sec = scene_from_bytes(Path(path).read_bytes(), dtype)
    state = TrainState(model)
    config = None
    if "train" in sec:
        meta = json.loads(sec["train"])
        state.iteration = meta["iteration"]
        config = TrainConfig.from_json(meta["config"])
    if "adam" in sec:
        shapes = {f"{n}.{p}": tuple(getattr(e.cloud, p).shape)
                  for n, e in model.entities.items() for p in PARAM_NAMES}
        state.optimizer.load_sections(sec, shapes)
    return state, config


METRIC_FIELDS = ("iteration", "frame", "total", "l1", "ssim", "distreg", "eval_psnr", "eval_ssim")


def train_loop(frames, config: TrainConfig, model: SceneModel | None = None, *, held_out=(),
               state: TrainState | None = None, checkpoint_dir=None, metrics_path=None,
               stop_at: int | None = None) -> tuple[SceneModel, list[dict]]:
    """Train for ``config.iterations`` steps (or until ``stop_at``), one frame per step.

    Pass ``state`` (from :func:`load_checkpoint`) to resume; the frame order depends
    only on (seed, iteration) so a resumed run replays the same trace.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no training frames")
    if state is None:
        if model is None:
            raise ValueError("need a model or a resume state")
        state = TrainState(model)
    end = min(config.iterations, stop_at) if stop_at is not None else config.iterations
    rows: list[dict] = []
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    while state.iteration < end:
        it = state.iteration
        f = frames[frame_order(len(frames), it, config.seed)]
        terms = train_step(state, f, config)
        row = {"iteration": it, "frame": f.frame_id, **terms, "eval_psnr": "", "eval_ssim": ""}
        done = state.iteration
        if held_out and config.eval_every and (done % config.eval_every == 0 or done == config.iterations):
            ev = evaluate(state.model, held_out)
            row["eval_psnr"], row["eval_ssim"] = ev["psnr"], ev["ssim"]
            log.info("iter %d  loss %.5f  held-out PSNR %.2f  SSIM %.4f", done, terms["total"], ev["psnr"], ev["ssim"])
        rows.append(row)
        if ckdir and config.checkpoint_every and done % config.checkpoint_every == 0:
            save_checkpoint(ckdir / f"ckpt_{done:06d}.hogs", state, config)
    if ckdir:
        save_checkpoint(ckdir / "final.hogs", state, config)
    if metrics_path:
        write_metrics(metrics_path, rows)
    return state.model, rows


def write_metrics(path, rows: list[dict]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    Path(path).write_text(buf.getvalue())
