"""Dataset-level plumbing: training sequences, POM batches, and the augmentation run
(pose x view -> render -> refine -> background -> crop -> records).

Every sample draws from its own generator seeded by (job seed, sample index), so
outputs do not depend on worker count or scheduling.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import multiprocessing as mp
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .deform import Articulation, InteractionPose, SkinnedRig, forward_kinematics, load_rig
from .gaussians import anchor_gaussians
from .mesh import load_mesh, save_mesh
from .pose_opt import (
    GraspContext,
    ObjectSamples,
    PerturbationConfig,
    PomConfig,
    compute_contact_map,
    loss_penetration,
    optimize_pose,
    posed_hand_points,
    reference_grasp_prior,
    sample_perturbation,
)
from .raster.camera import Camera, look_at
from .scene import HANDS, Entity, SceneModel, save_scene
from .trainer import TrainConfig, TrainFrame, load_checkpoint, train_loop

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MISSING = 2
EXIT_ALL_REJECTED = 3
EXIT_NO_POSES = 4

CONSISTENCY_TOL_PX = 1e-4
JOINT_TOL = 1e-6
SUCCESS_FRACTION = 0.9
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


class MissingInput(FileNotFoundError):
    pass


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingInput(f"missing file: {p}")
    return p


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True)


# ---------------------------------------------------------------- images


def load_image(path) -> np.ndarray:
    """RGB float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)


def png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(rgb)).save(buf, format="PNG")
    return buf.getvalue()


def save_png(rgb: np.ndarray, path) -> None:
    Path(path).write_bytes(png_bytes(rgb))


# ---------------------------------------------------------------- sequences and training


@dataclass
class SequenceSpec:
    subject: str
    object_id: str
    rigs: dict
    object_mesh: Path
    manifest: Path
    reference_poses: list
    articulation: Path | None = None
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path) -> "SequenceSpec":
        path = _require(path)
        d = json.loads(path.read_text())
        base = path.parent
        rig = d["rig"]
        rigs = {s: base / (rig[s] if isinstance(rig, dict) else rig) for s in HANDS}
        spec = cls(
            subject=str(d.get("subject", "")),
            object_id=str(d.get("object", "")),
            rigs=rigs,
            object_mesh=base / d["object_mesh"],
            manifest=base / d["manifest"],
            reference_poses=[base / p for p in d.get("reference_poses", [])],
            articulation=base / d["articulation"] if d.get("articulation") else None,
            base_dir=base,
        )
        for p in [*spec.rigs.values(), spec.object_mesh, spec.manifest, *spec.reference_poses]:
            _require(p)
        if spec.articulation is not None:
            _require(spec.articulation)
        return spec


def build_scene(rigs: dict[str, SkinnedRig], object_mesh, articulation: Articulation | None = None,
                k: int = 2, sh_degree: int = 2, dtype=torch.float32) -> SceneModel:
    model = SceneModel()
    for side in HANDS:
        rig = rigs[side]
        cloud = anchor_gaussians(rig.canonical_mesh, k, sh_degree=sh_degree, dtype=dtype)
        model.entities[side] = Entity(side, cloud, rig.canonical_mesh.copy(), rig)
    cloud = anchor_gaussians(object_mesh, k, sh_degree=sh_degree, dtype=dtype)
    model.entities["object"] = Entity("object", cloud, object_mesh.copy(), articulation=articulation)
    return model


def load_frames(manifest_path) -> tuple[list[TrainFrame], list[TrainFrame]]:
    """Manifest: JSON list of {image, camera, pose, [held_out]}; camera may be inline or a path."""
    manifest_path = _require(manifest_path)
    base = manifest_path.parent
    train, held = [], []
    for i, e in enumerate(json.loads(manifest_path.read_text())):
        cam = e["camera"]
        cam = Camera.from_json(cam) if isinstance(cam, dict) else Camera.load(_require(base / cam))
        pose = InteractionPose.load(_require(base / e["pose"]))
        img = load_image(_require(base / e["image"]))
        f = TrainFrame(img, cam, pose, frame_id=str(e.get("id", i)))
        (held if e.get("held_out") else train).append(f)
    return train, held


def cmd_train(sequence_path, config_path, out_dir, seed: int | None = None) -> Path:
    spec = SequenceSpec.load(sequence_path)
    cfg_d = json.loads(_require(config_path).read_text()) if config_path else {}
    if seed is not None:
        cfg_d["seed"] = seed
    config = TrainConfig.from_json(cfg_d)
    rigs = {s: load_rig(spec.rigs[s]) for s in HANDS}
    obj = load_mesh(spec.object_mesh)
    art = None
    if spec.articulation is not None:
        art = Articulation.from_json(json.loads(spec.articulation.read_text()), spec.articulation.parent)
    model = build_scene(rigs, obj, art, config.k, config.sh_degree)
    train, held = load_frames(spec.manifest)
    if not train:
        raise ValueError("manifest has no training frames")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(config.seed)
    train_loop(train, config, model, held_out=held, checkpoint_dir=out, metrics_path=out / "metrics.csv")
    return out / "final.hogs"


def load_model(path) -> SceneModel:
    _require(path)
    state, _ = load_checkpoint(path)
    return state.model


# ---------------------------------------------------------------- POM batches


@dataclass
class PomBatch:
    references: list
    samples_per_reference: int = 10
    perturbation: PerturbationConfig = field(default_factory=PerturbationConfig)
    pom: PomConfig = field(default_factory=PomConfig)
    point_seed: int = 0

    @classmethod
    def load(cls, path) -> "PomBatch":
        path = _require(path)
        d = json.loads(path.read_text())
        refs = [_require(path.parent / r) for r in d["references"]]
        return cls(refs, int(d.get("samples_per_reference", 10)),
                   PerturbationConfig.from_json(d.get("perturbation", {})),
                   PomConfig.from_json(d.get("pom", {})), int(d.get("point_seed", 0)))


_WORKER: dict = {}


def _limit_threads() -> None:
    torch.set_num_threads(1)
    try:
        import numba
        numba.set_num_threads(1)
    except (ImportError, ValueError):
        pass


def _pom_init(ckpt_path, batch: PomBatch):
    _limit_threads()
    model = load_model(ckpt_path)
    samples = ObjectSamples.sample(model, batch.pom.n_points, batch.point_seed)
    refs = [InteractionPose.load(r) for r in batch.references]
    priors = [reference_grasp_prior(model, r, samples, batch.pom.contact_sharpness) for r in refs]
    _WORKER.update(model=model, samples=samples, refs=refs, priors=priors, batch=batch)


def _pom_job(args):
    index, ref_index, seed = args
    w = _WORKER
    batch: PomBatch = w["batch"]
    rng = np.random.default_rng([seed, index])
    try:
        start = sample_perturbation(w["refs"][ref_index], batch.perturbation, rng)
        ctx = GraspContext(w["model"], w["samples"], start.object)
        pose, trace = optimize_pose(ctx, start, w["priors"][ref_index], batch.pom)
    except Exception as exc:  # noqa: BLE001 - one bad sample must not sink the batch
        return index, None, [], f"{type(exc).__name__}: {exc}"
    return index, pose.to_json(), trace, None


def _run_map(fn, jobs, workers: int, init, init_args):
    if workers <= 1:
        init(*init_args)
        return [fn(j) for j in jobs]
    ctx = mp.get_context("spawn")
    with ctx.Pool(workers, initializer=init, initargs=init_args) as pool:
        return pool.map(fn, jobs, chunksize=1)


def _write_trace(path, trace) -> None:
    if not trace:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(trace[0]), lineterminator="\n")
    w.writeheader()
    for r in trace:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    Path(path).write_text(buf.getvalue())


def cmd_pom(checkpoint, batch_path, out_dir, seed: int = 0, workers: int = 1) -> dict:
    """Returns the summary dict; ``summary["accepted"] == 0`` maps to exit code 3."""
    batch = PomBatch.load(batch_path)
    _require(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, i // batch.samples_per_reference, seed)
            for i in range(len(batch.references) * batch.samples_per_reference)]
    results = _run_map(_pom_job, jobs, workers, _pom_init, (str(checkpoint), batch))
    accepted, rejected = [], []
    for index, pose, trace, err in sorted(results, key=lambda r: r[0]):
        _write_trace(out / f"trace_{index:05d}.csv", trace)
        if err is not None:
            log.warning("sample %d failed: %s", index, err)
            rejected.append({"index": index, "reason": err})
            continue
        pen = trace[-1]["penetration"]
        if pen > batch.pom.penetration_threshold:
            log.info("sample %d rejected: penetration %.3g > %.3g", index, pen, batch.pom.penetration_threshold)
            rejected.append({"index": index, "reason": f"penetration {pen!r}"})
            continue
        (out / f"pose_{index:05d}.json").write_text(json.dumps(pose, indent=1, sort_keys=True))
        accepted.append({"index": index, "final_loss": trace[-1]["total"], "penetration": pen})
    summary = {"requested": len(jobs), "accepted": len(accepted), "rejected": rejected,
               "accepted_samples": accepted, "seed": seed}
    (out / "pom_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


# ---------------------------------------------------------------- cameras, compositing, cropping


@dataclass
class CameraSamplerConfig:
    radius: tuple = (0.35, 0.5)
    elevation_deg: tuple = (-20.0, 60.0)
    count: int = 3
    width: int = 320
    height: int = 320
    fx: float = 480.0
    fy: float | None = None

    def __post_init__(self):
        self.radius = tuple(float(r) for r in self.radius)
        self.elevation_deg = tuple(float(e) for e in self.elevation_deg)
        if min(self.radius) <= 0 or self.radius[0] > self.radius[1]:
            raise ValueError("radius range must be positive and ordered")
        if self.count <= 0:
            raise ValueError("camera count must be positive")


def sample_camera(cfg: CameraSamplerConfig, rng: np.random.Generator, target) -> Camera:
    """Look-at camera on a sphere around ``target``."""
    az = rng.uniform(0.0, 2 * np.pi)
    el = np.deg2rad(rng.uniform(*cfg.elevation_deg))
    r = rng.uniform(*cfg.radius)
    target = np.asarray(target, dtype=np.float64)
    eye = target + r * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return Camera(cfg.fx, cfg.fy or cfg.fx, (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0,
                  cfg.width, cfg.height, look_at(eye, target), near=0.01, far=10.0)


def composite_background(rgb, alpha, background) -> np.ndarray:
    """Premultiplied foreground over an opaque background."""
    rgb = np.asarray(rgb, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    if bg.shape != rgb.shape:
        raise ValueError(f"background {bg.shape} does not match render {rgb.shape}")
    return rgb + (1.0 - alpha)[..., None] * bg


def fit_background(img: np.ndarray, width: int, height: int) -> np.ndarray:
    """Scale to cover (width, height) and center-crop."""
    h, w = img.shape[:2]
    s = max(width / w, height / h)
    nw, nh = max(width, int(round(w * s))), max(height, int(round(h * s)))
    im = Image.fromarray(to_uint8(img)).resize((nw, nh), Image.BILINEAR)
    x0, y0 = (nw - width) // 2, (nh - height) // 2
    return np.asarray(im.crop((x0, y0, x0 + width, y0 + height)), dtype=np.float64) / 255.0


def list_backgrounds(directory) -> list[Path]:
    if directory is None:
        return []
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_EXTS)


def pick_background(paths: list[Path], rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    """Random readable background; unreadable files are skipped with a warning."""
    if not paths:
        return np.broadcast_to(rng.uniform(0.0, 1.0, 3), (height, width, 3)).copy()
    start = int(rng.integers(len(paths)))
    for k in range(len(paths)):
        p = paths[(start + k) % len(paths)]
        try:
            return fit_background(load_image(p), width, height)
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable background %s: %s", p, exc)
    raise ValueError("no readable background image")


class CropError(ValueError):
    pass


def crop_interaction(image: np.ndarray, camera: Camera, centroid, size: int = 224, jitter=(0, 0),
                     joints3d: dict | None = None):
    """Crop ``size`` x ``size`` around the projected centroid (+ jitter), clamped inside the image.

    Returns (crop, shifted camera, {side: 2D joints under the shifted camera}).
    """
    h, w = image.shape[:2]
    if size > h or size > w:
        raise CropError(f"crop {size} larger than image {w}x{h}")
    c = camera.project(np.asarray(centroid, dtype=np.float64))
    if camera.world_to_camera(centroid)[2] <= 0 or not (-0.5 <= c[0] <= w - 0.5 and -0.5 <= c[1] <= h - 0.5):
        raise CropError("interaction centroid outside the frame")
    x0 = int(np.floor(c[0] + jitter[0] - (size - 1) / 2.0 + 0.5))
    y0 = int(np.floor(c[1] + jitter[1] - (size - 1) / 2.0 + 0.5))
    x0 = min(max(x0, 0), w - size)
    y0 = min(max(y0, 0), h - size)
    crop = image[y0:y0 + size, x0:x0 + size]
    cam = camera.shifted(x0, y0, size, size)
    joints2d = {}
    for side, j in (joints3d or {}).items():
        full = camera.project(j) - np.array([x0, y0])
        direct = cam.project(j)
        if np.abs(full - direct).max() > CONSISTENCY_TOL_PX:
            raise CropError("2D joints inconsistent after crop")
        joints2d[side] = direct
    return crop, cam, joints2d


# ---------------------------------------------------------------- augmentation


def identity_refiner(rgb: np.ndarray) -> np.ndarray:
    return rgb


@dataclass
class AugmentJob:
    checkpoint: Path
    poses_dir: Path
    camera: CameraSamplerConfig = field(default_factory=CameraSamplerConfig)
    backgrounds: Path | None = None
    crop_size: int = 224
    jitter: int = 16
    seed: int = 0
    contact_points: int = 2048
    penetration_threshold: float = 1e-4

    def __post_init__(self):
        if self.crop_size > min(self.camera.width, self.camera.height):
            raise ValueError("crop size exceeds render size")

    @classmethod
    def load(cls, path) -> "AugmentJob":
        path = _require(path)
        d = json.loads(path.read_text())
        base = path.parent
        return cls(
            checkpoint=base / d["checkpoint"],
            poses_dir=base / d["poses_dir"],
            camera=CameraSamplerConfig(**d.get("camera", {})),
            backgrounds=base / d["backgrounds"] if d.get("backgrounds") else None,
            crop_size=int(d.get("crop_size", 224)),
            jitter=int(d.get("jitter", 16)),
            seed=int(d.get("seed", 0)),
            contact_points=int(d.get("contact_points", 2048)),
            penetration_threshold=float(d.get("penetration_threshold", 1e-4)),
        )


def rig_joint_positions(rig_json: dict, hand_pose) -> np.ndarray:
    """World joint positions from a pose using only the joint hierarchy."""
    joints = rig_json["joints"]
    parents = [j["parent"] for j in joints]
    rest = np.stack([np.asarray(j["rest"], dtype=np.float64).reshape(4, 4) for j in joints])

    rest_world = np.empty_like(rest)
    for j, p in enumerate(parents):
        rest_world[j] = rest[j] if p < 0 else rest_world[p] @ rest[j]
    skeleton = SimpleNamespace(parents=parents, rest_local=rest, rest_world=rest_world, n_joints=len(parents))
    _, world = forward_kinematics(skeleton, hand_pose)
    return world[:, :3, 3].numpy()


def _skeletons(model: SceneModel) -> dict:
    out = {}
    for side in HANDS:
        rig = model.entities[side].rig.to_json(mesh_path="")
        out[side] = {"joints": rig["joints"]}
    return out


def _augment_init(job: AugmentJob, refiner):
    _limit_threads()
    model = load_model(job.checkpoint)
    samples = ObjectSamples.sample(model, job.contact_points, 0)
    _WORKER.update(model=model, job=job, refiner=refiner, samples=samples,
                   backgrounds=list_backgrounds(job.backgrounds), skeletons=_skeletons(model))


def _augment_job(args):
    index, pose_path, view = args
    w = _WORKER
    job: AugmentJob = w["job"]
    model: SceneModel = w["model"]
    rng = np.random.default_rng([job.seed, index])
    try:
        pose = InteractionPose.load(pose_path)
        hands = posed_hand_points(model, pose)
        obj_mesh = model.object_mesh(pose)
        pen = sum(float(loss_penetration(hands[s], obj_mesh)) for s in HANDS)
        if pen > job.penetration_threshold:
            raise ValueError(f"pose penetrates the object by {pen:.3g}")
        centroid = model.interaction_centroid(pose)
        cam = sample_camera(job.camera, rng, centroid)
        with torch.no_grad():
            img = model.render(pose, cam)
        rgb, alpha = img.rgb.double().numpy(), img.alpha.double().numpy()
        rgb = w["refiner"](rgb)
        bg = pick_background(w["backgrounds"], rng, cam.width, cam.height)
        full = composite_background(rgb, alpha, bg)
        jitter = rng.integers(-job.jitter, job.jitter + 1, size=2) if job.jitter > 0 else (0, 0)
        joints3d = {s: rig_joint_positions(w["skeletons"][s], pose.hand(s)) for s in HANDS}
        crop, ccam, joints2d = crop_interaction(full, cam, centroid, job.crop_size, jitter, joints3d)
        pts = w["samples"].points(obj_mesh)
        contact = {}
        for s in HANDS:
            cm = compute_contact_map(hands[s], pts).values
            contact[s] = {"max": float(cm.max()), "mean": float(cm.mean()),
                          "fraction_above_half": float((cm > 0.5).mean())}
        data = png_bytes(crop)
        record = {
            "index": index,
            "image": f"images/{index:06d}.png",
            "image_sha256": hashlib.sha256(data).hexdigest(),
            "width": job.crop_size,
            "height": job.crop_size,
            "pose_file": Path(pose_path).name,
            "view": view,
            "camera": ccam.to_json(),
            "pose": pose.to_json(),
            "joints3d": {s: joints3d[s].tolist() for s in HANDS},
            "joints2d": {s: joints2d[s].tolist() for s in HANDS},
            "contact": contact,
        }
        return index, record, data, None
    except Exception as exc:  # noqa: BLE001 - per-sample failures are logged and skipped
        return index, None, None, f"{type(exc).__name__}: {exc}"


def cmd_augment(job: AugmentJob, out_dir, workers: int = 1,
                refiner: Callable[[np.ndarray], np.ndarray] = identity_refiner) -> dict:
    """Returns a summary; ``summary["exit_code"]`` is 0 iff at least 90% of samples succeeded."""
    _require(job.checkpoint)
    poses = sorted(Path(job.poses_dir).glob("*.json")) if Path(job.poses_dir).is_dir() else []
    poses = [p for p in poses if p.name != "pom_summary.json"]
    out = Path(out_dir)
    if not poses:
        return {"exit_code": EXIT_NO_POSES, "requested": 0, "generated": 0}
    (out / "images").mkdir(parents=True, exist_ok=True)
    jobs = [(i * job.camera.count + v, str(p), v) for i, p in enumerate(poses) for v in range(job.camera.count)]
    prev = torch.get_num_threads()
    try:
        results = _run_map(_augment_job, jobs, workers, _augment_init, (job, refiner))
    finally:
        torch.set_num_threads(prev)
    lines, failures = [], []
    for index, record, data, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            log.warning("sample %d failed: %s", index, err)
            failures.append({"index": index, "reason": err})
            continue
        (out / record["image"]).write_bytes(data)
        lines.append(_dump(record))
    (out / "manifest.jsonl").write_text("".join(line + "\n" for line in lines))
    requested = len(jobs)
    generated = len(lines)
    ok = generated >= SUCCESS_FRACTION * requested
    summary = {
        "requested": requested,
        "generated": generated,
        "ratio": generated / requested,
        "failures": failures,
        "poses": len(poses),
        "views_per_pose": job.camera.count,
        "crop_size": job.crop_size,
        "seed": job.seed,
        "skeletons": _skeletons(load_model(job.checkpoint)),
        "manifest_sha256": hashlib.sha256((out / "manifest.jsonl").read_bytes()).hexdigest(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    summary["exit_code"] = EXIT_OK if ok else EXIT_FAILURE
    return summary


# ---------------------------------------------------------------- validation


def _check_record(rec: dict, root: Path, skeletons: dict | None) -> list[str]:
    errs = []
    path = root / rec["image"]
    if not path.exists():
        return [f"missing image {rec['image']}"]
    data = path.read_bytes()
    if hashlib.sha256(data).hexdigest() != rec.get("image_sha256"):
        errs.append("image hash mismatch")
    with Image.open(io.BytesIO(data)) as im:
        if im.size != (rec["width"], rec["height"]):
            errs.append(f"image size {im.size} != {(rec['width'], rec['height'])}")
    cam = Camera.from_json(rec["camera"])
    if (cam.width, cam.height) != (rec["width"], rec["height"]):
        errs.append("camera size does not match image")
    pose = InteractionPose.from_json(rec["pose"])
    for side in HANDS:
        j3 = np.asarray(rec["joints3d"][side], dtype=np.float64)
        j2 = np.asarray(rec["joints2d"][side], dtype=np.float64)
        if skeletons is not None:
            expect = rig_joint_positions(skeletons[side], pose.hand(side))
            if expect.shape != j3.shape or np.abs(expect - j3).max() > JOINT_TOL:
                errs.append(f"{side} 3D joints inconsistent with pose")
        if np.abs(cam.project(j3) - j2).max() > CONSISTENCY_TOL_PX:
            errs.append(f"{side} 2D joints inconsistent with camera projection")
    return errs


def cmd_validate(dataset_dir) -> dict:
    root = Path(dataset_dir)
    manifest = _require(root / "manifest.jsonl")
    skeletons = None
    if (root / "summary.json").exists():
        skeletons = json.loads((root / "summary.json").read_text()).get("skeletons")
    results = []
    for n, line in enumerate(manifest.read_text().splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            errs = _check_record(rec, root, skeletons)
            idx = rec.get("index", n)
        except (KeyError, ValueError, TypeError) as exc:
            errs, idx = [f"malformed record: {exc}"], n
        results.append({"index": idx, "ok": not errs, "errors": errs})
    passed = sum(r["ok"] for r in results)
    report = {"total": len(results), "passed": passed, "failed": len(results) - passed,
              "records": [r for r in results if not r["ok"]]}
    return report


# ---------------------------------------------------------------- single renders


def cmd_render(checkpoint, pose_path, camera_path, out_path) -> Path:
    model = load_model(checkpoint)
    pose = InteractionPose.load(_require(pose_path))
    cam = Camera.load(_require(camera_path))
    with torch.no_grad():
        img = model.render(pose, cam)
    save_png(img.rgb.double().numpy(), out_path)
    return Path(out_path)


# ---------------------------------------------------------------- on-disk fixture


def _shifted_pose(pose: InteractionPose, offset) -> InteractionPose:
    d = pose.to_json()
    off = np.asarray(offset, dtype=np.float64)
    for s in HANDS:
        d[s]["root_translation"] = (np.asarray(d[s]["root_translation"]) + off).tolist()
    out = InteractionPose.from_json(d)
    T = out.object.T.copy()
    T[:3, 3] += off
    out.object.T = T
    return out


def write_fixture(out_dir, *, n_train: int = 20, n_test: int = 4, size: int = 128, iterations: int = 2000,
                  n_augment_poses: int = 4, views: int = 3, render_size: int = 256) -> dict:
    """Write the synthetic sphere-and-paddles sequence plus ready-to-run job files.

    Produces meshes, a rig, rendered training images, a sequence spec, train/batch/job
    configs and ``fixture.hogs`` (the ground-truth model, usable as a checkpoint).
    Returns the written paths by role.
    """
    from . import fixtures

    out = Path(out_dir)
    for sub in ("meshes", "images", "poses", "augment_poses"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    gt, pose, train_cams, test_cams = fixtures.reference_scene(n_train, n_test, size)
    rig = gt.entities["left"].rig
    save_mesh(rig.canonical_mesh, out / "meshes" / "paddle.obj")
    save_mesh(gt.entities["object"].template, out / "meshes" / "sphere.obj")
    (out / "rig.json").write_text(json.dumps(rig.to_json("meshes/paddle.obj")))
    pose.save(out / "poses" / "reference.json")
    entries = []
    for i, (cam, held) in enumerate([(c, False) for c in train_cams] + [(c, True) for c in test_cams]):
        with torch.no_grad():
            img = gt.render(pose, cam)
        name = f"images/view_{i:03d}.png"
        save_png(img.rgb.double().numpy(), out / name)
        entries.append({"id": f"view_{i:03d}", "image": name, "camera": cam.to_json(),
                        "pose": "poses/reference.json", "held_out": held})
    (out / "manifest.json").write_text(json.dumps(entries, indent=1))
    (out / "camera.json").write_text(json.dumps(test_cams[0].to_json(), indent=1))
    (out / "sequence.json").write_text(json.dumps({
        "subject": "paddles", "object": "sphere", "rig": "rig.json",
        "object_mesh": "meshes/sphere.obj", "manifest": "manifest.json",
        "reference_poses": ["poses/reference.json"]}, indent=1))
    (out / "train.json").write_text(json.dumps(TrainConfig(iterations=iterations).to_json(), indent=1))
    (out / "batch.json").write_text(json.dumps({
        "references": ["poses/reference.json"], "samples_per_reference": 10,
        "perturbation": PerturbationConfig().to_json(), "pom": PomConfig().to_json()}, indent=1))
    for i in range(n_augment_poses):
        offset = 0.01 * np.array([np.cos(i), np.sin(i), 0.5 * (i % 2)]) if i else np.zeros(3)
        _shifted_pose(pose, offset).save(out / "augment_poses" / f"pose_{i:05d}.json")
    cam_cfg = {"count": views, "width": render_size, "height": render_size, "fx": 1.9 * render_size,
               "radius": [0.35, 0.5], "elevation_deg": [-20.0, 60.0]}
    (out / "job.json").write_text(json.dumps({
        "checkpoint": "fixture.hogs", "poses_dir": "augment_poses", "camera": cam_cfg,
        "crop_size": 224, "jitter": 16, "seed": 0}, indent=1))
    save_scene(gt, out / "fixture.hogs")
    return {k: out / v for k, v in [("sequence", "sequence.json"), ("train", "train.json"), ("batch", "batch.json"),
                                    ("job", "job.json"), ("checkpoint", "fixture.hogs"),
                                    ("reference", "poses/reference.json"), ("camera", "camera.json")]}
