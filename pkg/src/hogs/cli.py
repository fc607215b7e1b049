"""``hogs`` command line: train, pom, augment, validate, render, fixture."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .pipeline import EXIT_ALL_REJECTED, EXIT_FAILURE, EXIT_MISSING, EXIT_OK, MissingInput

log = logging.getLogger("hogs")


def _train(a) -> int:
    path = pipeline.cmd_train(a.sequence, a.config, a.out, seed=a.seed)
    print(path)
    return EXIT_OK


def _pom(a) -> int:
    summary = pipeline.cmd_pom(a.checkpoint, a.batch, a.out, seed=a.seed or 0, workers=a.workers)
    print(f"accepted {summary['accepted']}/{summary['requested']}")
    if summary["accepted"] == 0:
        log.error("all POM samples rejected")
        return EXIT_ALL_REJECTED
    return EXIT_OK


def _augment(a) -> int:
    job = pipeline.AugmentJob.load(a.job)
    if a.seed is not None:
        job.seed = a.seed
    summary = pipeline.cmd_augment(job, a.out, workers=a.workers)
    if summary["exit_code"] == pipeline.EXIT_NO_POSES:
        log.error("no pose files in %s", job.poses_dir)
    else:
        print(f"generated {summary['generated']}/{summary['requested']}")
    return summary["exit_code"]


def _validate(a) -> int:
    report = pipeline.cmd_validate(a.dataset)
    print(json.dumps(report, indent=1))
    return EXIT_OK if report["failed"] == 0 else EXIT_FAILURE


def _render(a) -> int:
    print(pipeline.cmd_render(a.checkpoint, a.pose, a.camera, a.out))
    return EXIT_OK


def _fixture(a) -> int:
    paths = pipeline.write_fixture(a.out, iterations=a.iterations, size=a.size)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    def flags(defaults: bool) -> argparse.ArgumentParser:
        # subcommands use SUPPRESS so a flag given before the subcommand is not reset
        d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
        f = argparse.ArgumentParser(add_help=False)
        f.add_argument("--seed", type=int, default=d(None))
        f.add_argument("--workers", type=int, default=d(1))
        f.add_argument("--log-level", default=d("INFO"), choices=["DEBUG", "INFO", "WARNING", "ERROR"])
        return f

    common = flags(False)
    p = argparse.ArgumentParser(prog="hogs", parents=[flags(True)],
                                description="Hand-object Gaussian splatting: training, pose optimization and data augmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="fit a model to one sequence")
    s.add_argument("--sequence", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_train)

    s = sub.add_parser("pom", parents=[common], help="perturb and re-optimize reference grasps")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--batch", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_pom)

    s = sub.add_parser("augment", parents=[common], help="render an augmented dataset")
    s.add_argument("--job", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_augment)

    s = sub.add_parser("validate", parents=[common], help="re-check a generated dataset")
    s.add_argument("--dataset", required=True)
    s.set_defaults(fn=_validate)

    s = sub.add_parser("render", parents=[common], help="render one pose from one camera")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pose", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_render)

    s = sub.add_parser("fixture", parents=[common], help="write the synthetic reference sequence")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=2000)
    s.add_argument("--size", type=int, default=128)
    s.set_defaults(fn=_fixture)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s:%(name)s:%(message)s")
    try:
        return args.fn(args)
    except MissingInput as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - report and map to a non-zero exit
        log.error("%s: %s", type(exc).__name__, exc)
        if args.log_level == "DEBUG":
            raise
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
