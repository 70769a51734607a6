"""Command-line front end.

Four subcommands cover the full workflow:

- ``generate``: run the forward solver on a synthetic conduction field
  and write the ground truth, a sampled activation-time CSV, and a
  provenance manifest.
- ``train``: fit the networks to a samples file and write a checkpoint,
  the optimization history, metrics, and a manifest.
- ``evaluate``: score a checkpoint against samples and/or a ground
  truth and write metrics plus result exports.
- ``export``: write the per-vertex result fields (and per-sample
  predictions when samples are configured) for a checkpoint, without
  metrics.

Every command is driven by one TOML config (``--config``), optionally
overridden with ``--set section.key=value`` flags; ``--seed`` and
``--out`` are shorthands for ``run.seed`` and ``run.out_dir``. All
relative paths, including ``--out``, resolve against the config file's
directory so a config reproduces the same run from any working
directory. Exit codes: 0 success, 2 configuration error, 3 numeric
abort during training, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, config_digest, load_config
from .experiment import (
    GroundTruth,
    evaluate,
    export_results,
    generate_synthetic,
    load_samples,
    save_samples,
    write_metrics,
)
from .frames import build_frames
from .loss import CollocationSet
from .mesh import TriMesh, read_vtk, save_vtk
from .net import Normalization, load_checkpoint, save_checkpoint
from .train import NumericAbort, fit_parallel, write_history_csv

__all__ = ["main"]

log = logging.getLogger(__name__)

MESH_FILE = "mesh.vtk"
GROUND_TRUTH_FILE = "ground_truth.vtk"
SAMPLES_FILE = "samples.csv"
CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "history.csv"
MANIFEST_FILE = "manifest.json"


def _say(path: Path) -> None:
    print(f"wrote {path}")


def _prepare_out(config: RunConfig) -> Path:
    out = config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, config: RunConfig) -> Path:
    """Provenance record: enough to rerun the command bit-exactly.

    Deliberately contains no timestamps or host details so a rerun
    produces an identical file.
    """
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config": config.raw,
        "config_sha256": config_digest(config.raw),
        "seed": config.seed,
    }
    path = out / MANIFEST_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _load_ground_truth(path: Path, mesh: TriMesh) -> GroundTruth:
    gt_mesh, fields = read_vtk(path)
    missing = {"phi_ms", "fiber", "d_log"} - set(fields)
    if missing:
        raise ConfigError(
            f"{path}: ground-truth file lacks fields {sorted(missing)}"
        )
    if gt_mesh.n_vertices != mesh.n_vertices:
        raise ConfigError(
            f"{path}: ground truth has {gt_mesh.n_vertices} vertices but "
            f"the mesh has {mesh.n_vertices}"
        )
    return GroundTruth(phi=fields["phi_ms"], fiber=fields["fiber"],
                       d=fields["d_log"])


def _check_mesh_compatible(model, mesh: TriMesh, checkpoint: Path) -> None:
    """The checkpoint's input normalization must match this mesh."""
    expected = Normalization.from_data(mesh.vertices)
    actual = model.config.normalization
    if (not np.allclose(actual.center, expected.center, atol=1e-9)
            or not np.isclose(actual.space_scale, expected.space_scale,
                              rtol=1e-9)):
        raise ConfigError(
            f"{checkpoint}: normalization mismatch — the checkpoint was "
            f"trained on a surface with center {actual.center} and "
            f"half-extent {actual.space_scale}, but this mesh has center "
            f"{expected.center} and half-extent {expected.space_scale}"
        )


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    config = _load(args)
    if config.synthetic is None:
        raise ConfigError("[synthetic] section required by generate")
    mesh = config.load_mesh()
    frames = build_frames(mesh, smoothing_iters=config.smoothing_iters)
    truth, samples = generate_synthetic(mesh, frames, config.synthetic)

    out = _prepare_out(config)
    mesh_path = out / MESH_FILE
    save_vtk(mesh, mesh_path)
    _say(mesh_path)
    gt_path = out / GROUND_TRUTH_FILE
    save_vtk(mesh, gt_path, point_data={
        "phi_ms": truth.phi, "fiber": truth.fiber, "d_log": truth.d,
    })
    _say(gt_path)
    samples_path = out / SAMPLES_FILE
    save_samples(samples_path, samples)
    _say(samples_path)
    _say(_write_manifest(out, "generate", config))
    print(f"generated {len(samples)} samples on {mesh.n_vertices} vertices")
    return 0


def cmd_train(args) -> int:
    config = _load(args)
    mesh = config.load_mesh()
    samples = load_samples(config.resolve_samples(), mesh)
    train_samples = [s for s in samples if s.split == "train"]
    if not train_samples:
        raise ConfigError(
            "[samples] path: file contains no samples tagged 'train'"
        )
    frames = build_frames(mesh, smoothing_iters=config.smoothing_iters)
    X = np.array([s.position for s in train_samples])
    y = np.array([s.time_ms for s in train_samples])
    norm = Normalization.from_data(mesh.vertices, y)
    colloc = CollocationSet(data_x=X, data_t=y,
                            colloc_x=mesh.vertices, frames=frames.P)
    report = fit_parallel(colloc, config.weights, config.model_config(norm),
                          config.train, tv_tangential=config.tv_tangential,
                          jobs=args.jobs)

    out = _prepare_out(config)
    ckpt_path = out / CHECKPOINT_FILE
    save_checkpoint(report.model, ckpt_path, metadata={
        "artifact_version": __version__,
        "config_sha256": config_digest(config.raw),
        "seed": config.seed,
        "best_restart": report.best_restart,
    })
    _say(ckpt_path)
    history_path = out / HISTORY_FILE
    write_history_csv(history_path, report.history)
    _say(history_path)

    scores = evaluate(report.model, mesh, frames, samples=samples)
    metrics_path = out / "metrics.txt"
    write_metrics(metrics_path, scores, extra={
        "final_loss": repr(report.final_loss),
        "best_restart": report.best_restart,
        "convergence_reason": report.convergence_reason,
        "restart_losses": ",".join(repr(v) for v in report.restart_losses),
    })
    _say(metrics_path)
    _say(_write_manifest(out, "train", config))
    for key, value in scores.metrics().items():
        print(f"{key}={value}")
    return 0


def _evaluate_report(args):
    """Shared evaluate/export plumbing; returns (config, mesh, report, samples)."""
    config = _load(args)
    model = load_checkpoint(args.checkpoint)
    mesh = config.load_mesh()
    _check_mesh_compatible(model, mesh, Path(args.checkpoint))
    frames = build_frames(mesh, smoothing_iters=config.smoothing_iters)

    samples = None
    if config.samples_path is not None:
        samples = load_samples(config.resolve_samples(), mesh)
    truth = None
    if args.ground_truth is not None:
        truth = _load_ground_truth(Path(args.ground_truth), mesh)
    if samples is None and truth is None:
        raise ConfigError(
            "evaluate needs measurements ([samples] path) and/or a "
            "--ground-truth file"
        )
    report = evaluate(model, mesh, frames, samples=samples,
                      ground_truth=truth)
    return config, mesh, report, samples


def cmd_evaluate(args) -> int:
    config, mesh, report, samples = _evaluate_report(args)
    out = _prepare_out(config)
    metrics_path = out / "metrics.txt"
    write_metrics(metrics_path, report)
    _say(metrics_path)
    vtk_path, csv_path = export_results(mesh, report, samples, out)
    _say(vtk_path)
    if csv_path is not None:
        _say(csv_path)
    _say(_write_manifest(out, "evaluate", config))
    for key, value in report.metrics().items():
        print(f"{key}={value}")
    return 0


def cmd_export(args) -> int:
    config, mesh, report, samples = _evaluate_report(args)
    out = _prepare_out(config)
    vtk_path, csv_path = export_results(mesh, report, samples, out)
    _say(vtk_path)
    if csv_path is not None:
        _say(csv_path)
    _say(_write_manifest(out, "export", config))
    return 0


# -- argument plumbing ----------------------------------------------------------


def _load(args) -> RunConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    if args.out is not None:
        escaped = args.out.replace("\\", "\\\\").replace('"', '\\"')
        overrides.append(f'run.out_dir="{escaped}"')
    return load_config(args.config, overrides)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH",
                        help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key, e.g. train.restarts=2")
    common.add_argument("--seed", type=int, default=None, metavar="N",
                        help="shorthand for --set run.seed=N")
    common.add_argument("--out", default=None, metavar="DIR",
                        help="shorthand for --set run.out_dir=DIR "
                             "(resolved against the config directory)")
    common.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="processes for restart parallelism (train only)")

    parser = argparse.ArgumentParser(
        prog="fiberfit",
        description="Recover conduction tensors and fiber directions from "
                    "sparse activation-time measurements on a surface mesh.",
    )
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="synthesize ground truth and samples")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common],
                       help="fit the networks to a samples file")
    p.set_defaults(func=cmd_train)

    for name, func, blurb in (
        ("evaluate", cmd_evaluate, "score a checkpoint and export results"),
        ("export", cmd_export, "export result fields for a checkpoint"),
    ):
        p = sub.add_parser(name, parents=[common], help=blurb)
        p.add_argument("--checkpoint", required=True, metavar="PATH",
                       help="checkpoint written by train")
        p.add_argument("--ground-truth", default=None, metavar="PATH",
                       help="ground-truth VTK written by generate")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:  # ConfigError and invalid input files
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
