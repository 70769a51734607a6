"""Synthetic experiments: data generation, splitting, metrics, and export.

The pipeline builds a ground-truth conductivity field from a fiber-angle
descriptor, solves the forward eikonal problem for activation times,
draws noisy point samples, and scores trained models against both the
samples and the full-surface truth.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .conductivity import (
    fiber_fields,
    log_tensor_from_speeds,
    speed_fields,
    tensor_fields,
)
from .eikonal import SeedSet, solve, triangle_metrics
from .frames import FrameField
from .mesh import SurfacePoint, TriMesh, save_vtk
from .net import PinnModel

__all__ = [
    "ActivationSample",
    "SyntheticSpec",
    "GroundTruth",
    "AngleSummary",
    "EvaluationReport",
    "generate_synthetic",
    "split_samples",
    "rmse",
    "fiber_angle_error",
    "evaluate",
    "export_results",
    "write_metrics",
    "save_samples",
    "load_samples",
    "vertex_surface_point",
]

log = logging.getLogger(__name__)

SPLITS = ("train", "test")

SAMPLE_HEADER = ("x_mm", "y_mm", "z_mm", "t_ms")
PREDICTIONS_FILE = "predictions.csv"
RESULTS_FILE = "results.vtk"
METRICS_FILE = "metrics.txt"


@dataclass(frozen=True)
class ActivationSample:
    """A measured activation time at a point projected onto the surface."""

    point: SurfacePoint
    time_ms: float
    offset_mm: float = 0.0
    split: str = "train"

    def __post_init__(self):
        if not np.isfinite(self.time_ms):
            raise ValueError(f"activation time must be finite, got {self.time_ms}")
        if not (self.offset_mm >= 0.0):
            raise ValueError(f"offset distance must be >= 0, got {self.offset_mm}")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    @property
    def position(self) -> np.ndarray:
        """Projected position on the surface, mm."""
        return self.point.position


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic ground truth and its sample set.

    fiber_angle_deg is either a constant angle (degrees, measured in each
    vertex's tangent gauge from the first frame axis) or a callable
    mapping vertex positions (V, 3) to per-vertex angles in degrees.
    """

    fiber_angle_deg: float | Callable[[np.ndarray], np.ndarray]
    v_long: float
    v_trans: float
    seeds: SeedSet
    n_samples: int
    noise_ms: float = 0.0
    rng_seed: int = 0
    train_fraction: float = 1.0

    def __post_init__(self):
        if self.v_long <= 0.0 or self.v_trans <= 0.0:
            raise ValueError("speeds must be positive")
        if self.n_samples < 1:
            raise ValueError("sample count must be >= 1")
        if self.noise_ms < 0.0:
            raise ValueError("noise sigma must be >= 0")
        if not (0.0 < self.train_fraction <= 1.0):
            raise ValueError("train fraction must be in (0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    """Exact per-vertex fields produced by the forward oracle."""

    phi: np.ndarray    # (V,) activation times, ms
    fiber: np.ndarray  # (V, 3) unit tangent fiber directions
    d: np.ndarray      # (V, 3) log-conductivity entries


def vertex_surface_point(mesh: TriMesh, v: int) -> SurfacePoint:
    """SurfacePoint sitting exactly on vertex v."""
    incident = mesh.vertex_triangles(v)
    if len(incident) == 0:
        raise ValueError(f"vertex {v} belongs to no triangle")
    tri = int(incident[0])
    bary = np.zeros(3)
    bary[list(mesh.triangles[tri]).index(v)] = 1.0
    return SurfacePoint(triangle=tri, bary=bary, position=mesh.vertices[v])


def _fiber_angles_deg(spec: SyntheticSpec, vertices: np.ndarray) -> np.ndarray:
    if callable(spec.fiber_angle_deg):
        angles = np.asarray(spec.fiber_angle_deg(vertices), dtype=np.float64)
        if angles.shape != (len(vertices),):
            raise ValueError(
                f"angle function must return shape ({len(vertices)},), "
                f"got {angles.shape}"
            )
        return angles
    return np.full(len(vertices), float(spec.fiber_angle_deg))


def generate_synthetic(
    mesh: TriMesh, frames: FrameField, spec: SyntheticSpec
) -> tuple[GroundTruth, list[ActivationSample]]:
    """Ground truth via the forward eikonal oracle plus noisy point samples.

    Samples are drawn at `n_samples` distinct vertices uniformly at random,
    Gaussian noise of sigma `noise_ms` is added to the times (never the
    positions), and the train/test tags are assigned by split_samples with
    the same RNG seed. Deterministic given the seed.
    """
    nv = mesh.n_vertices
    if spec.n_samples > nv:
        raise ValueError(
            f"cannot draw {spec.n_samples} samples from {nv} vertices"
        )
    angles = np.deg2rad(_fiber_angles_deg(spec, mesh.vertices))
    d = log_tensor_from_speeds(angles, spec.v_long, spec.v_trans)
    fiber = (np.cos(angles)[:, None] * frames.t1
             + np.sin(angles)[:, None] * frames.t2)

    metrics = triangle_metrics(mesh, frames, d)
    phi = solve(mesh, metrics, spec.seeds)

    rng = np.random.default_rng(spec.rng_seed)
    idx = rng.choice(nv, size=spec.n_samples, replace=False)
    times = phi[idx]
    if not np.all(np.isfinite(times)):
        bad = int(idx[~np.isfinite(times)][0])
        raise ValueError(
            f"sampled vertex {bad} is unreachable from the seed set"
        )
    if spec.noise_ms > 0.0:
        times = times + rng.normal(0.0, spec.noise_ms, size=spec.n_samples)

    samples = [
        ActivationSample(point=vertex_surface_point(mesh, int(v)),
                         time_ms=float(t))
        for v, t in zip(idx, times)
    ]
    samples = split_samples(samples, spec.train_fraction, spec.rng_seed)
    return GroundTruth(phi=phi, fiber=fiber, d=d), samples


def split_samples(
    samples: Sequence[ActivationSample], train_fraction: float, seed: int
) -> list[ActivationSample]:
    """Random train/test partition; returns retagged samples in input order.

    The train count is the rounded fraction with ties toward train
    (10 samples at 0.8 give 8 train / 2 test). Each nonempty part must
    receive at least one sample.
    """
    if not (0.0 < train_fraction <= 1.0):
        raise ValueError("train fraction must be in (0, 1]")
    n = len(samples)
    if n == 0:
        raise ValueError("cannot split an empty sample list")
    if train_fraction == 1.0:
        n_train = n
    else:
        n_train = int(np.floor(n * train_fraction + 0.5))
        if n_train < 1 or n - n_train < 1:
            raise ValueError(
                f"split of {n} samples at fraction {train_fraction} leaves "
                "fewer than 1 sample in a part"
            )
    perm = np.random.default_rng(seed).permutation(n)
    train_ids = set(perm[:n_train].tolist())
    return [
        replace(s, split="train" if i in train_ids else "test")
        for i, s in enumerate(samples)
    ]


def rmse(predicted, reference) -> float:
    """Root-mean-square difference, ms."""
    predicted = np.asarray(predicted, dtype=np.float64).ravel()
    reference = np.asarray(reference, dtype=np.float64).ravel()
    if predicted.shape != reference.shape:
        raise ValueError(
            f"length mismatch: {predicted.shape[0]} vs {reference.shape[0]}"
        )
    if predicted.size == 0:
        raise ValueError("rmse of empty lists is undefined")
    return float(np.sqrt(np.mean((predicted - reference) ** 2)))


@dataclass(frozen=True)
class AngleSummary:
    mean_deg: float
    median_deg: float


def fiber_angle_error(
    predicted: np.ndarray, true: np.ndarray, frames: FrameField
) -> tuple[np.ndarray, AngleSummary]:
    """Per-vertex axial angle between fiber fields, degrees in [0, 90].

    Both fields must be unit length and tangent to the surface described
    by `frames`. Directions are compared up to sign (fibers are axes).
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    expected = frames.t1.shape
    if predicted.shape != expected or true.shape != expected:
        raise ValueError(
            f"fiber fields must have shape {expected}, got "
            f"{predicted.shape} and {true.shape}"
        )
    for name, vecs in (("predicted", predicted), ("true", true)):
        norms = np.linalg.norm(vecs, axis=1)
        off = np.abs(norms - 1.0)
        if np.any(off > 1e-6):
            bad = int(np.argmax(off))
            raise ValueError(
                f"{name} fiber at vertex {bad} is not unit length "
                f"(norm {norms[bad]:.8f})"
            )
        normal_part = np.abs(np.einsum("vi,vi->v", vecs, frames.normal))
        if np.any(normal_part > 1e-6):
            bad = int(np.argmax(normal_part))
            raise ValueError(
                f"{name} fiber at vertex {bad} is not tangent "
                f"(normal component {normal_part[bad]:.2e})"
            )
    cosines = np.abs(np.einsum("vi,vi->v", predicted, true))
    angles = np.degrees(np.arccos(np.clip(cosines, 0.0, 1.0)))
    summary = AngleSummary(mean_deg=float(np.mean(angles)),
                           median_deg=float(np.median(angles)))
    return angles, summary


@dataclass
class EvaluationReport:
    """Per-vertex predictions plus the metric table.

    Metrics that require inputs that were not provided are None and are
    serialized as "not-applicable".
    """

    phi: np.ndarray          # (V,) predicted times, ms
    d: np.ndarray            # (V, 3) predicted log-conductivity
    tensors: np.ndarray      # (V, 3, 3) conductivity tensors
    fiber: np.ndarray        # (V, 3) predicted fiber axes
    v_long: np.ndarray       # (V,) longitudinal speeds, mm/ms
    v_trans: np.ndarray      # (V,) transverse speeds, mm/ms
    rmse_s: float | None = None
    rmse_o: float | None = None
    rmse_t: float | None = None
    fiber_mean_deg: float | None = None
    fiber_median_deg: float | None = None
    angle_deg: np.ndarray | None = None      # (V,) when ground truth given
    sample_predicted: np.ndarray | None = None  # aligned with the samples
    n_train: int = 0
    n_test: int = 0

    def metrics(self) -> dict[str, str]:
        """Flat, machine-parsable key-value view of the scalar metrics."""
        def fmt(value):
            return "not-applicable" if value is None else repr(float(value))

        return {
            "rmse_s_ms": fmt(self.rmse_s),
            "rmse_o_ms": fmt(self.rmse_o),
            "rmse_t_ms": fmt(self.rmse_t),
            "fiber_angle_mean_deg": fmt(self.fiber_mean_deg),
            "fiber_angle_median_deg": fmt(self.fiber_median_deg),
            "n_train": str(self.n_train),
            "n_test": str(self.n_test),
        }


def _truth_at_samples(
    mesh: TriMesh, phi: np.ndarray, samples: Sequence[ActivationSample]
) -> np.ndarray:
    """Ground-truth times at sample locations (barycentric interpolation)."""
    values = np.empty(len(samples))
    for i, s in enumerate(samples):
        values[i] = float(s.point.bary @ phi[mesh.triangles[s.point.triangle]])
    return values


def evaluate(
    model: PinnModel,
    mesh: TriMesh,
    frames: FrameField,
    samples: Sequence[ActivationSample] | None = None,
    ground_truth: GroundTruth | None = None,
) -> EvaluationReport:
    """Score a trained model against samples and/or full-surface truth.

    RMSE_O/RMSE_T are computed at the train/test sample points. When a
    ground truth is supplied they measure the error against the exact
    field interpolated at those points; otherwise they fall back to the
    measured times, the only reference available for real recordings
    (where they additionally reflect the measurement noise). RMSE_S and
    the fiber-angle summary require the ground truth. Anything whose
    inputs are missing is reported as not-applicable.
    """
    if samples is None and ground_truth is None:
        raise ValueError(
            "evaluate needs samples, a ground truth, or both"
        )
    phi = model.predict_times(mesh.vertices)
    d = model.conductivities(mesh.vertices)
    P = frames.P
    tensors = tensor_fields(d, P, model.config.normal_eigenvalue)
    fiber, _ = fiber_fields(d, P)
    v_long, v_trans = speed_fields(d)
    report = EvaluationReport(phi=phi, d=d, tensors=tensors, fiber=fiber,
                              v_long=v_long, v_trans=v_trans)

    if samples is not None:
        positions = np.array([s.position for s in samples])
        measured = np.array([s.time_ms for s in samples])
        is_train = np.array([s.split == "train" for s in samples])
        predicted = (model.predict_times(positions) if len(samples)
                     else np.empty(0))
        report.sample_predicted = predicted
        report.n_train = int(np.count_nonzero(is_train))
        report.n_test = len(samples) - report.n_train
        if ground_truth is not None:
            reference = _truth_at_samples(mesh, ground_truth.phi, samples)
        else:
            reference = measured
        if report.n_train:
            report.rmse_o = rmse(predicted[is_train], reference[is_train])
        if report.n_test:
            report.rmse_t = rmse(predicted[~is_train], reference[~is_train])

    if ground_truth is not None:
        report.rmse_s = rmse(phi, ground_truth.phi)
        angles, summary = fiber_angle_error(fiber, ground_truth.fiber, frames)
        report.angle_deg = angles
        report.fiber_mean_deg = summary.mean_deg
        report.fiber_median_deg = summary.median_deg

    return report


def write_metrics(path, report: EvaluationReport,
                  extra: dict | None = None) -> None:
    """Write the metric table as `key=value` lines.

    extra appends caller-supplied entries (for example training
    summaries) after the standard metrics, in the given order.
    """
    entries = dict(report.metrics())
    if extra:
        entries.update({k: str(v) for k, v in extra.items()})
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def export_results(
    mesh: TriMesh,
    report: EvaluationReport,
    samples: Sequence[ActivationSample] | None,
    out_dir,
) -> tuple[Path, Path | None]:
    """Write results.vtk and predictions.csv into out_dir; returns the paths.

    The VTK carries per-vertex `phi_ms`, `fiber`, and
    `speed_long_mm_per_ms`; the CSV lists each sample's measured and
    predicted times and their residual. With samples=None only the VTK
    is written and the CSV path is None.
    """
    if samples is not None and (report.sample_predicted is None
                                or len(report.sample_predicted) != len(samples)):
        raise ValueError(
            "report has no per-sample predictions for this sample list; "
            "run evaluate with the same samples first"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vtk_path = out_dir / RESULTS_FILE
    csv_path = out_dir / PREDICTIONS_FILE
    save_vtk(mesh, vtk_path, point_data={
        "phi_ms": report.phi,
        "fiber": report.fiber,
        "speed_long_mm_per_ms": report.v_long,
    })
    if samples is None:
        return vtk_path, None
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["x_mm", "y_mm", "z_mm", "t_ms", "predicted_ms",
             "residual_ms", "split"])
        for s, pred in zip(samples, report.sample_predicted):
            x, y, z = s.position
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(z)),
                             repr(float(s.time_ms)), repr(float(pred)),
                             repr(float(pred - s.time_ms)), s.split])
    return vtk_path, csv_path


def save_samples(path, samples: Sequence[ActivationSample],
                 include_split: bool = True) -> None:
    """Write samples as CSV with header x_mm,y_mm,z_mm,t_ms[,split]."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(SAMPLE_HEADER) + (["split"] if include_split else [])
        writer.writerow(header)
        for s in samples:
            x, y, z = s.position
            row = [repr(float(x)), repr(float(y)), repr(float(z)),
                   repr(float(s.time_ms))]
            if include_split:
                row.append(s.split)
            writer.writerow(row)


def load_samples(path, mesh: TriMesh) -> list[ActivationSample]:
    """Read a sample CSV and project every position onto the mesh.

    The header must be x_mm,y_mm,z_mm,t_ms with an optional split column;
    unrecognized split values default to train. The original distance of
    each point from the surface is recorded on the sample.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty sample file") from None
        header = [h.strip() for h in header]
        if tuple(header[:4]) != SAMPLE_HEADER or len(header) > 5 or (
                len(header) == 5 and header[4] != "split"):
            raise ValueError(
                f"{path}: header must be x_mm,y_mm,z_mm,t_ms[,split], "
                f"got {','.join(header)}"
            )
        has_split = len(header) == 5
        samples = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, "
                    f"got {len(row)}"
                )
            try:
                x, y, z, t = (float(v) for v in row[:4])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: non-numeric sample fields"
                ) from None
            if not np.isfinite(t):
                raise ValueError(f"{path}:{lineno}: time must be finite")
            split = row[4].strip() if has_split else "train"
            if split not in SPLITS:
                split = "train"
            raw = np.array([x, y, z])
            point = mesh.project_point(raw)
            offset = float(np.linalg.norm(raw - point.position))
            samples.append(ActivationSample(
                point=point, time_ms=t, offset_mm=offset, split=split))
    if not samples:
        raise ValueError(f"{path}: no samples in file")
    return samples
