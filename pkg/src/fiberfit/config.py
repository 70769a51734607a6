"""Structured run configuration.

A run is described by one TOML file whose sections mirror the library
modules ([mesh], [frames], [net], [loss], [train], [samples],
[synthetic], [run]); every key has a default except the mesh source.
Individual keys can be overridden from the command line with
``section.key=value`` strings whose values are parsed as TOML.
Validation reports the section and key of every offending field, and
the resolved configuration can be hashed for provenance manifests.
Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on Python 3.10
    import tomli as tomllib

from .eikonal import SeedSet
from .experiment import SyntheticSpec
from .geometry import icosphere, rect_sheet
from .loss import LossWeights
from .mesh import TriMesh, read_vtk
from .net import MLPSpec, ModelConfig, Normalization
from .train import TrainConfig

__all__ = [
    "ConfigError",
    "RunConfig",
    "apply_overrides",
    "load_config",
    "parse_config",
    "config_digest",
]


class ConfigError(ValueError):
    """A configuration field is missing, malformed, or inconsistent."""


# section -> key -> expected kind
_SCHEMA = {
    "mesh": {
        "path": "str", "format": "str", "kind": "str",
        "width_mm": "num", "height_mm": "num", "target_edge_mm": "num",
        "subdivisions": "int", "radius_mm": "num",
    },
    "frames": {"smoothing_iters": "int"},
    "net": {
        "phi_hidden": "int-list", "d_hidden": "int-list",
        "d_max": "num", "normal_eigenvalue": "str",
    },
    "loss": {
        "alpha_model": "num", "alpha_weights": "num", "alpha_tv": "num",
        "eps": "num", "delta": "num", "tv_tangential": "bool",
    },
    "train": {
        "adam_lr": "num", "adam_epochs": "int",
        "adam_beta1": "num", "adam_beta2": "num",
        "lbfgs_memory": "int", "lbfgs_gtol": "num", "lbfgs_max_iter": "int",
        "restarts": "int", "batch_size": "int", "log_every": "int",
    },
    "samples": {"path": "str"},
    "synthetic": {
        "fiber_angle_deg": "num", "v_long": "num", "v_trans": "num",
        "seed_vertices": "int-list", "seed_times": "num-list",
        "n_samples": "int", "noise_ms": "num", "rng_seed": "int",
        "train_fraction": "num",
    },
    "run": {"out_dir": "str", "seed": "int"},
}


def _kind_ok(value, kind: str) -> bool:
    if kind == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if kind == "num":
        return (isinstance(value, (int, float))
                and not isinstance(value, bool))
    if kind == "bool":
        return isinstance(value, bool)
    if kind == "str":
        return isinstance(value, str)
    if kind == "int-list":
        return (isinstance(value, list) and len(value) > 0
                and all(_kind_ok(v, "int") for v in value))
    if kind == "num-list":
        return (isinstance(value, list)
                and all(_kind_ok(v, "num") for v in value))
    raise AssertionError(kind)


def _validate_shape(raw: dict) -> None:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table of sections")
    for section, table in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(
                f"unknown section [{section}]; known sections: "
                + ", ".join(sorted(_SCHEMA))
            )
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in table.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"[{section}] unknown key {key!r}; known keys: "
                    + ", ".join(sorted(_SCHEMA[section]))
                )
            kind = _SCHEMA[section][key]
            if not _kind_ok(value, kind):
                raise ConfigError(
                    f"[{section}] {key}: expected {kind}, got {value!r}"
                )


def _get(raw: dict, section: str, key: str, default):
    return raw.get(section, {}).get(key, default)


def _owned(section: str, build):
    """Build an owning type, re-raising its ValueError with field context."""
    try:
        return build()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    """Parsed, validated run description.

    raw holds the resolved key-value content (after overrides, without
    defaults materialized); it is what gets hashed and copied into
    provenance manifests.
    """

    raw: dict
    base_dir: Path
    mesh_path: Path | None
    mesh_kind: str | None
    mesh_args: dict
    smoothing_iters: int
    phi_hidden: tuple
    d_hidden: tuple
    d_max: float
    normal_eigenvalue: str
    weights: LossWeights
    tv_tangential: bool
    train: TrainConfig
    samples_path: Path | None
    synthetic: SyntheticSpec | None
    out_dir: Path
    seed: int

    def load_mesh(self) -> TriMesh:
        """The surface the run operates on, loaded or generated."""
        if self.mesh_path is not None:
            mesh, _ = read_vtk(self.mesh_path)
            return mesh
        if self.mesh_kind == "rect":
            return rect_sheet(**self.mesh_args)
        return icosphere(**self.mesh_args)

    def model_config(self, normalization: Normalization) -> ModelConfig:
        return _owned("net", lambda: ModelConfig(
            phi_spec=MLPSpec(3, self.phi_hidden, 1),
            d_spec=MLPSpec(3, self.d_hidden, 3),
            normalization=normalization,
            d_max=self.d_max,
            normal_eigenvalue=self.normal_eigenvalue,
        ))

    def resolve_samples(self) -> Path:
        """The measured-samples file, checked for existence."""
        if self.samples_path is None:
            raise ConfigError(
                "[samples] path: required by this command but not set"
            )
        if not self.samples_path.is_file():
            raise ConfigError(
                f"[samples] path: file not found: {self.samples_path}"
            )
        return self.samples_path


def parse_config(raw: dict, base_dir: Path | str = ".") -> RunConfig:
    """Validate a raw config dict and build the typed run description."""
    base_dir = Path(base_dir)
    _validate_shape(raw)

    # [mesh]: exactly one source, either a file or a parametric surface
    mesh_path = _get(raw, "mesh", "path", None)
    mesh_kind = _get(raw, "mesh", "kind", None)
    if (mesh_path is None) == (mesh_kind is None):
        raise ConfigError(
            "[mesh] give exactly one of 'path' (surface file) or 'kind' "
            "(parametric surface: rect or sphere)"
        )
    mesh_args: dict = {}
    resolved_mesh: Path | None = None
    if mesh_path is not None:
        resolved_mesh = base_dir / mesh_path
        fmt = _get(raw, "mesh", "format", None)
        if fmt is None:
            fmt = resolved_mesh.suffix.lstrip(".").lower() or "vtk"
        if fmt != "vtk":
            raise ConfigError(
                f"[mesh] format: unsupported format {fmt!r}; supported: vtk"
            )
        if not resolved_mesh.is_file():
            raise ConfigError(
                f"[mesh] path: file not found: {resolved_mesh}"
            )
    elif mesh_kind == "rect":
        mesh_args = dict(
            width=_get(raw, "mesh", "width_mm", 100.0),
            height=_get(raw, "mesh", "height_mm", 100.0),
            target_edge=_get(raw, "mesh", "target_edge_mm", 2.0),
        )
        _owned("mesh", lambda: rect_sheet(**mesh_args).n_vertices)
    elif mesh_kind == "sphere":
        mesh_args = dict(
            subdivisions=_get(raw, "mesh", "subdivisions", 3),
            radius=_get(raw, "mesh", "radius_mm", 1.0),
        )
        if mesh_args["subdivisions"] < 0:
            raise ConfigError("[mesh] subdivisions: must be nonnegative")
        if mesh_args["radius"] <= 0:
            raise ConfigError("[mesh] radius_mm: must be positive")
    else:
        raise ConfigError(
            f"[mesh] kind: unknown kind {mesh_kind!r}; supported: rect, sphere"
        )

    smoothing_iters = _get(raw, "frames", "smoothing_iters", 100)
    if smoothing_iters < 0:
        raise ConfigError("[frames] smoothing_iters: must be nonnegative")

    phi_hidden = tuple(_get(raw, "net", "phi_hidden", [20] * 7))
    d_hidden = tuple(_get(raw, "net", "d_hidden", [5] * 5))
    d_max = _get(raw, "net", "d_max", 5.0)
    normal_eigenvalue = _get(raw, "net", "normal_eigenvalue", "zero")

    weights = _owned("loss", lambda: LossWeights(
        alpha_model=_get(raw, "loss", "alpha_model", 1e4),
        alpha_weights=_get(raw, "loss", "alpha_weights", 1e-4),
        alpha_tv=_get(raw, "loss", "alpha_tv", 1e-3),
        eps=_get(raw, "loss", "eps", 1e-8),
        delta=_get(raw, "loss", "delta", 5e-2),
    ))
    tv_tangential = _get(raw, "loss", "tv_tangential", False)

    seed = _get(raw, "run", "seed", 0)
    batch_size = _get(raw, "train", "batch_size", 0)
    train = _owned("train", lambda: TrainConfig(
        adam_lr=_get(raw, "train", "adam_lr", 1e-3),
        adam_epochs=_get(raw, "train", "adam_epochs", 10_000),
        adam_beta1=_get(raw, "train", "adam_beta1", 0.9),
        adam_beta2=_get(raw, "train", "adam_beta2", 0.999),
        lbfgs_memory=_get(raw, "train", "lbfgs_memory", 10),
        lbfgs_gtol=_get(raw, "train", "lbfgs_gtol", 1e-8),
        lbfgs_max_iter=_get(raw, "train", "lbfgs_max_iter", 50_000),
        restarts=_get(raw, "train", "restarts", 4),
        master_seed=seed,
        batch_size=None if batch_size == 0 else batch_size,
        log_every=_get(raw, "train", "log_every", 0),
    ))

    samples_path = _get(raw, "samples", "path", None)
    resolved_samples = base_dir / samples_path if samples_path else None

    synthetic = None
    if "synthetic" in raw:
        vertices = _get(raw, "synthetic", "seed_vertices", [0])
        times = _get(raw, "synthetic", "seed_times", [0.0] * len(vertices))
        synthetic = _owned("synthetic", lambda: SyntheticSpec(
            fiber_angle_deg=_get(raw, "synthetic", "fiber_angle_deg", 0.0),
            v_long=_get(raw, "synthetic", "v_long", 0.6),
            v_trans=_get(raw, "synthetic", "v_trans", 0.4),
            seeds=SeedSet(vertices, times),
            n_samples=_get(raw, "synthetic", "n_samples", 200),
            noise_ms=_get(raw, "synthetic", "noise_ms", 0.0),
            rng_seed=_get(raw, "synthetic", "rng_seed", 0),
            train_fraction=_get(raw, "synthetic", "train_fraction", 1.0),
        ))

    out_dir = base_dir / _get(raw, "run", "out_dir", "runs/run")

    return RunConfig(
        raw=raw,
        base_dir=base_dir,
        mesh_path=resolved_mesh,
        mesh_kind=mesh_kind,
        mesh_args=mesh_args,
        smoothing_iters=smoothing_iters,
        phi_hidden=phi_hidden,
        d_hidden=d_hidden,
        d_max=d_max,
        normal_eigenvalue=normal_eigenvalue,
        weights=weights,
        tv_tangential=tv_tangential,
        train=train,
        samples_path=resolved_samples,
        synthetic=synthetic,
        out_dir=out_dir,
        seed=seed,
    )


def apply_overrides(raw: dict, sets: list[str] | tuple = ()) -> dict:
    """Return a copy of raw with section.key=value overrides applied.

    Values are parsed as TOML (so numbers, booleans, and arrays work);
    anything that does not parse is taken as a bare string.
    """
    out = copy.deepcopy(raw)
    for item in sets:
        key, sep, value = item.partition("=")
        parts = key.strip().split(".")
        if not sep or len(parts) != 2 or not all(parts):
            raise ConfigError(
                f"override must look like section.key=value, got {item!r}"
            )
        section, field = parts
        try:
            parsed = tomllib.loads(f"v = {value}")["v"]
        except tomllib.TOMLDecodeError:
            parsed = value.strip()
        table = out.setdefault(section, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{section}] must be a table")
        table[field] = parsed
    return out


def load_config(path, overrides: list[str] | tuple = ()) -> RunConfig:
    """Read, override, and validate a TOML config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    return parse_config(raw, base_dir=path.parent)


def config_digest(raw: dict) -> str:
    """SHA-256 of the canonical JSON form of a resolved config dict."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()
