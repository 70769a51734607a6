"""fiberfit: anisotropic conduction velocity and fiber recovery from activation maps.

The package recovers per-vertex conduction tensors and fiber directions
on a triangulated surface from sparse activation-time measurements by
training two small networks under a weakly enforced anisotropic eikonal
constraint, and ships a forward eikonal solver for generating verifiable
synthetic data. Typical entry points:

- ``AnisotropicEikonalRegressor`` — scikit-learn style fit/predict.
- ``generate_synthetic`` / ``solve`` — forward problem and datasets.
- ``fit`` / ``evaluate`` — the underlying training and scoring calls.
- ``fiberfit`` console script — config-driven runs (see ``cli``).
"""

__version__ = "0.1.0"

from .conductivity import (
    assemble_tensor,
    expm2,
    fiber_direction,
    fiber_fields,
    log_tensor_from_speeds,
    speed_along,
    speed_fields,
    tensor_fields,
)
from .config import ConfigError, RunConfig, load_config
from .eikonal import (
    SeedSet,
    analytic_planar,
    constant_metrics,
    metrics_from_tensors,
    solve,
    triangle_metrics,
)
from .estimator import AnisotropicEikonalRegressor
from .experiment import (
    ActivationSample,
    EvaluationReport,
    GroundTruth,
    SyntheticSpec,
    evaluate,
    export_results,
    fiber_angle_error,
    generate_synthetic,
    load_samples,
    rmse,
    save_samples,
    split_samples,
)
from .frames import FrameField, build_frames
from .geometry import icosphere, rect_sheet
from .loss import CollocationSet, LossWeights, model_residual, total_loss
from .mesh import SurfacePoint, TriMesh, read_vtk, save_vtk
from .net import (
    MLPSpec,
    ModelConfig,
    Normalization,
    PinnModel,
    default_config,
    load_checkpoint,
    new_model,
    save_checkpoint,
)
from .train import (
    NumericAbort,
    TrainConfig,
    TrainReport,
    fit,
    fit_parallel,
    write_history_csv,
)

__all__ = [
    "__version__",
    # surfaces
    "TriMesh", "SurfacePoint", "read_vtk", "save_vtk",
    "rect_sheet", "icosphere",
    "FrameField", "build_frames",
    # tensors
    "expm2", "assemble_tensor", "fiber_direction", "tensor_fields",
    "fiber_fields", "speed_along", "speed_fields", "log_tensor_from_speeds",
    # networks and training
    "MLPSpec", "ModelConfig", "Normalization", "PinnModel",
    "default_config", "new_model", "save_checkpoint", "load_checkpoint",
    "LossWeights", "CollocationSet", "total_loss", "model_residual",
    "TrainConfig", "TrainReport", "NumericAbort", "fit", "fit_parallel",
    "write_history_csv",
    # forward solver
    "SeedSet", "solve", "triangle_metrics", "constant_metrics",
    "metrics_from_tensors", "analytic_planar",
    # experiments
    "ActivationSample", "SyntheticSpec", "GroundTruth", "EvaluationReport",
    "generate_synthetic", "split_samples", "evaluate", "rmse",
    "fiber_angle_error", "export_results", "save_samples", "load_samples",
    # high-level interfaces
    "AnisotropicEikonalRegressor",
    "RunConfig", "ConfigError", "load_config",
]
