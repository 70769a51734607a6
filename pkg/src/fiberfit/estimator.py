"""Scikit-learn style front end for the whole recovery pipeline.

``AnisotropicEikonalRegressor.fit`` takes measurement positions (mm)
and activation times (ms) on a fixed triangulated surface, trains the
activation-time and conductivity networks under the eikonal-residual
penalty, and exposes the recovered per-vertex conduction tensors,
fiber directions, and speeds as fitted attributes. ``predict`` returns
activation times at arbitrary positions.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .conductivity import fiber_fields, speed_fields, tensor_fields
from .frames import build_frames
from .loss import CollocationSet, LossWeights
from .mesh import TriMesh
from .net import MLPSpec, ModelConfig, Normalization
from .train import TrainConfig
from .train import fit as train_fit

__all__ = ["AnisotropicEikonalRegressor"]


class AnisotropicEikonalRegressor(RegressorMixin, BaseEstimator):
    """Recover conduction tensors and fibers from sparse activation times.

    Parameters mirror the building blocks they configure: the network
    architectures, the composite loss weights, and the two-stage
    optimizer schedule. The surface mesh is a constructor parameter
    because it defines the domain (collocation points and tangent
    frames), not a single fit's data.

    Parameters
    ----------
    mesh : TriMesh
        Triangulated surface the measurements live on; its vertices
        serve as collocation points for the eikonal residual.
    phi_hidden, d_hidden : tuple of int
        Hidden-layer widths of the activation-time and conductivity
        networks.
    d_max : float
        Symmetric clamp on the log-conductivity entries.
    normal_eigenvalue : {"zero", "one"}
        Eigenvalue of the recovered tensors along the surface normal.
    alpha_model, alpha_weights, alpha_tv : float
        Weights of the eikonal-residual, parameter-L2, and
        total-variation loss terms.
    eps : float
        Floor inside the residual square root.
    delta : float
        Huber knee of the total-variation term.
    tv_tangential : bool
        Restrict the total-variation term to tangential derivatives.
    adam_lr, adam_epochs : float, int
        First-stage optimizer settings.
    lbfgs_memory, lbfgs_gtol, lbfgs_max_iter : int, float, int
        Second-stage optimizer settings.
    restarts : int
        Independent re-initializations; the lowest final loss wins.
    batch_size : int or None
        Collocation mini-batch size for the first stage; None trains
        full-batch.
    smoothing_iters : int
        Tangent-frame smoothing iterations.
    log_every : int
        Emit a diagnostics log line every this many steps; 0 disables.
    random_state : int or None
        Master seed; restart r uses seed ``random_state + r``.

    Attributes
    ----------
    model_ : PinnModel
        The trained network pair with its normalization.
    report_ : TrainReport
        Optimization history and restart bookkeeping.
    frames_ : FrameField
        Tangent frames used for the residual and the fitted fields.
    activation_times_ : ndarray of shape (V,)
        Predicted activation time at every mesh vertex, ms.
    conductivity_ : ndarray of shape (V, 3)
        Clamped log-conductivity entries (d1, d2, d3) per vertex.
    tensors_ : ndarray of shape (V, 3, 3)
        Recovered conduction tensors per vertex.
    fiber_directions_ : ndarray of shape (V, 3)
        Unit fiber directions (axial; sign is a gauge choice).
    isotropic_mask_ : ndarray of shape (V,), bool
        True where the tangential tensor is isotropic and the fiber
        direction is therefore arbitrary.
    v_long_, v_trans_ : ndarray of shape (V,)
        Longitudinal and transverse conduction speeds, mm/ms.
    n_iter_ : int
        Total optimizer steps of the winning restart.
    """

    def __init__(self, mesh: TriMesh | None = None, *,
                 phi_hidden: tuple[int, ...] = (20,) * 7,
                 d_hidden: tuple[int, ...] = (5,) * 5,
                 d_max: float = 5.0,
                 normal_eigenvalue: str = "zero",
                 alpha_model: float = 1e4,
                 alpha_weights: float = 1e-4,
                 alpha_tv: float = 1e-3,
                 eps: float = 1e-8,
                 delta: float = 5e-2,
                 tv_tangential: bool = False,
                 adam_lr: float = 1e-3,
                 adam_epochs: int = 10_000,
                 lbfgs_memory: int = 10,
                 lbfgs_gtol: float = 1e-8,
                 lbfgs_max_iter: int = 50_000,
                 restarts: int = 4,
                 batch_size: int | None = None,
                 smoothing_iters: int = 100,
                 log_every: int = 0,
                 random_state: int | None = 0):
        self.mesh = mesh
        self.phi_hidden = phi_hidden
        self.d_hidden = d_hidden
        self.d_max = d_max
        self.normal_eigenvalue = normal_eigenvalue
        self.alpha_model = alpha_model
        self.alpha_weights = alpha_weights
        self.alpha_tv = alpha_tv
        self.eps = eps
        self.delta = delta
        self.tv_tangential = tv_tangential
        self.adam_lr = adam_lr
        self.adam_epochs = adam_epochs
        self.lbfgs_memory = lbfgs_memory
        self.lbfgs_gtol = lbfgs_gtol
        self.lbfgs_max_iter = lbfgs_max_iter
        self.restarts = restarts
        self.batch_size = batch_size
        self.smoothing_iters = smoothing_iters
        self.log_every = log_every
        self.random_state = random_state

    # -- assembly helpers (validated lazily, in fit) -----------------------

    def _model_config(self, norm: Normalization) -> ModelConfig:
        return ModelConfig(
            phi_spec=MLPSpec(3, tuple(self.phi_hidden), 1),
            d_spec=MLPSpec(3, tuple(self.d_hidden), 3),
            normalization=norm,
            d_max=self.d_max,
            normal_eigenvalue=self.normal_eigenvalue,
        )

    def _loss_weights(self) -> LossWeights:
        return LossWeights(
            alpha_model=self.alpha_model,
            alpha_weights=self.alpha_weights,
            alpha_tv=self.alpha_tv,
            eps=self.eps,
            delta=self.delta,
        )

    def _train_config(self) -> TrainConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return TrainConfig(
            adam_lr=self.adam_lr,
            adam_epochs=self.adam_epochs,
            lbfgs_memory=self.lbfgs_memory,
            lbfgs_gtol=self.lbfgs_gtol,
            lbfgs_max_iter=self.lbfgs_max_iter,
            restarts=self.restarts,
            master_seed=seed,
            batch_size=self.batch_size,
            log_every=self.log_every,
        )

    def _validate_positions(self, X) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 3:
            raise ValueError(
                f"positions must have 3 columns (x, y, z in mm), "
                f"got {X.shape[1]}"
            )
        return X

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y):
        """Train on measurement positions X (N, 3) mm and times y (N,) ms."""
        if self.mesh is None:
            raise ValueError(
                "AnisotropicEikonalRegressor needs a mesh; pass a TriMesh "
                "to the constructor"
            )
        if not isinstance(self.mesh, TriMesh):
            raise TypeError(
                f"mesh must be a TriMesh, got {type(self.mesh).__name__}"
            )
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        if X.shape[1] != 3:
            raise ValueError(
                f"positions must have 3 columns (x, y, z in mm), "
                f"got {X.shape[1]}"
            )
        self.n_features_in_ = 3

        frames = build_frames(self.mesh, smoothing_iters=self.smoothing_iters)
        norm = Normalization.from_data(self.mesh.vertices, y)
        colloc = CollocationSet(
            data_x=X,
            data_t=y,
            colloc_x=self.mesh.vertices,
            frames=frames.P,
        )
        report = train_fit(
            colloc,
            self._loss_weights(),
            self._model_config(norm),
            self._train_config(),
            tv_tangential=self.tv_tangential,
        )

        self.model_ = report.model
        self.report_ = report
        self.frames_ = frames
        verts = self.mesh.vertices
        self.activation_times_ = self.model_.predict_times(verts)
        d = self.model_.conductivities(verts)
        self.conductivity_ = d
        self.tensors_ = tensor_fields(
            d, frames.P, normal_eigenvalue=self.normal_eigenvalue)
        self.fiber_directions_, self.isotropic_mask_ = fiber_fields(d, frames.P)
        self.v_long_, self.v_trans_ = speed_fields(d)
        self.n_iter_ = len(report.history)
        return self

    def predict(self, X) -> np.ndarray:
        """Activation times (ms) at positions X (N, 3) mm."""
        check_is_fitted(self, "model_")
        return self.model_.predict_times(self._validate_positions(X))

    def conduction_fields(self, X):
        """Tensors, fiber directions, and speeds at arbitrary positions.

        Frames at off-vertex positions are not defined by the fitted
        frame field, so the tensors are assembled in the frames of the
        nearest mesh vertices. Returns a dict with keys ``tensors``
        (N, 3, 3), ``fibers`` (N, 3), ``isotropic`` (N,), ``v_long``
        and ``v_trans`` (N,).
        """
        check_is_fitted(self, "model_")
        X = self._validate_positions(X)
        d = self.model_.conductivities(X)
        nearest = np.argmin(
            np.linalg.norm(self.mesh.vertices[None, :, :] - X[:, None, :],
                           axis=2), axis=1)
        P = self.frames_.P[nearest]
        tensors = tensor_fields(d, P,
                                normal_eigenvalue=self.normal_eigenvalue)
        fibers, isotropic = fiber_fields(d, P)
        v_long, v_trans = speed_fields(d)
        return {"tensors": tensors, "fibers": fibers, "isotropic": isotropic,
                "v_long": v_long, "v_trans": v_trans}
