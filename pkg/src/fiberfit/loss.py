"""Composite training loss for the inverse eikonal problem.

Four terms: mean-squared data misfit on the measured activation times,
the mean squared eikonal model residual on the collocation vertices,
an L2 penalty on all network parameters, and a Huber-smoothed total
variation penalty on the conductivity field. The weighted sum and its
exact gradient with respect to both networks are produced in a single
reverse sweep over the autodiff tape, including the Jacobian-dependent
residual and TV terms.

All terms are discretized as unweighted means over their point sets so
the weights transfer across mesh resolutions and sample counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import net as nets
from .conductivity import tensor_fields
from .net import ModelConfig, NetParams, PinnModel

__all__ = [
    "LossWeights",
    "CollocationSet",
    "LossTerms",
    "huber",
    "model_residual",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """Weights and smoothing constants of the composite loss.

    alpha_model scales the mean squared eikonal residual, alpha_weights
    the parameter L2 norm, alpha_tv the Huber total-variation term.
    eps floors the quadratic form before the square root; delta is the
    Huber knee.
    """

    alpha_model: float = 1e4
    alpha_weights: float = 1e-4
    alpha_tv: float = 1e-3
    eps: float = 1e-8
    delta: float = 5e-2

    def __post_init__(self):
        for name in ("alpha_model", "alpha_weights", "alpha_tv"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass(frozen=True)
class CollocationSet:
    """Measurement points plus residual/TV collocation points (mm, ms).

    data_x: (Nd, 3) measured positions; data_t: (Nd,) measured times;
    colloc_x: (M, 3) collocation positions (mesh vertices in practice);
    frames: (M, 3, 2) orthonormal tangent gauges at the collocation
    points.
    """

    data_x: np.ndarray
    data_t: np.ndarray
    colloc_x: np.ndarray
    frames: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data_x",
                           np.asarray(self.data_x, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "data_t",
                           np.asarray(self.data_t, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "colloc_x",
                           np.asarray(self.colloc_x, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "frames",
                           np.asarray(self.frames, dtype=np.float64))
        if len(self.data_x) != len(self.data_t):
            raise ValueError(
                f"{len(self.data_x)} data positions vs {len(self.data_t)} times"
            )
        if not np.all(np.isfinite(self.data_t)):
            raise ValueError("measured times must be finite")
        m = len(self.colloc_x)
        if m == 0:
            raise ValueError("collocation set must be nonempty")
        if self.frames.shape != (m, 3, 2):
            raise ValueError(
                f"frames must have shape ({m}, 3, 2), got {self.frames.shape}"
            )
        gram = np.einsum("nik,nil->nkl", self.frames, self.frames)
        if np.max(np.abs(gram - np.eye(2))) > 1e-6:
            raise ValueError("frames must be orthonormal")

    @property
    def n_data(self) -> int:
        return len(self.data_t)

    @property
    def n_colloc(self) -> int:
        return len(self.colloc_x)


@dataclass(frozen=True)
class LossTerms:
    """Unweighted term values plus their weighted total."""

    total: float
    data: float
    model: float
    weight: float
    tv: float

    def diagnostics_line(self, epoch: int) -> str:
        return (f"epoch={epoch} total={self.total:.10e} data={self.data:.10e} "
                f"model={self.model:.10e} weight={self.weight:.10e} "
                f"tv={self.tv:.10e}")


def huber(x, delta: float) -> float:
    """Huber-smoothed Frobenius norm: ||x||^2/(2 delta) below the knee,
    ||x|| - delta/2 above; continuous with continuous first derivative."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    nrm = float(np.linalg.norm(np.asarray(x, dtype=np.float64)))
    if nrm <= delta:
        return nrm * nrm / (2.0 * delta)
    return nrm - delta / 2.0


def model_residual(model: PinnModel, x, frames, eps: float = 1e-8) -> np.ndarray:
    """Pointwise eikonal residual sqrt(max(grad'D grad, eps)) - 1.

    x: (N, 3) positions in mm; frames: (N, 3, 2) tangent gauges.
    Plain-numpy diagnostic path; the training path evaluates the same
    quantity on the tape.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    frames = np.asarray(frames, dtype=np.float64)
    g = model.time_gradient(x)
    d = model.conductivities(x)
    tensors = tensor_fields(d, frames,
                            normal_eigenvalue=model.config.normal_eigenvalue)
    q = np.einsum("nij,ni,nj->n", tensors, g, g)
    return np.sqrt(np.maximum(q, eps)) - 1.0


def _data_term(wp, bp, colloc: CollocationSet, config: ModelConfig):
    norm = config.normalization
    xd = norm.to_net(colloc.data_x)
    out = nets.taped_forward(wp, bp, xd)
    pred = ad.mul(ad.reshape(out, (colloc.n_data,)), norm.time_scale)
    return ad.vmean(ad.square(ad.sub(pred, colloc.data_t)))


def total_loss(phi_params: NetParams, d_params: NetParams,
               colloc: CollocationSet, weights: LossWeights,
               config: ModelConfig, *, tv_tangential: bool = False,
               model_indices=None):
    """Weighted loss, its four raw terms, and flat parameter gradients.

    Returns (LossTerms, grad_phi, grad_d) with gradients laid out as in
    NetParams.to_flat. model_indices optionally restricts the residual
    and TV terms to a collocation subset (mini-batching); the data term
    always uses every measurement.
    """
    if colloc.n_data == 0:
        raise ValueError("data set is empty")
    norm = config.normalization
    xc = colloc.colloc_x
    frames = colloc.frames
    if model_indices is not None:
        idx = np.asarray(model_indices)
        if idx.size == 0:
            raise ValueError("model_indices must be nonempty")
        xc = xc[idx]
        frames = frames[idx]
    m = len(xc)
    xcn = norm.to_net(xc)
    chain_phi = norm.time_scale / norm.space_scale

    wp, bp, leaves_p = nets.params_to_vars(phi_params)
    wd, bd, leaves_d = nets.params_to_vars(d_params)

    data = _data_term(wp, bp, colloc, config)

    # physical tangential gradient components via directional seeding
    seeds = [np.ascontiguousarray(frames[:, :, 0]) * chain_phi,
             np.ascontiguousarray(frames[:, :, 1]) * chain_phi]
    if config.normal_eigenvalue == "one":
        normal = np.cross(frames[:, :, 0], frames[:, :, 1]) * chain_phi
        seeds.append(np.ascontiguousarray(normal))
    _, tcols = nets.taped_forward_jac_cols(wp, bp, xcn, seeds=seeds)
    t1 = ad.reshape(tcols[0], (m,))
    t2 = ad.reshape(tcols[1], (m,))

    # conductivity entries and their spatial Jacobian columns
    tv_seeds = None
    if tv_tangential:
        tv_seeds = [np.ascontiguousarray(frames[:, :, 0]),
                    np.ascontiguousarray(frames[:, :, 1])]
    rawd, jdcols = nets.taped_forward_jac_cols(wd, bd, xcn, seeds=tv_seeds)
    th = ad.tanh(rawd)
    dvals = ad.mul(th, config.d_max)
    d1 = ad.column(dvals, 0)
    d2 = ad.column(dvals, 1)
    d3 = ad.column(dvals, 2)

    mean = ad.mul(ad.add(d1, d3), 0.5)
    half = ad.mul(ad.sub(d1, d3), 0.5)
    s = ad.add(ad.square(half), ad.square(d2))
    c_term = ad.cosh_sqrt(s)
    s_term = ad.sinhc_sqrt(s)
    t1s = ad.square(t1)
    t2s = ad.square(t2)
    cross = ad.mul(ad.mul(d2, ad.mul(t1, t2)), 2.0)
    q = ad.mul(ad.exp(mean),
               ad.add(ad.mul(c_term, ad.add(t1s, t2s)),
                      ad.mul(s_term, ad.add(ad.mul(half, ad.sub(t1s, t2s)),
                                            cross))))
    if config.normal_eigenvalue == "one":
        q = ad.add(q, ad.square(ad.reshape(tcols[2], (m,))))
    residual = ad.sub(ad.sqrt(ad.maximum(q, weights.eps)), 1.0)
    model_term = ad.vmean(ad.square(residual))

    weight_term = ad.sum_of_squares(leaves_p + leaves_d)

    # TV on the physical-space Jacobian of d = d_max * tanh(raw)
    danti = ad.mul(ad.one_minus_square(th), config.d_max / norm.space_scale)
    sqnorm = None
    for col in jdcols:
        contrib = ad.vsum(ad.square(ad.mul(danti, col)), axis=1)
        sqnorm = contrib if sqnorm is None else ad.add(sqnorm, contrib)
    tv = ad.vmean(ad.huber_sqnorm(sqnorm, weights.delta))

    total = ad.add(ad.add(data, ad.mul(model_term, weights.alpha_model)),
                   ad.add(ad.mul(weight_term, weights.alpha_weights),
                          ad.mul(tv, weights.alpha_tv)))

    grads = ad.grad(total, leaves_p + leaves_d)
    np_ = len(leaves_p)
    grad_phi = np.concatenate([g.ravel() for g in grads[:np_]])
    grad_d = np.concatenate([g.ravel() for g in grads[np_:]])
    terms = LossTerms(
        total=float(total.value),
        data=float(data.value),
        model=float(model_term.value),
        weight=float(weight_term.value),
        tv=float(tv.value),
    )
    return terms, grad_phi, grad_d
