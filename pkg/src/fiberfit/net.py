"""Fully connected tanh networks and the trained model bundle.

Two small MLPs are trained jointly: ``phi`` maps a surface position to
an activation time and ``d`` maps a position to the three independent
entries of a symmetric 2x2 log-conductivity matrix. Both consume
normalized coordinates; the normalization (affine input map plus an
output time scale for ``phi``) is part of the model and is stored in
checkpoints.

Plain numpy forward/Jacobian paths are used for prediction; the taped
variants in terms of :mod:`fiberfit.autodiff` Vars are used during
training where parameter gradients are needed.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad

__all__ = [
    "MLPSpec",
    "NetParams",
    "Normalization",
    "ModelConfig",
    "PinnModel",
    "init_params",
    "forward",
    "input_gradient",
    "taped_forward",
    "taped_forward_jac",
    "taped_forward_jac_cols",
    "params_to_vars",
    "param_gradient",
    "save_checkpoint",
    "load_checkpoint",
]

_CKPT_MAGIC = b"FIBERFIT-CKPT v1\n"


@dataclass(frozen=True)
class MLPSpec:
    """Architecture of one fully connected network."""

    n_in: int
    hidden: tuple[int, ...]
    n_out: int
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.n_in < 1 or self.n_out < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.n_in, *self.hidden, self.n_out)

    @property
    def param_count(self) -> int:
        w = self.layer_widths
        return sum((w[i] + 1) * w[i + 1] for i in range(len(w) - 1))


@dataclass
class NetParams:
    """Weights and biases, one entry per layer; W[i] has shape (out, in)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def to_flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, spec: MLPSpec, theta: np.ndarray) -> "NetParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (spec.param_count,):
            raise ValueError(
                f"expected {spec.param_count} parameters, got {theta.shape}"
            )
        widths = spec.layer_widths
        weights, biases, k = [], [], 0
        for i in range(len(widths) - 1):
            n_in, n_out = widths[i], widths[i + 1]
            weights.append(theta[k : k + n_in * n_out].reshape(n_out, n_in).copy())
            k += n_in * n_out
            biases.append(theta[k : k + n_out].copy())
            k += n_out
        return cls(weights, biases)

    def copy(self) -> "NetParams":
        return NetParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_params(spec: MLPSpec, rng: np.random.Generator) -> NetParams:
    """Xavier/Glorot uniform weights, zero biases."""
    widths = spec.layer_widths
    weights, biases = [], []
    for i in range(len(widths) - 1):
        n_in, n_out = widths[i], widths[i + 1]
        limit = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return NetParams(weights, biases)


# -- plain numpy paths ---------------------------------------------------


def forward(params: NetParams, x: np.ndarray) -> np.ndarray:
    """Raw network output for inputs of shape (N, n_in)."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = a @ w.T + b
        if i != last:
            a = ad.fast_tanh(a)
    return a


def input_gradient(params: NetParams, x: np.ndarray) -> np.ndarray:
    """Jacobian of raw outputs w.r.t. inputs, shape (N, n_out, n_in)."""
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = a.shape[0]
    jac = None  # (N, width, n_in) once an activation has been applied
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        jz = w if jac is None else np.matmul(w, jac)
        if i != last:
            a = ad.fast_tanh(z)
            jac = (1.0 - a * a)[:, :, None] * jz
        else:
            jac = jz
    if jac.ndim == 2:  # purely linear net: constant Jacobian
        jac = np.broadcast_to(jac, (n, *jac.shape)).copy()
    return jac


# -- taped paths ---------------------------------------------------------


def params_to_vars(params: NetParams):
    """Leaf Vars for every weight and bias, plus the flat leaf order."""
    w_vars = [ad.Var(w.copy()) for w in params.weights]
    b_vars = [ad.Var(b.copy()) for b in params.biases]
    leaves = []
    for w, b in zip(w_vars, b_vars):
        leaves.append(w)
        leaves.append(b)
    return w_vars, b_vars, leaves


def taped_forward(w_vars, b_vars, x: np.ndarray) -> ad.Var:
    a = ad.Var(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    last = len(w_vars) - 1
    for i, (w, b) in enumerate(zip(w_vars, b_vars)):
        a = ad.affine(a, w, b)
        if i != last:
            a = ad.tanh(a)
    return a


def taped_forward_jac(w_vars, b_vars, x: np.ndarray):
    """Taped output and input Jacobian.

    The Jacobian is propagated forward through the same tape, so a
    reverse sweep over any scalar built from it gives exact parameter
    gradients of Jacobian-dependent terms.
    """
    xv = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = ad.Var(xv)
    jac = None
    last = len(w_vars) - 1
    for i, (w, b) in enumerate(zip(w_vars, b_vars)):
        z = ad.add(ad.matmul(a, _transpose(w)), b)
        jz = w if jac is None else ad.matmul(w, jac)
        if i != last:
            a = ad.tanh(z)
            damp = ad.sub(1.0, ad.square(a))  # 1 - tanh^2
            jac = ad.mul(ad.reshape(damp, (*damp.shape, 1)), jz)
        else:
            a = z
            jac = jz
    if jac.ndim == 2:
        jac = ad.add(jac, ad.Var(np.zeros((xv.shape[0], 1, 1))))
    return a, jac


def _transpose(w: ad.Var) -> ad.Var:
    out = ad.Var(w.value.T)
    out.parents = ((w, lambda g: g.T),)
    return out


def taped_forward_jac_cols(w_vars, b_vars, x: np.ndarray, seeds=None):
    """Taped output plus directional-derivative columns.

    ``seeds`` is a list of constant (N, n_in) arrays; column k of the
    result is the Var J(x) @ seeds[k], shape (N, n_out). With
    ``seeds=None`` the coordinate directions are used, giving the full
    Jacobian one column at a time. Each column propagates as a 2-D
    matrix, so every step is a single dense matmul; this is the layout
    the training loss uses.
    """
    xv = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n_in = xv.shape[1]
    if seeds is None:
        eye = np.eye(n_in)
        seeds = [eye[k : k + 1] for k in range(n_in)]
    seed_vars = [ad.Var(np.atleast_2d(np.asarray(s, dtype=np.float64))) for s in seeds]
    a = ad.Var(xv)
    jcols = None
    last = len(w_vars) - 1
    for i, (w, b) in enumerate(zip(w_vars, b_vars)):
        z = ad.affine(a, w, b)
        if i != last:
            a = ad.tanh(z)
            damp = ad.one_minus_square(a)
            if jcols is None:
                jcols = [ad.mul(damp, ad.affine(s, w)) for s in seed_vars]
            else:
                jcols = [ad.damped_matmul(c, w, damp) for c in jcols]
        else:
            a = z
            if jcols is None:
                jcols = [ad.affine(s, w) for s in seed_vars]
            else:
                jcols = [ad.affine(c, w) for c in jcols]
    return a, jcols


def param_gradient(params: NetParams, build):
    """Value and flat gradient of ``build(w_vars, b_vars) -> scalar Var``.

    The flat layout matches :meth:`NetParams.to_flat`.
    """
    w_vars, b_vars, leaves = params_to_vars(params)
    root = build(w_vars, b_vars)
    grads = ad.grad(root, leaves)
    return float(root.value), np.concatenate([g.ravel() for g in grads])


# -- normalization and the model bundle -----------------------------------


@dataclass(frozen=True)
class Normalization:
    """Affine input map plus output time scale.

    Network inputs are ``(x - center) / space_scale``; predicted times
    are ``time_scale`` times the raw phi output. Conductivities are
    dimensionless and not rescaled.
    """

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    space_scale: float = 1.0
    time_scale: float = 1.0

    @classmethod
    def identity(cls) -> "Normalization":
        return cls()

    @classmethod
    def from_data(cls, positions: np.ndarray, times: np.ndarray | None = None) -> "Normalization":
        """Midrange/extent map so coordinates land in [-1, 1]^3."""
        pos = np.asarray(positions, dtype=np.float64)
        lo, hi = pos.min(axis=0), pos.max(axis=0)
        center = 0.5 * (lo + hi)
        space_scale = max(float(np.max(hi - lo)) / 2.0, 1e-12)
        time_scale = 1.0
        if times is not None and len(times):
            time_scale = max(float(np.max(np.abs(times))), 1.0)
        return cls(tuple(float(c) for c in center), space_scale, time_scale)

    def to_net(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (x - np.asarray(self.center)) / self.space_scale


@dataclass(frozen=True)
class ModelConfig:
    """Everything that defines the model besides its parameters."""

    phi_spec: MLPSpec
    d_spec: MLPSpec
    normalization: Normalization
    d_max: float = 5.0
    normal_eigenvalue: str = "zero"

    def __post_init__(self):
        if self.normal_eigenvalue not in ("zero", "one"):
            raise ValueError("normal_eigenvalue must be 'zero' or 'one'")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")

    def with_normalization(self, norm: Normalization) -> "ModelConfig":
        return replace(self, normalization=norm)


def default_config(d_max: float = 5.0, normal_eigenvalue: str = "zero") -> ModelConfig:
    """Architecture used throughout: phi 7x20 tanh, d 5x5 tanh."""
    return ModelConfig(
        phi_spec=MLPSpec(3, (20,) * 7, 1),
        d_spec=MLPSpec(3, (5,) * 5, 3),
        normalization=Normalization.identity(),
        d_max=d_max,
        normal_eigenvalue=normal_eigenvalue,
    )


@dataclass
class PinnModel:
    """Trained pair of networks plus normalization, ready for prediction."""

    config: ModelConfig
    phi_params: NetParams
    d_params: NetParams

    def predict_times(self, x: np.ndarray) -> np.ndarray:
        """Activation times in ms at positions in mm, shape (N,)."""
        xn = self.config.normalization.to_net(x)
        raw = forward(self.phi_params, xn)[:, 0]
        return self.config.normalization.time_scale * raw

    def time_gradient(self, x: np.ndarray) -> np.ndarray:
        """Spatial gradient of predicted time, ms/mm, shape (N, 3)."""
        norm = self.config.normalization
        xn = norm.to_net(x)
        jac = input_gradient(self.phi_params, xn)[:, 0, :]
        return jac * (norm.time_scale / norm.space_scale)

    def conductivities(self, x: np.ndarray) -> np.ndarray:
        """Clamped log-conductivity entries (d1, d2, d3), shape (N, 3)."""
        xn = self.config.normalization.to_net(x)
        raw = forward(self.d_params, xn)
        return self.config.d_max * ad.fast_tanh(raw)

    def eval_phi(self, x: np.ndarray) -> np.ndarray:
        return self.predict_times(x)

    def eval_d(self, x: np.ndarray) -> np.ndarray:
        return self.conductivities(x)


def new_model(config: ModelConfig, rng: np.random.Generator) -> PinnModel:
    return PinnModel(
        config=config,
        phi_params=init_params(config.phi_spec, rng),
        d_params=init_params(config.d_spec, rng),
    )


# -- checkpoint IO ---------------------------------------------------------


def _spec_to_json(spec: MLPSpec) -> dict:
    return {"n_in": spec.n_in, "hidden": list(spec.hidden), "n_out": spec.n_out,
            "activation": spec.activation}


def _spec_from_json(d: dict) -> MLPSpec:
    return MLPSpec(d["n_in"], tuple(d["hidden"]), d["n_out"], d["activation"])


def save_checkpoint(model: PinnModel, path, metadata: dict | None = None) -> None:
    """Write a versioned binary checkpoint plus a text manifest.

    Layout: magic line, 4-byte little-endian header length, JSON header
    (specs, normalization, d_max, normal eigenvalue convention, vector
    lengths), then the flat phi and d parameter vectors as little-endian
    float64. The manifest at ``<path>.manifest`` records provenance
    key=value pairs (seed, config hash) supplied by the caller.
    """
    cfg = model.config
    header = {
        "phi_spec": _spec_to_json(cfg.phi_spec),
        "d_spec": _spec_to_json(cfg.d_spec),
        "normalization": {
            "center": list(cfg.normalization.center),
            "space_scale": cfg.normalization.space_scale,
            "time_scale": cfg.normalization.time_scale,
        },
        "d_max": cfg.d_max,
        "normal_eigenvalue": cfg.normal_eigenvalue,
        "n_phi": cfg.phi_spec.param_count,
        "n_d": cfg.d_spec.param_count,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(model.phi_params.to_flat().astype("<f8").tobytes())
    buf.write(model.d_params.to_flat().astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    lines = [f"{k}={metadata[k]}" for k in sorted(metadata)] if metadata else []
    with open(str(path) + ".manifest", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def load_checkpoint(path) -> PinnModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(_CKPT_MAGIC):
        raise ValueError(f"{path}: not a fiberfit checkpoint")
    off = len(_CKPT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    phi_spec = _spec_from_json(header["phi_spec"])
    d_spec = _spec_from_json(header["d_spec"])
    norm = Normalization(
        tuple(header["normalization"]["center"]),
        header["normalization"]["space_scale"],
        header["normalization"]["time_scale"],
    )
    cfg = ModelConfig(phi_spec, d_spec, norm, header["d_max"], header["normal_eigenvalue"])
    n_phi, n_d = header["n_phi"], header["n_d"]
    body = np.frombuffer(data, dtype="<f8", offset=off)
    if body.size != n_phi + n_d:
        raise ValueError(f"{path}: parameter block has {body.size} values, "
                         f"expected {n_phi + n_d}")
    phi = NetParams.from_flat(phi_spec, body[:n_phi])
    d = NetParams.from_flat(d_spec, body[n_phi:])
    return PinnModel(cfg, phi, d)
