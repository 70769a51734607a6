"""Training schedule: full-batch ADAM followed by L-BFGS, multi-restart.

The loss closure maps a flat parameter vector (phi-net parameters then
d-net parameters) to (value, gradient, LossTerms). ADAM runs a fixed
number of epochs; L-BFGS (two-loop recursion, strong-Wolfe line
search) then polishes until the gradient infinity-norm drops below
tolerance, the iteration cap is reached, or the line search fails —
the reason is reported. Everything is deterministic given the master
seed; restart r re-initializes both networks from seed master + r and
the restart with the lowest final loss wins.
"""

from __future__ import annotations

import csv
import logging
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .loss import CollocationSet, LossTerms, LossWeights, total_loss
from .net import ModelConfig, NetParams, PinnModel, init_params

__all__ = [
    "TrainConfig",
    "TrainReport",
    "NumericAbort",
    "adam_run",
    "lbfgs_run",
    "fit",
    "fit_parallel",
    "write_history_csv",
    "HISTORY_COLUMNS",
]

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "total", "data", "model", "weight", "tv",
                   "grad_norm")


class NumericAbort(RuntimeError):
    """Raised when a loss or gradient evaluation goes non-finite."""

    def __init__(self, stage: str, step: int, value: float,
                 terms: LossTerms | None = None, message: str | None = None):
        self.stage = stage
        self.step = step
        self.value = value
        self.terms = terms
        if message is None:
            detail = f"; terms: {terms}" if terms is not None else ""
            message = (f"non-finite loss or gradient in {stage} at step {step} "
                       f"(value {value!r}){detail}")
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer schedule; defaults reproduce the reference setup."""

    adam_lr: float = 1e-3
    adam_epochs: int = 10_000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lbfgs_memory: int = 10
    lbfgs_gtol: float = 1e-8
    lbfgs_max_iter: int = 50_000
    restarts: int = 4
    master_seed: int = 0
    batch_size: int | None = None
    log_every: int = 0

    def __post_init__(self):
        if self.adam_lr <= 0:
            raise ValueError("adam_lr must be positive")
        if self.adam_epochs < 0:
            raise ValueError("adam_epochs must be nonnegative")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be at least 1")
        if self.lbfgs_gtol < 0 or self.lbfgs_max_iter < 0:
            raise ValueError("lbfgs tolerances must be nonnegative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be positive when set")


@dataclass
class TrainReport:
    """Outcome of fit: best model, its history, and run bookkeeping.

    history rows follow HISTORY_COLUMNS; its length equals the ADAM
    epoch count plus the number of L-BFGS iterations performed.
    """

    model: PinnModel
    history: np.ndarray
    final_loss: float
    best_restart: int
    convergence_reason: str
    wall_time_s: float
    restart_losses: list[float] = field(default_factory=list)
    aborted_restarts: dict[int, str] = field(default_factory=dict)


def _row(step: int, value: float, terms: LossTerms | None,
         grad_norm: float) -> tuple:
    if terms is None:
        return (step, value, np.nan, np.nan, np.nan, np.nan, grad_norm)
    return (step, value, terms.data, terms.model, terms.weight, terms.tv,
            grad_norm)


def _check_finite(stage: str, step: int, value: float, grad: np.ndarray,
                  terms: LossTerms | None) -> None:
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NumericAbort(stage, step, value, terms)


def adam_run(loss, theta0: np.ndarray, cfg: TrainConfig, *,
             epoch_offset: int = 0):
    """ADAM with bias correction; returns (theta, history rows)."""
    theta = np.array(theta0, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    history = []
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for epoch in range(1, cfg.adam_epochs + 1):
        value, grad, terms = loss(theta)
        _check_finite("adam", epoch, value, grad, terms)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        mhat = m / (1.0 - b1**epoch)
        vhat = v / (1.0 - b2**epoch)
        theta -= cfg.adam_lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
        history.append(_row(epoch_offset + epoch, value, terms, gnorm))
        if cfg.log_every and epoch % cfg.log_every == 0 and terms is not None:
            log.info(terms.diagnostics_line(epoch_offset + epoch))
    return theta, history


def _wolfe_line_search(loss, theta, f0, g0, direction, c1=1e-4, c2=0.9,
                       max_evals=30):
    """Strong-Wolfe search; returns (alpha, f, g, terms, n_evals) or None."""
    dphi0 = float(g0 @ direction)
    if dphi0 >= 0:
        return None

    def phi(alpha):
        value, grad, terms = loss(theta + alpha * direction)
        if not np.isfinite(value):
            value = np.inf
        return value, grad, terms

    def approx_ok(f, dphi):
        # derivative-only acceptance for steps whose true decrease is
        # below the float resolution of f; strict decrease keeps the
        # accepted sequence monotone
        return f < f0 and (2.0 * c1 - 1.0) * dphi0 >= dphi >= c2 * dphi0

    def zoom(lo, f_lo, dphi_lo, hi, f_hi, evals):
        for _ in range(max_evals):
            # quadratic interpolation using phi(lo), phi'(lo), phi(hi);
            # bisect when the f differences are at float-noise level
            denom = f_hi - f_lo - dphi_lo * (hi - lo)
            noise = 1e-13 * max(1.0, abs(f_lo))
            alpha = lo + (hi - lo) / 2.0
            if (abs(f_hi - f_lo) > noise and np.isfinite(denom)
                    and abs(denom) > 1e-300):
                cand = lo - 0.5 * dphi_lo * (hi - lo) ** 2 / denom
                span = abs(hi - lo)
                if min(lo, hi) + 0.05 * span < cand < max(lo, hi) - 0.05 * span:
                    alpha = cand
            f, g, terms = phi(alpha)
            evals += 1
            dphi = float(g @ direction)
            if f > f0 + c1 * alpha * dphi0 or f > f_lo:
                if approx_ok(f, dphi):
                    return alpha, f, g, terms, evals
                hi, f_hi = alpha, f
            else:
                if abs(dphi) <= -c2 * dphi0 or approx_ok(f, dphi):
                    return alpha, f, g, terms, evals
                if dphi * (hi - lo) >= 0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, dphi_lo = alpha, f, dphi
            if abs(hi - lo) < 1e-16 * max(1.0, abs(lo)):
                break
        return None

    alpha_prev, f_prev, dphi_prev = 0.0, f0, dphi0
    alpha = 1.0
    for i in range(1, max_evals + 1):
        f, g, terms = phi(alpha)
        dphi = float(g @ direction)
        if f > f0 + c1 * alpha * dphi0 or (i > 1 and f >= f_prev):
            if approx_ok(f, dphi):
                return alpha, f, g, terms, i
            return zoom(alpha_prev, f_prev, dphi_prev, alpha, f, i)
        if abs(dphi) <= -c2 * dphi0 or approx_ok(f, dphi):
            return alpha, f, g, terms, i
        if dphi >= 0:
            return zoom(alpha, f, dphi, alpha_prev, f_prev, i)
        alpha_prev, f_prev, dphi_prev = alpha, f, dphi
        alpha *= 2.0
    return None


def lbfgs_run(loss, theta0: np.ndarray, cfg: TrainConfig, *,
              epoch_offset: int = 0):
    """L-BFGS with strong-Wolfe line search.

    Returns (theta, history rows, reason) with reason one of
    'gradient-tolerance', 'iteration-cap', 'line-search-failure'.
    """
    theta = np.array(theta0, dtype=np.float64)
    value, grad, terms = loss(theta)
    _check_finite("lbfgs", 0, value, grad, terms)
    history = []
    if float(np.max(np.abs(grad), initial=0.0)) <= cfg.lbfgs_gtol:
        return theta, history, "gradient-tolerance"

    s_hist: deque = deque(maxlen=cfg.lbfgs_memory)
    y_hist: deque = deque(maxlen=cfg.lbfgs_memory)
    rho_hist: deque = deque(maxlen=cfg.lbfgs_memory)
    gamma = 1.0
    reason = "iteration-cap"
    for it in range(1, cfg.lbfgs_max_iter + 1):
        # two-loop recursion for the search direction
        q = grad.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist),
                             reversed(rho_hist)):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist),
                                  reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        direction = -q
        if direction @ grad >= 0.0:  # not a descent direction: reset
            direction = -grad
            s_hist.clear()
            y_hist.clear()
            rho_hist.clear()
            gamma = 1.0

        found = _wolfe_line_search(loss, theta, value, grad, direction)
        if found is None:
            reason = "line-search-failure"
            break
        alpha, new_value, new_grad, new_terms, _ = found
        _check_finite("lbfgs", it, new_value, new_grad, new_terms)
        if new_value > value:
            raise AssertionError(
                f"line search accepted an increasing step at iteration {it}"
            )
        step = alpha * direction
        ygrad = new_grad - grad
        sy = float(step @ ygrad)
        if sy > 1e-10 * float(np.linalg.norm(step) * np.linalg.norm(ygrad)):
            s_hist.append(step)
            y_hist.append(ygrad)
            rho_hist.append(1.0 / sy)
            gamma = sy / float(ygrad @ ygrad)
        theta = theta + step
        value, grad, terms = new_value, new_grad, new_terms
        gnorm = float(np.max(np.abs(grad)))
        history.append(_row(epoch_offset + it, value, terms, gnorm))
        if cfg.log_every and it % cfg.log_every == 0 and terms is not None:
            log.info(terms.diagnostics_line(epoch_offset + it))
        if gnorm <= cfg.lbfgs_gtol:
            reason = "gradient-tolerance"
            break
    return theta, history, reason


def make_loss_closure(colloc: CollocationSet, weights: LossWeights,
                      config: ModelConfig, *, tv_tangential: bool = False,
                      batch_size: int | None = None,
                      batch_rng: np.random.Generator | None = None):
    """Flat-vector loss closure over both networks.

    Layout: phi-net parameters first, then d-net parameters. When
    batch_size is set, each call draws that many collocation points
    uniformly without replacement (the data term stays full-batch).
    """
    n_phi = config.phi_spec.param_count
    n_colloc = colloc.n_colloc
    if batch_size is not None and batch_size > n_colloc:
        raise ValueError("batch_size exceeds collocation point count")

    def closure(theta: np.ndarray):
        phi = NetParams.from_flat(config.phi_spec, theta[:n_phi])
        d = NetParams.from_flat(config.d_spec, theta[n_phi:])
        indices = None
        if batch_size is not None and batch_size < n_colloc:
            indices = batch_rng.choice(n_colloc, size=batch_size,
                                       replace=False)
        terms, gp, gd = total_loss(phi, d, colloc, weights, config,
                                   tv_tangential=tv_tangential,
                                   model_indices=indices)
        return terms.total, np.concatenate([gp, gd]), terms

    return closure


def _final_loss(closure, theta) -> tuple[float, LossTerms]:
    value, _, terms = closure(theta)
    return value, terms


def fit(colloc: CollocationSet, weights: LossWeights, config: ModelConfig,
        cfg: TrainConfig, *, tv_tangential: bool = False) -> TrainReport:
    """Multi-restart ADAM + L-BFGS; the lowest final loss wins."""
    t_start = time.perf_counter()
    n_phi = config.phi_spec.param_count
    best = None
    restart_losses: list[float] = []
    aborted: dict[int, str] = {}
    for r in range(cfg.restarts):
        seed = cfg.master_seed + r
        rng = np.random.default_rng(seed)
        theta0 = np.concatenate([
            init_params(config.phi_spec, rng).to_flat(),
            init_params(config.d_spec, rng).to_flat(),
        ])
        batch_rng = np.random.default_rng(seed + 1_000_003)
        closure = make_loss_closure(colloc, weights, config,
                                    tv_tangential=tv_tangential,
                                    batch_size=cfg.batch_size,
                                    batch_rng=batch_rng)
        full_closure = closure
        if cfg.batch_size is not None:
            full_closure = make_loss_closure(colloc, weights, config,
                                             tv_tangential=tv_tangential)
        try:
            theta, adam_hist = adam_run(closure, theta0, cfg)
            theta, lbfgs_hist, reason = lbfgs_run(
                full_closure, theta, cfg, epoch_offset=cfg.adam_epochs)
        except NumericAbort as exc:
            log.warning("restart %d aborted: %s", r, exc)
            aborted[r] = str(exc)
            restart_losses.append(np.inf)
            continue
        final_value, _ = _final_loss(full_closure, theta)
        restart_losses.append(final_value)
        log.info("restart %d: final loss %.10e (%s)", r, final_value, reason)
        if best is None or final_value < best[0]:
            history = np.array(adam_hist + lbfgs_hist, dtype=np.float64)
            history = history.reshape(len(adam_hist) + len(lbfgs_hist),
                                      len(HISTORY_COLUMNS))
            best = (final_value, r, theta.copy(), history, reason)
    if best is None:
        raise NumericAbort(
            "fit", cfg.restarts, np.nan,
            message="all restarts aborted: " + "; ".join(
                f"restart {k}: {v}" for k, v in sorted(aborted.items())),
        )
    final_value, r_best, theta, history, reason = best
    model = PinnModel(
        config=config,
        phi_params=NetParams.from_flat(config.phi_spec, theta[:n_phi]),
        d_params=NetParams.from_flat(config.d_spec, theta[n_phi:]),
    )
    return TrainReport(
        model=model,
        history=history,
        final_loss=final_value,
        best_restart=r_best,
        convergence_reason=reason,
        wall_time_s=time.perf_counter() - t_start,
        restart_losses=restart_losses,
        aborted_restarts=aborted,
    )


def _restart_worker(args):
    """One restart in a worker process; exceptions travel back as strings."""
    colloc, weights, config, cfg, tv_tangential, r = args
    sub = replace(cfg, restarts=1, master_seed=cfg.master_seed + r)
    try:
        report = fit(colloc, weights, config, sub,
                     tv_tangential=tv_tangential)
    except NumericAbort as exc:
        return r, None, str(exc)
    return r, report, None


def fit_parallel(colloc: CollocationSet, weights: LossWeights,
                 config: ModelConfig, cfg: TrainConfig, *,
                 tv_tangential: bool = False, jobs: int = 1) -> TrainReport:
    """fit with restarts spread over processes.

    Restart r trains with master seed ``cfg.master_seed + r`` exactly as
    in the sequential loop, so the winning model is bit-identical to a
    sequential run regardless of jobs; ties keep the lowest restart
    index. jobs=1 simply calls fit.
    """
    if jobs < 1:
        raise ValueError("jobs must be at least 1")
    if jobs == 1:
        return fit(colloc, weights, config, cfg, tv_tangential=tv_tangential)
    t_start = time.perf_counter()
    tasks = [(colloc, weights, config, cfg, tv_tangential, r)
             for r in range(cfg.restarts)]
    with ProcessPoolExecutor(max_workers=min(jobs, cfg.restarts)) as pool:
        results = list(pool.map(_restart_worker, tasks))

    restart_losses: list[float] = []
    aborted: dict[int, str] = {}
    best: TrainReport | None = None
    best_r = -1
    for r, report, error in results:
        if report is None:
            log.warning("restart %d aborted: %s", r, error)
            aborted[r] = error
            restart_losses.append(np.inf)
            continue
        restart_losses.append(report.final_loss)
        log.info("restart %d: final loss %.10e (%s)", r, report.final_loss,
                 report.convergence_reason)
        if best is None or report.final_loss < best.final_loss:
            best, best_r = report, r
    if best is None:
        raise NumericAbort(
            "fit", cfg.restarts, np.nan,
            message="all restarts aborted: " + "; ".join(
                f"restart {k}: {v}" for k, v in sorted(aborted.items())),
        )
    return TrainReport(
        model=best.model,
        history=best.history,
        final_loss=best.final_loss,
        best_restart=best_r,
        convergence_reason=best.convergence_reason,
        wall_time_s=time.perf_counter() - t_start,
        restart_losses=restart_losses,
        aborted_restarts=aborted,
    )


def write_history_csv(path, history: np.ndarray) -> None:
    """History rows as CSV with the HISTORY_COLUMNS header."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in np.atleast_2d(np.asarray(history)):
            if len(row):
                writer.writerow([int(row[0])] + [repr(float(v))
                                                 for v in row[1:]])
