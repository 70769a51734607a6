"""Tests for the composite training loss."""

import numpy as np
import pytest

from fiberfit.loss import (
    CollocationSet,
    LossWeights,
    huber,
    model_residual,
    total_loss,
)
from fiberfit.net import (
    MLPSpec,
    ModelConfig,
    NetParams,
    Normalization,
    PinnModel,
    forward,
    init_params,
    input_gradient,
)


def flat_frames(m):
    P = np.zeros((m, 3, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    return P


def random_frames(m, rng):
    P = np.empty((m, 3, 2))
    for i in range(m):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        P[i] = q[:, :2]
    return P


def small_config(norm=None, d_max=5.0, normal_eigenvalue="zero"):
    return ModelConfig(
        phi_spec=MLPSpec(3, (4, 4), 1),
        d_spec=MLPSpec(3, (4,), 3),
        normalization=norm or Normalization.identity(),
        d_max=d_max,
        normal_eigenvalue=normal_eigenvalue,
    )


def random_problem(rng, n_data=5, n_colloc=10, norm=None, frames=None,
                   d_max=5.0, normal_eigenvalue="zero"):
    config = small_config(norm, d_max, normal_eigenvalue)
    phi = init_params(config.phi_spec, rng)
    d = init_params(config.d_spec, rng)
    colloc = CollocationSet(
        data_x=rng.uniform(-1.0, 1.0, size=(n_data, 3)),
        data_t=rng.uniform(0.0, 2.0, size=n_data),
        colloc_x=rng.uniform(-1.0, 1.0, size=(n_colloc, 3)),
        frames=frames if frames is not None else random_frames(n_colloc, rng),
    )
    return phi, d, colloc, config


def reference_total_loss(phi_params, d_params, colloc, weights, config,
                         tv_tangential=False, model_indices=None):
    """Independent plain-numpy evaluation of every term."""
    model = PinnModel(config, phi_params, d_params)
    pred = model.predict_times(colloc.data_x)
    data = float(np.mean((pred - colloc.data_t) ** 2))

    xc, P = colloc.colloc_x, colloc.frames
    if model_indices is not None:
        xc, P = xc[model_indices], P[model_indices]
    res = model_residual(model, xc, P, weights.eps)
    model_term = float(np.mean(res**2))

    weight_term = float(np.sum(phi_params.to_flat() ** 2)
                        + np.sum(d_params.to_flat() ** 2))

    norm = config.normalization
    xn = norm.to_net(xc)
    raw = forward(d_params, xn)
    th = np.tanh(raw)
    jac = input_gradient(d_params, xn)
    jac_phys = (config.d_max / norm.space_scale) * (1.0 - th**2)[:, :, None] * jac
    if tv_tangential:
        jac_phys = np.einsum("nij,njk->nik", jac_phys, P)
    tv = float(np.mean([huber(j, weights.delta) for j in jac_phys]))

    total = (data + weights.alpha_model * model_term
             + weights.alpha_weights * weight_term + weights.alpha_tv * tv)
    return total, data, model_term, weight_term, tv


# -- weights and collocation validation ------------------------------------


def test_negative_weight_rejected():
    for kw in ("alpha_model", "alpha_weights", "alpha_tv"):
        with pytest.raises(ValueError, match=kw):
            LossWeights(**{kw: -1.0})


def test_nonpositive_eps_delta_rejected():
    with pytest.raises(ValueError, match="eps"):
        LossWeights(eps=0.0)
    with pytest.raises(ValueError, match="delta"):
        LossWeights(delta=0.0)


def test_collocation_length_mismatch():
    with pytest.raises(ValueError, match="positions vs"):
        CollocationSet(np.zeros((3, 3)), np.zeros(2), np.zeros((1, 3)),
                       flat_frames(1))


def test_collocation_requires_orthonormal_frames():
    bad = flat_frames(2)
    bad[1, 0, 0] = 2.0
    with pytest.raises(ValueError, match="orthonormal"):
        CollocationSet(np.zeros((1, 3)), np.zeros(1), np.zeros((2, 3)), bad)


def test_collocation_requires_points():
    with pytest.raises(ValueError, match="nonempty"):
        CollocationSet(np.zeros((1, 3)), np.zeros(1), np.zeros((0, 3)),
                       np.zeros((0, 3, 2)))


def test_collocation_rejects_nonfinite_times():
    with pytest.raises(ValueError, match="finite"):
        CollocationSet(np.zeros((1, 3)), [np.nan], np.zeros((1, 3)),
                       flat_frames(1))


# -- huber ------------------------------------------------------------------


def test_huber_zero():
    assert huber(np.zeros((3, 3)), 0.05) == 0.0


def test_huber_knee_continuity():
    delta = 0.05
    x = np.array([delta, 0.0, 0.0])
    assert huber(x, delta) == pytest.approx(delta / 2.0, rel=1e-15)
    below = huber(x * (1 - 1e-9), delta)
    above = huber(x * (1 + 1e-9), delta)
    assert abs(above - below) < 1e-9


def test_huber_unit_norm_value():
    assert huber(np.array([1.0, 0.0]), 0.05) == pytest.approx(0.975, rel=1e-15)


def test_huber_c1_at_knee():
    # directional derivative along the ray through the knee: both
    # branches give d/ds huber(s*u) = 1 at s = delta
    delta = 0.05
    u = np.array([0.6, 0.8, 0.0])
    h = 1e-7
    left = (huber(delta * u, delta) - huber((delta - h) * u, delta)) / h
    right = (huber((delta + h) * u, delta) - huber(delta * u, delta)) / h
    assert left == pytest.approx(1.0, abs=1e-5)
    assert right == pytest.approx(1.0, abs=1e-5)


def test_huber_requires_positive_delta():
    with pytest.raises(ValueError, match="delta"):
        huber(np.ones(2), 0.0)


# -- model_residual ---------------------------------------------------------


def linear_phi_model(w_row, d_weights_zero=True):
    config = ModelConfig(
        phi_spec=MLPSpec(3, (), 1),
        d_spec=MLPSpec(3, (), 3),
        normalization=Normalization.identity(),
    )
    phi = NetParams([np.array([w_row], dtype=np.float64)], [np.zeros(1)])
    d = NetParams([np.zeros((3, 3))], [np.zeros(3)])
    return PinnModel(config, phi, d)


def test_model_residual_unit_speed():
    model = linear_phi_model([1.0, 0.0, 0.0])
    r = model_residual(model, np.zeros((1, 3)), flat_frames(1))
    assert r[0] == pytest.approx(0.0, abs=1e-14)


def test_model_residual_double_gradient():
    model = linear_phi_model([2.0, 0.0, 0.0])
    r = model_residual(model, np.zeros((1, 3)), flat_frames(1))
    assert r[0] == pytest.approx(1.0, rel=1e-14)


def test_model_residual_floor():
    model = linear_phi_model([0.0, 0.0, 0.0])
    r = model_residual(model, np.zeros((1, 3)), flat_frames(1), eps=1e-8)
    assert r[0] == pytest.approx(np.sqrt(1e-8) - 1.0, rel=1e-12)


def test_model_residual_requires_positive_eps():
    model = linear_phi_model([1.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="eps"):
        model_residual(model, np.zeros((1, 3)), flat_frames(1), eps=0.0)


# -- total_loss values ------------------------------------------------------


def test_total_loss_zero_parameters_example():
    rng = np.random.default_rng(0)
    phi, d, colloc, config = random_problem(rng, n_data=1, n_colloc=1)
    for p in (phi, d):
        for arr in p.weights + p.biases:
            arr[...] = 0.0
    colloc = CollocationSet(colloc.data_x, [3.0], colloc.colloc_x, colloc.frames)
    weights = LossWeights(alpha_model=1.0, alpha_weights=0.0, alpha_tv=0.0,
                          eps=1e-8)
    terms, gp, gd = total_loss(phi, d, colloc, weights, config)
    expected = 9.0 + (np.sqrt(1e-8) - 1.0) ** 2
    assert terms.total == pytest.approx(expected, rel=1e-12)
    assert terms.data == pytest.approx(9.0, rel=1e-12)


def test_total_loss_degenerate_weights_is_pure_data_misfit():
    rng = np.random.default_rng(1)
    phi, d, colloc, config = random_problem(rng)
    weights = LossWeights(alpha_model=0.0, alpha_weights=0.0, alpha_tv=0.0)
    terms, _, _ = total_loss(phi, d, colloc, weights, config)
    model = PinnModel(config, phi, d)
    expected = np.mean((model.predict_times(colloc.data_x) - colloc.data_t) ** 2)
    assert terms.total == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_terms_sum_to_total(seed):
    rng = np.random.default_rng(seed)
    phi, d, colloc, config = random_problem(rng)
    weights = LossWeights()
    terms, _, _ = total_loss(phi, d, colloc, weights, config)
    recomposed = (terms.data + weights.alpha_model * terms.model
                  + weights.alpha_weights * terms.weight
                  + weights.alpha_tv * terms.tv)
    assert terms.total == pytest.approx(recomposed, rel=1e-12)
    assert terms.total >= 0.0


@pytest.mark.parametrize("tv_tangential", [False, True])
@pytest.mark.parametrize("normal_eigenvalue", ["zero", "one"])
def test_total_loss_matches_reference(tv_tangential, normal_eigenvalue):
    rng = np.random.default_rng(7)
    norm = Normalization(center=(3.0, -2.0, 0.5), space_scale=7.0,
                         time_scale=50.0)
    phi, d, colloc, config = random_problem(
        rng, norm=norm, normal_eigenvalue=normal_eigenvalue)
    weights = LossWeights(alpha_model=10.0, alpha_weights=1e-3, alpha_tv=0.1,
                          delta=1e-3)  # small knee so both branches appear
    terms, _, _ = total_loss(phi, d, colloc, weights, config,
                             tv_tangential=tv_tangential)
    ref = reference_total_loss(phi, d, colloc, weights, config,
                               tv_tangential=tv_tangential)
    for got, want in zip(
            (terms.total, terms.data, terms.model, terms.weight, terms.tv), ref):
        assert got == pytest.approx(want, rel=1e-10, abs=1e-14)


def test_mini_batch_matches_restricted_set():
    rng = np.random.default_rng(11)
    phi, d, colloc, config = random_problem(rng, n_colloc=12)
    weights = LossWeights()
    idx = np.array([0, 3, 7, 9])
    terms_batch, gp1, gd1 = total_loss(phi, d, colloc, weights, config,
                                       model_indices=idx)
    restricted = CollocationSet(colloc.data_x, colloc.data_t,
                                colloc.colloc_x[idx], colloc.frames[idx])
    terms_full, gp2, gd2 = total_loss(phi, d, restricted, weights, config)
    assert terms_batch.model == pytest.approx(terms_full.model, rel=1e-14)
    assert terms_batch.tv == pytest.approx(terms_full.tv, rel=1e-14)
    np.testing.assert_allclose(gp1, gp2, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(gd1, gd2, rtol=1e-12, atol=1e-15)


def test_empty_data_rejected():
    rng = np.random.default_rng(2)
    phi, d, colloc, config = random_problem(rng)
    empty = CollocationSet(np.zeros((0, 3)), np.zeros(0), colloc.colloc_x,
                           colloc.frames)
    with pytest.raises(ValueError, match="empty"):
        total_loss(phi, d, empty, LossWeights(), config)


def test_empty_mini_batch_rejected():
    rng = np.random.default_rng(2)
    phi, d, colloc, config = random_problem(rng)
    with pytest.raises(ValueError, match="model_indices"):
        total_loss(phi, d, colloc, LossWeights(), config, model_indices=[])


def test_diagnostics_line_is_machine_readable():
    rng = np.random.default_rng(3)
    phi, d, colloc, config = random_problem(rng)
    terms, _, _ = total_loss(phi, d, colloc, LossWeights(), config)
    line = terms.diagnostics_line(42)
    fields = dict(part.split("=") for part in line.split())
    assert fields["epoch"] == "42"
    assert float(fields["total"]) == pytest.approx(terms.total, rel=1e-9)
    for key in ("data", "model", "weight", "tv"):
        assert key in fields


# -- gradient correctness ---------------------------------------------------


def fd_total(phi, d, colloc, weights, config, **kw):
    terms, gp, gd = total_loss(phi, d, colloc, weights, config, **kw)
    return terms.total, gp, gd


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    phi, d, colloc, config = random_problem(rng)
    weights = LossWeights(alpha_model=2.0, alpha_weights=1e-3, alpha_tv=0.05,
                          delta=5e-2)
    _, gp, gd = fd_total(phi, d, colloc, weights, config)

    step = 1e-6

    def check(params, grad, rebuild):
        flat = params.to_flat()
        for k in range(len(flat)):
            bump = np.zeros_like(flat)
            bump[k] = step
            plus = rebuild(flat + bump)
            minus = rebuild(flat - bump)
            tp, _, _ = fd_total(*plus, colloc, weights, config)
            tm, _, _ = fd_total(*minus, colloc, weights, config)
            fd = (tp - tm) / (2 * step)
            if abs(grad[k]) > 1e-8 or abs(fd) > 1e-8:
                assert grad[k] == pytest.approx(fd, rel=1e-4, abs=1e-8)

    check(phi, gp,
          lambda f: (NetParams.from_flat(config.phi_spec, f), d))
    check(d, gd,
          lambda f: (phi, NetParams.from_flat(config.d_spec, f)))


def test_gradient_with_normal_eigenvalue_one():
    rng = np.random.default_rng(55)
    phi, d, colloc, config = random_problem(rng, n_data=3, n_colloc=4,
                                            normal_eigenvalue="one")
    weights = LossWeights(alpha_model=1.0, alpha_weights=0.0, alpha_tv=0.0)
    _, gp, _ = fd_total(phi, d, colloc, weights, config)
    step = 1e-6
    flat = phi.to_flat()
    rng2 = np.random.default_rng(0)
    for k in rng2.choice(len(flat), size=10, replace=False):
        bump = np.zeros_like(flat)
        bump[k] = step
        tp, _, _ = fd_total(NetParams.from_flat(config.phi_spec, flat + bump),
                            d, colloc, weights, config)
        tm, _, _ = fd_total(NetParams.from_flat(config.phi_spec, flat - bump),
                            d, colloc, weights, config)
        fd = (tp - tm) / (2 * step)
        if abs(gp[k]) > 1e-8 or abs(fd) > 1e-8:
            assert gp[k] == pytest.approx(fd, rel=1e-4, abs=1e-8)
