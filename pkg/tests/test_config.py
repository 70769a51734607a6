"""Tests for TOML run configuration parsing and overrides."""

import numpy as np
import pytest

from fiberfit.config import (
    ConfigError,
    apply_overrides,
    config_digest,
    load_config,
    parse_config,
)
from fiberfit.geometry import rect_sheet
from fiberfit.loss import LossWeights
from fiberfit.mesh import save_vtk
from fiberfit.net import Normalization

RECT = {"mesh": {"kind": "rect", "width_mm": 20.0, "height_mm": 20.0,
                 "target_edge_mm": 5.0}}


def with_rect(**sections):
    raw = {k: dict(v) for k, v in RECT.items()}
    raw.update(sections)
    return raw


# -- defaults and full parse ---------------------------------------------------


def test_minimal_config_uses_defaults():
    cfg = parse_config(RECT)
    assert cfg.weights == LossWeights()
    assert cfg.train.adam_epochs == 10_000
    assert cfg.train.restarts == 4
    assert cfg.train.batch_size is None
    assert cfg.phi_hidden == (20,) * 7
    assert cfg.d_hidden == (5,) * 5
    assert cfg.seed == 0
    assert cfg.train.master_seed == 0
    assert cfg.smoothing_iters == 100
    assert cfg.synthetic is None
    assert cfg.samples_path is None
    assert str(cfg.out_dir).endswith("runs/run")


def test_full_config_parses_into_owned_types():
    raw = with_rect(
        frames={"smoothing_iters": 7},
        net={"phi_hidden": [8, 8], "d_hidden": [4], "d_max": 2.5,
             "normal_eigenvalue": "one"},
        loss={"alpha_model": 100.0, "alpha_weights": 1e-5, "alpha_tv": 0.5,
              "eps": 1e-6, "delta": 0.1, "tv_tangential": True},
        train={"adam_lr": 0.01, "adam_epochs": 50, "restarts": 2,
               "batch_size": 16, "lbfgs_max_iter": 10},
        synthetic={"fiber_angle_deg": 30.0, "v_long": 0.6, "v_trans": 0.4,
                   "seed_vertices": [0, 3], "seed_times": [0.0, 1.0],
                   "n_samples": 12, "noise_ms": 0.5, "rng_seed": 9,
                   "train_fraction": 0.75},
        run={"out_dir": "out/exp", "seed": 5},
    )
    cfg = parse_config(raw)
    assert cfg.smoothing_iters == 7
    assert cfg.phi_hidden == (8, 8) and cfg.d_hidden == (4,)
    assert cfg.d_max == 2.5 and cfg.normal_eigenvalue == "one"
    assert cfg.weights.alpha_model == 100.0
    assert cfg.tv_tangential is True
    assert cfg.train.adam_lr == 0.01
    assert cfg.train.batch_size == 16
    assert cfg.train.master_seed == 5
    assert cfg.seed == 5
    spec = cfg.synthetic
    assert spec.n_samples == 12 and spec.train_fraction == 0.75
    np.testing.assert_array_equal(spec.seeds.vertices, [0, 3])
    np.testing.assert_array_equal(spec.seeds.times, [0.0, 1.0])

    model = cfg.model_config(Normalization.identity())
    assert model.phi_spec.hidden == (8, 8)
    assert model.d_spec.hidden == (4,)
    assert model.normal_eigenvalue == "one"


def test_load_mesh_parametric():
    cfg = parse_config(RECT)
    mesh = cfg.load_mesh()
    ref = rect_sheet(20.0, 20.0, 5.0)
    np.testing.assert_array_equal(mesh.vertices, ref.vertices)

    sphere_cfg = parse_config(
        {"mesh": {"kind": "sphere", "subdivisions": 1, "radius_mm": 2.0}})
    sphere = sphere_cfg.load_mesh()
    np.testing.assert_allclose(np.linalg.norm(sphere.vertices, axis=1), 2.0,
                               rtol=1e-12)


def test_load_mesh_from_file(tmp_path):
    mesh = rect_sheet(10.0, 10.0, 5.0)
    save_vtk(mesh, tmp_path / "surface.vtk")
    cfg = parse_config({"mesh": {"path": "surface.vtk"}}, base_dir=tmp_path)
    loaded = cfg.load_mesh()
    np.testing.assert_allclose(loaded.vertices, mesh.vertices, atol=1e-12)
    np.testing.assert_array_equal(loaded.triangles, mesh.triangles)


# -- field-level validation ----------------------------------------------------


def test_mesh_source_must_be_unambiguous(tmp_path):
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config({})
    with pytest.raises(ConfigError, match="exactly one"):
        parse_config({"mesh": {"path": "a.vtk", "kind": "rect"}},
                     base_dir=tmp_path)


def test_mesh_path_must_exist(tmp_path):
    with pytest.raises(ConfigError, match=r"\[mesh\] path: file not found"):
        parse_config({"mesh": {"path": "missing.vtk"}}, base_dir=tmp_path)


def test_mesh_format_restricted(tmp_path):
    (tmp_path / "surface.obj").write_text("o cube\n")
    with pytest.raises(ConfigError, match="unsupported format 'obj'"):
        parse_config({"mesh": {"path": "surface.obj"}}, base_dir=tmp_path)


def test_unknown_sections_and_keys_rejected():
    with pytest.raises(ConfigError, match=r"unknown section \[trian\]"):
        parse_config(with_rect(trian={"adam_lr": 0.1}))
    with pytest.raises(ConfigError, match="unknown key 'alpha'"):
        parse_config(with_rect(loss={"alpha": 1.0}))


def test_type_errors_name_the_field():
    with pytest.raises(ConfigError, match=r"\[train\] adam_epochs: expected int"):
        parse_config(with_rect(train={"adam_epochs": "many"}))
    with pytest.raises(ConfigError, match=r"\[net\] phi_hidden: expected int-list"):
        parse_config(with_rect(net={"phi_hidden": [2.5]}))
    with pytest.raises(ConfigError, match=r"\[loss\] tv_tangential: expected bool"):
        parse_config(with_rect(loss={"tv_tangential": "yes"}))


def test_owned_type_errors_carry_section_context():
    with pytest.raises(ConfigError, match=r"\[loss\] alpha_model"):
        parse_config(with_rect(loss={"alpha_model": -1.0}))
    with pytest.raises(ConfigError, match=r"\[train\] restarts"):
        parse_config(with_rect(train={"restarts": 0}))
    with pytest.raises(ConfigError, match=r"\[synthetic\] speeds"):
        parse_config(with_rect(synthetic={"v_long": -0.5}))
    with pytest.raises(ConfigError, match=r"\[mesh\]"):
        parse_config({"mesh": {"kind": "rect", "target_edge_mm": -1.0}})
    cfg = parse_config(with_rect(net={"normal_eigenvalue": "two"}))
    with pytest.raises(ConfigError, match=r"\[net\]"):
        cfg.model_config(Normalization.identity())


def test_resolve_samples(tmp_path):
    cfg = parse_config(RECT, base_dir=tmp_path)
    with pytest.raises(ConfigError, match=r"\[samples\] path: required"):
        cfg.resolve_samples()
    cfg = parse_config(with_rect(samples={"path": "data.csv"}),
                       base_dir=tmp_path)
    with pytest.raises(ConfigError, match="file not found"):
        cfg.resolve_samples()
    (tmp_path / "data.csv").write_text("x_mm,y_mm,z_mm,t_ms\n")
    assert cfg.resolve_samples() == tmp_path / "data.csv"


# -- overrides -----------------------------------------------------------------


def test_overrides_parse_toml_values():
    raw = with_rect()
    out = apply_overrides(raw, ["train.restarts=2", "loss.tv_tangential=true",
                                "net.phi_hidden=[4, 4]",
                                "mesh.kind=rect", "run.seed=7"])
    assert out["train"]["restarts"] == 2
    assert out["loss"]["tv_tangential"] is True
    assert out["net"]["phi_hidden"] == [4, 4]
    assert out["run"]["seed"] == 7
    # the input dict is never mutated
    assert "train" not in raw and "run" not in raw

    cfg = parse_config(out)
    assert cfg.train.restarts == 2
    assert cfg.train.master_seed == 7


def test_override_bare_strings_and_errors():
    out = apply_overrides({}, ["mesh.kind=rect", "samples.path=data.csv"])
    assert out["mesh"]["kind"] == "rect"
    assert out["samples"]["path"] == "data.csv"
    for bad in ["train.restarts", "restarts=2", "a.b.c=3", ".x=1"]:
        with pytest.raises(ConfigError, match="section.key=value"):
            apply_overrides({}, [bad])


# -- file loading and digests --------------------------------------------------


def test_load_config_round_trip(tmp_path):
    (tmp_path / "run.toml").write_text(
        "[mesh]\nkind = \"rect\"\nwidth_mm = 20.0\nheight_mm = 20.0\n"
        "target_edge_mm = 5.0\n\n[run]\nout_dir = \"results\"\nseed = 3\n"
    )
    cfg = load_config(tmp_path / "run.toml", overrides=["run.seed=4"])
    assert cfg.seed == 4
    assert cfg.out_dir == tmp_path / "results"
    assert cfg.base_dir == tmp_path


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[mesh\nkind=rect\n")
    with pytest.raises(ConfigError, match="invalid TOML"):
        load_config(bad)


def test_config_digest_is_canonical():
    a = {"run": {"seed": 1, "out_dir": "x"}, "mesh": {"kind": "rect"}}
    b = {"mesh": {"kind": "rect"}, "run": {"out_dir": "x", "seed": 1}}
    assert config_digest(a) == config_digest(b)
    assert len(config_digest(a)) == 64
    c = apply_overrides(a, ["run.seed=2"])
    assert config_digest(c) != config_digest(a)
