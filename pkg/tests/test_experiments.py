"""Tests for experiment configuration, study pipelines and serialisation.

Pipeline tests run on a deliberately tiny concentric-circles setup (16
boundary nodes, 2 time slices, millimetre-scale field variance) so every
study completes in well under a second while exercising the full path:
context building, KL construction, node evaluation, moment reduction and
file output.
"""

import dataclasses
import json

import numpy as np
import pytest

import ecguq.experiments as ex
from ecguq import anatomy, geometry
from ecguq.errors import ConfigError, UniformityError
from ecguq.inverse import DEFAULT_LAMBDA, RegularisationSpec
from ecguq.quadrature import halton


def tiny_config(**overrides):
    base = dict(
        geometry="concentric",
        n_sigma=16,
        n_gamma=16,
        n_slices=2,
        correlation_length=2.0,
        field_variance=1e-4,
        kl_tolerance=1e-3,
        qmc_count=8,
        seed=11,
        regularisations=(RegularisationSpec("tik0", 1e-6),),
    )
    base.update(overrides)
    return ex.ExperimentConfig(**base)


def _square_norm(x):
    return np.atleast_1d(x) ** 2


class TestExperimentConfig:
    def test_desk_and_full_defaults_are_valid(self):
        desk = ex.desk_config()
        full = ex.full_config()
        assert desk.n_sigma == 100 and full.n_sigma == 500
        assert {r.kind for r in desk.regularisations} == set(DEFAULT_LAMBDA)

    def test_validation_rejections(self):
        cases = [
            dict(geometry="sphere"),
            dict(geometry="contours"),
            dict(n_sigma=15),
            dict(n_sigma=2),
            dict(n_slices=0),
            dict(time_slice=5, n_slices=3),
            dict(field_variance=0.0),
            dict(correlation_length=-1.0),
            dict(quadrature="uniform"),
            dict(qmc_count=0),
            dict(sparse_level=-1.0),
            dict(noise_variance=-1e-9),
            dict(seed=-1),
            dict(lcurve_min=1.0, lcurve_max=0.1),
            dict(lcurve_count=2),
            dict(uniformity_bound=1.0),
            dict(kl_max_modes=0),
            dict(convergence_reference="other"),
        ]
        for kwargs in cases:
            with pytest.raises(ConfigError):
                ex.ExperimentConfig(**kwargs)

    def test_dict_round_trip(self):
        cfg = tiny_config(
            regularisations=(
                RegularisationSpec("tik0", 1e-6),
                RegularisationSpec("tv", 1e-5, beta=1e-4),
            )
        )
        clone = ex.ExperimentConfig.from_dict(cfg.to_dict())
        assert clone == cfg
        assert ex.config_hash(clone) == ex.config_hash(cfg)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="unknown configuration keys"):
            ex.ExperimentConfig.from_dict({"n_sigma": 16, "mesh_size": 3})
        with pytest.raises(ConfigError, match="unknown regularisation keys"):
            ex.ExperimentConfig.from_dict(
                {"regularisations": [{"kind": "tik0", "alpha": 1.0}]}
            )
        with pytest.raises(ConfigError, match="kind"):
            ex.ExperimentConfig.from_dict({"regularisations": [{"lambda": 0.1}]})

    def test_regularisation_lambda_defaults_per_kind(self):
        cfg = ex.ExperimentConfig.from_dict(
            {"regularisations": [{"kind": "hhalf"}, {"kind": "tv"}]}
        )
        assert cfg.regularisations[0].lam == DEFAULT_LAMBDA["hhalf"]
        assert cfg.regularisations[1].lam == DEFAULT_LAMBDA["tv"]

    def test_config_hash_tracks_content(self):
        a = tiny_config()
        b = tiny_config(seed=12)
        assert ex.config_hash(a) == ex.config_hash(tiny_config())
        assert ex.config_hash(a) != ex.config_hash(b)
        assert len(ex.config_hash(a)) == 64
        assert set(ex.config_hash(a)) <= set("0123456789abcdef")


class TestLoadConfig:
    def test_reads_json_document(self, tmp_path):
        path = tmp_path / "study.json"
        path.write_text(json.dumps({"n_sigma": 16, "n_gamma": 16, "geometry": "concentric"}))
        cfg = ex.load_config(path)
        assert cfg.n_sigma == 16 and cfg.geometry == "concentric"

    def test_missing_file_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            ex.load_config(tmp_path / "absent.json")

    def test_malformed_json_is_config_error(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            ex.load_config(path)


class TestResultTable:
    def test_append_and_write(self, tmp_path):
        table = ex.ResultTable()
        table.append("study", 0.0, 0.25, "value", 1.5)
        path = tmp_path / "table.csv"
        table.write_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "experiment,t_ms,s,quantity,value"
        assert lines[1] == "study,0.0,0.25,value,1.5"

    def test_non_finite_rejected(self):
        table = ex.ResultTable()
        with pytest.raises(ValueError, match="non-finite"):
            table.append("study", 0.0, 0.0, "value", np.nan)


class TestContext:
    def test_concentric_context_shapes(self):
        cfg = tiny_config()
        ctx = ex.build_context(cfg, need_kl=False)
        assert ctx.kl is None
        assert ctx.slices == [0, 1]
        assert ctx.u_true.shape == (2, cfg.n_sigma)
        assert ctx.chest_grid.n == cfg.n_gamma

    def test_time_slice_selects_one(self):
        cfg = tiny_config(time_slice=1)
        ctx = ex.build_context(cfg, need_kl=False)
        assert ctx.slices == [1]
        assert ctx.u_true.shape == (1, cfg.n_sigma)

    def test_kl_attached_when_requested(self):
        ctx = ex.build_context(tiny_config())
        assert ctx.kl is not None
        assert ctx.kl.rank >= 1
        assert ctx.kl.grid.n_slices == 2

    def test_contour_case_round_trip(self, tmp_path):
        inner, chest = anatomy.concentric_circles(3.0, 10.0)
        s = np.arange(64) / 64.0
        geometry.write_contour_csv(
            tmp_path / "chest.csv", [(0.0, chest.evaluate(s))]
        )
        geometry.write_contour_csv(
            tmp_path / "heart.csv",
            [(0.0, inner.evaluate(s)), (345.0, inner.evaluate(s))],
        )
        cfg = tiny_config(
            geometry="contours", contours_path=str(tmp_path), field_variance=1e-4
        )
        ctx = ex.build_context(cfg, need_kl=False)
        assert len(ctx.family.curves) == cfg.n_slices
        chest_pts = ctx.chest_grid.points
        assert np.allclose(np.hypot(chest_pts[:, 0], chest_pts[:, 1]), 10.0, atol=1e-6)

    def test_contour_case_missing_file(self, tmp_path):
        cfg = tiny_config()
        with pytest.raises(ConfigError, match="missing"):
            ex.load_contour_case(tmp_path, cfg)


class TestEvaluators:
    def test_forward_at_origin_matches_reference(self):
        cfg = tiny_config()
        ctx = ex.build_context(cfg)
        evaluator = ex.ForwardEvaluator(
            kl=ctx.kl,
            u_true=ctx.u_true,
            chest_grid=ctx.chest_grid,
            gamma_self=ctx.gamma_self,
            n_sigma=cfg.n_sigma,
            uniformity_bound=cfg.uniformity_bound,
        )
        from ecguq.bie import solve_forward

        value = evaluator(np.zeros(ctx.kl.rank))
        reference = np.concatenate(
            [
                solve_forward(ex.reference_operators(ctx, j), ctx.u_true[j]).chest
                for j in range(len(ctx.slices))
            ]
        )
        assert value.shape == reference.shape
        assert np.allclose(value, reference, rtol=0.0, atol=1e-10)

    def test_uniformity_violation_reports_node(self):
        cfg = tiny_config(field_variance=4.0)  # centimetre-scale shifts on a unit circle
        ctx = ex.build_context(cfg)
        evaluator = ex.ForwardEvaluator(
            kl=ctx.kl,
            u_true=ctx.u_true,
            chest_grid=ctx.chest_grid,
            gamma_self=ctx.gamma_self,
            n_sigma=cfg.n_sigma,
            uniformity_bound=cfg.uniformity_bound,
        )
        with pytest.raises(UniformityError, match="xi") as info:
            evaluator(np.ones(ctx.kl.rank))
        assert info.value.kind in ("intersection", "proximity", "stretch")

    def test_evaluate_rule_order_and_threads(self):
        rule = halton(2, 8)
        serial = ex.evaluate_rule(_square_norm, rule, threads=1)
        parallel = ex.evaluate_rule(_square_norm, rule, threads=2)
        assert serial.shape == (8, 2)
        assert np.array_equal(serial, parallel)
        assert np.array_equal(serial[3], _square_norm(rule.nodes[3]))


class TestErrorHelpers:
    def test_relative_error_scale_invariance(self, rng):
        w = rng.uniform(0.5, 1.5, 20)
        a = rng.standard_normal(20)
        b = rng.standard_normal(20)
        base = ex.relative_error(a, b, w)
        assert ex.relative_error(3.0 * a, 3.0 * b, w) == pytest.approx(base, rel=1e-12)

    def test_relative_error_zero_reference(self):
        w = np.ones(4)
        assert ex.relative_error(np.zeros(4), np.zeros(4), w) == 0.0
        assert ex.relative_error(np.ones(4), np.zeros(4), w) == pytest.approx(2.0)

    def test_default_prefix_sizes(self):
        assert ex.default_prefix_sizes(4096) == [128, 256, 512, 1024, 2048]
        assert ex.default_prefix_sizes(256) == [128]
        with pytest.raises(ConfigError):
            ex.default_prefix_sizes(255)

    def test_qmc_error_curve_contract(self, rng):
        values = rng.standard_normal((64, 3))
        w = np.ones(3)
        e1, e2 = ex.qmc_error_curve(values, w, [8, 16, 32])
        assert e1.shape == (3,) and e2.shape == (3,)
        assert np.all(e1 >= 0) and np.all(e2 >= 0)
        with pytest.raises(ValueError, match="below the reference"):
            ex.qmc_error_curve(values, w, [64])

    def test_qmc_error_curve_external_reference(self, rng):
        # an independent reference frees the longest prefix to use all rows
        from ecguq.quadrature import moments_from_samples

        values = rng.standard_normal((64, 3))
        w = np.ones(3)
        ref = moments_from_samples(
            rng.standard_normal((128, 3)), np.full(128, 1.0 / 128), "ref"
        )
        e1, e2 = ex.qmc_error_curve(values, w, [32, 64], reference=ref)
        assert e1.shape == (2,)
        full = moments_from_samples(values, np.full(64, 1.0 / 64), "all")
        assert e1[1] == pytest.approx(ex.relative_error(full.m1, ref.m1, w))
        with pytest.raises(ValueError, match="exceed"):
            ex.qmc_error_curve(values, w, [128], reference=ref)


class TestPipelines:
    def test_run_forward_outputs(self, tmp_path):
        cfg = tiny_config()
        table = ex.run_forward(cfg, out_dir=tmp_path)
        assert len(table.records) == cfg.n_slices * cfg.n_gamma
        assert (tmp_path / "chest.csv").is_file()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["config_hash"] == ex.config_hash(cfg)
        assert meta["command"] == "forward"
        header = (tmp_path / "chest.csv").read_text().splitlines()[0]
        assert header == "t_ms,s,y_value"

    def test_run_inverse_outputs(self, tmp_path):
        cfg = tiny_config(
            regularisations=(
                RegularisationSpec("tik0", 1e-6),
                RegularisationSpec("hhalf", 1e-5),
            )
        )
        results = ex.run_inverse(cfg, out_dir=tmp_path)
        assert set(results) == {"tik0", "hhalf"}
        assert (tmp_path / "inverse_tik0.csv").is_file()
        assert (tmp_path / "inverse_hhalf.csv").is_file()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["snr_db"] == pytest.approx(
            10.0 * np.log10(np.mean(ex.noisy_chest_data(ex.build_context(cfg, need_kl=False)) ** 2) / cfg.noise_variance),
            rel=1e-6,
        )
        for kind, rows in results.items():
            assert len(rows) == cfg.n_slices
            assert rows[0][2].shape == (cfg.n_sigma,)

    def test_run_inverse_requires_regularisation(self):
        with pytest.raises(ConfigError, match="regularisation"):
            ex.run_inverse(tiny_config(regularisations=()))

    def test_single_node_rule_reproduces_reference(self, tmp_path):
        # the level-0 sparse rule is the single origin node, so the study
        # must return the reference-geometry trace with zero variance
        cfg = tiny_config(quadrature="sparse", sparse_level=0.0)
        out = ex.run_forward_uq(cfg, out_dir=tmp_path)
        assert out["values"].shape[0] == 1
        assert np.allclose(out["moments"].m1, out["reference"].ravel(), atol=1e-10)
        assert np.all(out["moments"].variance == 0.0)
        for name in ("moments.csv", "reference.csv", "rule.csv", "meta.json"):
            assert (tmp_path / name).is_file()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["nodes"] == 1
        assert meta["kl_rank"] == out["context"].kl.rank

    def test_vanishing_variance_gives_flat_field(self):
        cfg = tiny_config(field_variance=1e-30, qmc_count=4)
        out = ex.run_forward_uq(cfg)
        assert np.all(out["moments"].variance <= 1e-20)

    def test_run_inverse_uq_outputs(self, tmp_path):
        cfg = tiny_config(
            regularisations=(
                RegularisationSpec("tik0", 1e-6),
                RegularisationSpec("tv", 1e-5),
            ),
            qmc_count=4,
        )
        out = ex.run_inverse_uq(cfg, out_dir=tmp_path)
        n_kinds = len(cfg.regularisations)
        assert out["values"].shape == (4, n_kinds * cfg.n_slices * cfg.n_sigma)
        assert (tmp_path / "moments_tik0.csv").is_file()
        assert (tmp_path / "moments_tv.csv").is_file()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["command"] == "uq-inverse"

    def test_single_node_inverse_uq_matches_plain_inverse(self):
        cfg = tiny_config(quadrature="sparse", sparse_level=0.0)
        uq = ex.run_inverse_uq(cfg)
        plain = ex.run_inverse(cfg)
        stacked = np.concatenate([u for _, _, u in plain["tik0"]])
        assert np.allclose(uq["moments"].m1, stacked, atol=1e-10)

    def test_forward_uq_determinism_across_threads(self, tmp_path):
        cfg = tiny_config(qmc_count=4)
        dir1 = tmp_path / "t1"
        dir2 = tmp_path / "t2"
        ex.run_forward_uq(cfg, out_dir=dir1, threads=1)
        ex.run_forward_uq(cfg, out_dir=dir2, threads=2)
        for name in ("moments.csv", "reference.csv", "rule.csv"):
            assert (dir1 / name).read_bytes() == (dir2 / name).read_bytes()

    def test_convergence_study_halton(self, tmp_path):
        cfg = tiny_config(qmc_count=256)
        out = ex.convergence_study(cfg, out_dir=tmp_path)
        assert set(out["tables"]) == {"forward", "tik0"}
        tab = out["tables"]["forward"]
        assert tab.shape == (1, 3)
        assert tab[0, 0] == 128
        assert np.all(np.isfinite(tab))
        lines = (tmp_path / "converge_forward.csv").read_text().splitlines()
        assert lines[0] == "N,M1,M2"
        assert (tmp_path / "converge_tik0.csv").is_file()

    def test_convergence_study_sparse(self):
        cfg = tiny_config(
            quadrature="sparse", sparse_level=1.0, qmc_count=64, regularisations=()
        )
        out = ex.convergence_study(cfg)
        tab = out["tables"]["forward"]
        assert tab.shape == (2, 3)  # levels 0 and 1
        assert tab[0, 0] == 1  # level 0 collapses to the single origin node
        assert np.all(np.isfinite(tab))

    def test_convergence_study_cross_reference(self):
        # the cross mode measures prefixes, including the full rule,
        # against the sparse estimate instead of the rule's own tail
        cfg = tiny_config(
            qmc_count=256,
            sparse_level=1.0,
            convergence_reference="sparse",
            regularisations=(),
        )
        out = ex.convergence_study(cfg)
        tab = out["tables"]["forward"]
        assert tab.shape == (2, 3)
        assert list(tab[:, 0]) == [128, 256]
        assert np.all(np.isfinite(tab))
        assert np.all(tab[:, 1] > 0)  # two distinct estimators never agree exactly

    def test_kl_build_run(self, tmp_path):
        cfg = tiny_config()
        kl = ex.kl_build_run(cfg, out_dir=tmp_path)
        assert kl.rank >= 1
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["kl_rank"] == kl.rank
        assert len(meta["eigenvalues"]) == kl.rank
        assert (tmp_path / "kl.csv").is_file()

    def test_lcurve_study(self, tmp_path):
        cfg = tiny_config(lcurve_min=1e-8, lcurve_max=1e-2, lcurve_count=9)
        out = ex.lcurve_study(cfg, out_dir=tmp_path)
        assert "tik0" in out
        res = out["tik0"]
        assert res["lambda_opt"] == max(res["per_slice"])
        assert (tmp_path / "lcurve_tik0.csv").is_file()
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["lambda_opt"]["tik0"] == res["lambda_opt"]

    def test_lcurve_corners_on_reference_anatomy(self):
        # all four regularisers get a genuine interior corner on the
        # built-in geometry, not a fallback or a grid endpoint
        cfg = dataclasses.replace(ex.desk_config(), time_slice=0)
        out = ex.lcurve_study(cfg)
        assert set(out) == set(DEFAULT_LAMBDA)
        for kind, res in out.items():
            assert res["corner_found"], kind
            assert cfg.lcurve_min < res["lambda_opt"] < cfg.lcurve_max, kind
