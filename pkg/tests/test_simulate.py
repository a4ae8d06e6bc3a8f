import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit
from scipy.stats import chi2_contingency

import fimlfa.simulate as sim
from fimlfa import (
    AccuracyCell,
    EstimationError,
    LogisticSelection,
    SimDesign,
    align_procrustes,
    apply_mcar,
    apply_nmar,
    calibrate_nmar_alpha,
    default_loadings,
    gen_complete_data,
    implied_covariance,
    run_accuracy_experiment,
    run_timing_experiment,
    sqrt_metrics,
    true_model,
)
from fimlfa.simulate import accuracy_plan_from_config, timing_plan_from_config

# the metric denominator counts free parameters, the numerator sums every
# loading entry past the skipped block; a uniform offset therefore comes
# back inflated by this ratio (1.006 at the default design)
RATIO_90 = math.sqrt(252.0 / 249.0)


class TestSimDesign:
    def test_defaults(self):
        d = SimDesign(n_cases=100)
        assert (d.p, d.m, d.n_common, d.q, d.mechanism) == (90, 3, 6, 0, "mcar")
        lam, psi = d.template()
        assert lam.shape == (90, 3)
        assert_allclose(psi, 0.36)
        assert_allclose((lam**2).sum(axis=1), 0.64)

    def test_block_template_layout(self):
        lam = default_loadings(6, 3, scale=0.8)
        expected = np.array(
            [
                [0.8, 0, 0],
                [0, 0.8, 0],
                [0, 0, 0.8],
                [0.8, 0, 0],
                [0, 0.8, 0],
                [0, 0, 0.8],
            ]
        )
        assert_allclose(lam, expected)

    def test_validation(self):
        with pytest.raises(ValueError, match="n_cases"):
            SimDesign(n_cases=0)
        with pytest.raises(ValueError, match="m <= p"):
            SimDesign(n_cases=10, p=2, m=3)
        with pytest.raises(ValueError, match="n_common"):
            SimDesign(n_cases=10, p=5, m=2, n_common=6)
        with pytest.raises(ValueError, match="q must lie"):
            SimDesign(n_cases=10, p=90, q=85)
        with pytest.raises(ValueError, match="mechanism"):
            SimDesign(n_cases=10, mechanism="mar")
        with pytest.raises(ValueError, match="shape"):
            SimDesign(n_cases=10, p=4, m=2, n_common=0, loadings=np.zeros((3, 2)))
        with pytest.raises(ValueError, match="psi"):
            SimDesign(n_cases=10, p=4, m=2, n_common=0, psi=-np.ones(4))

    def test_unit_variance_rule_must_stay_positive(self):
        lam = default_loadings(6, 2, scale=1.0)  # communalities hit 1.0
        d = SimDesign(n_cases=10, p=6, m=2, n_common=0, loadings=lam)
        with pytest.raises(ValueError, match="non-positive"):
            d.template()

    def test_custom_templates_pass_through(self):
        lam = default_loadings(4, 2, scale=0.5)
        psi = np.full(4, 2.0)
        d = SimDesign(n_cases=10, p=4, m=2, n_common=0, loadings=lam, psi=psi)
        got_lam, got_psi = d.template()
        assert_allclose(got_lam, lam)
        assert_allclose(got_psi, psi)


class TestGenCompleteData:
    def test_sample_covariance_matches_implied(self):
        design = SimDesign(n_cases=100000)
        ds, model, _ = gen_complete_data(design, seed=7)
        sample_cov = np.cov(ds.values, rowvar=False, bias=True)
        assert np.abs(sample_cov - implied_covariance(model)).max() < 0.02

    def test_zero_templates_give_zero_data(self):
        d = SimDesign(
            n_cases=50, p=4, m=2, n_common=0,
            loadings=np.zeros((4, 2)), psi=np.zeros(4),
        )
        ds, _, _ = gen_complete_data(d, seed=0)
        assert np.all(ds.values == 0.0)
        assert np.all(ds.mask)

    def test_column_means_near_zero(self):
        design = SimDesign(n_cases=20000, p=12, m=3, n_common=0)
        ds, _, _ = gen_complete_data(design, seed=3)
        bound = 4.0 / math.sqrt(design.n_cases)
        assert np.abs(ds.values.mean(axis=0)).max() < bound

    def test_noise_free_design_reproduces_factor_structure(self):
        lam = default_loadings(6, 2, scale=0.7)
        d = SimDesign(n_cases=30, p=6, m=2, n_common=0,
                      loadings=lam, psi=np.zeros(6))
        ds, _, factors = gen_complete_data(d, seed=5)
        assert_allclose(ds.values, factors @ lam.T, atol=0)

    def test_deterministic_in_seed(self):
        design = SimDesign(n_cases=40, p=8, m=2, n_common=2)
        a, _, fa = gen_complete_data(design, seed=11)
        b, _, fb = gen_complete_data(design, seed=11)
        c, _, _ = gen_complete_data(design, seed=12)
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(fa, fb)
        assert not np.array_equal(a.values, c.values)


class TestApplyMcar:
    def test_q_zero_no_op(self):
        design = SimDesign(n_cases=20, p=10, m=2, n_common=2, q=0)
        ds, _, _ = gen_complete_data(design, seed=0)
        assert apply_mcar(ds, design, seed=1) is ds

    def test_exactly_q_missing_per_case(self):
        design = SimDesign(n_cases=300, p=20, m=2, n_common=4, q=7)
        ds, _, _ = gen_complete_data(design, seed=0)
        masked = apply_mcar(ds, design, seed=1)
        per_case_missing = (~masked.mask).sum(axis=1)
        assert np.all(per_case_missing == 7)
        assert np.all(masked.mask[:, :4])

    def test_paper_rate_q80(self):
        # q=80 of p=90 with 6 common variables leaves 10 observed per case
        design = SimDesign(n_cases=200, q=80)
        ds, _, _ = gen_complete_data(design, seed=0)
        masked = apply_mcar(ds, design, seed=1)
        assert np.all(masked.mask.sum(axis=1) == 10)
        assert np.all(masked.mask[:, :6])
        assert abs((~masked.mask).mean() - 80.0 / 90.0) < 0.01

    def test_deterministic_and_seed_sensitive(self):
        design = SimDesign(n_cases=100, p=15, m=3, n_common=3, q=5)
        ds, _, _ = gen_complete_data(design, seed=0)
        m1 = apply_mcar(ds, design, seed=42).mask
        m2 = apply_mcar(ds, design, seed=42).mask
        m3 = apply_mcar(ds, design, seed=43).mask
        assert np.array_equal(m1, m2)
        assert not np.array_equal(m1, m3)

    def test_per_variable_rate(self):
        design = SimDesign(n_cases=4000, p=12, m=2, n_common=2, q=4)
        ds, _, _ = gen_complete_data(design, seed=0)
        masked = apply_mcar(ds, design, seed=9)
        rate = 4.0 / 10.0
        se = math.sqrt(rate * (1 - rate) / design.n_cases)
        emp = (~masked.mask[:, 2:]).mean(axis=0)
        assert np.abs(emp - rate).max() < 3 * se

    def test_independent_of_values(self):
        # MCAR: masking a cell must not depend on the value it hides
        design = SimDesign(n_cases=250, p=10, m=2, n_common=2, q=3)
        rejections = 0
        for seed in range(50):
            ds, _, _ = gen_complete_data(design, seed=seed)
            masked = apply_mcar(ds, design, seed=1000 + seed)
            obs = masked.mask[:, 5]
            pos = ds.values[:, 5] > 0
            table = np.array(
                [
                    [(obs & pos).sum(), (obs & ~pos).sum()],
                    [(~obs & pos).sum(), (~obs & ~pos).sum()],
                ]
            )
            if chi2_contingency(table).pvalue < 0.01:
                rejections += 1
        assert rejections <= 4  # expect 0.5 under independence

    def test_dimension_mismatch(self):
        design = SimDesign(n_cases=20, p=10, m=2, n_common=2, q=3)
        other = SimDesign(n_cases=20, p=11, m=2, n_common=2, q=3)
        ds, _, _ = gen_complete_data(other, seed=0)
        with pytest.raises(ValueError, match="dimensions"):
            apply_mcar(ds, design, seed=0)


class TestCalibrateNmar:
    def test_zero_slope_exact_logit(self):
        design = SimDesign(n_cases=10, p=10, m=2, n_common=2, mechanism="nmar")
        model = true_model(design)
        sample = np.zeros((5, 2))
        sel = calibrate_nmar_alpha(design, model, 0.5, sample, slope=0.0)
        assert sel.intercept == 0.0 and sel.slope == 0.0
        sel = calibrate_nmar_alpha(design, model, 0.8, sample, slope=0.0)
        assert_allclose(sel.intercept, math.log(4.0), rtol=1e-12)

    def test_bisection_hits_target(self):
        design = SimDesign(n_cases=10, mechanism="nmar")
        model = true_model(design)
        rng = np.random.default_rng(1)
        sample = rng.standard_normal((10000, 3))
        target = 8.0 / 9.0
        sel = calibrate_nmar_alpha(design, model, target, sample, slope=1.0)
        eta = sel.slope * (sample @ model.loadings[6:].T)
        achieved = float(np.mean(expit(sel.intercept + eta)))
        assert abs(achieved - target) < 0.005

    def test_holds_up_on_fresh_sample(self):
        # the calibrated selection must hit the target on factors it never saw
        design = SimDesign(n_cases=10, mechanism="nmar")
        model = true_model(design)
        rng = np.random.default_rng(2)
        sel = calibrate_nmar_alpha(design, model, 0.7, rng.standard_normal((10000, 3)))
        fresh = rng.standard_normal((10000, 3))
        achieved = float(np.mean(expit(sel.intercept + sel.slope * (fresh @ model.loadings[6:].T))))
        assert abs(achieved - 0.7) < 0.005

    def test_unattainable_rates(self):
        design = SimDesign(n_cases=10, mechanism="nmar")
        model = true_model(design)
        sample = np.zeros((5, 3))
        for bad in (0.0, 1.0, -0.2, 1.7):
            with pytest.raises(ValueError, match="unattainable"):
                calibrate_nmar_alpha(design, model, bad, sample)

    def test_bad_factor_sample(self):
        design = SimDesign(n_cases=10, mechanism="nmar")
        model = true_model(design)
        with pytest.raises(ValueError, match="factor_sample"):
            calibrate_nmar_alpha(design, model, 0.5, np.zeros((5, 2)), slope=1.0)
        with pytest.raises(ValueError, match="factor_sample"):
            calibrate_nmar_alpha(design, model, 0.5, np.zeros((0, 3)), slope=1.0)

    def test_all_common_design_rejected(self):
        design = SimDesign(n_cases=10, p=4, m=2, n_common=4, mechanism="nmar")
        model = true_model(design)
        with pytest.raises(ValueError, match="non-common"):
            calibrate_nmar_alpha(design, model, 0.5, np.zeros((5, 2)), slope=1.0)


class TestApplyNmar:
    def test_coin_flip_rate(self):
        # intercept 0, slope 0 turns the selection into fair coin flips
        design = SimDesign(n_cases=10000, p=10, m=2, n_common=2, q=8,
                           mechanism="nmar")
        ds, model, factors = gen_complete_data(design, seed=0)
        sel = LogisticSelection(intercept=0.0, slope=0.0)
        masked = apply_nmar(ds, model, factors, sel, design, seed=1)
        rate = (~masked.mask[:, 2:]).mean()
        assert abs(rate - 0.5) < 0.01

    def test_large_slope_masks_top_decile(self):
        design = SimDesign(n_cases=4000, p=10, m=2, n_common=2, q=8,
                           mechanism="nmar")
        ds, model, factors = gen_complete_data(design, seed=2)
        sel = LogisticSelection(intercept=0.0, slope=25.0)
        masked = apply_nmar(ds, model, factors, sel, design, seed=3)
        eta = (factors @ model.loadings[2:].T).ravel()
        missing = (~masked.mask[:, 2:]).ravel()
        top = eta >= np.quantile(eta, 0.9)
        assert missing[top].mean() >= 0.95

    def test_common_always_observed(self):
        design = SimDesign(n_cases=500, p=8, m=2, n_common=3, q=5,
                           mechanism="nmar")
        ds, model, factors = gen_complete_data(design, seed=4)
        sel = LogisticSelection(intercept=40.0, slope=0.0)
        masked = apply_nmar(ds, model, factors, sel, design, seed=5)
        assert np.all(masked.mask[:, :3])
        assert not masked.mask[:, 3:].any()

    def test_redraw_path_fills_empty_cases(self):
        design = SimDesign(n_cases=800, p=4, m=2, n_common=0, q=4,
                           mechanism="nmar")
        ds, model, factors = gen_complete_data(design, seed=6)
        sel = LogisticSelection(intercept=2.0, slope=0.0)  # ~88% missing
        masked = apply_nmar(ds, model, factors, sel, design, seed=7)
        assert np.all(masked.mask.sum(axis=1) >= 1)

    def test_retry_budget_exhausted(self):
        design = SimDesign(n_cases=50, p=4, m=2, n_common=0, q=4,
                           mechanism="nmar")
        ds, model, factors = gen_complete_data(design, seed=8)
        sel = LogisticSelection(intercept=40.0, slope=0.0)
        with pytest.raises(EstimationError, match="redraws"):
            apply_nmar(ds, model, factors, sel, design, seed=9, max_redraws=5)

    def test_factor_shape_validated(self):
        design = SimDesign(n_cases=40, p=6, m=2, n_common=2, q=4,
                           mechanism="nmar")
        ds, model, factors = gen_complete_data(design, seed=10)
        sel = LogisticSelection(intercept=0.0, slope=1.0)
        with pytest.raises(ValueError, match="factors"):
            apply_nmar(ds, model, factors[:-1], sel, design, seed=11)

    def test_informative_missingness_shifts_observed_mean(self):
        # positive slope hides the large values, so observed means sit low
        design = SimDesign(n_cases=20000, p=10, m=2, n_common=2, q=8,
                           mechanism="nmar")
        ds, model, factors = gen_complete_data(design, seed=12)
        sel = LogisticSelection(intercept=0.0, slope=3.0)
        masked = apply_nmar(ds, model, factors, sel, design, seed=13)
        col = 7
        obs = masked.mask[:, col]
        assert ds.values[obs, col].mean() < ds.values[~obs, col].mean() - 0.1


class TestSqrtMetrics:
    def test_exact_estimates_give_zero(self):
        truth = default_loadings(90, 3)
        est = np.repeat(truth[None, :, :], 5, axis=0)
        rep = sqrt_metrics(est, truth)
        assert rep.sqrt_mse == 0.0 and rep.sqrt_bias == 0.0
        assert rep.r == 249 and rep.n_replications == 5

    def test_uniform_offset_single_estimate(self):
        truth = default_loadings(90, 3)
        delta = 0.03
        rep = sqrt_metrics((truth + delta)[None, :, :], truth)
        expected = delta * RATIO_90
        assert_allclose(rep.sqrt_mse, expected, rtol=1e-12)
        assert_allclose(rep.sqrt_bias, expected, rtol=1e-12)
        # within 1% of the idealized constant-shift value
        assert abs(rep.sqrt_mse - delta) < 0.01 * delta

    def test_symmetric_pair(self):
        truth = default_loadings(90, 3)
        delta = 0.05
        est = np.stack([truth + delta, truth - delta])
        rep = sqrt_metrics(est, truth)
        assert rep.sqrt_bias == 0.0
        assert_allclose(rep.sqrt_mse, delta * RATIO_90, rtol=1e-12)

    def test_bias_never_exceeds_mse(self, rng):
        truth = default_loadings(12, 3)
        for _ in range(20):
            est = truth[None] + rng.normal(scale=0.1, size=(7, 12, 3))
            rep = sqrt_metrics(est, truth, skip_rows=3)
            assert rep.sqrt_bias <= rep.sqrt_mse + 1e-15

    def test_no_common_arm_r(self):
        truth = default_loadings(84, 3)
        rep = sqrt_metrics(truth[None], truth, skip_rows=0)
        assert rep.r == 84 * 3 - 3

    def test_errors(self):
        truth = default_loadings(10, 2)
        with pytest.raises(ValueError, match="at least one"):
            sqrt_metrics(np.zeros((0, 10, 2)), truth, skip_rows=2)
        with pytest.raises(ValueError, match="matching truth"):
            sqrt_metrics(np.zeros((3, 9, 2)), truth)
        with pytest.raises(ValueError, match="skip_rows"):
            sqrt_metrics(truth[None], truth, skip_rows=10)


class TestAlignProcrustes:
    def test_recovers_rotation(self, rng):
        truth = default_loadings(15, 3)
        for _ in range(6):
            t, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            aligned = align_procrustes(truth @ t, truth)
            assert_allclose(aligned, truth, atol=1e-10)

    def test_identity_when_aligned(self):
        truth = default_loadings(9, 3)
        assert_allclose(align_procrustes(truth, truth), truth, atol=1e-12)


def small_cell(n_cases=150, q=4, mechanism="mcar", use_common=True):
    design = SimDesign(n_cases=n_cases, p=12, m=2, n_common=2, q=q,
                       mechanism=mechanism,
                       loadings=default_loadings(12, 2, scale=0.7))
    return AccuracyCell(design=design, use_common=use_common)


class TestRunAccuracyExperiment:
    def test_deterministic(self):
        cells = [small_cell()]
        a = run_accuracy_experiment(cells, replications=6, seed=3, tol=1e-7)
        b = run_accuracy_experiment(cells, replications=6, seed=3, tol=1e-7)
        assert a[0].metrics == b[0].metrics
        c = run_accuracy_experiment(cells, replications=6, seed=4, tol=1e-7)
        assert c[0].metrics != a[0].metrics

    def test_common_vs_no_common_r(self):
        res = run_accuracy_experiment(
            [small_cell(use_common=True), small_cell(use_common=False)],
            replications=4, seed=0, tol=1e-6,
        )
        # common arm skips the 2 common rows of a 12-row truth; the
        # no-common arm fits 10 variables and skips none
        assert res[0].metrics.r == 10 * 2 - 1
        assert res[1].metrics.r == 10 * 2 - 1

    def test_nmar_cell_runs(self):
        res = run_accuracy_experiment(
            [small_cell(n_cases=250, mechanism="nmar")],
            replications=4, seed=1, tol=1e-6,
        )
        assert np.isfinite(res[0].metrics.sqrt_mse)
        assert res[0].metrics.n_replications == 4

    def test_empty_grid(self):
        with pytest.raises(ValueError, match="empty"):
            run_accuracy_experiment([], replications=2)

    def test_failure_cap_raises(self, monkeypatch):
        def always_fails(*args, **kwargs):
            raise EstimationError("synthetic failure")

        monkeypatch.setattr(sim, "_fit_estimator", always_fails)
        with pytest.raises(EstimationError, match="cap"):
            run_accuracy_experiment([small_cell()], replications=5, seed=0)

    def test_failures_below_cap_recorded(self, monkeypatch):
        real = sim._fit_estimator
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 1:
                raise EstimationError("synthetic failure")
            return real(*args, **kwargs)

        monkeypatch.setattr(sim, "_fit_estimator", flaky)
        res = run_accuracy_experiment(
            [small_cell()], replications=5, seed=0, tol=1e-6, failure_cap=0.4
        )
        assert res[0].n_failures == 1
        assert res[0].metrics.n_replications == 4


class TestPlansFromConfig:
    def test_accuracy_grid_cross_product(self):
        cfg = {
            "mode": "accuracy", "n": "100, 200", "q": "0, 40",
            "mechanism": "mcar", "common": "true, false",
            "replications": "7", "seed": "5", "algorithm": "quasi-newton",
            "tol": "1e-7",
        }
        cells, kwargs = accuracy_plan_from_config(cfg)
        assert len(cells) == 8
        assert {c.design.n_cases for c in cells} == {100, 200}
        assert {c.design.q for c in cells} == {0, 40}
        assert {c.use_common for c in cells} == {True, False}
        assert kwargs["replications"] == 7
        assert kwargs["seed"] == 5
        assert kwargs["algorithm"] == "quasi-newton"
        assert kwargs["tol"] == 1e-7

    def test_accuracy_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            accuracy_plan_from_config({"n": "100", "bogus": "1"})

    def test_accuracy_missing_n(self):
        with pytest.raises(ValueError, match="must set n"):
            accuracy_plan_from_config({"mode": "accuracy"})

    def test_accuracy_empty_grid(self):
        with pytest.raises(ValueError, match="empty design grid"):
            accuracy_plan_from_config({"n": "100", "q": " , "})

    def test_accuracy_nmar_target_passthrough(self):
        _, kwargs = accuracy_plan_from_config({"n": "50", "nmar_target": "0.7"})
        assert kwargs["nmar_target"] == 0.7
        _, kwargs = accuracy_plan_from_config({"n": "50"})
        assert "nmar_target" not in kwargs

    def test_timing_defaults(self):
        kwargs = timing_plan_from_config({"mode": "timing", "n": "2000"})
        assert kwargs["n_cases"] == 2000
        assert kwargs["algorithms"] == ["modified-em", "ordinary-em", "quasi-newton"]
        assert kwargs["runs"] == 10
        assert kwargs["design_kwargs"] == {"p": 90, "m": 3, "n_common": 6}

    def test_timing_unknown_key(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            timing_plan_from_config({"n": "100", "replications": "5"})

    def test_timing_empty_grid(self):
        with pytest.raises(ValueError, match="empty design grid"):
            timing_plan_from_config({"n": "100", "algorithms": ","})


class TestRunTimingExperiment:
    def test_small_grid(self):
        rows = run_timing_experiment(
            n_cases=120,
            q_values=[0, 4],
            algorithms=["modified-em"],
            runs=2,
            seed=0,
            tol=1e-5,
            max_iter=5000,
            design_kwargs={"p": 8, "m": 2, "n_common": 2},
        )
        assert [(r.q, r.algorithm) for r in rows] == [
            (0, "modified-em"), (4, "modified-em"),
        ]
        for row in rows:
            assert row.mean_time > 0
            assert row.mean_iterations >= 1
            assert row.speedup_vs_baseline > 0
            assert row.runs == 2

    def test_validation(self):
        with pytest.raises(ValueError, match="runs"):
            run_timing_experiment(100, [0], ["modified-em"], runs=0)
        with pytest.raises(ValueError, match="unknown algorithm"):
            run_timing_experiment(100, [0], ["newton"], runs=1)
