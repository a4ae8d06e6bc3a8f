import numpy as np
import pytest
from numpy.testing import assert_allclose

from fimlfa import (
    FactorModel,
    FitConfig,
    ObservedDataset,
    apply_restriction,
    build_pattern_index,
    canonicalize,
    default_loadings,
    implied_covariance,
    restrict_observed,
)
from conftest import random_mask, random_model, random_problem


class TestFactorModel:
    def test_shapes_and_copies(self):
        model = FactorModel(mu=[0.0, 1.0], loadings=[[0.5], [0.2]], psi=[1.0, 2.0])
        assert model.p == 2 and model.m == 1
        assert not model.mu.flags.writeable
        assert not model.loadings.flags.writeable

    def test_psi_must_be_positive(self):
        with pytest.raises(ValueError, match=r"psi.*\[1\]"):
            FactorModel(mu=[0.0, 0.0], loadings=[[0.1], [0.1]], psi=[1.0, 0.0])

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            FactorModel(mu=[np.nan], loadings=[[0.1]], psi=[1.0])
        with pytest.raises(ValueError):
            FactorModel(mu=[0.0], loadings=[[np.inf]], psi=[1.0])

    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            FactorModel(mu=[0.0, 0.0], loadings=[[0.1]], psi=[1.0, 1.0])
        with pytest.raises(ValueError):
            FactorModel(mu=[0.0], loadings=[0.1], psi=[1.0])


class TestImpliedCovariance:
    def test_zero_loadings_gives_diag_psi(self):
        model = FactorModel(mu=np.zeros(3), loadings=np.zeros((3, 1)), psi=[1.0, 2.0, 3.0])
        assert_allclose(implied_covariance(model), np.diag([1.0, 2.0, 3.0]), rtol=0, atol=0)

    def test_block_design_entries(self):
        # cycling 0.8 blocks with psi = 1 - 0.64: unit diagonal, 0.64 within
        # a factor's block, 0 across blocks
        lam = default_loadings(90, 3)
        model = FactorModel(mu=np.zeros(90), loadings=lam, psi=np.full(90, 0.36))
        sigma = implied_covariance(model)
        assert_allclose(np.diag(sigma), np.ones(90), rtol=0, atol=1e-15)
        assert sigma[0, 3] == pytest.approx(0.64, abs=1e-15)
        assert sigma[1, 4] == pytest.approx(0.64, abs=1e-15)
        assert sigma[0, 1] == 0.0
        assert sigma[0, 2] == 0.0

    def test_scalar_case(self):
        model = FactorModel(mu=[0.0], loadings=[[0.5]], psi=[0.75])
        assert_allclose(implied_covariance(model), [[1.0]], rtol=0, atol=0)

    def test_symmetric_and_positive_definite(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            model = random_model(rng, p=int(rng.integers(2, 12)), m=int(rng.integers(1, 4)))
            sigma = implied_covariance(model)
            assert np.array_equal(sigma, sigma.T)
            np.linalg.cholesky(sigma)  # raises if not PD


class TestRestrictObserved:
    def test_identity_selection(self, rng):
        model = random_model(rng, 5, 2)
        mu, lam, psi = restrict_observed(model, np.ones(5, dtype=bool))
        assert_allclose(mu, model.mu, rtol=0, atol=0)
        assert_allclose(lam, model.loadings, rtol=0, atol=0)

    def test_picks_rows(self, rng):
        model = random_model(rng, 3, 2)
        mu, lam, psi = restrict_observed(model, np.array([True, False, True]))
        assert_allclose(mu, model.mu[[0, 2]], rtol=0, atol=0)
        assert_allclose(lam, model.loadings[[0, 2]], rtol=0, atol=0)
        assert_allclose(psi, model.psi[[0, 2]], rtol=0, atol=0)

    def test_empty_mask_rejected(self, rng):
        model = random_model(rng, 3, 1)
        with pytest.raises(ValueError, match="empty"):
            restrict_observed(model, np.zeros(3, dtype=bool))

    def test_submatrix_consistency(self):
        # restricting then forming the implied covariance must equal taking
        # the submatrix of the full implied covariance, exactly
        for seed in range(25):
            rng = np.random.default_rng(200 + seed)
            p = int(rng.integers(2, 10))
            model = random_model(rng, p, int(rng.integers(1, 4)))
            mask = random_mask(rng, 1, p, 0.4)[0]
            mu, lam, psi = restrict_observed(model, mask)
            sub = implied_covariance(FactorModel(mu=mu, loadings=lam, psi=psi))
            full = implied_covariance(model)[np.ix_(mask, mask)]
            assert np.array_equal(sub, full)

    def test_ten_of_ninety(self):
        # the q=80 design: 6 common + 4 observed non-common = 10 of 90
        mask = np.zeros(90, dtype=bool)
        mask[:6] = True
        mask[[10, 30, 50, 70]] = True
        model = FactorModel(
            mu=np.zeros(90), loadings=default_loadings(90, 3), psi=np.full(90, 0.36)
        )
        mu, lam, psi = restrict_observed(model, mask)
        assert mu.shape == (10,) and lam.shape == (10, 3) and psi.shape == (10,)


class TestObservedDataset:
    def test_basic(self):
        ds = ObservedDataset(
            values=[[1.0, 0.0], [0.0, 2.0]],
            mask=[[True, False], [False, True]],
        )
        assert ds.n_cases == 2 and ds.n_vars == 2
        assert ds.values[0, 1] == 0.0  # masked cells normalized to 0

    def test_empty_rows_rejected_with_indices(self):
        with pytest.raises(ValueError, match=r"\[1\]"):
            ObservedDataset(values=np.zeros((2, 2)), mask=[[True, True], [False, False]])

    def test_nan_under_mask_is_fine(self):
        ds = ObservedDataset(values=[[1.0, np.nan]], mask=[[True, False]])
        assert ds.values[0, 1] == 0.0

    def test_nan_observed_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            ObservedDataset(values=[[1.0, np.nan]], mask=[[True, True]])

    def test_obs_counts(self):
        ds = ObservedDataset(
            values=np.zeros((3, 2)),
            mask=[[True, False], [True, False], [True, True]],
        )
        assert ds.obs_counts.counts.tolist() == [3, 1]
        assert ds.obs_counts.never_observed.size == 0

    def test_never_observed_column_flagged(self):
        ds = ObservedDataset(values=np.zeros((2, 3)),
                             mask=[[True, False, True], [True, False, True]])
        assert ds.obs_counts.never_observed.tolist() == [1]


class TestPatternIndex:
    def test_single_pattern_when_complete(self):
        ds = ObservedDataset(values=np.zeros((4, 3)), mask=np.ones((4, 3), dtype=bool))
        idx = build_pattern_index(ds)
        assert len(idx) == 1
        (cases,) = idx.values()
        assert sorted(cases.tolist()) == [0, 1, 2, 3]

    def test_two_patterns(self):
        mask = np.array([[True, True], [True, False], [True, True]])
        ds = ObservedDataset(values=np.zeros((3, 2)), mask=mask)
        idx = build_pattern_index(ds)
        sizes = sorted(len(v) for v in idx.values())
        assert sizes == [1, 2]

    def test_partition_roundtrip(self):
        for seed in range(10):
            rng = np.random.default_rng(300 + seed)
            n, p = int(rng.integers(5, 60)), int(rng.integers(2, 8))
            mask = random_mask(rng, n, p, 0.5)
            ds = ObservedDataset(values=np.zeros((n, p)), mask=mask)
            idx = build_pattern_index(ds)
            all_cases = np.concatenate(list(idx.values()))
            assert sorted(all_cases.tolist()) == list(range(n))
            for key, cases in idx.items():
                pat = np.frombuffer(key, dtype=bool)
                assert all(np.array_equal(mask[c], pat) for c in cases)

    def test_high_missingness_patterns_mostly_distinct(self):
        # q=80 over 84 candidates: collisions are birthday-rare
        from fimlfa import SimDesign, apply_mcar, gen_complete_data

        design = SimDesign(n_cases=2000, q=80)
        data, _, _ = gen_complete_data(design, 11)
        masked = apply_mcar(data, design, 12)
        idx = build_pattern_index(masked)
        assert len(idx) >= 0.9 * 2000


class TestCanonicalize:
    def test_echelon_zeros_exact(self):
        for seed in range(15):
            rng = np.random.default_rng(400 + seed)
            p, m = int(rng.integers(3, 10)), int(rng.integers(1, 4))
            lam = rng.normal(size=(p, m))
            rot, transform = canonicalize(lam)
            for i in range(m):
                assert np.all(rot[i, i + 1 :] == 0.0)
                assert rot[i, i] >= 0.0
            # orthogonal transform, and the rotation is exact in product form
            assert_allclose(transform @ transform.T, np.eye(m), atol=1e-13)
            assert_allclose(rot, lam @ transform, atol=1e-13)
            # implied covariance unchanged
            assert_allclose(rot @ rot.T, lam @ lam.T, atol=1e-12)

    def test_apply_restriction_idempotent(self, rng):
        model = random_model(rng, 6, 3)
        once = apply_restriction(model)
        twice = apply_restriction(once)
        assert_allclose(once.loadings, twice.loadings, rtol=0, atol=1e-14)
        assert_allclose(once.mu, twice.mu, rtol=0, atol=0)


class TestFitConfig:
    def test_defaults(self):
        config = FitConfig()
        assert config.max_iter == 1000 and config.n_starts == 1

    def test_validation(self):
        with pytest.raises(ValueError):
            FitConfig(max_iter=0)
        with pytest.raises(ValueError):
            FitConfig(tol=-1.0)
        with pytest.raises(ValueError):
            FitConfig(n_starts=0)
        with pytest.raises(ValueError):
            FitConfig(algorithm="newton")
