import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from survtopics.corpus import PhecodeCountMatrix
from survtopics.prior import (
    PI_FLOOR, EMConfig, GaussianMixtureFit, PoissonMixtureFit, PriorModel, _fit_gaussian_em,
    binary_prior, compute_prior, fit_gaussian_mixture, fit_poisson_mixture, fit_prior_model,
    load_prior, transform_counts, write_prior,
)


def _poisson_loglik(u, r0, r1, wt):
    return np.log((1 - wt) * stats.poisson.pmf(u, r0) + wt * stats.poisson.pmf(u, r1)).sum()


def test_poisson_separated_clusters():
    u = np.array([0, 0, 0, 0, 10, 10])
    fit = fit_poisson_mixture(u)
    assert fit.rho0 < 0.05
    assert fit.rho1 == pytest.approx(10.0, abs=1e-3)
    np.testing.assert_allclose(fit.responsibilities, [0, 0, 0, 0, 1, 1], atol=1e-4)
    a = fit.weight * stats.poisson.pmf(u, fit.rho1)
    expected = a / (a + (1 - fit.weight) * stats.poisson.pmf(u, fit.rho0))
    np.testing.assert_allclose(fit.responsibilities, expected, rtol=1e-6)
    # independent oracle: coarse grid search with the weight profiled out
    best = -np.inf
    for r0 in np.linspace(0.01, 15, 60):
        for r1 in np.linspace(r0, 15, 60):
            best = max(best, max(_poisson_loglik(u, r0, r1, w) for w in np.linspace(0.01, 0.99, 50)))
    assert _poisson_loglik(u, fit.rho0, fit.rho1, fit.weight) >= best - 1e-9


def test_poisson_degenerate():
    fit = fit_poisson_mixture([5, 5, 5, 5])
    assert fit.degenerate
    np.testing.assert_array_equal(fit.responsibilities, 0.5)


def test_poisson_sampled_mixture_recovers_rates():
    rng = np.random.default_rng(7)
    z = rng.uniform(size=2000) < 0.5
    u = np.where(z, rng.poisson(20, 2000), rng.poisson(1, 2000))
    fit = fit_poisson_mixture(u)
    assert abs(fit.rho0 - 1) < 0.2
    assert abs(fit.rho1 - 20) < 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 30), min_size=3, max_size=60), st.integers(0, 5))
def test_em_monotone_and_ordered(u, shift):
    u = np.array(u) + shift
    for fit in (fit_poisson_mixture(u), fit_gaussian_mixture(u)):
        ll = np.array(fit.loglik)
        assert (np.diff(ll) >= -1e-10).all()
        assert ((fit.responsibilities >= 0) & (fit.responsibilities <= 1)).all()
    p = fit_poisson_mixture(u)
    if not p.degenerate:
        assert 0 < p.rho0 < p.rho1
    g = fit_gaussian_mixture(u)
    if not g.degenerate:
        assert g.mu0 < g.mu1


def test_collapsed_components_flagged_degenerate():
    # EM drives both components onto a single location for this input
    for fit in (fit_poisson_mixture([0, 1, 1, 1, 1]), fit_gaussian_mixture([0, 1, 1, 1, 1])):
        assert fit.degenerate
        np.testing.assert_array_equal(fit.responsibilities, 0.5)
    pi = compute_prior(np.array([[0], [1], [1], [1], [1]]))
    np.testing.assert_array_equal(pi[:, 0], [1e-6, 1, 1, 1, 1])


def test_gaussian_point_masses():
    u = np.array([1] * 100 + [20] * 100)
    fit = fit_gaussian_mixture(u)
    assert fit.mu0 == pytest.approx(np.log(2), abs=1e-6)
    assert fit.mu1 == pytest.approx(np.log(21), abs=1e-6)
    assert fit.sigma0 == pytest.approx(1e-3)
    assert fit.sigma1 == pytest.approx(1e-3)


def test_gaussian_degenerate():
    assert fit_gaussian_mixture([3, 3, 3]).degenerate


def test_gaussian_mirror_symmetry():
    rng = np.random.default_rng(3)
    x = np.r_[rng.normal(0, 1, 50), rng.normal(4, 0.5, 30)]
    a = _fit_gaussian_em(x, EMConfig())
    b = _fit_gaussian_em(-x, EMConfig())
    assert b.mu0 == pytest.approx(-a.mu1, abs=1e-5)
    assert b.mu1 == pytest.approx(-a.mu0, abs=1e-5)
    np.testing.assert_allclose(b.responsibilities, 1 - a.responsibilities, atol=1e-5)


def test_transform_defined_at_zero():
    np.testing.assert_array_equal(transform_counts([0, 1]), [0.0, np.log(2)])


def _fixed_fits(rp, rg):
    pf = PoissonMixtureFit(1.0, 2.0, 0.5, np.array([rp]))
    gf = GaussianMixtureFit(0.0, 1.0, 1.0, 1.0, 0.5, np.array([rg]))
    return pf, gf


@pytest.mark.parametrize("rp, rg, expected", [(0.8, 0.6, 0.7), (0.0, 0.0, PI_FLOOR), (1.0, 1.0, 1.0)])
def test_step3_average_and_clamp(monkeypatch, rp, rg, expected):
    import survtopics.prior as prior

    pf, gf = _fixed_fits(rp, rg)
    monkeypatch.setattr(prior, "fit_poisson_mixture", lambda *a, **k: pf)
    monkeypatch.setattr(prior, "fit_gaussian_mixture", lambda *a, **k: gf)
    pi = compute_prior(np.array([[3]]))
    assert pi[0, 0] == pytest.approx(expected)


def test_binary_prior():
    u = np.array([[3, 0], [0, 0]])
    np.testing.assert_array_equal(binary_prior(u), [[1.0, PI_FLOOR], [PI_FLOOR, PI_FLOOR]])


def test_degenerate_column_falls_back_to_binary():
    u = np.array([[0, 2], [0, 9], [0, 0], [0, 1]])
    pi = compute_prior(u)
    np.testing.assert_array_equal(pi[:, 0], PI_FLOOR)
    assert ((pi >= PI_FLOOR) & (pi <= 1)).all()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.lists(st.integers(0, 12), min_size=3, max_size=3), min_size=4, max_size=20),
       st.randoms(use_true_random=False))
def test_prior_row_permutation_equivariant(rows, rnd):
    u = np.array(rows)
    perm = list(range(len(rows)))
    rnd.shuffle(perm)
    a = compute_prior(u)
    b = compute_prior(u[perm])
    np.testing.assert_allclose(b, a[perm], atol=1e-7)


def test_prior_model_reapplies_to_training_rows():
    rng = np.random.default_rng(0)
    u = np.c_[rng.poisson(0.3, 200) + 8 * (rng.uniform(size=200) < 0.3), rng.poisson(2, 200)]
    pi, model = compute_prior(u, return_model=True)
    np.testing.assert_allclose(model.apply(u), pi, atol=1e-6)
    back = PriorModel.from_dict(model.to_dict())
    np.testing.assert_array_equal(back.apply(u), model.apply(u))


def test_fit_prior_model_keeps_phenotype_ids():
    U = PhecodeCountMatrix(np.array([[0, 1], [3, 0], [1, 1]]), ("a", "b", "c"), ("k0", "k1"))
    assert fit_prior_model(U).phenotype_ids == ("k0", "k1")


def test_prior_tsv_round_trip(tmp_path):
    pi = np.array([[0.25, 1e-6], [1.0, 0.3333333333333333]])
    write_prior(pi, ["a", "b"], ["k0", "k1"], tmp_path / "p.tsv", comment="seed=1")
    np.testing.assert_array_equal(load_prior(tmp_path / "p.tsv", ["a", "b"], ["k0", "k1"]), pi)
