import numpy as np
import pytest
from scipy import stats

from survtopics.simulate import (
    SimConfig1, SimConfig2, design2_beta, make_design2_inputs, sample_survival_times,
    simulate_design1, simulate_design2,
)
from survtopics.corpus import GuideMap, Vocabulary


class _FixedU:
    def __init__(self, values):
        self.values = list(values)

    def uniform(self, size):
        out, self.values = np.array(self.values[:size]), self.values[size:]
        return out


SMALL = SimConfig1(V=50, K=10, P=40, tokens_per_patient=20, n_nonzero=3, seed=4)


def test_design1_dimensions_and_coefficients():
    ds = simulate_design1(SMALL)
    assert ds.corpus.n_patients == 40
    np.testing.assert_array_equal(ds.corpus.lengths()[:, 0], 20)
    assert (ds.w == 6.0).sum() == 3 and (ds.w != 0).sum() == 3
    np.testing.assert_allclose(ds.zbar.sum(axis=1), 1.0)
    assert (ds.zbar >= 0).all()
    assert (ds.time > 0).all() and (ds.event == 1).all()
    assert ds.phi.shape == (10, 50) and ds.theta.shape == (40, 10)


def test_design1_deterministic():
    a, b = simulate_design1(SMALL), simulate_design1(SMALL)
    np.testing.assert_array_equal(a.time, b.time)
    np.testing.assert_array_equal(a.corpus.dense(0), b.corpus.dense(0))
    np.testing.assert_array_equal(a.w, b.w)


def test_zbar_matches_assignments():
    ds = simulate_design1(SMALL)
    j = 7
    z = ds.z[ds.z_indptr[j]:ds.z_indptr[j + 1]]
    np.testing.assert_allclose(ds.zbar[j], np.bincount(z, minlength=10) / 20)


def test_invalid_config():
    with pytest.raises(ValueError):
        SimConfig1(K=5, n_nonzero=6)


@pytest.mark.parametrize("eta, expected", [(0.0, 1.0), (np.log(2), 0.5)])
def test_inverse_transform_examples(eta, expected):
    t = sample_survival_times(np.array([[1.0]]), np.array([eta]), 1.0, _FixedU([np.exp(-1)]))
    assert t[0] == pytest.approx(expected, rel=1e-14)


def test_zero_uniform_resampled():
    t = sample_survival_times(np.zeros((2, 1)), np.zeros(1), 1.0, _FixedU([0.0, np.exp(-2), np.exp(-1)]))
    np.testing.assert_allclose(t, [1.0, 2.0])


def test_exponential_when_no_effect():
    rng = np.random.default_rng(0)
    n = 100_000
    t = sample_survival_times(np.zeros((n, 1)), np.zeros(1), 1.0, rng)
    assert abs(t.mean() - 1.0) < 3 * t.std() / np.sqrt(n)
    assert stats.kstest(t, "expon").statistic < 0.02


def test_token_marginals():
    cfg = SimConfig1(V=30, K=5, P=10_000, tokens_per_patient=100, n_nonzero=1, beta_scale=1.0, seed=1)
    ds = simulate_design1(cfg)
    emp = ds.corpus.dense(0).sum(axis=0)
    emp = emp / emp.sum()
    ref = ds.theta.mean(axis=0) @ ds.phi
    assert 0.5 * np.abs(emp - ref).sum() < 0.05


def test_scaled_config():
    s = SimConfig1().scaled(0.1)
    assert s.K < 500 and s.n_nonzero <= s.K


# -- design 2 --------------------------------------------------------------------

def _write_inputs(tmp_path):
    (tmp_path / "g.tsv").write_text("feature_id\tphenotype_id\na\tk0\nb\tk1\nc\tk1\n")
    (tmp_path / "f.tsv").write_text("patient_id\tphenotype_id\tcount\np0\tk0\t3\np1\tk1\t0\np2\tk1\t2\n")
    (tmp_path / "n.tsv").write_text("patient_id\tn_records\np0\t5\np1\t3\np2\t0\n")
    return SimConfig2(str(tmp_path / "g.tsv"), str(tmp_path / "f.tsv"), str(tmp_path / "n.tsv"), seed=2)


def test_design2_beta_values():
    g = GuideMap.from_pairs([("a", "k0"), ("b", "k1")])
    B = design2_beta(g, Vocabulary(0, "icd", ("a", "b")))
    np.testing.assert_allclose(B, [[3.6, 0.6], [0.6, 3.6]])


def test_design2_counts_and_flags(tmp_path):
    cfg = _write_inputs(tmp_path)
    with pytest.warns(UserWarning, match="1 patients have all-zero"):
        ds = simulate_design2(cfg)
    np.testing.assert_array_equal(ds.corpus.lengths()[:, 0], [5, 3, 0])
    assert ds.flags["uniform_theta_patients"] == ["p1"]
    np.testing.assert_allclose(ds.theta[1], [0.5, 0.5])
    np.testing.assert_allclose(ds.theta[0], [1.0, 0.0])
    assert (ds.w != 0).sum() == round(0.1 * 2)


def test_design2_standin_nonzero_count(tmp_path):
    paths = make_design2_inputs(tmp_path, P=60, K=40, V=80, seed=1)
    ds = simulate_design2(SimConfig2(**paths, seed=1))
    assert (ds.w == 6.0).sum() == 4
    assert ds.corpus.n_patients == 60
    assert ds.guide.n_topics == 40
