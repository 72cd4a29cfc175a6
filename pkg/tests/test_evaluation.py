import math

import numpy as np
import pytest
from scipy.stats import chi2_contingency as scipy_chi2
from sklearn.metrics import adjusted_rand_score

from perdpm import numeric as nm
from perdpm.evaluation import (EvaluationError, adjusted_rand_index, chi2_contingency,
                               cluster_v, contingency_table, dsi, evaluate, group_mean_dsi,
                               predict_states, state_probabilities, test_score)
from perdpm.model import ModelConfig, PerDPM
from perdpm.synthgen import CohortDataset, GenConfig, binarize, generate


def brute_force_chi2(a, b):
    rows, cols = sorted(set(a)), sorted(set(b))
    n = len(a)
    stat = 0.0
    for r in rows:
        for c in cols:
            observed = sum(1 for x, y in zip(a, b) if x == r and y == c)
            expected = sum(1 for x in a if x == r) * sum(1 for y in b if y == c) / n
            stat += (observed - expected) ** 2 / expected
    return stat, (len(rows) - 1) * (len(cols) - 1)


# ---------------------------------------------------------- chi-square


def test_chi2_identical_balanced_labels():
    labels = np.repeat([1, 2], 50)
    assert chi2_contingency(labels, labels) == (100.0, 1)


def test_chi2_matches_brute_force_and_scipy():
    r = np.random.default_rng(0)
    for _ in range(100):
        n = int(r.integers(20, 200))
        a = r.integers(1, int(r.integers(2, 6)) + 1, size=n)
        b = np.where(r.random(n) < 0.5, a, r.integers(1, 6, size=n))
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        stat, dof = chi2_contingency(a, b)
        ref, ref_dof = brute_force_chi2(list(a), list(b))
        assert dof == ref_dof
        assert stat == pytest.approx(ref, rel=1e-12)
        sp = scipy_chi2(contingency_table(a, b), correction=False)
        assert stat == pytest.approx(sp[0], rel=1e-10) and dof == sp[2]


def test_chi2_relabeling_invariance():
    r = np.random.default_rng(1)
    a, b = r.integers(0, 4, 300), r.integers(0, 3, 300)
    b = np.where(r.random(300) < 0.6, a % 3, b)
    stat, _ = chi2_contingency(a, b)
    perm_a, perm_b = np.array([3, 1, 0, 2]), np.array([2, 0, 1])
    assert chi2_contingency(perm_a[a], perm_b[b])[0] == pytest.approx(stat, rel=1e-12)


def test_chi2_independent_coins_monte_carlo():
    below = 0
    for seed in range(200):
        r = np.random.default_rng(seed)
        stat, dof = chi2_contingency(r.integers(0, 2, 10_000), r.integers(0, 2, 10_000))
        below += stat < 10.83
    assert below >= 0.99 * 200


def test_chi2_rejects_degenerate_tables():
    with pytest.raises(EvaluationError, match="occupied"):
        chi2_contingency(np.ones(10), np.arange(10) % 2)
    with pytest.raises(EvaluationError, match="length"):
        chi2_contingency(np.ones(3), np.ones(4))


# ----------------------------------------------------------------- DSI


def test_dsi_examples():
    assert dsi(np.eye(5)[2]) == 3.0
    assert dsi(np.full(5, 0.2)) == pytest.approx(3.0, abs=1e-15)
    assert dsi(np.array([0.5, 0, 0, 0, 0.5])) == 3.0
    with pytest.raises(EvaluationError):
        dsi(np.array([0.5, 0.6]))


def test_dsi_random_simplex_vectors():
    r = np.random.default_rng(2)
    for _ in range(100):
        k = int(r.integers(2, 8))
        p = r.dirichlet(np.ones(k))
        expected = sum((i + 1) * p[i] for i in range(k))
        assert abs(dsi(p) - expected) <= 1e-12
        assert 1 - 1e-12 <= dsi(p) <= k + 1e-12


def test_dsi_is_linear():
    r = np.random.default_rng(3)
    p, q = r.dirichlet(np.ones(5)), r.dirichlet(np.ones(5))
    assert dsi(0.3 * p + 0.7 * q) == pytest.approx(0.3 * dsi(p) + 0.7 * dsi(q), abs=1e-12)


# ----------------------------------------------------------- states


def test_state_probabilities_and_shift_invariance():
    z = np.random.default_rng(4).normal(size=(3, 4, 5))
    p = state_probabilities(z)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    shifted = z + np.random.default_rng(5).normal(size=(3, 4, 1))
    np.testing.assert_array_equal(state_probabilities(shifted).argmax(-1), p.argmax(-1))


def test_generator_states_give_true_labels():
    data = generate(GenConfig(n_samples=40, noise=0.0, seed=6))
    z = data.ground_truth.z_true
    labels = state_probabilities(z).argmax(-1)
    np.testing.assert_array_equal(labels, data.ground_truth.state_labels)


# ----------------------------------------------------------------- ARI


def test_ari_examples():
    a = np.array([0, 0, 1, 1, 2, 2])
    assert adjusted_rand_index(a, a) == 1.0
    assert adjusted_rand_index(a, (a + 1) % 3 + 10) == 1.0
    with pytest.raises(EvaluationError):
        adjusted_rand_index(a, a[:-1])


def test_ari_matches_sklearn():
    r = np.random.default_rng(7)
    for _ in range(50):
        n = int(r.integers(5, 300))
        a, b = r.integers(0, 4, n), r.integers(0, 5, n)
        b = np.where(r.random(n) < 0.5, a, b)
        assert adjusted_rand_index(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


def test_ari_random_partitions_near_zero():
    r = np.random.default_rng(8)
    values = [adjusted_rand_index(r.integers(0, 5, 10_000), r.integers(0, 5, 10_000))
              for _ in range(20)]
    assert max(abs(v) for v in values) < 0.02


# -------------------------------------------------------------- k-means


def test_kmeans_separates_point_clouds():
    r = np.random.default_rng(9)
    truth = np.repeat([0, 1], 40)
    pts = r.normal(size=(80, 3)) * 0.3 + truth[:, None] * 10
    res = cluster_v(pts, 2, seed=0)
    assert adjusted_rand_index(res.assignments, truth) == 1.0
    dup = cluster_v(np.concatenate([pts, pts]), 2, seed=0).assignments
    np.testing.assert_array_equal(dup[:80], dup[80:])


def test_kmeans_errors():
    with pytest.raises(EvaluationError):
        cluster_v(np.zeros((5, 2)), 1)
    with pytest.raises(EvaluationError):
        cluster_v(np.zeros((2, 2)), 3)


def test_group_means_are_masked():
    data = generate(GenConfig(n_samples=30, min_length=3, seed=1))
    labels = np.arange(30) % 2
    res = cluster_v(np.random.default_rng(0).normal(size=(30, 2)), 2, observations=data)
    assert res.group_means.shape == (2, data.n_steps, data.x.shape[2])
    from perdpm.evaluation import group_mean_trajectories
    means = group_mean_trajectories(data, labels, 2)
    sel = (labels == 0)
    t = data.n_steps - 1
    valid = data.mask[sel, t] > 0
    np.testing.assert_allclose(means[0, t], data.x[sel][valid, t].mean(0))
    d = group_mean_dsi(np.full((30, data.n_steps), 2.0), labels, 2, data.mask)
    np.testing.assert_array_equal(d, 2.0)


# --------------------------------------------------------- test scores


class _FixedModel(PerDPM):
    """Emission pinned to the data (Gaussian) or to p = 0.5 (Bernoulli)."""

    def __init__(self, config, x):
        super().__init__(config, seed=0)
        self._x = x

    def forward(self, x, u, g, rng=None):
        out = super().forward(x, u, g, rng)
        if self.config.emission == "gaussian":
            out["mu_x"] = nm.Tensor(np.asarray(x))
            out["sigma_x"] = nm.Tensor(np.ones_like(x))
        else:
            out["logits_x"] = nm.Tensor(np.zeros_like(x))
        return out


def test_perfect_emission_nll():
    data = generate(GenConfig(n_samples=20, min_length=5, seed=2))
    cfg = ModelConfig(d_x=10, d_u=1, d_g=10)
    score = test_score(_FixedModel(cfg, data.x), data)
    expected = 0.5 * math.log(2 * math.pi) * 10 * data.lengths.mean()
    assert score == pytest.approx(expected, rel=1e-12)


def test_half_probability_ce():
    data = binarize(generate(GenConfig(n_samples=20, min_length=5, seed=2)))
    cfg = ModelConfig(d_x=10, d_u=1, d_g=10, emission="bernoulli")
    assert test_score(_FixedModel(cfg, data.x), data) == \
        pytest.approx(math.log(2) * 10 * data.lengths.mean(), rel=1e-12)


def test_mode_mismatch():
    data = generate(GenConfig(n_samples=5, seed=0))
    m = PerDPM(ModelConfig(d_x=10, d_u=1, d_g=10, emission="bernoulli"), seed=0)
    with pytest.raises(EvaluationError):
        test_score(m, data)


def test_evaluate_report_fields():
    data = generate(GenConfig(n_samples=30, seed=3))
    m = PerDPM(ModelConfig(d_x=10, d_u=1, d_g=10), seed=0)
    m.fit_normalization(data.x, data.g)
    rep = evaluate(m, data)
    assert rep.score_name == "test_nll"
    assert rep.chi2 is None or rep.chi2 >= 0
    assert rep.dsi.shape == (30, 10)
    assert (rep.dsi >= 1 - 1e-12).all() and (rep.dsi <= 5 + 1e-12).all()
    assert rep.cluster_assignments.shape == (30,)
    assert -1 <= rep.ari_vs_truth <= 1
    bare = CohortDataset(data.x, data.u, data.g, data.lengths, None, {})
    rep = evaluate(m, bare)
    assert rep.chi2 is None and "ground-truth" in rep.chi2_note
    assert rep.ari_vs_truth is None


def test_predict_states_shapes():
    data = generate(GenConfig(n_samples=6, seed=4))
    m = PerDPM(ModelConfig(d_x=10, d_u=1, d_g=10), seed=0)
    probs, labels = predict_states(m, data)
    assert probs.shape == (6, 10, 5) and labels.shape == (6, 10)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-12)


# -------------------------------------------------- trained cohort oracles


def test_trained_cluster_recovery(runs):
    assert runs.get(0).report.ari_vs_truth >= 0.8


def test_trained_dmm_chi2_not_higher_majority(runs):
    wins = sum(runs.get(s).report.chi2 >= runs.get(s, dmm=True).report.chi2 for s in range(10))
    assert wins >= 7
