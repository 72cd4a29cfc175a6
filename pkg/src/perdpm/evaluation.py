"""Held-out scores, state read-out, contingency chi-square, DSI and cluster analysis."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans

from . import numeric as nm
from .model import BERNOULLI, GAUSSIAN, PerDPM
from .synthgen import CohortDataset


class EvaluationError(ValueError):
    pass


@dataclass
class Posterior:
    mu_z: np.ndarray                # [N, T, d_z] posterior means
    sigma_z: np.ndarray
    mu_v: np.ndarray | None         # [N, K]
    sigma_v: np.ndarray | None
    outputs: dict = field(default_factory=dict)


def posterior(model: PerDPM, data: CohortDataset, batch_size: int = 512) -> Posterior:
    """Deterministic pass (V = mu_v, Z = posterior means), batched without a tape."""
    keys = ("mu_q", "sigma_q", "mu_v", "sigma_v", "mu_x", "sigma_x", "logits_x")
    chunks: dict[str, list[np.ndarray]] = {k: [] for k in keys}
    for lo in range(0, data.n_samples, batch_size):
        sl = slice(lo, lo + batch_size)
        out = model.forward(data.x[sl], data.u[sl], data.g[sl], rng=None)
        for k in keys:
            if k in out:
                chunks[k].append(out[k].data)
    full = {k: np.concatenate(v) for k, v in chunks.items() if v}
    return Posterior(full["mu_q"], full["sigma_q"], full.get("mu_v"), full.get("sigma_v"), full)


def _check_mode(model: PerDPM, data: CohortDataset) -> None:
    if model.config.emission == BERNOULLI and not data.is_binary:
        raise EvaluationError("Bernoulli-mode model cannot score non-binary observations")
    if data.x.shape[2] != model.config.d_x or data.u.shape[2] != model.config.d_u \
            or data.g.shape[1] != model.config.d_g:
        raise EvaluationError("dataset dimensions do not match the model")


def test_score(model: PerDPM, data: CohortDataset, post: Posterior | None = None) -> float:
    """Mean per-sample observation NLL (Gaussian) or cross-entropy (Bernoulli)."""
    _check_mode(model, data)
    post = post or posterior(model, data)
    mask = data.mask
    if model.config.emission == GAUSSIAN:
        el = nm.gaussian_nll_elements(data.x, post.outputs["mu_x"], post.outputs["sigma_x"]).data
    else:
        p = nm.sigmoid(post.outputs["logits_x"])
        el = nm.bernoulli_ce_elements(data.x, p).data
    return float((el.sum(axis=2) * mask).sum() / data.n_samples)


test_score.__test__ = False  # keep pytest from collecting it


def state_probabilities(z: np.ndarray) -> np.ndarray:
    return nm.softmax_rows(z).data


def predict_states(model: PerDPM, data: CohortDataset, post: Posterior | None = None):
    """``(probabilities [N, T, K], labels [N, T])`` from softmax of posterior means."""
    post = post or posterior(model, data)
    probs = state_probabilities(post.mu_z)
    return probs, probs.argmax(axis=-1)


def contingency_table(a, b) -> np.ndarray:
    """Counts over occupied categories only (rows from ``a``, columns from ``b``)."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.shape != b.shape:
        raise EvaluationError(f"label arrays differ in length: {a.size} vs {b.size}")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1 if ai.size else 0, bi.max() + 1 if bi.size else 0))
    np.add.at(table, (ai, bi), 1.0)
    return table


def chi2_contingency(pred_labels, true_labels) -> tuple[float, int]:
    """Pearson chi-square of the pooled label table against independence."""
    table = contingency_table(pred_labels, true_labels)
    r, c = table.shape
    if r < 2 or c < 2:
        raise EvaluationError(
            f"chi-square needs >= 2 occupied rows and columns, got {r}x{c}")
    n = table.sum()
    expected = table.sum(axis=1, keepdims=True) * table.sum(axis=0, keepdims=True) / n
    stat = float(((table - expected) ** 2 / expected).sum())
    return stat, (r - 1) * (c - 1)


def dsi(probabilities) -> np.ndarray:
    """Expected state index with states numbered ``1..K``."""
    p = np.asarray(probabilities, dtype=np.float64)
    if (p < -1e-12).any() or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
        raise EvaluationError("dsi: input rows must lie on the probability simplex")
    return p @ np.arange(1, p.shape[-1] + 1, dtype=np.float64)


def adjusted_rand_index(a, b) -> float:
    """Pair-counting ARI (Hubert and Arabie)."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.shape != b.shape:
        raise EvaluationError(f"partitions differ in length: {a.size} vs {b.size}")
    table = contingency_table(a, b)
    n = a.size

    def pairs(x):
        return (x * (x - 1) / 2.0).sum()

    index = pairs(table)
    rows, cols = pairs(table.sum(axis=1)), pairs(table.sum(axis=0))
    total = n * (n - 1) / 2.0
    expected = rows * cols / total if total else 0.0
    max_index = (rows + cols) / 2.0
    if max_index == expected:
        # both partitions trivial (all one cluster or all singletons)
        return 1.0
    return float((index - expected) / (max_index - expected))


@dataclass
class ClusterResult:
    assignments: np.ndarray             # [N]
    group_means: np.ndarray             # [n_groups, T, d_x] mean observation per step
    centers: np.ndarray


def cluster_v(v_estimates, n_groups: int, seed: int = 0, observations: CohortDataset | None = None,
              n_init: int = 20) -> ClusterResult:
    """k-means (k-means++ seeding, ``n_init`` restarts) on inferred cluster variables."""
    v = np.asarray(v_estimates, dtype=np.float64)
    if n_groups < 2:
        raise EvaluationError("cluster_v needs n_groups >= 2")
    if v.shape[0] < n_groups:
        raise EvaluationError(f"cluster_v: {v.shape[0]} samples cannot form {n_groups} groups")
    km = KMeans(n_clusters=n_groups, init="k-means++", n_init=n_init, random_state=seed)
    labels = km.fit_predict(v)
    means = np.zeros((n_groups, 0, 0))
    if observations is not None:
        means = group_mean_trajectories(observations, labels, n_groups)
    return ClusterResult(labels, means, km.cluster_centers_)


def group_mean_trajectories(data: CohortDataset, labels, n_groups: int) -> np.ndarray:
    """Masked mean of X per group and step; NaN where a group has no valid samples."""
    mask = data.mask
    out = np.full((n_groups, data.n_steps, data.x.shape[2]), np.nan)
    for k in range(n_groups):
        sel = labels == k
        w = mask[sel][..., None]
        count = w.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[k] = np.where(count > 0, (data.x[sel] * w).sum(axis=0) / count, np.nan)
    return out


def group_mean_dsi(dsi_values: np.ndarray, labels, n_groups: int, mask: np.ndarray) -> np.ndarray:
    out = np.full((n_groups, dsi_values.shape[1]), np.nan)
    for k in range(n_groups):
        sel = labels == k
        count = mask[sel].sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[k] = np.where(count > 0, (dsi_values[sel] * mask[sel]).sum(axis=0) / count, np.nan)
    return out


@dataclass
class EvalReport:
    score_name: str
    score: float
    chi2: float | None = None
    chi2_dof: int | None = None
    chi2_note: str | None = None
    dsi: np.ndarray | None = None                    # [N, T]
    cluster_assignments: np.ndarray | None = None    # [N]
    ari_vs_truth: float | None = None
    cluster_dsi: np.ndarray | None = None            # [n_groups, T]
    cluster_means: np.ndarray | None = None          # [n_groups, T, d_x]
    state_probabilities: np.ndarray | None = None
    state_labels: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)

    def scalars(self) -> dict:
        out = {self.score_name: self.score}
        if self.chi2 is not None:
            out.update(chi2=self.chi2, chi2_dof=self.chi2_dof)
        if self.ari_vs_truth is not None:
            out["ari_vs_truth"] = self.ari_vs_truth
        return out


def evaluate(model: PerDPM, data: CohortDataset, seed: int = 0,
             n_groups: int | None = None) -> EvalReport:
    _check_mode(model, data)
    post = posterior(model, data)
    name = "test_nll" if model.config.emission == GAUSSIAN else "test_ce"
    report = EvalReport(name, test_score(model, data, post))
    probs, labels = predict_states(model, data, post)
    report.state_probabilities, report.state_labels = probs, labels
    report.dsi = dsi(probs)
    mask = data.mask.astype(bool)
    gt = data.ground_truth
    if gt is None:
        report.chi2_note = "dataset carries no ground-truth state labels"
    elif gt.z_true.shape[-1] != probs.shape[-1]:
        report.chi2_note = "model latent size differs from the number of true states"
    else:
        try:
            report.chi2, report.chi2_dof = chi2_contingency(labels[mask], gt.state_labels[mask])
        except EvaluationError as exc:
            # predictions collapsed onto one state: no association to measure
            report.chi2, report.chi2_dof, report.chi2_note = 0.0, 0, str(exc)
    if post.mu_v is None:
        report.notes.append("no cluster variable in the DMM ablation; cluster analysis skipped")
        return report
    groups = n_groups or model.config.k
    if groups >= 2 and data.n_samples >= groups:
        clusters = cluster_v(post.mu_v, groups, seed=seed, observations=data)
        report.cluster_assignments = clusters.assignments
        report.cluster_means = clusters.group_means
        report.cluster_dsi = group_mean_dsi(report.dsi, clusters.assignments, groups, data.mask)
        if gt is not None:
            report.ari_vs_truth = adjusted_rand_index(clusters.assignments, gt.cluster_labels)
    return report
