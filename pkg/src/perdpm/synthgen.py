"""Synthetic genetics-driven cohorts with known clusters, dynamics and states.

Generation runs in four stages, each drawing from its own RNG stream so that
changing one stage's settings does not perturb the others:

1. genetics: cluster means, per-cluster isotropic spread, one-hot cluster
   membership per sample, genetic vectors around the member cluster's mean;
2. treatments: one contiguous block of ones per sample;
3. latent states: per-sample initial state, then a cluster-specific
   one-hidden-layer tanh map on ``[Z_{t-1}, U_{t-1}]`` followed by softmax;
4. observations: a shared affine emission plus Gaussian noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .numeric import make_rng

DTYPE_TAG = "f64le"
_STREAM_GENETICS, _STREAM_TREATMENT, _STREAM_STATES, _STREAM_OBS, _STREAM_LENGTHS = range(5)


class DatasetError(ValueError):
    pass


@dataclass
class GenConfig:
    n_samples: int = 750
    n_steps: int = 10
    n_clusters: int = 5
    d_g: int = 10
    d_x: int = 10
    d_z: int = 5
    d_u: int = 1
    seed: int = 0
    noise: float = 1.0
    # minimum pairwise Euclidean distance between cluster means (rejection sampled)
    min_separation: float = 5.0
    transition_hidden: int = 16
    # shortest sequence length; equal to n_steps means every sample is complete
    min_length: int | None = None

    def validate(self) -> None:
        for name in ("n_samples", "n_steps", "n_clusters", "d_g", "d_x", "d_z", "d_u",
                     "transition_hidden"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value!r}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise!r}")
        if self.min_separation < 0:
            raise ValueError(f"min_separation must be >= 0, got {self.min_separation!r}")
        if self.min_length is not None and not 1 <= self.min_length <= self.n_steps:
            raise ValueError(f"min_length must lie in [1, n_steps], got {self.min_length!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown GenConfig field(s): {', '.join(sorted(unknown))}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class GroundTruth:
    v_true: np.ndarray          # [N, K] one-hot
    s_true: np.ndarray          # [K, d_g] cluster genetic means
    z_true: np.ndarray          # [N, T, d_z]
    transition: dict = field(default_factory=dict)
    emission: dict = field(default_factory=dict)

    @property
    def state_labels(self) -> np.ndarray:
        return self.z_true.argmax(axis=-1)

    @property
    def cluster_labels(self) -> np.ndarray:
        return self.v_true.argmax(axis=-1)


@dataclass
class CohortDataset:
    x: np.ndarray               # [N, T, d_x]
    u: np.ndarray               # [N, T, d_u]
    g: np.ndarray               # [N, d_g]
    lengths: np.ndarray         # [N] int
    ground_truth: GroundTruth | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n, t = self.x.shape[:2]
        if self.u.shape[:2] != (n, t) or self.g.shape[0] != n or self.lengths.shape != (n,):
            raise DatasetError(
                f"inconsistent cohort shapes: X {self.x.shape}, U {self.u.shape}, "
                f"G {self.g.shape}, lengths {self.lengths.shape}")
        if (self.lengths > t).any() or (self.lengths < 1).any():
            raise DatasetError("sequence lengths must lie in [1, T]")

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def n_steps(self) -> int:
        return self.x.shape[1]

    @property
    def mask(self) -> np.ndarray:
        return (np.arange(self.n_steps)[None, :] < self.lengths[:, None]).astype(np.float64)

    @property
    def is_binary(self) -> bool:
        return bool(np.isin(self.x, (0.0, 1.0)).all())

    def subset(self, idx) -> "CohortDataset":
        idx = np.asarray(idx)
        gt = None
        if self.ground_truth is not None:
            g = self.ground_truth
            gt = GroundTruth(g.v_true[idx], g.s_true, g.z_true[idx], g.transition, g.emission)
        return CohortDataset(self.x[idx], self.u[idx], self.g[idx], self.lengths[idx], gt,
                             dict(self.meta))


# ------------------------------------------------------------------ stages


def _cluster_means(cfg: GenConfig, rng: np.random.Generator, max_tries: int = 10_000) -> np.ndarray:
    for _ in range(max_tries):
        mu = rng.uniform(-5.0, 5.0, size=(cfg.n_clusters, cfg.d_g))
        if cfg.n_clusters == 1 or cfg.min_separation == 0:
            return mu
        diff = mu[:, None, :] - mu[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        if dist[np.triu_indices(cfg.n_clusters, 1)].min() >= cfg.min_separation:
            return mu
    raise ValueError(
        f"could not place {cfg.n_clusters} cluster means {cfg.min_separation} apart in "
        f"d_g={cfg.d_g} after {max_tries} draws; lower min_separation")


def gen_genetics(cfg: GenConfig, rng: np.random.Generator):
    """Return ``(G, V_true, S_true)``.

    Membership logits are standard normal per sample and the one-hot cluster is
    drawn from their softmax; each sample's genetics is an isotropic Gaussian
    draw around its cluster mean with the cluster's variance ``u_k ~ U(0, 1)``.
    """
    means = _cluster_means(cfg, rng)
    variances = rng.uniform(0.0, 1.0, size=cfg.n_clusters)
    logits = rng.standard_normal((cfg.n_samples, cfg.n_clusters))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    # inverse-CDF categorical draw, one uniform per sample
    draws = rng.uniform(size=(cfg.n_samples, 1))
    labels = np.minimum((probs.cumsum(axis=1) < draws).sum(axis=1), cfg.n_clusters - 1)
    v_true = np.eye(cfg.n_clusters)[labels]
    noise = rng.standard_normal((cfg.n_samples, cfg.d_g))
    g = means[labels] + np.sqrt(variances[labels])[:, None] * noise
    return g, v_true, means


def treatment_block(t_a: int, t_b: int, n_steps: int, d_u: int) -> np.ndarray:
    start, end = (t_a, t_b) if t_a <= t_b else (t_b, t_a)
    u = np.zeros((n_steps, d_u))
    u[start:end] = 1.0
    return u


def gen_treatments(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Binary treatments: ones on ``[min(a, b), max(a, b))`` with ``a, b ~ U{0..T-1}``."""
    pairs = rng.integers(0, cfg.n_steps, size=(cfg.n_samples, 2))
    return np.stack([treatment_block(a, b, cfg.n_steps, cfg.d_u) for a, b in pairs])


def draw_transition_bank(cfg: GenConfig, rng: np.random.Generator) -> dict:
    fan_in = cfg.d_z + cfg.d_u
    k, h = cfg.n_clusters, cfg.transition_hidden
    scale_in, scale_out = 1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(h)
    return {
        "w1": rng.normal(0.0, scale_in, size=(k, fan_in, h)),
        "b1": rng.normal(0.0, scale_in, size=(k, h)),
        "w2": rng.normal(0.0, scale_out, size=(k, h, cfg.d_z)),
        "b2": rng.normal(0.0, scale_out, size=(k, cfg.d_z)),
    }


def apply_transition_bank(bank: dict, z_prev: np.ndarray, u_prev: np.ndarray) -> np.ndarray:
    """All K cluster maps on ``[z_prev, u_prev]``; returns ``[N, K, d_z]``."""
    inp = np.concatenate([z_prev, u_prev], axis=-1)
    hidden = np.tanh(np.einsum("ni,kih->nkh", inp, bank["w1"]) + bank["b1"])
    return np.einsum("nkh,khd->nkd", hidden, bank["w2"]) + bank["b2"]


def _softmax(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def gen_states(cfg: GenConfig, v_true: np.ndarray, u: np.ndarray, rng: np.random.Generator,
               bank: dict | None = None, z_init: np.ndarray | None = None):
    """Roll the cluster-mixed transition forward; returns ``(Z_true, bank)``.

    ``Z[:, 0]`` is the Gaussian initial state; every later step is the softmax
    of the V-weighted stack of cluster transition outputs.
    """
    if bank is None:
        bank = draw_transition_bank(cfg, rng)
    n = v_true.shape[0]
    if z_init is None:
        mu_init = rng.standard_normal((n, cfg.d_z))
        z_init = mu_init + rng.standard_normal((n, cfg.d_z))
    z = np.empty((n, cfg.n_steps, cfg.d_z))
    z[:, 0] = z_init
    for t in range(1, cfg.n_steps):
        heads = apply_transition_bank(bank, z[:, t - 1], u[:, t - 1])
        z[:, t] = _softmax(np.einsum("nk,nkd->nd", v_true, heads))
    return z, bank


def draw_emission(cfg: GenConfig, rng: np.random.Generator) -> dict:
    return {"w": rng.standard_normal((cfg.d_z, cfg.d_x)), "b": rng.standard_normal(cfg.d_x)}


def gen_observations(cfg: GenConfig, z_true: np.ndarray, rng: np.random.Generator,
                     emission: dict | None = None):
    """``X = Z w + b + noise * eps``; returns ``(X, emission)``."""
    if emission is None:
        emission = draw_emission(cfg, rng)
    x = z_true @ emission["w"] + emission["b"]
    if cfg.noise > 0:
        x = x + cfg.noise * rng.standard_normal(x.shape)
    return x, emission


def generate(cfg: GenConfig) -> CohortDataset:
    cfg.validate()
    g, v_true, s_true = gen_genetics(cfg, make_rng(cfg.seed, _STREAM_GENETICS))
    u = gen_treatments(cfg, make_rng(cfg.seed, _STREAM_TREATMENT))
    z, bank = gen_states(cfg, v_true, u, make_rng(cfg.seed, _STREAM_STATES))
    x, emission = gen_observations(cfg, z, make_rng(cfg.seed, _STREAM_OBS))
    if cfg.min_length is None or cfg.min_length == cfg.n_steps:
        lengths = np.full(cfg.n_samples, cfg.n_steps, dtype=np.int64)
    else:
        lengths = make_rng(cfg.seed, _STREAM_LENGTHS).integers(
            cfg.min_length, cfg.n_steps + 1, size=cfg.n_samples)
        pad = np.arange(cfg.n_steps)[None, :] >= lengths[:, None]
        x[pad] = 0.0
        u[pad] = 0.0
    gt = GroundTruth(v_true, s_true, z, bank, emission)
    return CohortDataset(x, u, g, lengths, gt, {"config": asdict(cfg)})


def binarize(data: CohortDataset, threshold: float | None = None) -> CohortDataset:
    """Threshold observations (default: median over valid entries) into {0, 1}."""
    valid = data.mask.astype(bool)
    if threshold is None:
        threshold = float(np.median(data.x[valid]))
    x = (data.x > threshold).astype(np.float64)
    x[~valid] = 0.0
    meta = dict(data.meta, binarize_threshold=threshold)
    return CohortDataset(x, data.u.copy(), data.g.copy(), data.lengths.copy(),
                         data.ground_truth, meta)


def split_indices(n: int, test_fraction: float, seed: int):
    """Seeded permutation split; returns ``(train_idx, test_idx)`` sorted."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction!r}")
    perm = make_rng(seed, 99).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# --------------------------------------------------------------------- I/O


def _write_tensor(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype="<f8").tofile(path)


def _read_tensor(path: Path, shape) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing tensor file {path.name}")
    raw = np.fromfile(path, dtype="<f8")
    expected = int(np.prod(shape))
    if raw.size != expected:
        raise DatasetError(
            f"{path.name}: manifest shape {list(shape)} needs {expected} values, file has {raw.size}")
    return raw.reshape(shape).astype(np.float64)


def write_dataset(directory, data: CohortDataset) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {"X": data.x, "U": data.u, "G": data.g, "lengths": data.lengths.astype(np.float64)}
    gt = data.ground_truth
    if gt is not None:
        tensors.update({"Ztrue": gt.z_true, "Vtrue": gt.v_true, "labels": gt.state_labels,
                        "Strue": gt.s_true})
    manifest = {
        "format": "perdpm-cohort",
        "dtype": DTYPE_TAG,
        "tensors": {name: {"file": f"{name}.bin", "shape": list(np.shape(arr))}
                    for name, arr in tensors.items()},
        "has_ground_truth": gt is not None,
        "seed": data.meta.get("config", {}).get("seed"),
        "meta": data.meta,
    }
    for name, arr in tensors.items():
        _write_tensor(directory / f"{name}.bin", np.asarray(arr, dtype=np.float64))
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def read_dataset(directory) -> CohortDataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise DatasetError(f"no manifest.json in {directory}")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
        specs = manifest["tensors"]
        if manifest.get("dtype") != DTYPE_TAG:
            raise DatasetError(f"unsupported dtype tag {manifest.get('dtype')!r}")
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"corrupt manifest in {directory}: {exc}") from None

    def load(name):
        if name not in specs:
            raise DatasetError(f"manifest lists no tensor {name!r}")
        return _read_tensor(directory / specs[name]["file"], specs[name]["shape"])

    x, u, g = load("X"), load("U"), load("G")
    lengths = load("lengths").astype(np.int64)
    gt = None
    if manifest.get("has_ground_truth"):
        gt = GroundTruth(load("Vtrue"), load("Strue"), load("Ztrue"))
        if not np.array_equal(load("labels"), gt.state_labels):
            raise DatasetError("labels.bin disagrees with argmax of Ztrue.bin")
    return CohortDataset(x, u, g, lengths, gt, manifest.get("meta", {}))
