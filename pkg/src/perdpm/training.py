"""ELBO assembly, the adaptive-moment optimizer and the minibatch fit loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numeric as nm
from .model import BERNOULLI, GAUSSIAN, PerDPM, load_checkpoint, save_checkpoint
from .synthgen import CohortDataset

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e8
HISTORY_FIELDS = ("epoch", "mse_vae", "kl_vae", "nll", "kl_z", "total")


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 3e-3
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    scale_vae_by_length: bool = True
    # fraction of epochs over which both KL terms ramp linearly from 0 to 1
    kl_warmup: float = 0.1
    clip_norm: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    test_fraction: float = 0.2
    split_seed: int | None = None

    def validate(self) -> None:
        if not self.lr >= 0:
            raise ValueError(f"lr must be >= 0, got {self.lr!r}")
        if int(self.batch_size) < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if int(self.epochs) < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs!r}")
        if not 0 <= self.kl_warmup <= 1:
            raise ValueError(f"kl_warmup must lie in [0, 1], got {self.kl_warmup!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("optimizer moments need 0 <= beta < 1 and eps > 0")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction!r}")

    @property
    def resolved_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig field(s): {', '.join(sorted(unknown))}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg


@dataclass
class LossBreakdown:
    mse_vae: float
    kl_vae: float
    nll: float
    kl_z: float

    @property
    def total(self) -> float:
        return self.mse_vae + self.kl_vae + self.nll + self.kl_z

    def as_row(self, epoch: int) -> dict:
        return {"epoch": epoch, "mse_vae": self.mse_vae, "kl_vae": self.kl_vae,
                "nll": self.nll, "kl_z": self.kl_z, "total": self.total}


@dataclass
class ElboTerms:
    """Per-batch mean loss terms as tape tensors (``None`` for absent terms)."""

    nll: nm.Tensor
    kl_z: nm.Tensor
    mse_vae: nm.Tensor | None = None
    kl_vae: nm.Tensor | None = None

    def objective(self, kl_weight: float = 1.0) -> nm.Tensor:
        loss = self.nll + kl_weight * self.kl_z
        if self.mse_vae is not None:
            loss = loss + self.mse_vae + kl_weight * self.kl_vae
        return loss

    def breakdown(self) -> LossBreakdown:
        def val(t):
            return 0.0 if t is None else t.item()

        return LossBreakdown(val(self.mse_vae), val(self.kl_vae), val(self.nll), val(self.kl_z))


def _check(name: str, t: nm.Tensor) -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteLoss(f"non-finite loss term {name}")


def elbo_terms(model: PerDPM, x, u, g, mask, rng=None, scale_vae_by_length: bool = True,
               outputs: dict | None = None) -> ElboTerms:
    """Assemble the four objective terms for one batch.

    ``rng`` supplies the reparameterization noise; ``None`` uses means. The VAE
    terms are multiplied by each sample's valid length when
    ``scale_vae_by_length`` is set. Pre-computed ``outputs`` of
    :meth:`PerDPM.forward` may be passed to avoid a second pass.
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    b = x.shape[0]
    out = model.forward(x, u, g, rng) if outputs is None else outputs
    if model.config.emission == GAUSSIAN:
        rec = nm.gaussian_nll_elements(x, out["mu_x"], out["sigma_x"])
    else:
        if not np.isin(x, (0.0, 1.0)).all():
            raise ValueError("Bernoulli-mode model needs binary observations")
        rec = nm.bernoulli_ce_elements(x, nm.sigmoid(out["logits_x"]))
    nll = (rec.sum(axis=2) * mask).sum() * (1.0 / b)
    klz = nm.kl_diag_gaussian_elements(out["mu_q"], out["sigma_q"], out["mu_p"], out["sigma_p"])
    kl_z = (klz.sum(axis=2) * mask).sum() * (1.0 / b)
    terms = ElboTerms(nll=nll, kl_z=kl_z)
    if not model.config.dmm:
        weight = mask.sum(axis=1) if scale_vae_by_length else np.ones(b)
        mse = nm.square(nm.as_tensor(np.asarray(g, dtype=np.float64)) - out["g_hat"]).mean(axis=1)
        klv = nm.kl_diag_gaussian_elements(out["mu_v"], out["sigma_v"], 0.0, 1.0).sum(axis=1)
        terms.mse_vae = (mse * weight).sum() * (1.0 / b)
        terms.kl_vae = (klv * weight).sum() * (1.0 / b)
    for name in ("mse_vae", "kl_vae", "nll", "kl_z"):
        t = getattr(terms, name)
        if t is not None:
            _check(name, t)
    return terms


def elbo_loss(data: CohortDataset, model: PerDPM, rng=None, **kw) -> LossBreakdown:
    return elbo_terms(model, data.x, data.u, data.g, data.mask, rng, **kw).breakdown()


# ------------------------------------------------------------- optimizer


class Adam:
    """First/second-moment adaptive step with bias correction."""

    def __init__(self, params: list[nm.Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.steps = 0

    def step(self, grads: list[np.ndarray]) -> None:
        for g in grads:
            if not np.isfinite(g).all():
                raise NonFiniteLoss("adaptive_gradient_step: non-finite gradient")
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.data.shape != g.shape:
                raise nm.ShapeError(f"adaptive_gradient_step: param {p.shape} vs grad {g.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(grads: list[np.ndarray], max_norm: float | None) -> tuple[list[np.ndarray], float]:
    norm = nm.global_norm(grads)
    if max_norm is None or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


def adaptive_gradient_step(optimizer: Adam, grads: list[np.ndarray], clip_norm: float | None = None):
    grads, norm = clip_gradients(grads, clip_norm)
    optimizer.step(grads)
    return norm


# ------------------------------------------------------------------ fit


@dataclass
class FitResult:
    model: PerDPM                       # best-epoch parameters
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    final_model: PerDPM | None = None
    optimizer: Adam | None = None


def kl_weight(epoch: int, cfg: TrainConfig) -> float:
    warm = int(math.ceil(cfg.kl_warmup * cfg.epochs))
    if warm <= 0:
        return 1.0
    return min(1.0, (epoch + 1) / warm)


def fit(data: CohortDataset, model: PerDPM, cfg: TrainConfig, *, start_epoch: int = 0,
        history: list[dict] | None = None, optimizer: Adam | None = None) -> FitResult:
    """Minibatch training; epochs ``start_epoch .. start_epoch + cfg.epochs - 1``.

    A fresh run (no optimizer state, ``start_epoch == 0``) first fits the
    model's input standardization to ``data``. Every epoch draws its shuffle
    and its noise from generators keyed on
    ``(seed, epoch)``, so a resumed run sees the same streams a straight run
    would at the same epoch index.
    """
    cfg.validate()
    if model.config.emission == BERNOULLI and not data.is_binary:
        raise ValueError("Bernoulli-mode model needs a binary cohort")
    if model.config.emission == GAUSSIAN and data.is_binary:
        log.warning("Gaussian emission on a binary cohort")
    if optimizer is None and start_epoch == 0:
        model.fit_normalization(data.x, data.g, data.mask)
    params = model.parameters()
    if optimizer is None:
        optimizer = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    else:
        optimizer.params = params
    history = list(history or [])
    best_total = min((row["total"] for row in history), default=math.inf)
    best_state = model.state_dict()
    best_epoch = min(history, key=lambda row: row["total"])["epoch"] if history else start_epoch
    n = data.n_samples
    mask = data.mask
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = nm.make_rng(cfg.seed, epoch, 0).permutation(n)
        noise = nm.make_rng(cfg.seed, epoch, 1)
        beta = kl_weight(epoch, cfg)
        sums = np.zeros(4)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            with nm.Tape() as tape:
                terms = elbo_terms(model, data.x[idx], data.u[idx], data.g[idx], mask[idx], noise,
                                   cfg.scale_vae_by_length)
                loss = terms.objective(beta)
            if loss.item() > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"epoch {epoch}: loss {loss.item():.3g} exceeds 1e8")
            grads = tape.backward(loss, params)
            adaptive_gradient_step(optimizer, grads, cfg.clip_norm)
            bd = terms.breakdown()
            sums += len(idx) * np.array([bd.mse_vae, bd.kl_vae, bd.nll, bd.kl_z])
        means = LossBreakdown(*(sums / n))
        row = means.as_row(epoch)
        history.append(row)
        log.info("epoch %d total %.4f (mse %.3f klv %.3f nll %.3f klz %.3f)", epoch, means.total,
                 means.mse_vae, means.kl_vae, means.nll, means.kl_z)
        if means.total < best_total:
            best_total = means.total
            best_state = model.state_dict()
            best_epoch = epoch
    final = model.copy()
    best = model.copy()
    best.load_state_dict(best_state)
    return FitResult(best, history, best_epoch, final, optimizer)


# ------------------------------------------------------- history / state


def write_history(path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (row[k] if k == "epoch" else repr(float(row[k])))
                             for k in HISTORY_FIELDS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def save_training_state(directory, result: FitResult, cfg: TrainConfig) -> None:
    """Final (not best) parameters plus optimizer moments, for resuming."""
    directory = Path(directory)
    save_checkpoint(directory, result.final_model)
    opt = result.optimizer
    for i, (m, v) in enumerate(zip(opt.m, opt.v)):
        np.ascontiguousarray(m, dtype="<f8").tofile(directory / f"adam_m_{i}.bin")
        np.ascontiguousarray(v, dtype="<f8").tofile(directory / f"adam_v_{i}.bin")
    with open(directory / "optimizer.json", "w") as fh:
        json.dump({"steps": opt.steps, "n_params": len(opt.m),
                   "next_epoch": result.history[-1]["epoch"] + 1 if result.history else 0,
                   "train_config": asdict(cfg)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_training_state(directory, cfg: TrainConfig) -> tuple[PerDPM, Adam, int]:
    directory = Path(directory)
    model, _ = load_checkpoint(directory)
    with open(directory / "optimizer.json") as fh:
        meta = json.load(fh)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    opt.steps = meta["steps"]
    for i, p in enumerate(opt.params):
        opt.m[i] = np.fromfile(directory / f"adam_m_{i}.bin", dtype="<f8").reshape(p.shape)
        opt.v[i] = np.fromfile(directory / f"adam_v_{i}.bin", dtype="<f8").reshape(p.shape)
    return model, opt, meta["next_epoch"]
