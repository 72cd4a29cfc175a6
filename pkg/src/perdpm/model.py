"""PerDPM networks: genetic VAE, GRU inference network with combiner,
cluster-attention transition prior, emission head and initial-state prior.

Parameters live in an ordered ``name -> Tensor`` mapping so the optimizer,
the checkpoint writer and the gradient checker can walk them uniformly.
Shapes (``B`` batch, ``T`` steps, ``K`` clusters):

* encoder ``G -> (mu_v, sigma_v)``: 2-layer ReLU MLP, outputs ``[B, K]``
* decoder ``V -> G_hat = V S + b``: a single affine layer, ``S`` is ``[K, d_g]``
* GRU over ``[X_t, U_t, G]`` with a learned initial hidden state
* combiner: precision-weighted fusion of an ``h_t`` head and a skip head on
  ``[X_t, U_t, G, Z_{t-1}]``
* transition bank: ``K`` 2-layer tanh MLPs on ``[Z_{t-1}, U_t, S_k]``
  mixed by ``softmax(V)``
* emission: 2-layer ReLU MLP ``Z_t -> (mu_x, sigma_x)`` or Bernoulli logits

In the DMM ablation there is one transition function, no genetics anywhere
and no VAE.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numeric as nm
from .numeric import Tensor

GAUSSIAN, BERNOULLI = "gaussian", "bernoulli"


class ModelStateError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d_x: int
    d_u: int
    d_g: int
    d_z: int = 5
    n_clusters: int = 5
    gru_hidden: int = 64
    mlp_hidden: int = 32
    emission: str = GAUSSIAN
    dmm: bool = False

    def __post_init__(self):
        for name in ("d_x", "d_u", "d_g", "d_z", "n_clusters", "gru_hidden", "mlp_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.emission not in (GAUSSIAN, BERNOULLI):
            raise ValueError(f"emission must be {GAUSSIAN!r} or {BERNOULLI!r}")

    @property
    def k(self) -> int:
        return 1 if self.dmm else self.n_clusters

    @property
    def inference_input(self) -> int:
        return self.d_x + self.d_u + (0 if self.dmm else self.d_g)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})


def combine_gaussians(mu1, sigma1, mu2, sigma2):
    """Precision-weighted product of two diagonal Gaussians.

    ``var = 1 / (1/var1 + 1/var2)`` and ``mu = var * (mu1/var1 + mu2/var2)``,
    evaluated in the algebraically equivalent form below so that a very wide
    second Gaussian degrades smoothly to the first.
    """
    var1, var2 = nm.square(sigma1), nm.square(sigma2)
    total = var1 + var2
    mu = (mu1 * var2 + mu2 * var1) / total
    var = var1 * var2 / total
    return mu, nm.sqrt(var)


_BIASES = frozenset({"enc_b1", "enc_b2", "dec_b", "gru_b", "h_init", "z_init", "comb_bh",
                     "comb_bx", "trans_b1", "trans_b2", "prior0_mu", "prior0_sig",
                     "emit_b1", "emit_b2"})
_OUTPUT_HEADS = frozenset({"enc_w2", "comb_wh", "comb_wx", "comb_wz", "trans_w2", "emit_w2"})


class PerDPM:
    """The genetics-driven state-space model.

    ``buffers`` hold a fixed standardization of X and G applied before every
    network that reads them; the decoder still reconstructs raw G.
    """

    def __init__(self, config: ModelConfig, seed: int | None = None):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self.buffers = {
            "x_mean": np.zeros(config.d_x), "x_std": np.ones(config.d_x),
            "g_mean": np.zeros(config.d_g), "g_std": np.ones(config.d_g),
        }
        if seed is not None:
            self.initialize(seed)

    # ----------------------------------------------------------- set-up

    @property
    def initialized(self) -> bool:
        return bool(self.params)

    def dmm_ablation_mode(self, flag: bool = True) -> "PerDPM":
        if self.initialized:
            raise ModelStateError("ablation mode must be chosen before parameter initialization")
        self.config.dmm = bool(flag)
        return self

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        k, h, hg, dz = c.k, c.mlp_hidden, c.gru_hidden, c.d_z
        out_x = 2 * c.d_x if c.emission == GAUSSIAN else c.d_x
        trans_in = dz + c.d_u
        shapes: dict[str, tuple[int, ...]] = {}
        if not c.dmm:
            shapes.update({
                "enc_w1": (c.d_g, h), "enc_b1": (h,),
                "enc_w2": (h, 2 * k), "enc_b2": (2 * k,),
                "dec_s": (k, c.d_g), "dec_b": (c.d_g,),
            })
        shapes.update({
            "gru_wx": (c.inference_input, 3 * hg), "gru_wh": (hg, 3 * hg), "gru_b": (3 * hg,),
            "h_init": (hg,), "z_init": (dz,),
            "comb_wh": (hg, 2 * dz), "comb_bh": (2 * dz,),
            "comb_wx": (c.inference_input, 2 * dz), "comb_wz": (dz, 2 * dz), "comb_bx": (2 * dz,),
            "trans_w1": (trans_in, k * h), "trans_b1": (k * h,),
            "trans_w2": (k, h, 2 * dz), "trans_b2": (k, 2 * dz),
            "prior0_mu": (k, dz), "prior0_sig": (k, dz),
            "emit_w1": (dz, h), "emit_b1": (h,), "emit_w2": (h, out_x), "emit_b2": (out_x,),
        })
        if not c.dmm:
            shapes["trans_ws"] = (k, c.d_g, h)
        return shapes

    def initialize(self, seed: int, scale: float | None = None) -> "PerDPM":
        """Draw parameters.

        Weights are ``N(0, 1/fan_in)`` (output heads shrunk tenfold) and biases
        zero, unless ``scale`` fixes a common std for every tensor.
        """
        rng = nm.make_rng(seed, 7)
        params = {}
        for name, shape in self.param_shapes().items():
            if scale is not None:
                std = scale
            elif name in _BIASES:
                std = 0.0
            else:
                std = (0.1 if name in _OUTPUT_HEADS else 1.0) / np.sqrt(shape[-2])
            params[name] = nm.parameter(rng.normal(0.0, std, size=shape) if std > 0
                                        else np.zeros(shape))
        self.params = params
        return self

    def fit_normalization(self, x, g, mask=None) -> None:
        """Set the fixed input standardization from training data."""
        x = np.asarray(x, dtype=np.float64)
        valid = x.reshape(-1, x.shape[-1]) if mask is None else x[np.asarray(mask) > 0]
        g = np.asarray(g, dtype=np.float64)
        self.buffers = {
            "x_mean": valid.mean(axis=0), "x_std": np.maximum(valid.std(axis=0), 1e-6),
            "g_mean": g.mean(axis=0), "g_std": np.maximum(g.std(axis=0), 1e-6),
        }

    def _norm_x(self, x):
        return (x - self.buffers["x_mean"]) / self.buffers["x_std"]

    def _norm_g(self, g):
        return (g - self.buffers["g_mean"]) / self.buffers["g_std"]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def copy(self) -> "PerDPM":
        other = PerDPM(ModelConfig(**asdict(self.config)))
        other.params = {k: nm.parameter(v.data.copy()) for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        shapes = self.param_shapes()
        if set(state) != set(shapes):
            raise ModelStateError(f"parameter names differ: {sorted(set(state) ^ set(shapes))}")
        for name, arr in state.items():
            if tuple(arr.shape) != shapes[name]:
                raise ModelStateError(f"{name}: expected shape {shapes[name]}, got {arr.shape}")
        self.params = {k: nm.parameter(np.array(state[k], dtype=np.float64)) for k in shapes}

    # ------------------------------------------------------ genetic VAE

    def encode_genetics(self, g) -> tuple[Tensor, Tensor]:
        p, k = self.params, self.config.k
        g = nm.as_tensor(g)
        if g.ndim != 2 or g.shape[1] != self.config.d_g:
            raise nm.ShapeError(f"encode_genetics: expected [N, {self.config.d_g}], got {g.shape}")
        hidden = nm.relu(self._norm_g(g.data) @ p["enc_w1"] + p["enc_b1"])
        out = hidden @ p["enc_w2"] + p["enc_b2"]
        return out[:, :k], nm.positive_sigma(out[:, k:])

    def decode_genetics(self, v) -> Tensor:
        v = nm.as_tensor(v)
        if v.ndim != 2 or v.shape[1] != self.config.k:
            raise nm.ShapeError(f"decode_genetics: expected [N, {self.config.k}], got {v.shape}")
        return v @ self.params["dec_s"] + self.params["dec_b"]

    # ------------------------------------------------ inference network

    def _gru(self, gx: Tensor, h: Tensor) -> Tensor:
        hg = self.config.gru_hidden
        gh = h @ self.params["gru_wh"]
        gates = nm.sigmoid(gx[:, :2 * hg] + gh[:, :2 * hg])
        update, reset = gates[:, :hg], gates[:, hg:]
        cand = nm.tanh(gx[:, 2 * hg:] + reset * gh[:, 2 * hg:])
        return cand + update * (h - cand)

    def _combine(self, h: Tensor, skip: Tensor, z_prev: Tensor):
        p, dz = self.params, self.config.d_z
        head1 = h @ p["comb_wh"] + p["comb_bh"]
        head2 = skip + z_prev @ p["comb_wz"]
        return combine_gaussians(head1[:, :dz], nm.positive_sigma(head1[:, dz:]),
                                 head2[:, :dz], nm.positive_sigma(head2[:, dz:]))

    def infer_step(self, x_t, u_t, g, h_prev, z_prev, rng=None):
        """One posterior step; returns ``(h_t, mu_t, sigma_t, z_t)``.

        ``h_prev``/``z_prev`` of ``None`` select the learned initial values.
        With ``rng=None`` the posterior mean is returned as ``z_t``.
        """
        p = self.params
        x_t = self._norm_x(np.asarray(x_t, dtype=np.float64))
        parts = [x_t, u_t] if self.config.dmm else [x_t, u_t, self._norm_g(np.asarray(g))]
        inp = np.concatenate([np.asarray(a, dtype=np.float64) for a in parts], axis=1)
        b = inp.shape[0]
        if h_prev is None:
            h_prev = nm.broadcast_to(p["h_init"], (b, self.config.gru_hidden))
        if z_prev is None:
            z_prev = nm.broadcast_to(p["z_init"], (b, self.config.d_z))
        h = self._gru(inp @ p["gru_wx"] + p["gru_b"], h_prev)
        mu, sigma = self._combine(h, inp @ p["comb_wx"] + p["comb_bx"], z_prev)
        z = mu if rng is None else nm.gaussian_sample(mu, sigma, rng)
        return h, mu, sigma, z

    def infer(self, x, u, g, rng=None):
        """Roll the posterior over all steps.

        Returns stacked ``(mu, sigma, z)``, each ``[B, T, d_z]``. Input
        projections for every step are computed in one matmul up front.
        """
        p, c = self.params, self.config
        b, t_len = x.shape[:2]
        x = self._norm_x(x)
        if c.dmm:
            parts = [x, u]
        else:
            parts = [x, u, np.broadcast_to(self._norm_g(g)[:, None, :], (b, t_len, c.d_g))]
        inp = np.concatenate(parts, axis=2).reshape(b * t_len, -1)
        gx_all = (inp @ p["gru_wx"] + p["gru_b"]).reshape(b, t_len, 3 * c.gru_hidden)
        skip_all = (inp @ p["comb_wx"] + p["comb_bx"]).reshape(b, t_len, 2 * c.d_z)
        h = nm.broadcast_to(p["h_init"], (b, c.gru_hidden))
        z = nm.broadcast_to(p["z_init"], (b, c.d_z))
        mus, sigmas, zs = [], [], []
        for t in range(t_len):
            h = self._gru(gx_all[:, t], h)
            mu, sigma = self._combine(h, skip_all[:, t], z)
            z = mu if rng is None else nm.gaussian_sample(mu, sigma, rng)
            mus.append(mu)
            sigmas.append(sigma)
            zs.append(z)
        return nm.stack(mus, axis=1), nm.stack(sigmas, axis=1), nm.stack(zs, axis=1)

    # --------------------------------------------------- generative side

    def _attention(self, v) -> Tensor | None:
        if self.config.dmm:
            return None
        v = nm.as_tensor(v)
        if v.shape[-1] != self.config.k:
            raise nm.ShapeError(
                f"transition_prior: V has {v.shape[-1]} clusters, bank has {self.config.k}")
        return nm.softmax_rows(v)

    def transition_heads(self, z_prev, u_t, s=None) -> Tensor:
        """Every cluster's ``(mu, sigma)`` head stacked as ``[M, K, 2 d_z]``."""
        p, c = self.params, self.config
        k, h, dz = c.k, c.mlp_hidden, c.d_z
        z_prev = nm.as_tensor(z_prev)
        m = z_prev.shape[0]
        inp = nm.concat([z_prev, nm.as_tensor(u_t)], axis=1)
        pre = inp @ p["trans_w1"] + p["trans_b1"]
        if not c.dmm:
            s = p["dec_s"] if s is None else nm.as_tensor(s)
            # per-cluster genetic signature term, shared by every row
            s_term = (s.reshape(k, 1, c.d_g) @ p["trans_ws"]).reshape(1, k * h)
            pre = pre + s_term
        hidden = nm.tanh(pre).reshape(m, k, 1, h)
        out = (hidden @ p["trans_w2"]).reshape(m, k, 2 * dz) + p["trans_b2"]
        return nm.concat([out[..., :dz], nm.positive_sigma(out[..., dz:])], axis=-1)

    def transition_prior(self, z_prev, u_t, v=None, s=None) -> tuple[Tensor, Tensor]:
        """``softmax(V)``-weighted mixture of the cluster heads; returns ``(mu, sigma)``."""
        dz = self.config.d_z
        heads = self.transition_heads(z_prev, u_t, s)
        m = heads.shape[0]
        attn = self._attention(v)
        if attn is None:
            mixed = heads.reshape(m, 2 * dz)
        else:
            if attn.shape[0] != m:
                raise nm.ShapeError(f"transition_prior: V has {attn.shape[0]} rows, Z has {m}")
            mixed = (attn.reshape(m, 1, self.config.k) @ heads).reshape(m, 2 * dz)
        return mixed[:, :dz], mixed[:, dz:]

    def initial_prior(self, v=None, batch: int | None = None) -> tuple[Tensor, Tensor]:
        p = self.params
        sig0 = nm.positive_sigma(p["prior0_sig"])
        attn = self._attention(v)
        if attn is None:
            n = batch if batch is not None else 1
            shape = (n, self.config.d_z)
            return nm.broadcast_to(p["prior0_mu"], shape), nm.broadcast_to(sig0, shape)
        return attn @ p["prior0_mu"], attn @ sig0

    def emit(self, z) -> tuple[Tensor, Tensor] | Tensor:
        """Gaussian mode: ``(mu_x, sigma_x)``; Bernoulli mode: logits."""
        p, dx = self.params, self.config.d_x
        hidden = nm.relu(nm.as_tensor(z) @ p["emit_w1"] + p["emit_b1"])
        out = hidden @ p["emit_w2"] + p["emit_b2"]
        if self.config.emission == GAUSSIAN:
            return out[..., :dx], nm.positive_sigma(out[..., dx:])
        return out

    def emit_probabilities(self, z) -> Tensor:
        if self.config.emission != BERNOULLI:
            raise ModelStateError("emit_probabilities needs a Bernoulli-mode model")
        return nm.clip(nm.sigmoid(self.emit(z)), nm.PROB_CLAMP, 1.0 - nm.PROB_CLAMP)

    # ----------------------------------------------------------- forward

    def forward(self, x, u, g, rng=None) -> dict[str, Tensor]:
        """Full pass. ``rng=None`` is evaluation mode: V = mu_v and Z = posterior mean."""
        c = self.config
        x, u, g = (np.asarray(a, dtype=np.float64) for a in (x, u, g))
        b, t_len = x.shape[:2]
        if x.shape[2] != c.d_x or u.shape[2] != c.d_u or g.shape[1] != c.d_g:
            raise nm.ShapeError(
                f"forward: data dims (d_x={x.shape[2]}, d_u={u.shape[2]}, d_g={g.shape[1]}) "
                f"do not match model ({c.d_x}, {c.d_u}, {c.d_g})")
        out: dict[str, Tensor] = {}
        v = None
        if not c.dmm:
            mu_v, sigma_v = self.encode_genetics(g)
            v = mu_v if rng is None else nm.gaussian_sample(mu_v, sigma_v, rng)
            out.update(mu_v=mu_v, sigma_v=sigma_v, v=v, g_hat=self.decode_genetics(v))
        mu_q, sigma_q, z = self.infer(x, u, g, rng)
        mu0, sig0 = self.initial_prior(v, batch=b)
        if t_len > 1:
            m = b * (t_len - 1)
            z_prev = z[:, :-1].reshape(m, c.d_z)
            v_rows = None
            if v is not None:
                v_rows = nm.broadcast_to(v.reshape(b, 1, c.k), (b, t_len - 1, c.k)).reshape(m, c.k)
            mu_tr, sig_tr = self.transition_prior(z_prev, u[:, 1:].reshape(m, c.d_u), v_rows)
            mu_p = nm.concat([mu0.reshape(b, 1, c.d_z), mu_tr.reshape(b, t_len - 1, c.d_z)], axis=1)
            sig_p = nm.concat([sig0.reshape(b, 1, c.d_z), sig_tr.reshape(b, t_len - 1, c.d_z)], axis=1)
        else:
            mu_p, sig_p = mu0.reshape(b, 1, c.d_z), sig0.reshape(b, 1, c.d_z)
        flat_z = z.reshape(b * t_len, c.d_z)
        if c.emission == GAUSSIAN:
            mu_x, sigma_x = self.emit(flat_z)
            out.update(mu_x=mu_x.reshape(b, t_len, c.d_x), sigma_x=sigma_x.reshape(b, t_len, c.d_x))
        else:
            out["logits_x"] = self.emit(flat_z).reshape(b, t_len, c.d_x)
        out.update(mu_q=mu_q, sigma_q=sigma_q, z=z, mu_p=mu_p, sigma_p=sig_p)
        return out


# -------------------------------------------------------------- checkpoints


def save_checkpoint(directory, model: PerDPM, extra: dict | None = None) -> Path:
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    shapes = model.param_shapes()
    manifest = {
        "format": "perdpm-model",
        "dtype": "f64le",
        "config": asdict(model.config),
        "K": model.config.k,
        "mode": model.config.emission,
        "dmm": model.config.dmm,
        "params": {name: {"file": f"params/{name}.bin", "shape": list(shapes[name])}
                   for name in model.params},
    }
    if extra:
        manifest.update(extra)
    manifest["buffers"] = {name: [float(a) for a in arr] for name, arr in model.buffers.items()}
    for name, t in model.params.items():
        np.ascontiguousarray(t.data, dtype="<f8").tofile(directory / "params" / f"{name}.bin")
    with open(directory / "model.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_checkpoint(directory) -> tuple[PerDPM, dict]:
    directory = Path(directory)
    path = directory / "model.json"
    if not path.exists():
        raise ModelStateError(f"no model.json in {directory}")
    with open(path) as fh:
        manifest = json.load(fh)
    model = PerDPM(ModelConfig.from_dict(manifest["config"]))
    state = {}
    for name, entry in manifest["params"].items():
        raw = np.fromfile(directory / entry["file"], dtype="<f8")
        if raw.size != int(np.prod(entry["shape"])):
            raise ModelStateError(f"{name}: payload size {raw.size} does not match {entry['shape']}")
        state[name] = raw.reshape(entry["shape"]).astype(np.float64)
    model.load_state_dict(state)
    if "buffers" in manifest:
        model.buffers = {k: np.array(v, dtype=np.float64) for k, v in manifest["buffers"].items()}
    return model, manifest
