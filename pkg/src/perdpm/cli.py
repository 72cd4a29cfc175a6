"""``perdpm generate|train|eval|analyze``.

Exit codes: 0 success, 2 configuration or validation error, 3 numeric failure
(divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import EvaluationError, cluster_v, evaluate, group_mean_dsi, posterior
from .model import BERNOULLI, GAUSSIAN, ModelConfig, ModelStateError, PerDPM, load_checkpoint, \
    save_checkpoint
from .numeric import NonFiniteError, ShapeError
from .synthgen import (DatasetError, GenConfig, binarize, generate, read_dataset, split_indices,
                       write_dataset)
from .training import NonFiniteLoss, TrainConfig, TrainingDiverged, fit, load_training_state, \
    read_history, save_training_state, write_history

log = logging.getLogger("perdpm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
SEED_ENV = "PERDPM_SEED"
_MODEL_KEYS = ("d_z", "n_clusters", "gru_hidden", "mlp_hidden", "emission")


class ConfigError(ValueError):
    pass


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return raw


def _dump_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seed_override(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _write_run(out: Path, command: str, resolved: dict) -> None:
    _dump_json(out / "run.json", {
        "command": command,
        "version": __version__,
        "resolved": resolved,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    })


# ------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    raw = _load_json(args.config)
    seed = _seed_override(args)
    if seed is not None:
        raw["seed"] = seed
    # not a generator field: thresholds X at its median for Bernoulli runs
    binary = raw.pop("binarize", False)
    if not isinstance(binary, bool):
        raise ConfigError(f"binarize must be true or false, got {binary!r}")
    try:
        cfg = GenConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    data = generate(cfg)
    if binary:
        data = binarize(data)
    out = write_dataset(args.out, data)
    _write_run(out, "generate", {"gen_config": asdict(cfg), "binarize": binary})
    print(f"wrote {out}: N={cfg.n_samples} T={cfg.n_steps} K={cfg.n_clusters} "
          f"d_g={cfg.d_g} d_x={cfg.d_x} d_z={cfg.d_z} d_u={cfg.d_u} seed={cfg.seed}"
          + (" binary" if binary else ""))
    return EXIT_OK


# ---------------------------------------------------------------- train


def _read_data(path):
    try:
        return read_dataset(path)
    except DatasetError as exc:
        raise ConfigError(str(exc)) from None


def _train_config(args) -> tuple[TrainConfig, dict]:
    raw = _load_json(args.config) if args.config else {}
    model_raw = raw.pop("model", {})
    unknown = set(model_raw) - set(_MODEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown model field(s): {', '.join(sorted(unknown))}")
    seed = _seed_override(args)
    if seed is not None:
        raw["seed"] = seed
    try:
        return TrainConfig.from_dict(raw), model_raw
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_train(args) -> int:
    cfg, model_raw = _train_config(args)
    data = _read_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_idx, test_idx = split_indices(data.n_samples, cfg.test_fraction, cfg.resolved_split_seed)
    train = data.subset(train_idx)
    split = {"seed": cfg.resolved_split_seed, "test_fraction": cfg.test_fraction,
             "n_train": int(train_idx.size), "n_test": int(test_idx.size)}
    state_dir = out / "state"
    if args.resume:
        if not (state_dir / "optimizer.json").exists():
            raise ConfigError(f"--resume: no training state in {state_dir}")
        model, optimizer, start = load_training_state(state_dir, cfg)
        history = read_history(out / "history.csv")
        if args.ablation == "dmm" and not model.config.dmm:
            raise ConfigError("--ablation dmm does not match the checkpoint being resumed")
    else:
        emission = model_raw.get("emission", BERNOULLI if data.is_binary else GAUSSIAN)
        try:
            mcfg = ModelConfig(d_x=data.x.shape[2], d_u=data.u.shape[2], d_g=data.g.shape[1],
                               **{**model_raw, "emission": emission})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        model = PerDPM(mcfg).dmm_ablation_mode(args.ablation == "dmm").initialize(cfg.seed)
        optimizer, start, history = None, 0, []
    result = fit(train, model, cfg, start_epoch=start, history=history, optimizer=optimizer)
    extra = {"split": split, "train_config": asdict(cfg), "best_epoch": result.best_epoch}
    if not args.resume or result.best_epoch >= start:
        save_checkpoint(out, result.model, extra)
    write_history(out / "history.csv", result.history)
    save_training_state(state_dir, result, cfg)
    _write_run(out, "train", {"data": str(args.data), "train_config": asdict(cfg),
                              "model_config": asdict(result.model.config), "split": split,
                              "ablation": args.ablation, "resume": bool(args.resume)})
    last = result.history[-1] if result.history else None
    print(f"trained {len(result.history)} epochs; best epoch {result.best_epoch}"
          + (f"; last total {last['total']:.4f}" if last else ""))
    return EXIT_OK


# ----------------------------------------------------------------- eval


def _load_model(path):
    try:
        return load_checkpoint(path)
    except (ModelStateError, FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load model from {path}: {exc}") from None


def _test_subset(data, manifest):
    split = manifest.get("split")
    if not split:
        return data, np.arange(data.n_samples), None
    _, test_idx = split_indices(data.n_samples, split["test_fraction"], split["seed"])
    return data.subset(test_idx), test_idx, split


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def _check_dims(model: PerDPM, data) -> None:
    c = model.config
    if (data.x.shape[2], data.u.shape[2], data.g.shape[1]) != (c.d_x, c.d_u, c.d_g):
        raise ConfigError(
            f"dataset dims (d_x={data.x.shape[2]}, d_u={data.u.shape[2]}, d_g={data.g.shape[1]}) "
            f"do not match model (d_x={c.d_x}, d_u={c.d_u}, d_g={c.d_g})")


def cmd_eval(args) -> int:
    model, manifest = _load_model(args.model)
    data = _read_data(args.data)
    _check_dims(model, data)
    test, test_idx, split = _test_subset(data, manifest)
    seed = manifest.get("train_config", {}).get("seed", 0)
    try:
        report = evaluate(model, test, seed=seed)
    except EvaluationError as exc:
        raise ConfigError(str(exc)) from None
    out_path = Path(args.out)
    out_dir = out_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = out_path.stem
    doc = {
        "model": str(args.model), "data": str(args.data),
        "split": split, "n_test": int(test.n_samples),
        "score_name": report.score_name, "dsi_range": [1, int(model.config.d_z)],
        **report.scalars(),
    }
    if report.chi2 is None or report.chi2_note:
        doc["chi2_note"] = report.chi2_note
    if report.notes:
        doc["notes"] = report.notes
    mask = test.mask.astype(bool)
    dsi_name = f"{stem}_dsi.csv" if stem != "report" else "dsi.csv"
    _write_csv(out_dir / dsi_name, ["sample", "t", "dsi"],
               [(int(test_idx[i]), t, _fmt(report.dsi[i, t]))
                for i in range(test.n_samples) for t in range(test.n_steps) if mask[i, t]])
    doc["dsi_csv"] = dsi_name
    if report.cluster_means is not None:
        means_name = f"{stem}_cluster_means.csv" if stem != "report" else "cluster_means.csv"
        d_x = report.cluster_means.shape[2]
        _write_csv(out_dir / means_name, ["group", "t"] + [f"x{j}" for j in range(d_x)],
                   [(k, t, *map(_fmt, report.cluster_means[k, t]))
                    for k in range(report.cluster_means.shape[0])
                    for t in range(report.cluster_means.shape[1])])
        doc["cluster_means_csv"] = means_name
        doc["cluster_dsi"] = [[None if np.isnan(v) else float(v) for v in row]
                              for row in report.cluster_dsi]
    _dump_json(out_path, doc)
    summary = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in report.scalars().items())
    print(f"wrote {out_path}: {summary}")
    return EXIT_OK


# -------------------------------------------------------------- analyze


def cmd_analyze(args) -> int:
    from . import plots

    model, manifest = _load_model(args.model)
    data = _read_data(args.data)
    _check_dims(model, data)
    if not 0 <= args.sample < data.n_samples:
        raise ConfigError(f"--sample {args.sample} out of range [0, {data.n_samples})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = manifest.get("train_config", {}).get("seed", 0)
    report = evaluate(model, data, seed=seed)
    probs, mask = report.state_probabilities, data.mask
    gt = data.ground_truth
    n_states = probs.shape[-1]
    written: dict[str, str] = {}

    i, length = args.sample, int(data.lengths[args.sample])
    p_i = probs[i, :length]
    true_i = gt.state_labels[i, :length] + 1 if gt is not None else None
    plots.patient_states_figure(out / "fig_patient_states.svg", p_i, true_i, f"sample {i}")
    _write_csv(out / "patient_states.csv",
               ["t"] + [f"p_state{k + 1}" for k in range(n_states)] + ["true_state"],
               [(t, *map(_fmt, p_i[t]), "" if true_i is None else int(true_i[t]))
                for t in range(length)])
    mild = p_i[:, :2].sum(axis=1)
    binary = np.stack([mild, 1.0 - mild], axis=1)
    plots.patient_states_figure(out / "fig_patient_states_binary.svg", binary, true_i,
                                f"sample {i}: states 1-2 vs 3-{n_states}")
    _write_csv(out / "patient_states_binary.csv", ["t", "p_mild", "p_severe", "true_state"],
               [(t, _fmt(mild[t]), _fmt(1.0 - mild[t]), "" if true_i is None else int(true_i[t]))
                for t in range(length)])
    written.update(patient="fig_patient_states.svg", patient_binary="fig_patient_states_binary.svg")

    notes = list(report.notes)
    post = posterior(model, data)
    if post.mu_v is not None:
        k = model.config.k
        two = cluster_v(post.mu_v, args.groups, seed=seed, observations=data)
        plots.cluster_means_figure(out / "fig_cluster_means.svg", two.group_means, args.dim)
        _write_csv(out / "cluster_means.csv",
                   ["group", "t"] + [f"x{j}" for j in range(data.x.shape[2])],
                   [(g, t, *map(_fmt, two.group_means[g, t]))
                    for g in range(args.groups) for t in range(data.n_steps)])
        cl = cluster_v(post.mu_v, k, seed=seed)
        cluster_dsi = group_mean_dsi(report.dsi, cl.assignments, k, mask)
        plots.dsi_clusters_figure(out / "fig_dsi_clusters.svg", cluster_dsi)
        _write_csv(out / "dsi_clusters.csv", ["cluster", "t", "mean_dsi"],
                   [(c, t, _fmt(cluster_dsi[c, t])) for c in range(k) for t in range(data.n_steps)])
        written.update(cluster_means="fig_cluster_means.svg", dsi_clusters="fig_dsi_clusters.svg")
    _dump_json(out / "analysis.json", {"files": written, "sample": i, "notes": notes})
    print(f"wrote {len(written)} figures to {out}")
    return EXIT_OK


# ----------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perdpm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="fit PerDPM (or the DMM ablation)")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--ablation", choices=["dmm"])
    p.add_argument("--resume", action="store_true", help="continue from the state in --out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on its held-out split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="emit analysis figures and their CSVs")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sample", type=int, default=0)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--dim", type=int, default=0)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 1),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeError, ModelStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteLoss, NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
