import csv
import json
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from perdpm.cli import EXIT_CONFIG, EXIT_NUMERIC, main
from perdpm.evaluation import dsi, state_probabilities
from perdpm.model import save_checkpoint
from perdpm.synthgen import CohortDataset, GenConfig, generate, read_dataset, write_dataset


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def cohort(tmp_path):
    cfg = write_json(tmp_path / "gen.json", {"n_samples": 32, "n_steps": 5, "n_clusters": 2,
                                             "d_g": 4, "d_x": 3, "d_z": 2, "seed": 1})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data"


@pytest.fixture
def train_cfg(tmp_path):
    return write_json(tmp_path / "train.json", {"epochs": 2, "batch_size": 16, "seed": 3,
                                                "model": {"d_z": 2, "n_clusters": 2}})


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------ generate


def test_generate_writes_dataset_and_summary(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {"n_samples": 10, "n_steps": 5, "n_clusters": 2})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "N=10" in out and "T=5" in out and "K=2" in out and "seed=" in out
    assert (tmp_path / "a" / "manifest.json").exists()
    assert (tmp_path / "a" / "run.json").exists()
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for f in (tmp_path / "a").glob("*.bin"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_generate_invalid_config(tmp_path, capsys):
    cfg = write_json(tmp_path / "g.json", {"n_samples": 10, "n_clusters": 0})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    assert "n_clusters" in capsys.readouterr().err


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "g.json", {"n_samples": 10, "seed": 1})
    monkeypatch.setenv("PERDPM_SEED", "77")
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["resolved"]["gen_config"]["seed"] == 77
    assert read_dataset(tmp_path / "a").meta["config"]["seed"] == 77


def test_generate_binarized_cohort_trains_bernoulli(tmp_path):
    cfg = write_json(tmp_path / "g.json", {"n_samples": 20, "n_steps": 4, "n_clusters": 2,
                                           "d_g": 3, "d_x": 3, "d_z": 2, "binarize": True})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    data = read_dataset(tmp_path / "d")
    assert set(np.unique(data.x)) <= {0.0, 1.0}
    tc = write_json(tmp_path / "t.json", {"epochs": 1, "batch_size": 8, "model": {"d_z": 2}})
    assert main(["train", "--data", str(tmp_path / "d"), "--config", tc,
                 "--out", str(tmp_path / "m")]) == 0
    assert json.loads((tmp_path / "m" / "model.json").read_text())["mode"] == "bernoulli"
    assert main(["eval", "--model", str(tmp_path / "m"), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert "test_ce" in rep and "test_nll" not in rep
    bad = write_json(tmp_path / "b.json", {"n_samples": 5, "binarize": "yes"})
    assert main(["generate", "--config", bad, "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_analyze_dmm_skips_cluster_figures(tmp_path, cohort, train_cfg):
    assert main(["train", "--data", str(cohort), "--config", train_cfg,
                 "--out", str(tmp_path / "m"), "--ablation", "dmm"]) == 0
    assert main(["analyze", "--model", str(tmp_path / "m"), "--data", str(cohort),
                 "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "fig_patient_states.svg").exists()
    assert not (tmp_path / "a" / "fig_cluster_means.svg").exists()


# --------------------------------------------------------------- train


def test_train_smoke(tmp_path, cohort, train_cfg):
    t0 = time.perf_counter()
    assert main(["train", "--data", str(cohort), "--config", train_cfg,
                 "--out", str(tmp_path / "m")]) == 0
    assert time.perf_counter() - t0 < 30
    for name in ("model.json", "history.csv", "run.json"):
        assert (tmp_path / "m" / name).exists()
    assert len(read_csv(tmp_path / "m" / "history.csv")) == 2
    run = json.loads((tmp_path / "m" / "run.json").read_text())
    assert run["resolved"]["train_config"]["seed"] == 3
    assert run["resolved"]["model_config"]["n_clusters"] == 2


def test_train_dmm_manifest(tmp_path, cohort, train_cfg):
    assert main(["train", "--data", str(cohort), "--config", train_cfg,
                 "--out", str(tmp_path / "m"), "--ablation", "dmm"]) == 0
    manifest = json.loads((tmp_path / "m" / "model.json").read_text())
    assert manifest["K"] == 1 and manifest["dmm"] is True
    assert not any(k.startswith(("enc_", "dec_")) for k in manifest["params"])


def test_train_resume_continues_history(tmp_path, cohort, train_cfg):
    out = str(tmp_path / "m")
    assert main(["train", "--data", str(cohort), "--config", train_cfg, "--out", out]) == 0
    assert main(["train", "--data", str(cohort), "--config", train_cfg, "--out", out,
                 "--resume"]) == 0
    assert [int(r["epoch"]) for r in read_csv(tmp_path / "m" / "history.csv")] == [0, 1, 2, 3]


def test_train_errors(tmp_path, cohort):
    bad = write_json(tmp_path / "bad.json", {"lr": -1.0})
    assert main(["train", "--data", str(cohort), "--config", bad, "--out", str(tmp_path / "m")]) \
        == EXIT_CONFIG
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "m")]) \
        == EXIT_CONFIG
    assert main(["train", "--data", str(cohort), "--out", str(tmp_path / "r"), "--resume"]) \
        == EXIT_CONFIG


def test_train_numeric_failure(tmp_path, cohort):
    wild = write_json(tmp_path / "wild.json", {"epochs": 20, "batch_size": 4, "lr": 1e6,
                                               "clip_norm": None, "kl_warmup": 0.0})
    assert main(["train", "--data", str(cohort), "--config", wild,
                 "--out", str(tmp_path / "m")]) == EXIT_NUMERIC


# ---------------------------------------------------------------- eval


@pytest.fixture
def trained(tmp_path, cohort, train_cfg):
    assert main(["train", "--data", str(cohort), "--config", train_cfg,
                 "--out", str(tmp_path / "m")]) == 0
    return tmp_path / "m"


def test_eval_report_and_csvs(tmp_path, cohort, trained):
    assert main(["eval", "--model", str(trained), "--data", str(cohort),
                 "--out", str(tmp_path / "e" / "report.json")]) == 0
    rep = json.loads((tmp_path / "e" / "report.json").read_text())
    assert {"test_nll", "chi2", "chi2_dof", "split", "dsi_csv"} <= set(rep)
    assert rep["split"]["seed"] == 3 and rep["n_test"] == 6
    dsi_rows = read_csv(tmp_path / "e" / "dsi.csv")
    assert list(dsi_rows[0]) == ["sample", "t", "dsi"] and len(dsi_rows) == 6 * 5
    means = read_csv(tmp_path / "e" / "cluster_means.csv")
    assert list(means[0])[:2] == ["group", "t"] and len(means) == 2 * 5
    first = (tmp_path / "e" / "report.json").read_bytes()
    assert main(["eval", "--model", str(trained), "--data", str(cohort),
                 "--out", str(tmp_path / "e" / "report.json")]) == 0
    assert (tmp_path / "e" / "report.json").read_bytes() == first


def test_eval_without_ground_truth(tmp_path, cohort, trained):
    data = read_dataset(cohort)
    bare = write_dataset(tmp_path / "bare", CohortDataset(data.x, data.u, data.g, data.lengths,
                                                          None, {}))
    assert main(["eval", "--model", str(trained), "--data", str(bare),
                 "--out", str(tmp_path / "r.json")]) == 0
    rep = json.loads((tmp_path / "r.json").read_text())
    assert "chi2" not in rep and "ground-truth" in rep["chi2_note"]


def test_eval_dimension_mismatch(tmp_path, trained):
    other = write_json(tmp_path / "g2.json", {"n_samples": 10, "d_x": 4})
    assert main(["generate", "--config", other, "--out", str(tmp_path / "d2")]) == 0
    assert main(["eval", "--model", str(trained), "--data", str(tmp_path / "d2"),
                 "--out", str(tmp_path / "r.json")]) == EXIT_CONFIG


def test_eval_dmm_and_perdpm_share_split(tmp_path, cohort, train_cfg):
    for name, extra in (("p", []), ("d", ["--ablation", "dmm"])):
        assert main(["train", "--data", str(cohort), "--config", train_cfg,
                     "--out", str(tmp_path / name), *extra]) == 0
        assert main(["eval", "--model", str(tmp_path / name), "--data", str(cohort),
                     "--out", str(tmp_path / f"{name}.json")]) == 0
    p, d = (json.loads((tmp_path / f"{n}.json").read_text()) for n in "pd")
    assert p["split"] == d["split"]
    assert [r["sample"] for r in read_csv(tmp_path / "p_dsi.csv")] == \
        [r["sample"] for r in read_csv(tmp_path / "d_dsi.csv")]


# ------------------------------------------------------------- analyze


def _svg_is_self_contained(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")
    for el in root.iter():
        for key, value in el.attrib.items():
            if key.endswith("href"):
                assert value.startswith("#"), value


def test_analyze_outputs(tmp_path, cohort, trained):
    out = tmp_path / "a"
    assert main(["analyze", "--model", str(trained), "--data", str(cohort), "--out", str(out),
                 "--sample", "3"]) == 0
    for name in ("fig_cluster_means.svg", "fig_patient_states.svg", "fig_dsi_clusters.svg",
                 "fig_patient_states_binary.svg"):
        _svg_is_self_contained(out / name)
    assert len(read_csv(out / "dsi_clusters.csv")) == 2 * 5
    binary = read_csv(out / "patient_states_binary.csv")
    for row in binary:
        assert float(row["p_mild"]) + float(row["p_severe"]) == pytest.approx(1.0, abs=1e-12)
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(["analyze", "--model", str(trained), "--data", str(cohort), "--out", str(out),
                 "--sample", "3"]) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first


def test_analyze_sample_out_of_range(tmp_path, cohort, trained):
    assert main(["analyze", "--model", str(trained), "--data", str(cohort),
                 "--out", str(tmp_path / "a"), "--sample", "32"]) == EXIT_CONFIG


def _true_cluster_dsi_spread(seed):
    data = generate(GenConfig(seed=seed))
    gt = data.ground_truth
    d = dsi(state_probabilities(gt.z_true[:, -1]))
    cluster = gt.v_true.argmax(1)
    means = [d[cluster == c].mean() for c in range(gt.v_true.shape[1])]
    return max(means) - min(means)


def test_ground_truth_dsi_spread_ceiling():
    # the generator's own states, read through softmax like a model's, stay under 0.3
    spreads = [_true_cluster_dsi_spread(seed) for seed in range(10)]
    assert max(spreads) < 0.3
    assert _true_cluster_dsi_spread(0) < 0.05


@pytest.mark.xfail(strict=True, reason="true states on the default cohort give a final-step "
                   "cluster DSI spread below 0.3 (see test_ground_truth_dsi_spread_ceiling)")
def test_analyze_trained_cohort_dsi_separation(tmp_path, runs):
    run = runs.get(0)
    save_checkpoint(tmp_path / "m", run.result.model, {"train_config": {"seed": 0}})
    write_dataset(tmp_path / "d", run.data)
    assert main(["analyze", "--model", str(tmp_path / "m"), "--data", str(tmp_path / "d"),
                 "--out", str(tmp_path / "a")]) == 0
    rows = read_csv(tmp_path / "a" / "dsi_clusters.csv")
    t_last = max(int(r["t"]) for r in rows)
    assert len(rows) == 5 * (t_last + 1)
    final = np.array([float(r["mean_dsi"]) for r in rows if int(r["t"]) == t_last])
    assert final.max() - final.min() >= 0.3
