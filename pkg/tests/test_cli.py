import csv
import json

import numpy as np
import pytest
import yaml

from cvplab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from cvplab.config import ConfigError, from_dict, load_config
from cvplab.trainer import read_metrics

TINY_TRAIN = {"pretrain_cycles": 2, "adapt_cycles": 2, "cycle_steps": 5, "base_lr": 0.01, "M": 4, "batch_size": 8}
TINY_ANALYSIS = {"per_class": 2, "K": 50, "mcd_T": 4}


def write_cfg(path, out, **over):
    raw = {
        "seed": 1,
        "output_dir": str(out),
        "dataset": {"generator": {"base": "two-moons", "rotation_deg": 30, "samples_per_class": 40}},
        "train": dict(TINY_TRAIN),
        "analysis": dict(TINY_ANALYSIS),
    }
    for k, v in over.items():
        if isinstance(v, dict) and k in ("train", "analysis"):
            raw[k] = {**raw[k], **v}
        else:
            raw[k] = v
    path.write_text(yaml.safe_dump(raw))
    return path


@pytest.fixture
def cfg_path(tmp_path):
    return write_cfg(tmp_path / "exp.yaml", tmp_path / "run")


def test_generate_writes_csvs_deterministically(tmp_path, cfg_path):
    assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "b")]) == EXIT_OK
    for name in ("source.csv", "target.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert len(a.decode().splitlines()) == 1 + 2 * 40


def test_generate_invalid_spec(tmp_path, capsys):
    p = write_cfg(tmp_path / "bad.yaml", tmp_path / "o",
                  dataset={"generator": {"base": "two-moons", "scale": [0.0, 1.0]}})
    assert main(["generate", "--config", str(p)]) == EXIT_CONFIG
    assert "scale" in capsys.readouterr().err


def test_train_outputs_and_gating(tmp_path):
    p = write_cfg(tmp_path / "b.yaml", tmp_path / "basic", ablation="basic")
    assert main(["train", "--config", str(p)]) == EXIT_OK
    out = tmp_path / "basic"
    assert {f.name for f in out.iterdir()} >= {"checkpoint.npz", "metrics.csv", "config.yaml"}
    hist = read_metrics(out / "metrics.csv")
    assert len(hist) == 4
    assert all(r.l_ce_phi == 0.0 and r.l_ant == 0.0 for r in hist)


def test_ablation_flag_overrides_config(tmp_path, cfg_path):
    assert main(["train", "--config", str(cfg_path), "--ablation", "basic", "--out", str(tmp_path / "x")]) == 0
    assert load_config(tmp_path / "x" / "config.yaml").ablation == "basic"


def test_resolved_config_reproduces_bit_exactly(tmp_path, cfg_path):
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    first = tmp_path / "run"
    again = tmp_path / "again"
    assert main(["train", "--config", str(first / "config.yaml"), "--out", str(again)]) == EXIT_OK
    assert (first / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()
    assert (first / "checkpoint.npz").read_bytes() == (again / "checkpoint.npz").read_bytes()


def test_resume_equals_uninterrupted(tmp_path):
    p = write_cfg(tmp_path / "c.yaml", tmp_path / "full", train={"checkpoint_every": 1})
    assert main(["train", "--config", str(p)]) == EXIT_OK
    mid = tmp_path / "full" / "checkpoints" / "cycle_0003.npz"
    assert mid.is_file()
    assert main(["train", "--config", str(p), "--resume", str(mid), "--out", str(tmp_path / "res")]) == EXIT_OK
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "res" / "metrics.csv").read_bytes()


def test_resume_rejects_other_config(tmp_path, cfg_path):
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    other = write_cfg(tmp_path / "o.yaml", tmp_path / "o", train={"alpha": 0.9})
    ck = tmp_path / "run" / "checkpoint.npz"
    assert main(["train", "--config", str(other), "--resume", str(ck)]) == EXIT_CONFIG


def test_numeric_failure_exit_code(tmp_path, capsys):
    p = write_cfg(tmp_path / "n.yaml", tmp_path / "n", train={"base_lr": 1e200})
    assert main(["train", "--config", str(p)]) == EXIT_NUMERIC
    assert "step" in capsys.readouterr().err


def test_missing_csv_is_data_error(tmp_path):
    p = write_cfg(tmp_path / "m.yaml", tmp_path / "m",
                  dataset={"csv": {"source": "nope.csv", "target": "nope2.csv", "dim": 2, "n_classes": 2}})
    assert main(["train", "--config", str(p)]) == EXIT_DATA


def test_analyze_reports(tmp_path, cfg_path):
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    assert main(["analyze", "--config", str(cfg_path)]) == EXIT_OK
    out = tmp_path / "run"
    rep = json.loads((out / "analysis.json").read_text())
    assert list(rep["uncertainty"]["correlations"]) == ["-MCD_sigma", "L", "L_GT", "L_diff", "MCD_mu"]
    assert rep["oscillation"]["pairs"] == 6
    assert "drop_detected" in rep["sigma_trajectory"]
    with open(out / "uncertainty.csv") as fh:
        assert next(csv.reader(fh)) == ["index", "sigma", "L", "L_GT", "L_diff", "MCD_mu", "MCD_sigma"]
    for svg in ("sigma_trajectory.svg", "correlations.svg", "correlation_scatter.svg"):
        assert (out / svg).read_text().lstrip().startswith("<?xml")


def test_analyze_is_deterministic(tmp_path, cfg_path):
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    ck = str(tmp_path / "run" / "checkpoint.npz")
    for d in ("a1", "a2"):
        assert main(["analyze", "--config", str(cfg_path), "--checkpoint", ck, "--out", str(tmp_path / d)]) == 0
    for f in ("analysis.json", "uncertainty.csv", "sigma_trajectory.svg"):
        assert (tmp_path / "a1" / f).read_bytes() == (tmp_path / "a2" / f).read_bytes()


def test_analyze_without_target_labels(tmp_path, cfg_path):
    gen = tmp_path / "data"
    assert main(["generate", "--config", str(cfg_path), "--out", str(gen)]) == EXIT_OK
    lines = (gen / "target.csv").read_text().splitlines()
    stripped = [",".join(c for i, c in enumerate(line.split(",")) if i != 2) for line in lines]
    (gen / "target_nolabel.csv").write_text("\n".join(stripped) + "\n")
    p = write_cfg(tmp_path / "csv.yaml", tmp_path / "csvrun", dataset={"csv": {
        "source": "data/source.csv", "target": "data/target_nolabel.csv", "dim": 2, "n_classes": 2}})
    assert main(["train", "--config", str(p)]) == EXIT_OK
    assert main(["analyze", "--config", str(p)]) == EXIT_OK
    rep = json.loads((tmp_path / "csvrun" / "analysis.json").read_text())
    corr = rep["uncertainty"]["correlations"]
    assert corr["L_GT"] == {"r": None, "status": "labels unavailable"}
    assert all(corr[k]["r"] is not None for k in ("L", "L_diff", "MCD_mu", "-MCD_sigma"))
    assert rep["oscillation"]["status"] == "labels unavailable"


def test_analyze_dimension_mismatch(tmp_path, cfg_path, capsys):
    assert main(["train", "--config", str(cfg_path)]) == EXIT_OK
    blobs = write_cfg(tmp_path / "bl.yaml", tmp_path / "bl", dataset={"generator": {
        "base": "blobs", "n_classes": 4, "samples_per_class": 10}})
    ck = str(tmp_path / "run" / "checkpoint.npz")
    assert main(["analyze", "--config", str(blobs), "--checkpoint", ck]) == EXIT_DATA
    assert "classes" in capsys.readouterr().err


def test_sweep_m(tmp_path, cfg_path):
    out = tmp_path / "sw"
    args = ["sweep", "--config", str(cfg_path), "--axis", "M", "--values", "2,4,8,16", "--out", str(out)]
    assert main(args) == EXIT_OK
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert [r["value"] for r in rows] == ["2", "4", "8", "16"]
    assert (out / "sweep.svg").is_file()
    first = (out / "summary.csv").read_bytes()
    assert main(args) == EXIT_OK
    assert (out / "summary.csv").read_bytes() == first


def test_sweep_alpha_zero_is_no_samples_ce(tmp_path, cfg_path):
    out = tmp_path / "sa"
    assert main(["sweep", "--config", str(cfg_path), "--axis", "alpha", "--values", "0,0.5", "--out", str(out)]) == 0
    assert main(["train", "--config", str(cfg_path), "--ablation", "no-samples-ce", "--out", str(tmp_path / "n")]) == 0
    swept = (out / "alpha=0.0" / "seed=1" / "metrics.csv").read_bytes()
    assert swept == (tmp_path / "n" / "metrics.csv").read_bytes()


def test_sweep_survives_a_failed_run(tmp_path, cfg_path):
    out = tmp_path / "sf"
    assert main(["sweep", "--config", str(cfg_path), "--axis", "M", "--values", "0,4", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert rows[0]["failed"] == "1" and rows[0]["tgt_acc_mean"] == ""
    assert rows[1]["failed"] == "0" and float(rows[1]["tgt_acc_mean"]) > 0


def test_sweep_needs_two_values(cfg_path):
    assert main(["sweep", "--config", str(cfg_path), "--axis", "M", "--values", "8"]) == EXIT_CONFIG


def test_env_overrides(tmp_path, cfg_path, monkeypatch):
    monkeypatch.setenv("CVP_SEED", "9")
    monkeypatch.setenv("CVP_OUT", str(tmp_path / "envout"))
    cfg = load_config(cfg_path)
    assert cfg.seed == 9 and cfg.output_dir == str(tmp_path / "envout")
    assert main(["train", "--config", str(cfg_path), "--seed", "4"]) == EXIT_OK
    assert load_config(tmp_path / "envout" / "config.yaml", env={}).seed == 4


@pytest.mark.parametrize("raw", [
    {},
    {"dataset": {"generator": {}}, "bogus": 1},
    {"dataset": {"generator": {}}, "train": {"learning_rate": 1}},
    {"dataset": {"generator": {}}, "ablation": "half"},
    {"dataset": {"generator": {}, "csv": {"source": "a", "target": "b", "dim": 2, "n_classes": 2}}},
    {"dataset": {"generator": {}}, "seed": "abc"},
])
def test_config_errors(raw):
    with pytest.raises(ConfigError):
        from_dict(raw, env={})


def test_config_round_trip(tmp_path):
    cfg = from_dict({"dataset": {"generator": {"base": "rings", "n_classes": 3}}, "model": {"feature_dim": 4},
                     "train": {"alpha": 0.25}}, env={})
    back = load_config(cfg.resolved().dump(tmp_path / "c.yaml"), env={})
    assert back == cfg.resolved()
    assert back.model.n_classes == 3


def test_bad_yaml_and_missing_file(tmp_path):
    p = tmp_path / "x.yaml"
    p.write_text("dataset: [unclosed\n")
    assert main(["train", "--config", str(p)]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "none.yaml")]) == EXIT_CONFIG


def test_unknown_ablation_rejected_by_parser(cfg_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--config", str(cfg_path), "--ablation", "no-ant"])
    assert e.value.code == 2


def test_generated_csv_matches_library(tmp_path, cfg_path):
    from cvplab.datagen import ShiftSpec, generate
    assert main(["generate", "--config", str(cfg_path), "--out", str(tmp_path / "g")]) == 0
    src, _ = generate(ShiftSpec(rotation_deg=30, samples_per_class=40), 1)
    first = (tmp_path / "g" / "source.csv").read_text().splitlines()[1].split(",")
    assert float(first[0]) == src.features[0, 0] and np.isclose(float(first[1]), src.features[0, 1], rtol=0, atol=0)
