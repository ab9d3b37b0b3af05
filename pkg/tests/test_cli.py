import csv
import json

import numpy as np
import pytest

from ultrlab.cli import main
from ultrlab.data import parse_letor


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--queries", "60", "--docs", "12", "--dim", "5", "--seed", "2", "--out", str(out)]) == 0
    return out


def write_config(path, data_dir, **kw):
    cfg = {
        "algorithm": "ipw",
        "paradigm": "off",
        "data": {"source": "letor", "train": str(data_dir / "train.txt"), "valid": str(data_dir / "valid.txt"), "test": str(data_dir / "test.txt")},
        "n_steps": 20,
        "eval_interval": 10,
        "batch_size": 8,
        "log_sessions": 1000,
        "propensity_sessions": 3000,
        "seeds": [0],
    }
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_split_sizes(dataset_dir):
    counts = [len(parse_letor(dataset_dir / f"{s}.txt")) for s in ("train", "valid", "test")]
    assert sum(counts) == 60 and counts == [48, 6, 6]


def test_gen_data_is_reproducible(dataset_dir, tmp_path):
    assert main(["gen-data", "--queries", "60", "--docs", "12", "--dim", "5", "--seed", "2", "--out", str(tmp_path)]) == 0
    for s in ("train", "valid", "test"):
        assert (tmp_path / f"{s}.txt").read_bytes() == (dataset_dir / f"{s}.txt").read_bytes()


def test_gen_data_rejects_zero_docs(tmp_path, capsys):
    assert main(["gen-data", "--docs", "0", "--out", str(tmp_path)]) != 0
    assert "--docs" in capsys.readouterr().err
    assert not (tmp_path / "train.txt").exists()


def test_estimate_propensity_without_bias(dataset_dir, tmp_path, capsys):
    out = tmp_path / "p.json"
    code = main(["estimate-propensity", "--data", str(dataset_dir / "train.txt"), "--eta", "0", "--sessions", "200000", "--out", str(out)])
    assert code == 0
    weights = json.loads(out.read_text())
    weights = weights["weights"] if isinstance(weights, dict) else weights
    assert len(weights) == 10 and weights[0] == 1.0
    np.testing.assert_allclose(weights, 1.0, atol=0.06)
    assert len(json.loads(capsys.readouterr().out)) == 10


def test_estimate_propensity_rejects_zero_sessions(tmp_path, capsys):
    assert main(["estimate-propensity", "--sessions", "0", "--out", str(tmp_path / "p.json")]) != 0
    assert "--sessions" in capsys.readouterr().err


def test_run_writes_record_and_trace(dataset_dir, tmp_path):
    cfg = write_config(tmp_path / "ipw.json", dataset_dir)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == 0
    assert sorted(p.name for p in (tmp_path / "runs").iterdir()) == ["ipw_off_seed0.csv", "ipw_off_seed0.json"]
    rec = json.loads((tmp_path / "runs" / "ipw_off_seed0.json").read_text())
    assert rec["config"]["algorithm"] == "ipw"
    with open(tmp_path / "runs" / "ipw_off_seed0.csv", newline="") as fh:
        assert next(csv.reader(fh)) == ["algorithm", "paradigm", "seed", "step", "metric", "cutoff", "value"]


def test_run_output_dir_from_environment(dataset_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("ULTRLAB_OUTPUT_DIR", str(tmp_path / "env_runs"))
    cfg = write_config(tmp_path / "na.json", dataset_dir, algorithm="na", n_steps=0)
    assert main(["run", "--config", str(cfg), "--seed", "3"]) == 0
    assert (tmp_path / "env_runs" / "na_off_seed3.json").exists()


def test_run_rejects_invalid_pairing(dataset_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", dataset_dir, algorithm="dbgd")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "runs")]) == 2
    assert "unsupported pairing (dbgd, off)" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


def test_run_rejects_unknown_key(dataset_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", dataset_dir, learning_rat=0.1)
    assert main(["run", "--config", str(cfg)]) == 2
    assert "learning_rat" in capsys.readouterr().err


def test_run_missing_config(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_compare_report(dataset_dir, tmp_path, capsys):
    paths = [
        write_config(tmp_path / "na.json", dataset_dir, algorithm="na"),
        write_config(tmp_path / "ipw.json", dataset_dir),
        write_config(tmp_path / "pdgd.json", dataset_dir, algorithm="pdgd", paradigm="ond"),
    ]
    code = main(["compare", "--configs", *map(str, paths), "--baseline", "na_off", "--repeats", "2",
                 "--permutations", "200", "--out", str(tmp_path / "cmp")])
    assert code == 0
    with open(tmp_path / "cmp" / "report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["system"] for r in rows} == {"na_off", "ipw_off", "pdgd_ond"}
    assert len(rows) == 3 * 2 * 4
    for r in rows:
        assert (r["p_vs_baseline"] == "") == (r["system"] == "na_off")
    assert "p=" in capsys.readouterr().out


def test_compare_unknown_baseline(dataset_dir, tmp_path):
    cfg = write_config(tmp_path / "na.json", dataset_dir, algorithm="na")
    assert main(["compare", "--configs", str(cfg), "--baseline", "ipw_off", "--repeats", "1"]) == 2


def test_evaluate_run_record(dataset_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "ipw.json", dataset_dir)
    main(["run", "--config", str(cfg), "--out", str(tmp_path)])
    rec = json.loads((tmp_path / "ipw_off_seed0.json").read_text())
    capsys.readouterr()
    code = main(["evaluate", "--checkpoint", str(tmp_path / "ipw_off_seed0.json"), "--test", str(dataset_dir / "test.txt"),
                 "--out", str(tmp_path / "eval.json")])
    assert code == 0
    summary = json.loads((tmp_path / "eval.json").read_text())["metrics"]
    assert summary["ndcg"]["10"] == pytest.approx(rec["test"]["ndcg"]["10"]["mean"])
    assert json.loads(capsys.readouterr().out) == summary


def test_evaluate_missing_checkpoint(dataset_dir, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(tmp_path / "x.json"), "--test", str(dataset_dir / "test.txt")]) == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_unknown_subcommand():
    assert main(["train"]) == 2
