import csv
import hashlib
import json

import numpy as np
import pytest

from tribolens.cli import main
from tribolens.dataset import load_dataset


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def manifest(d):
    return json.loads((d / "run_manifest.json").read_text())


def digest(paths):
    return {p: hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n", "16", "--rank", "2", "--noise", "0.01", "--missing", "0.1",
                 "--seed", "3", "--out", str(root / "data")]) == 0
    assert main(["train", "--data", str(root / "data" / "friction.json"), "--epochs", "150",
                 "--seed", "3", "--out", str(root / "model")]) == 0
    return root


def test_synth_writes_dataset_truth_and_manifest(workspace):
    d = workspace / "data"
    m = manifest(d)
    assert m["command"] == "synth" and m["seed"] == 3 and len(m["config_hash"]) == 64
    side = json.loads((d / "friction_truth.json").read_text())
    assert side["spec"]["n"] == 16 and side["files"]["static"] == "friction_truth_static.csv"
    assert load_dataset(d / "friction.json").n == 16


def test_synth_fabric_layout(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "--layout", "fabric", "--missing", "0", "--out", tmp_path)
    assert code == 0
    ds = load_dataset(tmp_path / "friction.json")
    nf = ds.library.members("nonfabric")
    assert ds.n == 40 and not ds.mask[np.ix_(nf, nf)].any()


def test_train_outputs(workspace):
    d = workspace / "model"
    assert manifest(d)["command"] == "train"
    for name in ("split.json", "model_0.json", "model_0.bin", "history_0.csv", "train_report.json"):
        assert (d / name).exists()


def test_spectrum(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "spectrum", "--data", workspace / "data" / "friction.json",
                       "--out", tmp_path, "--seed", 11)
    assert code == 0 and manifest(tmp_path)["seed"] == 11
    report = json.loads((tmp_path / "spectrum.json").read_text())
    assert set(report["retention_sizes"]) == {"0.95", "0.99", "0.995", "0.999"}
    rows = list(csv.DictReader(open(tmp_path / "spectrum.csv")))
    assert len(rows) == 16 and float(rows[-1]["cumulative_energy"]) == pytest.approx(1.0)


def test_select_proxies_rrqr_and_mask_opt(workspace, tmp_path, capsys):
    data = workspace / "data" / "friction.json"
    code, _, _ = run(capsys, "select-proxies", "--data", data, "--out", tmp_path / "r")
    assert code == 0
    ps = json.loads((tmp_path / "r" / "proxies.json").read_text())
    assert ps["method"] == "rrqr" and 1 <= len(ps["indices"]) <= 5
    assert len(ps["diagnostics"]["names"]) == len(ps["indices"])
    code, _, _ = run(capsys, "select-proxies", "--data", data, "--method", "mask-opt",
                     "--model", workspace / "model", "--relative-epsilon", "0.05",
                     "--out", tmp_path / "m")
    assert code == 0 and manifest(tmp_path / "m")["command"] == "select-proxies"


def test_train_on_proxies_and_evaluate(workspace, tmp_path, capsys):
    data = workspace / "data" / "friction.json"
    assert run(capsys, "select-proxies", "--data", data, "--k", "3", "--out", tmp_path / "p")[0] == 0
    code, _, _ = run(capsys, "train", "--data", data, "--proxies", tmp_path / "p" / "proxies.json",
                     "--epochs", "5", "--out", tmp_path / "t")
    assert code == 0
    split = json.loads((tmp_path / "t" / "split.json").read_text())
    assert split["info"]["reveal"]
    code, out, _ = run(capsys, "evaluate", "--data", data, "--model", tmp_path / "t",
                       "--out", tmp_path / "e")
    assert code == 0 and "r2" in json.loads(out)
    assert (tmp_path / "e" / "predictions.csv").exists()


def test_evaluate_trained_model(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--data", workspace / "data" / "friction.json",
                       "--model", workspace / "model", "--out", tmp_path)
    assert code == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["overall"]["r2"] > 0.5
    lines = (tmp_path / "predictions.csv").read_text().splitlines()
    assert lines[0] == "a,b,channel,target,mean,aleatoric_var,epistemic_var"
    assert len(lines) - 1 == metrics["overall"]["n"]


def test_evaluate_cross_validation(workspace, tmp_path, capsys):
    code, _, _ = run(capsys, "evaluate", "--data", workspace / "data" / "friction.json",
                     "--model", workspace / "model", "--scheme", "kfold", "--k", "2",
                     "--epochs", "2", "--out", tmp_path)
    assert code == 0
    assert "pooled" in json.loads((tmp_path / "metrics.json").read_text())


def test_predict_self_pair_close_to_measured(workspace, tmp_path, capsys):
    data = workspace / "data" / "friction.json"
    ds = load_dataset(data)
    truth = np.loadtxt(workspace / "data" / "friction_truth_static.csv", delimiter=",",
                       skiprows=1, usecols=range(1, 17))
    name = ds.library.names[4]
    code, out, _ = run(capsys, "predict", name, name, "--data", data, "--model", workspace / "model",
                       "--out", tmp_path)
    assert code == 0
    pred = json.loads(out)
    assert pred["a"] == pred["b"] == name and pred["std"] > 0
    assert abs(pred["mean"] - truth[4, 4]) < 0.15


def test_predict_is_symmetric(workspace, tmp_path, capsys):
    data = workspace / "data" / "friction.json"
    names = load_dataset(data).library.names
    args = ("--data", data, "--model", workspace / "model")
    ab = json.loads(run(capsys, "predict", names[1], names[7], *args, "--out", tmp_path / "ab")[1])
    ba = json.loads(run(capsys, "predict", names[7], names[1], *args, "--out", tmp_path / "ba")[1])
    assert ab["mean"] == ba["mean"]


@pytest.mark.parametrize("pca", [None, 2])
def test_export_embeddings(workspace, tmp_path, capsys, pca):
    extra = ("--pca", pca) if pca else ()
    code, _, _ = run(capsys, "export-embeddings", "--data", workspace / "data" / "friction.json",
                     "--model", workspace / "model", *extra, "--out", tmp_path)
    assert code == 0
    rows = list(csv.reader(open(tmp_path / "embeddings.csv")))
    header, body = rows[0], rows[1:]
    assert len(body) == 16 and header[0] == "material" and header[-1] == "class"
    if pca:
        assert header[1:-1] == ["pc1", "pc2"]
        assert len(json.loads((tmp_path / "pca.json").read_text())["explained"]) == 2
    else:
        assert len(header) == 2 + 16


def test_ingest_trial_csv(tmp_path, capsys):
    trials = tmp_path / "trials.csv"
    trials.write_text(
        "block,surface,regime,orientation,theta_deg,transit_time_s,gate_distance_m,beta_deg,gravity\n"
        "a,b,static,none,20,,,,\n"
        "a,b,static,none,22,,,,\n"
        "b,a,static,none,21,,,,\n"
        "a,a,static,none,15,,,,\n", encoding="utf-8")
    code, _, err = run(capsys, "ingest", "--trials", trials, "--out", tmp_path / "o")
    if code != 0:
        pytest.fail(err)
    ds = load_dataset(tmp_path / "o" / "friction.json")
    assert ds.n == 2 and ds.mask[0, 1, 0] and ds.values[0, 1, 0] == ds.values[1, 0, 0]
    assert (tmp_path / "o" / "trial_summary.csv").exists()


def test_inputs_not_mutated(workspace, tmp_path, capsys):
    files = sorted(p for p in (workspace / "data").iterdir() if p.name != "run_manifest.json")
    files += sorted((workspace / "model").glob("model_0.*")) + [workspace / "model" / "split.json"]
    before = digest(files)
    data = workspace / "data" / "friction.json"
    run(capsys, "evaluate", "--data", data, "--model", workspace / "model", "--out", tmp_path / "e")
    run(capsys, "export-embeddings", "--data", data, "--model", workspace / "model",
        "--out", tmp_path / "x")
    run(capsys, "spectrum", "--data", data, "--out", tmp_path / "s")
    assert digest(files) == before


def _error(err):
    obj = json.loads(err.strip().splitlines()[-1])
    assert set(obj) >= {"error", "type", "message", "exit_code"}
    return obj


def test_exit_2_on_bad_input(tmp_path, capsys):
    code, _, err = run(capsys, "spectrum", "--data", tmp_path / "missing.json", "--out", tmp_path)
    assert code == 2 and _error(err)["exit_code"] == 2
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]", encoding="utf-8")
    code, _, err = run(capsys, "synth", "--config", bad, "--out", tmp_path / "o")
    assert code == 2 and _error(err)["error"] == "schema"
    assert not (tmp_path / "o" / "run_manifest.json").exists()


def test_exit_3_on_divergence(workspace, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 1e300}}), encoding="utf-8")
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train", "--data", workspace / "data" / "friction.json",
                           "--epochs", "3", "--config", cfg, "--out", tmp_path / "t")
    assert code == 3 and _error(err)["type"] == "NumericalError"


def test_exit_4_when_tolerance_not_met(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "select-proxies", "--data", workspace / "data" / "friction.json",
                       "--method", "mask-opt", "--model", workspace / "model", "--epsilon", "0",
                       "--k-max", "1", "--out", tmp_path)
    assert code == 4 and _error(err)["error"] == "not-converged"
    assert json.loads((tmp_path / "proxies.json").read_text())["diagnostics"]["converged"] is False
