import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from varnet.cli import config_hash, load_config, main
from varnet.errors import ContractError
from varnet.evaluation import METHODS, EvalReport
from varnet.policy import deserialize_params
from varnet.scenarios import hour_window, ingest_traces, is_night


def gen(run_dir, *extra):
    assert main(["gen-data", "--run-dir", str(run_dir), *extra]) == 0
    return run_dir / "traces.csv"


# --------------------------------------------------------------------------
# gen-data


def test_gen_data_night_has_no_solar(tmp_path):
    traces = ingest_traces(gen(tmp_path))
    for tr in traces:
        night = np.array([is_night(int(t)) for t in tr.timestamps])
        assert night.any()
        assert np.all(tr.p_solar[night] == 0.0)
    assert max(tr.p_solar.max() for tr in traces) > 0


def test_gen_data_seed_determinism(tmp_path):
    a = gen(tmp_path / "a").read_bytes()
    b = gen(tmp_path / "b").read_bytes()
    c = gen(tmp_path / "c", "--data.seed", "1").read_bytes()
    assert a == b
    assert a != c


def test_gen_data_scale(tmp_path):
    base = ingest_traces(gen(tmp_path / "a"))
    scaled = ingest_traces(gen(tmp_path / "b", "--data.gen_scale", "2.5"))
    for x, y in zip(base, scaled):
        np.testing.assert_allclose(y.p_load, 2.5 * x.p_load, rtol=1e-12, atol=0)
        np.testing.assert_allclose(y.p_solar, 2.5 * x.p_solar, rtol=1e-12, atol=0)


def test_ingestion_scale_factor(tmp_path):
    path = gen(tmp_path)
    raw = ingest_traces(path)
    scaled = ingest_traces(path, 7.5)
    peak = max(tr.p_load.max() for tr in raw)
    assert max(tr.p_load.max() for tr in scaled) == pytest.approx(7.5 * peak, rel=1e-12)


# --------------------------------------------------------------------------
# train and evaluate (shared default run)


def test_train_defaults(pipeline):
    run_dir, files, _ = pipeline
    params = deserialize_params(run_dir / "model.json")
    meta = json.loads(files["model.json"])["metadata"]
    assert meta["n_scenarios"] == 240
    assert meta["train_hour"] == 13
    assert params.arch.d_u == 1
    with open(run_dir / "training_trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 30
    assert [int(r["epoch"]) for r in rows] == list(range(1, 31))
    # one header plus one row per scenario update
    assert files["dual_trace.csv"].count(b"\n") == 1 + 30 * 240
    assert files["train_scenarios.jsonl"].count(b"\n") == 1 + 240


def test_evaluate_outputs(pipeline):
    run_dir, files, _ = pipeline
    for m in METHODS:
        rep = EvalReport.from_json(run_dir / "reports" / f"{m}.json")
        assert rep.method == m
        assert rep.metadata["test_hour"] == 14
        assert rep.timesteps == list(range(*hour_window(14)))
        assert all(isinstance(r.comm_bytes, int) for r in rep.records)
    header = files["reports.csv"].decode().splitlines()[0]
    assert header == "timestep,method,loss,vmax,vmin,violations,violation_energy,comm_bytes"
    methods = [line.split(",")[0] for line in files["comparison.csv"].decode().splitlines()[1:]]
    assert methods == list(METHODS)


def test_manifest(pipeline):
    run_dir, files, _ = pipeline
    doc = json.loads(files["manifest.json"])
    assert set(doc["commands"]) == {"gen-data", "train", "evaluate"}
    cp = load_config(None, {"paths.run_dir": str(run_dir)})
    for entry in doc["commands"].values():
        assert entry["config_sha256"] == config_hash(cp)
        assert entry["seeds"] == {"data": 0, "augment": 0, "train": 0}
    assert "model.json" in doc["commands"]["train"]["outputs"]
    assert "reports/dnn_policy.json" in doc["commands"]["evaluate"]["outputs"]


def test_compare_command(pipeline, tmp_path, capsys):
    run_dir, _, _ = pipeline
    out = tmp_path / "table.csv"
    assert main(["compare", "--run-dir", str(run_dir), "--output", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "dnn_policy" in printed and "loss_gap_vs_optimal" in printed
    assert out.read_bytes() == (run_dir / "comparison.csv").read_bytes()


def test_evaluate_explicit_test_hour(pipeline, tmp_path):
    run_dir, files, _ = pipeline
    for name in ("traces.csv", "model.json"):
        (tmp_path / name).write_bytes(files[name])
    rc = main(["evaluate", "--run-dir", str(tmp_path), "--window.test_hour", "15", "--baselines.iterations", "5"])
    assert rc == 0
    rep = EvalReport.from_json(tmp_path / "reports" / "no_control.json")
    assert rep.metadata["test_hour"] == 15
    assert rep.timesteps == list(range(*hour_window(15)))


# --------------------------------------------------------------------------
# configuration


def test_config_layering(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\nepochs = 3\n[limits]\nv_hi = 1.05\n")
    cp = load_config(cfg, {"train.epochs": "4"})
    assert cp["train"]["epochs"] == "4"
    assert cp["limits"]["v_hi"] == "1.05"
    assert cp["limits"]["v_lo"] == "0.97"


def test_config_hash_tracks_values():
    assert config_hash(load_config()) == config_hash(load_config())
    assert config_hash(load_config()) != config_hash(load_config(None, {"train.seed": "1"}))


@pytest.mark.parametrize("text", ["[train]\nepocs = 3\n", "[nosuch]\nx = 1\n", "not ini"])
def test_config_rejects_unknown(tmp_path, text):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(text)
    with pytest.raises(ContractError):
        load_config(cfg)


def test_train_override_changes_epochs(tmp_path):
    gen(tmp_path)
    assert main(["train", "--run-dir", str(tmp_path), "--train.epochs", "2", "--train.dump_dual", "false"]) == 0
    assert len((tmp_path / "training_trace.csv").read_text().splitlines()) == 3
    assert not (tmp_path / "dual_trace.csv").exists()


# --------------------------------------------------------------------------
# exit codes


def test_missing_traces_is_contract_error(tmp_path, capsys):
    assert main(["train", "--run-dir", str(tmp_path)]) == 1
    assert "gen-data" in capsys.readouterr().err


def test_missing_model_is_contract_error(tmp_path):
    gen(tmp_path)
    assert main(["evaluate", "--run-dir", str(tmp_path)]) == 1


def test_hour_out_of_range(tmp_path, capsys):
    gen(tmp_path)
    assert main(["train", "--run-dir", str(tmp_path), "--window.train_hour", "30"]) == 1
    assert "outside the trace range" in capsys.readouterr().err


def test_bad_value_is_contract_error(tmp_path):
    assert main(["gen-data", "--run-dir", str(tmp_path), "--data.days", "one"]) == 1


def test_model_feeder_mismatch(tmp_path):
    gen(tmp_path)
    assert main(["train", "--run-dir", str(tmp_path), "--train.epochs", "1"]) == 0
    assert main(["evaluate", "--run-dir", str(tmp_path), "--policy.inverter_hidden", "4"]) == 1


def test_divergence_exit_code(tmp_path, capsys):
    gen(tmp_path)
    rc = main(["train", "--run-dir", str(tmp_path), "--train.epochs", "2", "--train.dual_step", "1e300"])
    assert rc == 2
    assert "diverged" in capsys.readouterr().err
    assert (tmp_path / "training_trace.csv").exists()
    assert not (tmp_path / "model.json").exists()


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["train", "--no-such-flag"])
    assert info.value.code == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "varnet", "gen-data", "--run-dir", str(tmp_path)], capture_output=True, text=True
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "traces.csv").exists()
