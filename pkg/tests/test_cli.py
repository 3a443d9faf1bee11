import csv
import json
import time
from pathlib import Path

import pytest

from quakecast import __version__
from quakecast.cli import COMMANDS, main
from quakecast.config import ConfigError, RunConfig, config_from_dict, load_config
from quakecast.synthetic import mini_catalog_path

MINI_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "mini.json"


def run_all(out, *extra):
    for cmd in COMMANDS:
        assert main([cmd, "--config", str(MINI_CONFIG), "--out", str(out), *extra]) == 0, cmd


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("mini")
    start = time.perf_counter()
    run_all(out)
    return out, time.perf_counter() - start


def read_table(path):
    with open(path) as fh:
        return {row["model"]: row for row in csv.DictReader(fh)}


def test_mini_pipeline_under_a_minute(pipeline):
    out, seconds = pipeline
    assert seconds < 60
    table = read_table(out / "eval" / "table.csv")
    assert set(table) == {"persistence", "mean", "lstm", "gnncoder-1"}


def test_every_stage_has_manifest(pipeline):
    out, _ = pipeline
    cfg = load_config(MINI_CONFIG)
    for d in ["catalog", "series", "graph", "features", "predictions", "eval", "nowcast", *[f"models/{m.name}" for m in cfg.models]]:
        doc = json.loads((out / d / "manifest.json").read_text())
        assert doc.get("config_hash", doc.get("provenance", {}).get("config_hash")) == cfg.digest(), d
        assert __version__ in (doc.get("toolkit_version"), doc.get("provenance", {}).get("toolkit_version"))


def test_table_sorted_by_mse_descending(pipeline):
    out, _ = pipeline
    mses = [float(r["MSE"]) for r in read_table(out / "eval" / "table.csv").values()]
    assert mses == sorted(mses, reverse=True)


def test_predictions_cover_train_and_test(pipeline):
    out, _ = pipeline
    samples = json.loads((out / "features" / "samples.json").read_text())
    with open(out / "predictions" / "lstm.csv") as fh:
        rows = list(csv.DictReader(fh))
    periods = {int(r["period_index"]) for r in rows}
    assert periods == set(samples["train_target_periods"]) | set(samples["test_target_periods"])
    assert len(rows) == len(samples["bins"]) * len(periods)


def test_eval_with_truth_scores_one(pipeline, tmp_path):
    out, _ = pipeline
    assert main(["eval", "--config", str(MINI_CONFIG), "--out", str(out), "--with-truth"]) == 0
    table = read_table(out / "eval" / "table.csv")
    assert float(table["truth"]["NNSE"]) == 1.0 and float(table["truth"]["MSE"]) == 0.0
    assert list(table)[-1] == "truth"
    # restore the plain table for the other tests
    assert main(["eval", "--config", str(MINI_CONFIG), "--out", str(out)]) == 0


def test_nowcast_outputs(pipeline):
    out, _ = pipeline
    cfg = load_config(MINI_CONFIG)
    with open(out / "nowcast" / "surface.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(cfg.nowcast.spans) * len(cfg.nowcast.weights)
    with open(out / "nowcast" / "roc.csv") as fh:
        roc = list(csv.DictReader(fh))
    assert (roc[0]["false_positive_rate"], roc[-1]["true_positive_rate"]) == ("0", "1")


def test_rerun_is_byte_identical(pipeline, tmp_path):
    out, _ = pipeline
    run_all(tmp_path)
    for path in sorted(out.rglob("*")):
        if path.is_file():
            assert (tmp_path / path.relative_to(out)).read_bytes() == path.read_bytes(), path


def test_threads_do_not_change_outputs(pipeline, tmp_path, monkeypatch):
    out, _ = pipeline
    monkeypatch.setenv("QUAKECAST_THREADS", "3")
    run_all(tmp_path)
    for name in ("lstm", "gnncoder-1"):
        assert (tmp_path / "models" / name / "params.bin").read_bytes() == (out / "models" / name / "params.bin").read_bytes()


def test_seed_flag_overrides_config(pipeline, tmp_path):
    out, _ = pipeline
    for cmd in ("ingest", "build", "features"):
        main([cmd, "--config", str(MINI_CONFIG), "--out", str(tmp_path)])
    assert main(["train", "--config", str(MINI_CONFIG), "--out", str(tmp_path), "--model", "lstm", "--seed", "9"]) == 0
    doc = json.loads((tmp_path / "models" / "lstm" / "manifest.json").read_text())
    assert doc["provenance"]["seed"] == 9
    assert (tmp_path / "models" / "lstm" / "params.bin").read_bytes() != (out / "models" / "lstm" / "params.bin").read_bytes()


def test_multifoundation_from_config(pipeline, tmp_path):
    out, _ = pipeline
    data = json.loads(MINI_CONFIG.read_text())
    data["catalog"] = str(mini_catalog_path())
    data["models"] = [
        {"name": "combo", "kind": "multifoundation", "pattern": "lstm", "hidden": 8,
         "streams": [str(out / "predictions" / "lstm.csv"), str(out / "predictions" / "gnncoder-1.csv")]}
    ]
    cfg_path = tmp_path / "combo.json"
    cfg_path.write_text(json.dumps(data))
    run_all(tmp_path / "run", "--config", str(cfg_path))
    table = read_table(tmp_path / "run" / "eval" / "table.csv")
    assert set(table) == {"combo"}


def test_missing_upstream_exit_code(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path)]) == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "missing-upstream" and "quakecast features" in err["message"]


def test_predict_before_train_names_command(pipeline, tmp_path, capsys):
    out, _ = pipeline
    for cmd in ("ingest", "build", "features"):
        main([cmd, "--config", str(MINI_CONFIG), "--out", str(tmp_path)])
    capsys.readouterr()
    assert main(["predict", "--config", str(MINI_CONFIG), "--out", str(tmp_path), "--model", "lstm"]) == 3
    assert "train --model lstm" in json.loads(capsys.readouterr().err)["message"]


def test_config_errors_aggregated(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"catalog": "nope.csv", "lookback": 0, "epsilon": -1}))
    assert main(["ingest", "--config", str(bad)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config"
    assert any("catalog" in p for p in err["details"])
    assert any("lookback" in p for p in err["details"]) and any("epsilon" in p for p in err["details"])


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="unknown keys"):
        config_from_dict({"lookbak": 5})
    with pytest.raises(ConfigError, match="train"):
        config_from_dict({"train": {"epoch": 5}})


def test_defaults_cover_southern_california_setup():
    cfg = RunConfig()
    assert (cfg.cell_size, cfg.period_days, cfg.active_bins, cfg.lookback, cfg.split_fraction, cfg.epsilon) == (
        0.1, 14, 500, 52, 0.8, 0.15,
    )
    cfg.validate()


def test_digest_ignores_output_location():
    a, b = RunConfig(out="x"), RunConfig(out="y")
    assert a.digest() == b.digest()
    b.lookback = 130
    assert a.digest() != b.digest()


def test_invalid_json_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["build", "--config", str(p)]) == 2
