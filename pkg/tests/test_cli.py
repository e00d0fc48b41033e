from __future__ import annotations

import json

import numpy as np
import pytest

from inmateria.cli import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, main
from inmateria.errors import ConfigError
from inmateria.pipeline import RunConfig, sha256_file

SMALL = {"dataset": {"per_class": 2, "test_frac": 0.5}, "bank": {"n_channels": 2},
         "train": {"epochs": 2}, "hwa": {"epochs": 1}, "aimc": {"repetitions": 10},
         "characterize": {"n_sets": 4, "oversample": 2}}


def _cfg(tmp_path, doc, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


# ---------------------------------------------------------------- config

def test_defaults_resolve_and_derive_seeds():
    cfg = RunConfig.from_dict({}, seed=5, channels=32)
    assert cfg["bank"]["n_channels"] == 32
    assert cfg["device_seed"] == 5 and cfg["train"]["seed"] == 5 and cfg["hwa"]["seed"] == 6
    assert RunConfig.from_dict({"device_seed": 9}, seed=5)["device_seed"] == 9
    assert cfg.train_config().lr == 1e-3 and cfg.hwa_config().weight_noise_frac == 0.12


@pytest.mark.parametrize("doc", [
    {"nope": 1},
    {"train": {"momentum": 0.9}},
    {"train": 3},
    {"circuit": {"oversample": 0}},
    {"schema": "other/1"},
    {"dataset": {"kind": "directory"}},
    {"arch": {"name": "transformer"}},
])
def test_bad_config_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["--config", _cfg(tmp_path, {"bogus": 1}), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "bogus" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG


def test_print_config(tmp_path, capsys):
    assert main(["--print-config", "--seed", "3", "--channels", "8"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["seed"] == 3 and doc["bank"]["n_channels"] == 8


# ---------------------------------------------------------------- stage plumbing

def test_missing_upstream_is_stage_failure(tmp_path, capsys):
    code = main(["-q", "--config", _cfg(tmp_path, SMALL), "--out", str(tmp_path / "o"), "--stage", "train"])
    assert code == EXIT_STAGE
    err = capsys.readouterr().err
    assert "train" in err and "MissingArtifact" in err


def test_stale_input_detected(tmp_path, capsys):
    out = tmp_path / "o"
    cfg = _cfg(tmp_path, SMALL)
    assert main(["-q", "--config", cfg, "--out", str(out), "--stage", "extract"]) == EXIT_OK
    x = np.load(out / "extract/features.npy")
    np.save(out / "extract/features.npy", x + 1e-9)
    assert main(["-q", "--config", cfg, "--out", str(out), "--stage", "train"]) == EXIT_STAGE
    assert "HashMismatch" in capsys.readouterr().err


def test_full_pipeline_small(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["-q", "--config", _cfg(tmp_path, SMALL), "--out", str(out), "--stage", "pipeline"]) == EXIT_OK
    m = _manifest(out)
    assert set(m["stages"]) == {"extract", "train", "retrain-hwa", "map", "infer", "energy"}
    for st in m["stages"].values():
        for rel, h in st["outputs"].items():
            assert sha256_file(out / rel) == h
    assert m["stages"]["train"]["inputs"]["extract/features.npy"] == m["stages"]["extract"]["outputs"][
        "extract/features.npy"]
    report = (out / "infer/report.txt").read_text()
    assert report.count("mean ± std over 10 repetitions") == 2
    energy = json.loads((out / "energy/report.json").read_text())
    assert energy["reference_gsc"]["total_mvms"] == 2619
    assert energy["run"]["dnpu_channels"] == 2
    assert m["config"]["bank"]["n_channels"] == 2


def test_characterize_outputs(tmp_path):
    out = tmp_path / "o"
    assert main(["-q", "--config", _cfg(tmp_path, SMALL), "--out", str(out), "--stage", "characterize"]) == EXIT_OK
    files = set(_manifest(out)["stages"]["characterize"]["outputs"])
    for k in range(3):
        assert f"characterize/chirp_{k}.svg" in files and f"characterize/chirp_{k}.csv" in files
    assert {"characterize/tau.csv", "characterize/two_tone.csv", "characterize/static_power.csv"} <= files
    rows = (out / "characterize/tau.csv").read_text().splitlines()
    assert len(rows) == 1 + 4
    assert (out / "characterize/chirp_0.svg").read_text().startswith("<svg")


def test_map_ti46_reports_two_core_fit(tmp_path):
    doc = {"dataset": {"per_class": 2, "test_frac": 0.5}, "bank": {"n_channels": 64}, "arch": {"name": "ti46"},
           "train": {"epochs": 1, "batch_size": 8}, "hwa": {"epochs": 1}}
    out = tmp_path / "o"
    cfg = _cfg(tmp_path, doc)
    for stage in ("extract", "train", "retrain-hwa", "map"):
        assert main(["-q", "--config", cfg, "--out", str(out), "--stage", stage]) == EXIT_OK
    last = (out / "map/hwa_utilization.csv").read_text().splitlines()[-1]
    assert last.startswith("min_cores_by_cells,,2")
    prog = json.loads((out / "map/hwa.json").read_text())
    assert prog["cores_used"] == 7


def test_empty_split_is_config_error(tmp_path):
    doc = dict(SMALL, dataset={"per_class": 1, "test_frac": 0.5})
    assert main(["-q", "--config", _cfg(tmp_path, doc), "--out", str(tmp_path / "o"), "--stage", "extract"]) == \
        EXIT_CONFIG
