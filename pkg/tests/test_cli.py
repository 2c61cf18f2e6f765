import csv
import json

import numpy as np
import pytest

from modality_hmm.cli import main
from modality_hmm.params import (
    ModelParameters,
    published_parameters,
    smoothed_table_parameters,
)


@pytest.fixture(autouse=True)
def fixed_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1600000000")


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture
def small(tmp_path):
    cfg = write_json(tmp_path / "cfg.json", {"simulate": {"n_districts": 150, "n_weeks": 12}})
    sim = tmp_path / "sim"
    assert main(["--config", cfg, "--out", str(sim), "--seed", "4", "--quiet", "simulate"]) == 0
    return sim


def run_train(sim, out, *extra):
    return main([
        "--config", str(sim / "config.json"), "--out", str(out), "--seed", "1", "--quiet", "train",
        "--reports", str(sim / "reports.csv"), "--districts", str(sim / "districts.csv"), *extra,
    ])


def run_decode(sim, params, out, *extra):
    return main([
        "--config", str(sim / "config.json"), "--out", str(out), "--quiet", "decode",
        "--params", str(params), "--reports", str(sim / "reports.csv"), "--districts", str(sim / "districts.csv"),
        *extra,
    ])


def test_simulate_outputs_and_manifest(small):
    names = {p.name for p in small.iterdir()}
    assert {"reports.csv", "districts.csv", "truth.csv", "manifest.json", "config.json"} <= names
    man = json.loads((small / "manifest.json").read_text())
    assert man["subcommand"] == "simulate" and man["seed"] == 4
    assert man["started_at"] == "2020-09-13T12:26:40+00:00"
    assert set(man["outputs"]) == names - {"manifest.json"}
    assert len(rows(small / "truth.csv")) == 150 * 12


def test_simulate_deterministic(tmp_path, small):
    cfg = write_json(tmp_path / "cfg2.json", {"simulate": {"n_districts": 150, "n_weeks": 12}})
    other = tmp_path / "again"
    assert main(["--config", cfg, "--out", str(other), "--seed", "4", "-q", "simulate"]) == 0
    for name in ("reports.csv", "districts.csv", "truth.csv", "manifest.json"):
        assert (other / name).read_bytes() == (small / name).read_bytes()


def test_simulate_coverage_within_one_percent(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"simulate": {"n_districts": 2000, "n_weeks": 20}})
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "-q", "simulate"]) == 0
    cov = json.loads((tmp_path / "s" / "manifest.json").read_text())["coverage"]
    for s, c in cov.items():
        assert abs(c["rate"] - c["configured_rate"]) <= 0.01 * max(c["configured_rate"], 0.01) + 0.005, s
        assert abs(c["rate"] - c["configured_rate"]) / c["configured_rate"] <= 0.05


@pytest.mark.parametrize(
    "sim_cfg, key",
    [
        ({"n_districts": 0}, "n_districts"),
        ({"n_weeks": -3}, "n_weeks"),
        ({"colour": 1}, "simulate.colour"),
        ({"missingness": {"nope": 0.5}}, "missingness"),
    ],
)
def test_simulate_bad_config(tmp_path, capsys, sim_cfg, key):
    cfg = write_json(tmp_path / "c.json", {"simulate": sim_cfg})
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "simulate"]) == 1
    assert key in capsys.readouterr().err


def test_bad_top_level_key(tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {"simluate": {}})
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "simulate"]) == 1
    assert "simluate" in capsys.readouterr().err


def test_yaml_config(tmp_path):
    (tmp_path / "c.yaml").write_text("simulate:\n  n_districts: 3\n  n_weeks: 2\n")
    assert main(["--config", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "s"), "-q", "simulate"]) == 0
    assert len(rows(tmp_path / "s" / "truth.csv")) == 6


def test_train_decode_agree_report(small, tmp_path):
    assert run_train(small, tmp_path / "train") == 0
    trace = [float(r["log_likelihood"]) for r in rows(tmp_path / "train" / "trace.csv")]
    assert all(b >= a - 1e-8 for a, b in zip(trace, trace[1:]))
    params = ModelParameters.load(tmp_path / "train" / "params.json")
    assert params.sources == ("burbio", "mch", "r2lt", "sd")
    assert {r["source"] for r in rows(tmp_path / "train" / "coverage.csv")} >= {"r2lt", "decodable"}

    assert run_decode(small, tmp_path / "train" / "params.json", tmp_path / "dec") == 0
    dec = rows(tmp_path / "dec" / "decode.csv")
    assert len(dec) == 150 * 12

    assert main(["--config", str(small / "config.json"), "--out", str(tmp_path / "ag"), "-q", "agree",
                 "--decode", str(tmp_path / "dec" / "decode.csv"), "--reports", str(small / "reports.csv")]) == 0
    long = {r["pair"]: r for r in rows(tmp_path / "ag" / "agreement_long.csv")}
    assert long["r2lt:hmm"]["overlap"] != "0"
    tt = rows(tmp_path / "ag" / "ttest.csv")
    assert len(tt) == 12

    assert main(["--out", str(tmp_path / "rep"), "-q", "report", "--decode", str(tmp_path / "dec" / "decode.csv"),
                 "--districts", str(small / "districts.csv"), "--snapshot-weeks", "2020-10-01"]) == 0
    trend = rows(tmp_path / "rep" / "trend.csv")
    assert len(trend) == 12 and {r["stratum"] for r in trend} == {"national"}
    for r in trend:
        assert abs(sum(float(r[k]) for k in ("pct_remote", "pct_hybrid", "pct_inperson")) - 100) <= 0.01
    assert rows(tmp_path / "rep" / "snapshot.csv")


def test_train_max_iters_zero_returns_init(small, tmp_path):
    init = tmp_path / "init.json"
    smoothed_table_parameters().save(init)
    assert run_train(small, tmp_path / "t", "--init", "file", "--init-file", str(init), "--max-iters", "0") == 0
    out = ModelParameters.load(tmp_path / "t" / "params.json")
    assert out.allclose(ModelParameters.load(init), atol=0)
    assert len(rows(tmp_path / "t" / "trace.csv")) == 1


def test_train_noise_free_corpus(tmp_path):
    # fully deterministic generator: identity emissions and self-loops of 1
    eye = np.eye(3)
    p = ModelParameters(np.full(3, 1 / 3), eye, np.stack([eye] * 4), ("burbio", "mch", "r2lt", "sd"))
    p.save(tmp_path / "truth.json")
    cfg = write_json(tmp_path / "c.json", {"simulate": {
        "n_districts": 200, "n_weeks": 15, "parameters": str(tmp_path / "truth.json"),
        "missingness": {"burbio": 0.5, "mch": 0.5, "r2lt": 0.0, "sd": 0.5},
    }})
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "-q", "simulate"]) == 0
    assert run_train(tmp_path / "s", tmp_path / "t", "--pseudocount", "1e-6") == 0
    fit = ModelParameters.load(tmp_path / "t" / "params.json")
    assert np.abs(fit.emissions - np.stack([eye] * 4)).max() <= 1e-6
    assert np.abs(fit.transition - eye).max() <= 1e-6


def test_train_cutoff(small, tmp_path):
    assert run_train(small, tmp_path / "full", "--max-iters", "2", "--restarts", "1") == 0
    assert run_train(small, tmp_path / "cut", "--max-iters", "2", "--restarts", "1",
                     "--cutoff-date", "2020-09-20") == 0
    full = {r["source"]: r for r in rows(tmp_path / "full" / "coverage.csv")}
    cut = {r["source"]: r for r in rows(tmp_path / "cut" / "coverage.csv")}
    # the window starts 2020-08-31, so the cutoff keeps three weeks
    assert int(cut["decodable"]["district_weeks"]) == 3 * int(cut["decodable"]["districts"])
    assert int(cut["r2lt"]["district_weeks"]) < int(full["r2lt"]["district_weeks"])


def test_train_impossible_under_init(tmp_path, capsys):
    p = ModelParameters(np.full(3, 1 / 3), np.eye(3), np.stack([np.eye(3)] * 4), ("burbio", "mch", "r2lt", "sd"))
    p.save(tmp_path / "init.json")
    cfg = write_json(tmp_path / "c.json", {"simulate": {"n_districts": 20, "n_weeks": 10, "missingness": [0, 0, 0, 0]}})
    assert main(["--config", cfg, "--out", str(tmp_path / "s"), "-q", "simulate"]) == 0
    code = run_train(tmp_path / "s", tmp_path / "t", "--init", "file", "--init-file", str(tmp_path / "init.json"))
    assert code == 2
    err = capsys.readouterr().err
    assert "smoothed" in err and "week" in err


def test_decode_threshold_and_channel_mismatch(small, tmp_path):
    params = tmp_path / "p.json"
    published_parameters().save(params)
    assert run_decode(small, params, tmp_path / "d", "--threshold", "1.01") == 0
    assert all(r["high_confidence"] == "0" for r in rows(tmp_path / "d" / "decode.csv"))
    swapped = ModelParameters(
        published_parameters().initial, published_parameters().transition, published_parameters().emissions,
        ("mch", "burbio", "r2lt", "sd"),
    )
    swapped.save(params)
    assert run_decode(small, params, tmp_path / "d2") == 1


def test_agree_one_district_perfect(tmp_path):
    (tmp_path / "r.csv").write_text("source,leaid,report_date,modality\nr2lt,A,2020-09-08,in person\n")
    (tmp_path / "d.csv").write_text(
        "leaid,week_start,modality,p_remote,p_hybrid,p_inperson,high_confidence\n"
        "A,2020-09-07,in-person,0,0,1,1\n"
    )
    cfg = write_json(tmp_path / "c.json", {"pipeline": {"sources": ["r2lt"]}})
    assert main(["--config", cfg, "--out", str(tmp_path / "o"), "-q", "agree",
                 "--decode", str(tmp_path / "d.csv"), "--reports", str(tmp_path / "r.csv")]) == 0
    long = {r["pair"]: r for r in rows(tmp_path / "o" / "agreement_long.csv")}
    assert long["r2lt:hmm"]["agreement"] == "1.000000"


def test_report_urban_rural_missing(tmp_path, capsys):
    (tmp_path / "dist.csv").write_text(
        "leaid,name,state,agency_type,operating_status,county_fips,urban_rural,enrollment,school_count\n"
        "A,Alpha,TX,1,1,48001,,10,1\nB,Beta,TX,1,1,48001,3,10,1\n"
    )
    (tmp_path / "d.csv").write_text(
        "leaid,week_start,modality,p_remote,p_hybrid,p_inperson,high_confidence\n"
        "A,2020-09-07,remote,1,0,0,1\nB,2020-09-07,hybrid,0,1,0,1\n"
    )
    args = ["--out", str(tmp_path / "o"), "report", "--decode", str(tmp_path / "d.csv"),
            "--districts", str(tmp_path / "dist.csv"), "--stratify", "urban_rural"]
    assert main(args) == 1
    err = capsys.readouterr().err
    assert "A" in err and "urban_rural" in err
    assert main(args + ["--allow-unknown"]) == 0
    assert "unknown" in {r["stratum"] for r in rows(tmp_path / "o" / "trend.csv")}


def test_missing_input_file(tmp_path, capsys):
    code = main(["--out", str(tmp_path / "o"), "report", "--decode", str(tmp_path / "none.csv"),
                 "--districts", str(tmp_path / "none.csv")])
    assert code == 1 and "none.csv" in capsys.readouterr().err


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["--out", str(tmp_path), "simulate", "--bogus"])
    assert exc.value.code == 1
