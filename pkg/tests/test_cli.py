import csv
import json
import subprocess
import sys

import pytest

from loopsoup import __version__
from loopsoup.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_VERIFY, config_hash, main

K4 = {"generator": "complete", "n": 4, "kappa": 1.0}


def write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def read_csv(path):
    lines = path.read_text().splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


def test_exact_writes_hashed_outputs(tmp_path):
    cfg = {"graph": K4, "alpha": [1.0], "partitions": [[[0, 1], [2, 3]]]}
    out = tmp_path / "o"
    assert main(["exact", "--config", write(tmp_path, "c.json", cfg), "--out", str(out)]) == EXIT_OK
    head, rows = read_csv(out / "exact.csv")
    assert head == f"# loopsoup {__version__} exact config_sha256={config_hash(cfg)}"
    assert float(rows[0]["prob_finer"]) == pytest.approx(5 / 9, rel=1e-12)
    doc = json.loads((out / "exact.json").read_text())
    assert doc["config_sha256"] == config_hash(cfg)
    assert doc["config"] == cfg and doc["version"] == __version__


def test_overlapping_blocks_are_config_errors(tmp_path):
    cfg = {"graph": K4, "alpha": [1.0], "partitions": [[[0, 1], [1, 2, 3]]]}
    assert main(["exact", "--config", write(tmp_path, "c.json", cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_schema_violations(tmp_path, capsys):
    assert main(["exact", "--config", write(tmp_path, "c.json", {"graph": K4}), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["exact", "--config", write(tmp_path, "d.json", {"graph": K4, "alpha": [1], "bogus": 1})]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["exact", "--config", str(bad)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_randomized_commands_need_a_seed(tmp_path):
    cfg = {"graph": K4, "alpha": 1.0, "replicas": 100}
    assert main(["sample", "--config", write(tmp_path, "c.json", cfg), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["sample", "--config", write(tmp_path, "c.json", cfg), "--seed", "3", "--out", str(tmp_path)]) == EXIT_OK


def test_missing_config_is_io_error(tmp_path):
    assert main(["exact", "--config", str(tmp_path / "nope.json")]) == EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write(tmp_path, "c.json", {"graph": K4, "alpha": [1.0]})
    assert main(["exact", "--config", cfg, "--out", str(blocker / "sub")]) == EXIT_IO


def test_sample_byte_identical(tmp_path):
    cfg = write(tmp_path, "c.json", {"graph": K4, "alpha": 1.0, "replicas": 5000, "seed": 9, "partitions": [[[0, 1], [2, 3]]], "dump_replicas": 2})
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sample", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["sample", "--config", cfg, "--out", str(b)]) == EXIT_OK
    for name in ("sample.csv", "sample.json", "soup_0.jsonl", "soup_1.jsonl"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    _, rows = read_csv(a / "sample.csv")
    assert abs(float(rows[0]["z"])) < 4
    assert main(["sample", "--config", cfg, "--seed", "10", "--out", str(b)]) == EXIT_OK
    assert (a / "sample.csv").read_bytes() != (b / "sample.csv").read_bytes()


def test_flags_override_file(tmp_path):
    cfg = write(tmp_path, "c.json", {"graph": K4, "alpha": 1.0, "replicas": 5000, "seed": 9})
    assert main(["sample", "--config", cfg, "--replicas", "7", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "sample.json").read_text())
    assert doc["replicas"] == 7 and doc["config"]["replicas"] == 7


def test_verify_passes_and_fails(tmp_path):
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert doc["passed"] and len(doc["checks"]) >= 7
    assert main(["verify", "--tolerance", "1e-30", "--out", str(tmp_path)]) == EXIT_VERIFY
    assert not json.loads((tmp_path / "verify.json").read_text())["passed"]


def test_verify_soup_file(tmp_path):
    cfg = write(tmp_path, "s.json", {"graph": K4, "alpha": 1.0, "replicas": 10, "seed": 1, "dump_replicas": 1})
    assert main(["sample", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    good = write(tmp_path, "v.json", {"graph": K4, "soup_file": str(tmp_path / "soup_0.jsonl")})
    assert main(["verify", "--config", good, "--out", str(tmp_path)]) == EXIT_OK
    (tmp_path / "bad.jsonl").write_text('{"alpha_mark": 0.5, "loop": [0, 0]}\n')
    bad = write(tmp_path, "w.json", {"graph": K4, "soup_file": str(tmp_path / "bad.jsonl")})
    assert main(["verify", "--config", bad, "--out", str(tmp_path)]) == EXIT_VERIFY
    lonely = write(tmp_path, "x.json", {"soup_file": str(tmp_path / "soup_0.jsonl")})
    assert main(["verify", "--config", lonely, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_kn_outputs(tmp_path):
    cfg = write(tmp_path, "k.json", {"n": 4, "eps": 1.0, "t": [1.0], "replicas": 2000, "seed": 2, "times_replicas": 30})
    assert main(["kn", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    _, rows = read_csv(tmp_path / "kn.csv")
    assert float(rows[0]["exact"]) == pytest.approx(8 / 9)
    head, times = read_csv(tmp_path / "kn_times.csv")
    assert list(times[0]) == ["n", "epsilon", "seed", "T_norm", "tau_norm", "n_events"]
    assert len(times) == 30
    summary = json.loads((tmp_path / "kn_times.json").read_text())
    assert summary["cover"]["resamples"] == 1000
    assert summary["cover"]["ci_lo"] <= summary["cover"]["ci_hi"]


def test_renewal_outputs(tmp_path):
    cfg = write(tmp_path, "r.json", {"kappa": 2.0, "alpha": 0.5, "n_max": 5, "s_grid": [1.0], "eps_grid": [0.01, 0.001]})
    assert main(["renewal", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    _, rows = read_csv(tmp_path / "renewal.csv")
    assert [int(r["n"]) for r in rows] == [1, 2, 3, 4, 5]
    assert float(rows[0]["q"]) == float(rows[0]["nu"])
    doc = json.loads((tmp_path / "renewal.json").read_text())
    assert len(doc["limit_check"]) == 2
    cfg = write(tmp_path, "s.json", {"kappa": 2.0, "alpha": 1.5, "n_max": 5, "s_grid": [1.0], "eps_grid": [0.01]})
    assert main(["renewal", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_perc_outputs(tmp_path):
    cfg = write(tmp_path, "p.json", {"d": 2, "L": [8], "alpha": 1.0, "kappa": 0.01, "replicas": 300, "seed": 4, "scan": {"theta_cut": 0.05, "kappa_range": [0.01, 10]}})
    assert main(["perc", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    _, rows = read_csv(tmp_path / "theta.csv")
    assert list(rows[0]) == ["d", "L", "bc", "alpha", "kappa", "theta_hat", "ci_lo", "ci_hi", "replicas"]
    br = json.loads((tmp_path / "scan.json").read_text())["bracket"]
    assert br["kappa_lo"] < br["kappa_hi"]


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "loopsoup", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
