import csv
import io
import json
import subprocess
import sys

import pytest
from hypothesis import given
from hypothesis import strategies as st

from metapool import cli, harness
from metapool.cli import (
    ConfigError,
    CsvParseError,
    format_dataset,
    main,
    parse_bench_config,
    parse_dataset_csv,
    parse_eta,
    resolve_seed,
)
from metapool.model import Method, NonConvergence, dataset_from_arrays, validate_dataset
from metapool.simulation import IpdSettings, preset


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestDatasetCsv:
    def test_parse(self):
        recs = parse_dataset_csv("study,y,se,df\na,0.5,1,10\n\nb,-1,2,12.5\n")
        assert [(r.study_id, r.y, r.se, r.df) for r in recs] == [("a", 0.5, 1.0, 10.0), ("b", -1.0, 2.0, 12.5)]

    @pytest.mark.parametrize("text,line", [
        ("y,se,df\n1,1,1\n", 1),
        ("study,y,se,df\nabc,1,10\n", 2),
        ("study,y,se,df\na,1,1,10\nb,x,1,10\n", 3),
        ("study,y,se,df\n,1,1,10\n", 2),
    ])
    def test_parse_errors_cite_line(self, text, line):
        with pytest.raises(CsvParseError) as exc:
            parse_dataset_csv(text)
        assert exc.value.line == line
        assert f"line {line}" in str(exc.value)

    finite = st.floats(-1e6, 1e6, allow_nan=False)
    positive = st.floats(1e-6, 1e6)

    @given(st.lists(st.tuples(finite, positive, positive), min_size=2, max_size=20))
    def test_round_trip(self, rows):
        y, se, df = zip(*rows)
        d = dataset_from_arrays(y, se, df)
        text = format_dataset(d)
        assert validate_dataset(parse_dataset_csv(text)) == d
        assert format_dataset(validate_dataset(parse_dataset_csv(text))) == text


class TestConfig:
    def test_full(self):
        cfg = parse_bench_config("settings = 1,2\nm = 10 # comment\nreps = 7\nseed = 9\nalpha = 0.1\nmethods = DL,bd\n")
        assert cfg.settings == (1, 2) and cfg.m_values == (10,) and cfg.n_reps == 7
        assert cfg.master_seed == 9 and cfg.alpha == 0.1 and cfg.methods == (Method.DL, Method.BD)

    def test_seed_override(self):
        assert parse_bench_config("seed = 9\n", seed_override=4).master_seed == 4

    @pytest.mark.parametrize("text", ["bogus = 1\n", "reps = 1\nreps = 2\n", "reps\n", "reps = x\n",
                                      "settings = 9\n", "methods = DL,XX\n", "methods = DL,DL\n", "alpha = 2\n"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_bench_config(text)

    def test_seed_precedence(self, monkeypatch):
        monkeypatch.delenv(cli.SEED_ENV, raising=False)
        assert resolve_seed(None, 1) == 1
        monkeypatch.setenv(cli.SEED_ENV, "77")
        assert resolve_seed(None, 1) == 77
        assert resolve_seed(5, 1) == 5
        monkeypatch.setenv(cli.SEED_ENV, "abc")
        with pytest.raises(ConfigError):
            resolve_seed(None, 1)

    def test_eta(self):
        assert parse_eta("inverse_df").values is None
        assert parse_eta("custom:0.1,0.2").values == (0.1, 0.2)
        with pytest.raises(ValueError):
            parse_eta("bogus")


class TestFormatting:
    def test_fmt6(self):
        assert cli.fmt6(-0.0241234567) == "-0.0241235"
        assert cli.fmt6(None) == cli.NA and cli.fmt6(float("nan")) == cli.NA

    def test_fmt4(self):
        assert cli.fmt4(0.69904) == "0.6990"


class TestAnalyze:
    def test_symmetric_two_study(self, tmp_path, capsys):
        p = write(tmp_path, "d.csv", "study,y,se,df\n1,0,1,10\n2,2,1,10\n")
        assert main(["analyze", "--input", str(p), "--methods", "DL", "--format", "csv"]) == 0
        rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
        assert rows[0]["method"] == "DL" and float(rows[0]["theta_hat"]) == 1.0

    def test_all_formats(self, tmp_path, capsys):
        p = write(tmp_path, "d.csv", "study,y,se,df\n1,0,1,10\n2,2,1,12\n3,4,1.5,20\n")
        assert main(["analyze", "--input", str(p), "--format", "json"]) == 0
        fits = json.loads(capsys.readouterr().out)
        assert [f["method"] for f in fits] == ["DL", "HT", "NB", "GS", "BD"]
        assert main(["analyze", "--input", str(p)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0].startswith("| Method") and len(out) == 7
        assert out[2].startswith("| DL | ")

    def test_parse_error(self, tmp_path, capsys):
        p = write(tmp_path, "d.csv", "study,y,se,df\nabc,1,10\n")
        assert main(["analyze", "--input", str(p)]) == 1
        assert "line 2" in capsys.readouterr().err

    @pytest.mark.parametrize("text", ["study,y,se,df\n1,0,1,10\n", "study,y,se,df\n1,0,0,10\n2,1,1,10\n",
                                      "study,y,se,df\n1,0,1,10\n1,1,1,10\n"])
    def test_validation_error(self, tmp_path, text):
        assert main(["analyze", "--input", str(write(tmp_path, "d.csv", text))]) == 2

    @pytest.mark.parametrize("args", [["--alpha", "1.5"], ["--methods", "XX"], ["--eta", "custom:1,2,3"],
                                      ["--format", "xml"]])
    def test_invalid_arguments(self, tmp_path, args):
        p = write(tmp_path, "d.csv", "study,y,se,df\n1,0,1,10\n2,2,1,10\n")
        assert main(["analyze", "--input", str(p)] + args) == 2

    def test_missing_file(self, tmp_path):
        assert main(["analyze", "--input", str(tmp_path / "nope.csv")]) == 4

    def test_estimation_failure_keeps_partial_output(self, tmp_path, capsys, monkeypatch):
        def broken(*a, **k):
            raise NonConvergence("forced")
        monkeypatch.setattr(harness, "bd_fit", broken)
        p = write(tmp_path, "d.csv", "study,y,se,df\n1,0,1,10\n2,2,1,10\n")
        assert main(["analyze", "--input", str(p), "--format", "csv"]) == 3
        cap = capsys.readouterr()
        assert [r["method"] for r in csv.DictReader(io.StringIO(cap.out))] == ["DL", "HT", "NB", "GS"]
        assert "BD failed" in cap.err


class TestSimulate:
    def test_shape_and_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for d in (a, b):
            assert main(["simulate", "--setting", "2", "--m", "10", "--count", "5", "--seed", "42", "--out", str(d)]) == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == [f"dataset_{k:03d}.csv" for k in range(5)] + ["manifest.json"]
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes()
        for k in range(5):
            lines = (a / f"dataset_{k:03d}.csv").read_text().splitlines()
            assert lines[0] == "study,y,se,df" and len(lines) == 11

    def test_manifest_round_trip(self, tmp_path):
        assert main(["simulate", "--setting", "2", "--m", "10", "--count", "2", "--seed", "42", "--out", str(tmp_path)]) == 0
        man = json.loads((tmp_path / "manifest.json").read_text())
        assert IpdSettings.from_dict(man["settings"]) == preset(2)
        assert man["seed"] == 42 and man["count"] == 2

    def test_seed_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.SEED_ENV, "42")
        assert main(["simulate", "--setting", "2", "--m", "5", "--out", str(tmp_path / "env")]) == 0
        monkeypatch.delenv(cli.SEED_ENV)
        assert main(["simulate", "--setting", "2", "--m", "5", "--seed", "42", "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "env" / "dataset_000.csv").read_bytes() == (tmp_path / "flag" / "dataset_000.csv").read_bytes()

    @pytest.mark.parametrize("args", [["--setting", "9", "--m", "10"], ["--setting", "1", "--m", "1"],
                                      ["--setting", "1", "--m", "10", "--count", "0"]])
    def test_invalid(self, tmp_path, args):
        assert main(["simulate", *args, "--out", str(tmp_path)]) == 2

    def test_io_failure(self, tmp_path):
        blocker = write(tmp_path, "file", "x")
        assert main(["simulate", "--setting", "1", "--m", "3", "--out", str(blocker / "sub")]) == 4


class TestBench:
    def test_single_replication(self, tmp_path):
        cfg = write(tmp_path, "b.conf", "settings = 1,4\nm = 5\nreps = 1\nseed = 3\n")
        out = tmp_path / "out"
        assert main(["bench", "--config", str(cfg), "--out", str(out)]) == 0
        assert {p.name for p in out.iterdir()} == {"bias.csv", "mse.csv", "coverage.csv", "tau2.csv",
                                                   "coverage_long.csv", "diagnostics.csv"}
        rows = list(csv.reader((out / "coverage.csv").open()))
        assert rows[0] == ["setting", "DL_m5", "HT_m5", "NB_m5", "GS_m5", "BD_m5"]
        assert [r[0] for r in rows[1:]] == ["1", "4"]
        for r in rows[1:]:
            assert all(v in ("0", "1") for v in r[1:])
        long = list(csv.DictReader((out / "coverage_long.csv").open()))
        assert len(long) == 10 and all(0 <= float(r["coverage"]) <= 1 for r in long)

    def test_env_seed_overrides_config(self, tmp_path, monkeypatch):
        cfg = write(tmp_path, "b.conf", "settings = 2\nm = 4\nreps = 2\nseed = 3\nmethods = DL\n")
        main(["bench", "--config", str(cfg), "--out", str(tmp_path / "a"), "--seed", "8"])
        monkeypatch.setenv(cli.SEED_ENV, "8")
        main(["bench", "--config", str(cfg), "--out", str(tmp_path / "b")])
        monkeypatch.setenv(cli.SEED_ENV, "9")
        main(["bench", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "8"])
        a, b, c = ((tmp_path / x / "bias.csv").read_text() for x in "abc")
        assert a == b == c

    def test_na_cells(self):
        cfg = parse_bench_config("settings = 1\nm = 4\nreps = 2\nmethods = DL,BD\n")
        cell = harness.PerformanceSummary(1, 4, -2.0, {Method.DL: None, Method.BD: None})
        files = cli.bench_tables(cfg, [cell])
        assert files["bias.csv"].splitlines()[1] == "1,NA,NA"
        assert files["diagnostics.csv"].splitlines()[1] == "1,4,DL,0,2,NA"

    def test_config_errors(self, tmp_path):
        assert main(["bench", "--config", str(write(tmp_path, "b.conf", "bogus = 1\n")), "--out", str(tmp_path)]) == 2
        assert main(["bench", "--config", str(tmp_path / "missing.conf"), "--out", str(tmp_path)]) == 2
        cfg = write(tmp_path, "ok.conf", "reps = 1\n")
        assert main(["bench", "--config", str(cfg), "--out", str(tmp_path), "--workers", "0"]) == 2


def test_console_entry_point(tmp_path):
    p = write(tmp_path, "d.csv", "study,y,se,df\n1,0,1,10\n2,2,1,10\n")
    r = subprocess.run([sys.executable, "-m", "metapool", "analyze", "--input", str(p), "--methods", "DL"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "| DL | 1.0000" in r.stdout
