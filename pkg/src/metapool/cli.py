"""Command-line front end: ``analyze``, ``simulate`` and ``bench``.

Dataset files are CSV with the exact header ``study,y,se,df`` where ``se``
is the standard error of ``y``. Bench configs are flat ``key = value`` text.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .bivariate import INVERSE_DF, EtaKind, EtaRule
from .harness import BenchmarkConfig, PerformanceSummary, fit_methods, run_benchmark
from .model import ALL_METHODS, FitResult, MetaDataset, Method, StudyRecord, ValidationError, validate_dataset
from .simulation import GenerationError, preset, simulate_meta_dataset
from .statkit import derive_stream

log = logging.getLogger(__name__)

HEADER = ("study", "y", "se", "df")
SEED_ENV = "METAPOOL_SEED"
NA = "NA"

EXIT_OK, EXIT_PARSE, EXIT_INVALID, EXIT_ESTIMATION, EXIT_IO = 0, 1, 2, 3, 4


class CsvParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- dataset CSV

def parse_dataset_csv(text: str) -> list[StudyRecord]:
    """Parse dataset CSV text. Structural problems raise :class:`CsvParseError`."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(c.strip() for c in rows[0]) != HEADER:
        raise CsvParseError(1, f"header must be exactly {','.join(HEADER)}")
    records = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            raise CsvParseError(lineno, f"expected {len(HEADER)} fields, got {len(row)}")
        sid = row[0].strip()
        if not sid:
            raise CsvParseError(lineno, "empty study id")
        try:
            y, se, df = (float(c) for c in row[1:])
        except ValueError:
            raise CsvParseError(lineno, f"non-numeric value in {row!r}") from None
        records.append(StudyRecord(sid, y, se, df))
    return records


def read_dataset(path: str | os.PathLike) -> MetaDataset:
    """Read and validate a dataset file (parse errors before validation errors)."""
    return validate_dataset(parse_dataset_csv(Path(path).read_text()))


def format_dataset(data: MetaDataset) -> str:
    # repr precision so that parse(format(d)) == d exactly
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in data.records:
        w.writerow([r.study_id, repr(float(r.y)), repr(float(r.se)), repr(float(r.df))])
    return buf.getvalue()


def write_dataset(data: MetaDataset, path: str | os.PathLike) -> None:
    Path(path).write_text(format_dataset(data))


# ---------------------------------------------------------------- bench config

_CONFIG_KEYS = {"settings", "m", "reps", "seed", "alpha", "methods"}


def parse_methods(text: str) -> tuple[Method, ...]:
    names = [t.strip().upper() for t in text.split(",") if t.strip()]
    if not names:
        raise ValueError("method list is empty")
    try:
        methods = tuple(Method(n) for n in names)
    except ValueError:
        raise ValueError(f"unknown method in {text!r}; choose from {','.join(m.value for m in ALL_METHODS)}") from None
    if len(set(methods)) != len(methods):
        raise ValueError(f"duplicate method in {text!r}")
    return methods


def parse_bench_config(text: str, seed_override: int | None = None) -> BenchmarkConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = val
    kwargs: dict = {}
    try:
        if "settings" in values:
            kwargs["settings"] = tuple(int(s) for s in values["settings"].split(","))
        if "m" in values:
            kwargs["m_values"] = tuple(int(s) for s in values["m"].split(","))
        if "reps" in values:
            kwargs["n_reps"] = int(values["reps"])
        if "seed" in values:
            kwargs["master_seed"] = int(values["seed"])
        if "alpha" in values:
            kwargs["alpha"] = float(values["alpha"])
        if "methods" in values:
            kwargs["methods"] = parse_methods(values["methods"])
        if seed_override is not None:
            kwargs["master_seed"] = seed_override
        return BenchmarkConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def resolve_seed(flag: int | None, fallback: int | None) -> int | None:
    """Flag beats the environment variable, which beats ``fallback``."""
    if flag is not None:
        return flag
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return fallback


# ---------------------------------------------------------------- number formatting

def fmt6(x: float | None) -> str:
    if x is None or not math.isfinite(x):
        return NA
    s = f"{x:.6g}"
    return "0" if s == "-0" else s


def fmt4(x: float) -> str:
    s = f"{x:.4f}"
    return s[1:] if s == "-0.0000" else s


# ---------------------------------------------------------------- analyze

@dataclass(frozen=True)
class AnalyzeRequest:
    input: Path
    alpha: float = 0.05
    methods: tuple[Method, ...] = ALL_METHODS
    eta: EtaRule = INVERSE_DF
    fmt: str = "markdown"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0, 1)")
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.fmt not in ("csv", "json", "markdown"):
            raise ValueError(f"unknown format {self.fmt!r}")


def parse_eta(text: str) -> EtaRule:
    """``inverse_df`` or ``custom:v1,v2,...`` (one positive value per study)."""
    text = text.strip()
    if text == EtaKind.INVERSE_DF.value:
        return INVERSE_DF
    if text.startswith("custom:"):
        vals = tuple(float(v) for v in text[len("custom:"):].split(","))
        return EtaRule(EtaKind.CUSTOM, vals)
    raise ValueError(f"unknown eta rule {text!r}; use inverse_df or custom:v1,v2,...")


def render_fits(fits: Sequence[FitResult], fmt: str, alpha: float) -> str:
    if fmt == "json":
        return json.dumps([f.as_dict() for f in fits], indent=2, default=str) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "theta_hat", "ci_low", "ci_high", "tau2_hat"])
        for f in fits:
            w.writerow([f.method.value, fmt6(f.theta_hat), fmt6(f.ci_low), fmt6(f.ci_high), fmt6(f.tau2_hat)])
        return buf.getvalue()
    level = f"{100 * (1 - alpha):g}%"
    lines = [f"| Method | estimate with {level} confidence limits | tau2 |", "|---|---|---|"]
    for f in fits:
        lines.append(f"| {f.method.value} | {fmt4(f.theta_hat)} ({fmt4(f.ci_low)}; {fmt4(f.ci_high)}) "
                     f"| {fmt4(f.tau2_hat)} |")
    return "\n".join(lines) + "\n"


def cmd_analyze(req: AnalyzeRequest, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    try:
        text = req.input.read_text()
    except OSError as exc:
        print(f"error: cannot read {req.input}: {exc}", file=err)
        return EXIT_IO
    try:
        data = validate_dataset(parse_dataset_csv(text))
    except CsvParseError as exc:
        print(f"error: {req.input}: {exc}", file=err)
        return EXIT_PARSE
    except ValidationError as exc:
        print(f"error: invalid dataset: {exc}", file=err)
        return EXIT_INVALID
    try:
        req.eta.resolve(data)
    except ValueError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INVALID
    results = fit_methods(data, req.methods, req.alpha, req.eta)
    fits = [r for r in results.values() if isinstance(r, FitResult)]
    failed = {m: r for m, r in results.items() if not isinstance(r, FitResult)}
    out.write(render_fits(fits, req.fmt, req.alpha))
    for m, exc in failed.items():
        print(f"error: {m.value} failed: {type(exc).__name__}: {exc}", file=err)
    return EXIT_ESTIMATION if failed else EXIT_OK


# ---------------------------------------------------------------- simulate

def cmd_simulate(setting_id: int, m: int, count: int, seed: int, out_dir: Path, err=None) -> int:
    """Write ``count`` datasets plus ``manifest.json``.

    Dataset ``k`` uses the stream path ``(setting, m, k)``, the same path the
    benchmark uses for replication ``k``.
    """
    err = err or sys.stderr
    try:
        settings = preset(setting_id)
        if m < 2:
            raise ValueError("m must be >= 2")
        if count < 1:
            raise ValueError("count must be >= 1")
    except ValueError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INVALID
    width = max(3, len(str(count - 1)))
    files = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for k in range(count):
            data, _ = simulate_meta_dataset(settings, m, derive_stream(seed, (setting_id, m, k)))
            name = f"dataset_{k:0{width}d}.csv"
            write_dataset(data, out_dir / name)
            files.append(name)
        manifest = {
            "setting": setting_id,
            "m": m,
            "count": count,
            "seed": seed,
            "stream_path": "(setting, m, index)",
            "settings": settings.to_dict(),
            "files": files,
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        print(f"error: cannot write to {out_dir}: {exc}", file=err)
        return EXIT_IO
    except GenerationError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_INVALID
    return EXIT_OK


# ---------------------------------------------------------------- bench

_METRICS = {"bias": "bias", "mse": "mse", "coverage": "coverage", "tau2": "mean_tau2"}


def bench_tables(config: BenchmarkConfig, cells: Sequence[PerformanceSummary]) -> dict[str, str]:
    """Render the wide tables, the long coverage table and diagnostics."""
    by_key = {(c.setting, c.m): c for c in cells}
    columns = [(m, meth) for m in config.m_values for meth in config.methods]
    files = {}
    for name, attr in _METRICS.items():
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting"] + [f"{meth.value}_m{m}" for m, meth in columns])
        for s in config.settings:
            row = [str(s)]
            for m, meth in columns:
                summ = by_key[(s, m)].methods.get(meth)
                row.append(NA if summ is None else fmt6(getattr(summ, attr)))
            w.writerow(row)
        files[f"{name}.csv"] = buf.getvalue()

    long_buf, diag_buf = io.StringIO(), io.StringIO()
    lw = csv.writer(long_buf, lineterminator="\n")
    dw = csv.writer(diag_buf, lineterminator="\n")
    lw.writerow(["setting", "m", "method", "coverage", "n_converged"])
    dw.writerow(["setting", "m", "method", "n_converged", "n_failed", "status"])
    for c in cells:
        for meth in config.methods:
            summ = c.methods.get(meth)
            if summ is None:
                lw.writerow([c.setting, c.m, meth.value, NA, 0])
                dw.writerow([c.setting, c.m, meth.value, 0, config.n_reps, NA])
                continue
            lw.writerow([c.setting, c.m, meth.value, fmt6(summ.coverage), summ.n_converged])
            status = "ok" if summ.n_failed == 0 else "partial"
            dw.writerow([c.setting, c.m, meth.value, summ.n_converged, summ.n_failed, status])
    files["coverage_long.csv"] = long_buf.getvalue()
    files["diagnostics.csv"] = diag_buf.getvalue()
    return files


def cmd_bench(config_path: Path, out_dir: Path, workers: int = 1, seed: int | None = None, err=None) -> int:
    err = err or sys.stderr
    try:
        text = config_path.read_text()
    except OSError as exc:
        print(f"error: cannot read {config_path}: {exc}", file=err)
        return EXIT_INVALID
    try:
        config = parse_bench_config(text, resolve_seed(seed, None))
    except ConfigError as exc:
        print(f"error: {config_path}: {exc}", file=err)
        return EXIT_INVALID
    if workers < 1:
        print("error: workers must be >= 1", file=err)
        return EXIT_INVALID
    cells = run_benchmark(config, workers)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, content in bench_tables(config, cells).items():
            (out_dir / name).write_text(content)
    except OSError as exc:
        print(f"error: cannot write to {out_dir}: {exc}", file=err)
        return EXIT_IO
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metapool", description="Random-effects meta-analysis of mean differences.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="pool a dataset with every requested method")
    a.add_argument("--input", required=True, type=Path)
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--methods", default=",".join(m.value for m in ALL_METHODS))
    a.add_argument("--eta", default="inverse_df", help="inverse_df (default) or custom:v1,v2,...")
    a.add_argument("--format", choices=("csv", "json", "markdown"), default="markdown")

    s = sub.add_parser("simulate", help="write synthetic datasets for a preset")
    s.add_argument("--setting", required=True, type=int)
    s.add_argument("--m", required=True, type=int)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True, type=Path)

    b = sub.add_parser("bench", help="run the Monte Carlo benchmark")
    b.add_argument("--config", required=True, type=Path)
    b.add_argument("--out", required=True, type=Path)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--seed", type=int, default=None)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors count as invalid parameters
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "analyze":
        try:
            req = AnalyzeRequest(args.input, args.alpha, parse_methods(args.methods),
                                 parse_eta(args.eta), args.format)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        return cmd_analyze(req)
    if args.command == "simulate":
        try:
            seed = resolve_seed(args.seed, 1)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        return cmd_simulate(args.setting, args.m, args.count, seed, args.out)
    try:
        return cmd_bench(args.config, args.out, args.workers, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
