"""Command-line harness: simulation studies and CSV streams.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure (including any failed replicate).

Configuration is an INI file with an ``[experiment]`` and a ``[fol]``
section; command-line flags override file values. Example::

    [experiment]
    mode = simulate
    example = ex2
    method = proposed
    p = 50
    n_later = 80
    K = 8
    replicates = 20
    seed = 0
    out = results

    [fol]
    n_grid = 8
    mbic_cn = 1.0
"""

from __future__ import annotations

import argparse
import configparser
import csv
import enum
import logging
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .federation import (
    ClientFailure,
    Coordinator,
    FederatedClient,
    FeedError,
    Method,
    StragglerError,
    Transport,
    make_clients,
    run_stream,
)
from .federation.transport import TransportKind
from .fol import FitResult, FolConfig, StepSizeError, TuningError
from .glm import Batch, GlmFamily, Kind
from .prox import PenaltyConfig, PenaltyConfigError
from .simgen import Example, SimDesign, gen_batch, gen_design, gen_test, metrics

log = logging.getLogger("fedol")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRICS = ("TPR", "FPR", "SSE", "AUC_or_MSE", "Ghat", "ARI")
NUMERIC_ERRORS = (StepSizeError, TuningError, FloatingPointError, np.linalg.LinAlgError)


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class Mode(str, enum.Enum):
    SIMULATE = "simulate"
    STREAM = "stream"
    EXPORT = "export"


@dataclass
class ExperimentConfig:
    mode: Mode = Mode.SIMULATE
    example: Example = Example.EX2
    family: Kind = Kind.LOGISTIC
    method: Method = Method.PROPOSED
    K: int = 8
    p: int = 50
    n_first: int = 100
    n_later: int = 80
    n_batches: int = 10
    replicates: int = 1
    seed: int = 0
    out: Path = Path("results")
    data_dir: Path | None = None
    transport: TransportKind = TransportKind.IN_PROCESS
    port: int = 0
    timeout: float = 600.0
    intercept: bool = False
    fol: FolConfig = field(default_factory=FolConfig)

    def __post_init__(self):
        try:
            self.mode = Mode(self.mode)
            self.example = Example(self.example)
            self.family = Kind(self.family)
            self.method = Method(self.method)
            self.transport = TransportKind(self.transport)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.out = Path(self.out)
        if self.data_dir is not None:
            self.data_dir = Path(self.data_dir)
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if self.mode is Mode.STREAM and self.data_dir is None:
            raise ConfigError("stream mode needs data_dir")
        if self.method is Method.FIXED and self.fol.grid_lambda1 is None:
            raise ConfigError("method 'fixed' needs lambda1 and lambda2")
        if self.mode is not Mode.STREAM:
            try:
                self.design()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    @property
    def glm_family(self) -> GlmFamily:
        return GlmFamily(self.family)

    def design(self, replicate: int = 0) -> SimDesign:
        return SimDesign(
            example_id=self.example,
            K=self.K,
            p=self.p,
            n_first=self.n_first,
            n_later=self.n_later,
            n_batches=self.n_batches,
            family=self.glm_family,
            seed=self.seed + replicate,
        )

    def transport_spec(self) -> Transport:
        return Transport(self.transport, port=self.port, timeout=self.timeout)


# -- configuration -------------------------------------------------------------

_EXPERIMENT_KEYS = {f.name: f.type for f in fields(ExperimentConfig) if f.name != "fol"}
_INT_KEYS = {"K", "p", "n_first", "n_later", "n_batches", "replicates", "seed", "port"}
_FLOAT_KEYS = {"timeout"}
_FOL_INT = {"n_grid", "max_outer_iters", "n_bisect", "max_admm_iters"}
_FOL_FLOAT = {"tol_outer", "grid_reach", "ascent_from", "a", "admm_rho", "lambda1", "lambda2"}


def _number(key, value, kind):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key} = {value!r} is not a valid {kind.__name__}") from None


def _fol_config(values: dict[str, str]) -> FolConfig:
    kw, pen = {}, {}
    for key, raw in values.items():
        if key in _FOL_INT:
            v = _number(key, raw, int)
        elif key in _FOL_FLOAT:
            v = _number(key, raw, float)
        elif key == "mbic_cn":
            v = None if str(raw).lower() in ("none", "auto") else _number(key, raw, float)
        elif key == "accelerate":
            v = str(raw).lower() in ("1", "true", "yes", "on")
        else:
            raise ConfigError(f"unknown [fol] key {key!r}")
        if key == "max_admm_iters" or key in ("a", "admm_rho"):
            pen[key] = v
        elif key in ("lambda1", "lambda2"):
            kw["grid_" + key] = [v]
        else:
            kw[key] = v
    try:
        penalty = PenaltyConfig(**pen)
        lam = (kw.get("grid_lambda1"), kw.get("grid_lambda2"))
        if (lam[0] is None) != (lam[1] is None):
            raise ConfigError("give both lambda1 and lambda2 or neither")
        if lam[0] is not None:
            penalty = penalty.with_lambdas(lam[0][0], lam[1][0])
        return FolConfig(penalty=penalty, **kw)
    except (ValueError, PenaltyConfigError) as exc:
        raise ConfigError(str(exc)) from None


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    exp: dict[str, object] = {}
    fol: dict[str, str] = {}
    if args.config:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            if not parser.read(args.config, encoding="utf-8"):
                raise ConfigError(f"cannot read config file {args.config}")
        except configparser.Error as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
        extra = set(parser.sections()) - {"experiment", "fol"}
        if extra:
            raise ConfigError(f"unknown config sections {sorted(extra)}")
        if parser.has_section("experiment"):
            exp.update(parser["experiment"])
        if parser.has_section("fol"):
            fol.update(parser["fol"])
    for key in _EXPERIMENT_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            exp[key] = value
    for key in ("lambda1", "lambda2", "n_grid"):
        value = getattr(args, key, None)
        if value is not None:
            fol[key] = value
    unknown = set(exp) - set(_EXPERIMENT_KEYS)
    if unknown:
        raise ConfigError(f"unknown [experiment] keys {sorted(unknown)}")
    for key in list(exp):
        if key == "intercept" and isinstance(exp[key], str):
            text = exp[key].strip().lower()
            if text not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ConfigError(f"intercept = {exp[key]!r} is not a boolean")
            exp[key] = text in ("1", "true", "yes", "on")
        elif key in _INT_KEYS:
            exp[key] = _number(key, exp[key], int)
        elif key in _FLOAT_KEYS:
            exp[key] = _number(key, exp[key], float)
    try:
        return ExperimentConfig(fol=_fol_config(fol), **exp)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- simulation ----------------------------------------------------------------


def simulate_replicate(cfg: ExperimentConfig, replicate: int) -> tuple[list[FitResult], list[dict]]:
    """One simulated stream through the federation; returns fits and
    per-batch metric rows."""
    design = cfg.design(replicate)
    model = gen_design(design)
    test = gen_test(model, design)
    family = design.family
    feed = ([gen_batch(model, design, k, u) for k in range(design.K)] for u in range(1, design.n_batches + 1))
    coord = Coordinator(cfg.fol, cfg.method, cfg.transport_spec())
    fits = run_stream(coord, make_clients(design.K, design.p, family, cfg.method), feed)
    clustering = cfg.method is not Method.IND
    rows, n_cum = [], 0
    for u, fit in enumerate(fits, start=1):
        n_cum += design.batch_size(u)
        rec = metrics(fit, model, test, family, clustering).as_dict()
        rows.append({"replicate": replicate, "seed": design.seed, "batch": u, "n_cum": n_cum, **rec})
    return fits, rows


def _replicate_task(args):
    cfg, r = args
    np.seterr(over="ignore", under="ignore")
    try:
        _, rows = simulate_replicate(cfg, r)
        return r, rows, None
    except Exception as exc:  # one failed replicate must not sink the others
        return r, [], f"{type(exc).__name__}: {exc}"


def worker_count(limit: int) -> int:
    raw = os.environ.get("FOL_THREADS")
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"FOL_THREADS={raw!r} is not an integer") from None
        if n < 1:
            raise ConfigError("FOL_THREADS must be at least 1")
    else:
        n = os.cpu_count() or 1
    return max(1, min(n, limit))


def _fmt3(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.3f}"


def _mean_sd(values: list[float]) -> tuple[float, float]:
    v = np.array([x for x in values if not math.isnan(x)])
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_simulation(cfg: ExperimentConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, r) for r in range(cfg.replicates)]
    n_workers = worker_count(cfg.replicates)
    if n_workers == 1:
        results = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(n_workers) as ex:
            results = list(ex.map(_replicate_task, tasks))
    results.sort(key=lambda t: t[0])

    trace, finals, failures = [], [], []
    for r, rows, err in results:
        if err is not None:
            log.error("replicate %d failed: %s", r, err)
            failures.append((r, cfg.seed + r, err))
            continue
        trace.extend(rows)
        finals.append(rows[-1])

    header = ["p", "n", "method", "replicates", "failed"]
    row: list[object] = [cfg.p, cfg.n_later, cfg.method.value, len(finals), len(failures)]
    for m in METRICS:
        mean, sd = _mean_sd([f[m] for f in finals])
        header += [f"{m}_mean", f"{m}_sd"]
        row += [_fmt3(mean), _fmt3(sd)]
    _write_csv(cfg.out / "summary.csv", header, [row])

    t_header = ["replicate", "seed", "batch", "n_cum", *METRICS]
    _write_csv(
        cfg.out / "trace.csv",
        t_header,
        ([r[h] if h in ("replicate", "seed", "batch", "n_cum") else repr(float(r[h])) for h in t_header] for r in trace),
    )
    if failures:
        _write_csv(cfg.out / "failures.csv", ["replicate", "seed", "error"], failures)
        return EXIT_NUMERIC
    return EXIT_OK


# -- CSV streams ---------------------------------------------------------------

_SOURCE_DIR = re.compile(r"source_(\d+)$")
_BATCH_FILE = re.compile(r"batch_(\d+)\.csv$")


def _fmt17(x: float) -> str:
    return f"{x:.17g}"


def write_batch_csv(path: Path, batch: Batch, names: list[str] | None = None) -> None:
    names = names or [f"x{j + 1}" for j in range(batch.p)]
    _write_csv(
        path,
        ["y", *names],
        ([_fmt17(y), *map(_fmt17, x)] for y, x in zip(batch.y, batch.X)),
    )


def export_design(cfg: ExperimentConfig, replicate: int = 0) -> Path:
    """Write the simulated stream of one replicate in the stream layout."""
    design = cfg.design(replicate)
    model = gen_design(design)
    root = cfg.data_dir or cfg.out / "data"
    for k in range(design.K):
        d = root / f"source_{k}"
        d.mkdir(parents=True, exist_ok=True)
        for u in range(1, design.n_batches + 1):
            write_batch_csv(d / f"batch_{u}.csv", gen_batch(model, design, k, u))
    return root


def read_batch_csv(path: Path, source_id: int, batch_index: int, family: GlmFamily) -> tuple[list[str], Batch]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        if "y" not in header:
            raise DataError(f"{path}: no response column 'y'")
        if len(set(header)) != len(header):
            raise DataError(f"{path}: duplicate column names")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {line} has {len(rec)} fields, header has {len(header)}")
            vals = []
            for col, cell in zip(header, rec):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: row {line}, column {col!r}: {cell!r} is not numeric") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: row {line}, column {col!r}: {cell!r} is not finite")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.array(rows)
    iy = header.index("y")
    names = [h for h in header if h != "y"]
    X = np.delete(data, iy, axis=1)
    try:
        return names, Batch(source_id, batch_index, X, data[:, iy], family)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def scan_stream_dir(root: Path) -> tuple[int, int]:
    """Validate the ``source_<k>/batch_<u>.csv`` layout; return (K, U)."""
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    sources = {}
    for d in root.iterdir():
        m = _SOURCE_DIR.match(d.name)
        if m and d.is_dir():
            sources[int(m.group(1))] = d
    if not sources:
        raise DataError(f"{root}: no source_<k> directories")
    K = len(sources)
    if sorted(sources) != list(range(K)):
        raise DataError(f"{root}: source directories must be source_0..source_{K - 1}, found {sorted(sources)}")
    batches = {}
    for k, d in sources.items():
        idx = sorted(int(m.group(1)) for f in d.iterdir() if (m := _BATCH_FILE.match(f.name)))
        batches[k] = idx
    U = max(max(v, default=0) for v in batches.values())
    for k in range(K):
        gaps = sorted(set(range(1, U + 1)) - set(batches[k]))
        if gaps:
            raise DataError(f"{sources[k]}: missing batch_{gaps[0]}.csv (stream has {U} batches)")
    return K, U


def with_intercept(names: list[str], batch: Batch) -> tuple[list[str], Batch]:
    """Prepend a constant column; it is penalized like any covariate."""
    X = np.hstack([np.ones((batch.n, 1)), batch.X])
    return ["intercept", *names], Batch(batch.source_id, batch.batch_index, X, batch.y, batch.family)


def stream_feed(root: Path, K: int, U: int, family: GlmFamily, intercept: bool = False):
    names0, where0 = None, None
    for u in range(1, U + 1):
        step = []
        for k in range(K):
            path = root / f"source_{k}" / f"batch_{u}.csv"
            names, batch = read_batch_csv(path, k, u, family)
            if intercept:
                names, batch = with_intercept(names, batch)
            if names0 is None:
                names0, where0 = names, path
            elif names != names0:
                raise DataError(f"{path}: covariates {names} differ from {where0}")
            step.append(batch)
        yield names0, step


def run_csv_stream(cfg: ExperimentConfig) -> int:
    family = cfg.glm_family
    K, U = scan_stream_dir(cfg.data_dir)
    cfg.out.mkdir(parents=True, exist_ok=True)
    ckpt = cfg.out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    header: dict[str, list[str]] = {}

    def feed():
        for names, step in stream_feed(cfg.data_dir, K, U, family, cfg.intercept):
            header["names"] = names
            yield step

    def emit(u: int, fit: FitResult):
        names = header["names"]
        _write_csv(
            cfg.out / f"coef_b{u}.csv",
            ["covariate", *(f"source_{k}" for k in range(K))],
            ([name, *map(_fmt17, fit.B_hat[j])] for j, name in enumerate(names)),
        )
        _write_csv(
            cfg.out / f"groups_b{u}.csv",
            ["source", "group"],
            ([k, int(g)] for k, g in enumerate(fit.partition.labels)),
        )

    p = len(next(iter(stream_feed(cfg.data_dir, K, 1, family, cfg.intercept)))[0])
    clients = [
        FederatedClient.fresh(k, p, family, keep_history=cfg.method is Method.ORACLE, checkpoint_dir=ckpt)
        for k in range(K)
    ]
    run_stream(Coordinator(cfg.fol, cfg.method, cfg.transport_spec()), clients, feed(), on_batch=emit)
    return EXIT_OK


# -- entry point -----------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fedol",
        description="Federated online sparse learning with subgroup fusion.",
    )
    ap.add_argument("--config", help="INI file with [experiment] and [fol] sections")
    ap.add_argument("--mode", choices=[m.value for m in Mode])
    ap.add_argument("--method", choices=[m.value for m in Method])
    ap.add_argument("--example", choices=[e.value for e in Example])
    ap.add_argument("--family", choices=[k.value for k in Kind])
    ap.add_argument("--p", type=int)
    ap.add_argument("--n-later", dest="n_later", type=int)
    ap.add_argument("--n-batches", dest="n_batches", type=int)
    ap.add_argument("--K", type=int)
    ap.add_argument("--replicates", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--out")
    ap.add_argument("--data-dir", dest="data_dir")
    ap.add_argument("--transport", choices=[t.value for t in TransportKind])
    ap.add_argument("--port", type=int)
    ap.add_argument("--lambda1", type=float, help="fixed sparsity level (method fixed)")
    ap.add_argument("--lambda2", type=float, help="fixed fusion level (method fixed)")
    ap.add_argument("--n-grid", dest="n_grid", type=int)
    ap.add_argument("--intercept", action="store_const", const=True, help="prepend a constant covariate (stream mode)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = build_config(args)
        if cfg.mode is Mode.SIMULATE:
            return run_simulation(cfg)
        if cfg.mode is Mode.EXPORT:
            print(export_design(cfg))
            return EXIT_OK
        return run_csv_stream(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FeedError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ClientFailure, StragglerError) as exc:
        print(f"federation failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
