import csv

import numpy as np
import pytest

from fedol import cli
from fedol.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, build_config, main, make_parser

FAST = ["--n-batches", "2", "--method", "fixed", "--lambda1", "0.005", "--lambda2", "0.02"]


@pytest.fixture(autouse=True)
def serial(monkeypatch):
    monkeypatch.setenv("FOL_THREADS", "1")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def coef_matrix(path):
    rows = read_csv(path)
    return [r[0] for r in rows[1:]], np.array([[float(x) for x in r[1:]] for r in rows[1:]])


def test_config_file_and_flag_overrides(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[experiment]\nmethod = ind\np = 20\nreplicates = 3\n\n[fol]\nn_grid = 5\nmbic_cn = none\n")
    cfg = build_config(make_parser().parse_args(["--config", str(ini), "--p", "30"]))
    assert cfg.method.value == "ind" and cfg.p == 30 and cfg.replicates == 3
    assert cfg.fol.n_grid == 5 and cfg.fol.mbic_cn is None
    assert cfg.design(2).seed == 2


@pytest.mark.parametrize("text", [
    "[experiment]\nreplicates = 0\n",
    "[experiment]\ncolour = red\n",
    "[fol]\nn_grid = many\n",
    "[other]\nx = 1\n",
    "[experiment]\nK = 7\n",
    "[fol]\nlambda1 = 0.1\n",
])
def test_invalid_config_exits_2(tmp_path, text, capsys):
    ini = tmp_path / "bad.ini"
    ini.write_text(text)
    assert main(["--config", str(ini), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_bad_thread_count_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("FOL_THREADS", "zero")
    assert main([*FAST, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_simulation_outputs_are_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([*FAST, "--seed", "3", "--out", str(a)]) == EXIT_OK
    assert main([*FAST, "--seed", "3", "--out", str(b)]) == EXIT_OK
    for name in ("summary.csv", "trace.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
        assert b"\r\n" not in (a / name).read_bytes()
    summary = read_csv(a / "summary.csv")
    assert summary[0][:5] == ["p", "n", "method", "replicates", "failed"]
    assert "ARI_sd" in summary[0]
    assert all(len(v.split(".")[1]) == 3 for v in summary[1][5:])
    trace = read_csv(a / "trace.csv")
    assert [r[2] for r in trace[1:]] == ["1", "2"] and [r[3] for r in trace[1:]] == ["100", "180"]


def test_failed_replicate_is_recorded(tmp_path, monkeypatch):
    real = cli.simulate_replicate

    def flaky(cfg, r):
        if r == 1:
            raise FloatingPointError("diverged")
        return real(cfg, r)

    monkeypatch.setattr(cli, "simulate_replicate", flaky)
    assert main([*FAST, "--replicates", "2", "--out", str(tmp_path)]) == EXIT_NUMERIC
    rows = read_csv(tmp_path / "failures.csv")
    assert rows[1][:2] == ["1", "1"] and "diverged" in rows[1][2]
    assert read_csv(tmp_path / "summary.csv")[1][3:5] == ["1", "1"]


def test_exported_stream_reproduces_simulation(tmp_path):
    data = tmp_path / "data"
    assert main([*FAST, "--mode", "export", "--seed", "4", "--data-dir", str(data)]) == EXIT_OK
    out = tmp_path / "res"
    assert main([*FAST, "--mode", "stream", "--data-dir", str(data), "--out", str(out)]) == EXIT_OK
    cfg = build_config(make_parser().parse_args([*FAST, "--seed", "4"]))
    fits, _ = cli.simulate_replicate(cfg, 0)
    for u, fit in enumerate(fits, start=1):
        names, B = coef_matrix(out / f"coef_b{u}.csv")
        assert names[0] == "x1" and B.shape == (50, 8)
        np.testing.assert_array_equal(B, fit.B_hat)
        groups = read_csv(out / f"groups_b{u}.csv")
        assert [int(r[1]) for r in groups[1:]] == fit.partition.labels.tolist()
    assert (out / "checkpoints" / "source_7.ckpt").exists()


def write_source(root, k, u, header, rows):
    d = root / f"source_{k}"
    d.mkdir(parents=True, exist_ok=True)
    with open(d / f"batch_{u}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def test_single_gaussian_source_without_penalty_is_ols(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.standard_normal((40, 3))
    y = X @ [1.0, -2.0, 0.5] + rng.standard_normal(40)
    write_source(tmp_path / "d", 0, 1, ["x1", "y", "x2", "x3"], np.column_stack([X[:, 0], y, X[:, 1:]]))
    ini = tmp_path / "ols.ini"
    ini.write_text("[fol]\ntol_outer = 1e-13\nmax_outer_iters = 20000\n")
    args = ["--config", str(ini), "--mode", "stream", "--family", "gaussian", "--method", "fixed",
            "--lambda1", "0", "--lambda2", "0", "--data-dir", str(tmp_path / "d"), "--out", str(tmp_path / "o")]
    assert main(args) == EXIT_OK
    names, B = coef_matrix(tmp_path / "o" / "coef_b1.csv")
    assert names == ["x1", "x2", "x3"]
    np.testing.assert_allclose(B[:, 0], np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-6)
    assert main([*args[:-1], str(tmp_path / "o2"), "--intercept"]) == EXIT_OK
    names, B = coef_matrix(tmp_path / "o2" / "coef_b1.csv")
    Xi = np.column_stack([np.ones(40), X])
    assert names[0] == "intercept"
    np.testing.assert_allclose(B[:, 0], np.linalg.lstsq(Xi, y, rcond=None)[0], atol=1e-6)


def _two_source_stream(root, U=3):
    rng = np.random.default_rng(1)
    for k in range(2):
        for u in range(1, U + 1):
            X = rng.standard_normal((20, 2))
            write_source(root, k, u, ["y", "a", "b"], np.column_stack([(X[:, 0] > 0).astype(float), X]))


def test_missing_batch_exits_3(tmp_path, capsys):
    _two_source_stream(tmp_path)
    (tmp_path / "source_1" / "batch_3.csv").unlink()
    assert main(["--mode", "stream", "--data-dir", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "source_1" in err and "batch_3" in err


def test_schema_mismatch_exits_3(tmp_path, capsys):
    _two_source_stream(tmp_path)
    write_source(tmp_path, 1, 2, ["y", "a", "c"], [[0, 1, 2]])
    assert main(["--mode", "stream", "--data-dir", str(tmp_path), "--out", str(tmp_path / "o"), *FAST[2:]]) == EXIT_DATA
    assert "batch_2.csv" in capsys.readouterr().err


def test_non_numeric_cell_reports_location(tmp_path, capsys):
    _two_source_stream(tmp_path, U=1)
    write_source(tmp_path, 0, 1, ["y", "a", "b"], [[1, 0.5, 2], [0, "n/a", 1]])
    assert main(["--mode", "stream", "--data-dir", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_DATA
    err = capsys.readouterr().err
    assert "row 3" in err and "'a'" in err and "n/a" in err
