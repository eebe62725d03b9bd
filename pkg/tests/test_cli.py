import subprocess
import sys

import numpy as np
import pytest

from sblcode import bench
from sblcode.cli import main
from sblcode.matrix_io import read_matrix, write_matrix

TINY = ["--M=4", "--N=8", "--T=2", "--active_fraction=0.25", "--target_snr_db=20"]


def read_summary(path):
    return bench.parse_kv_text(path.read_text())


def test_gen_writes_matrices(tmp_path, capsys):
    out = tmp_path / "g"
    assert main(["gen", "--M=2", "--N=3", "--T=1", "--active_fraction=0.4",
                 f"--out={out}"]) == 0
    d = out / "trial_0000"
    assert sorted(p.name for p in d.iterdir()) == ["G.bin", "X_true.bin", "Y.bin", "meta.txt"]
    assert read_matrix(d / "G.bin").shape == (2, 3)
    assert read_matrix(d / "Y.bin").shape == (2, 1)
    assert read_matrix(d / "X_true.bin").shape == (3, 1)
    meta = read_summary(d / "meta.txt")
    assert meta["seed"] == "0" and float(meta["noise_var"]) > 0
    assert "wrote 1 trial" in capsys.readouterr().out


def test_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", *TINY, "--n_trials=2", "--matrix_format=text",
                     f"--out={tmp_path / name}"]) == 0
    for rel in ("trial_0001/G.txt", "trial_0001/Y.txt", "trial_0000/X_true.txt",
                "trial_0000/meta.txt"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_solve_zero_data(tmp_path, capsys):
    write_matrix(tmp_path / "G.bin", np.eye(3))
    write_matrix(tmp_path / "Y.txt", np.zeros((3, 2)), "text")
    out = tmp_path / "run"
    rc = main(["solve", f"--G={tmp_path / 'G.bin'}", f"--Y={tmp_path / 'Y.txt'}",
               "--noise_var=0.5", "--max_outer=5", f"--out={out}"])
    assert rc == 0
    s = read_summary(out / "summary.txt")
    assert s["n_active"] == "0"
    trace = bench.read_trace_csv(out / "trace.csv")
    assert np.all(trace["n_active"] == 0)
    assert "n_active=0" in capsys.readouterr().out


def test_solve_dimension_mismatch(tmp_path, capsys):
    write_matrix(tmp_path / "G.bin", np.ones((3, 4)))
    write_matrix(tmp_path / "Y.bin", np.ones((2, 1)))
    rc = main(["solve", f"--G={tmp_path / 'G.bin'}", f"--Y={tmp_path / 'Y.bin'}",
               "--noise_var=1", f"--out={tmp_path / 'r'}"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "3x4" in err and "2x1" in err


def test_solve_cross_solver_traces(tmp_path):
    prob = tmp_path / "p"
    assert main(["gen", *TINY, "--base_seed=3", f"--out={prob}"]) == 0
    finals = {}
    for variant, extra in [("champagne", ["--max_outer=100000", "--outer_tol=1e-15"]),
                           ("reweighted", ["--max_outer=100000", "--outer_tol=1e-15",
                                           "--inner_k=100", "--inner_tol=1e-14"])]:
        out = tmp_path / variant
        assert main(["solve", f"--problem={prob / 'trial_0000'}", f"--variant={variant}",
                     *extra, f"--out={out}"]) == 0
        assert (out / "trace.csv").exists()
        finals[variant] = float(read_summary(out / "summary.txt")["final_type2"])
    assert finals["champagne"] == pytest.approx(finals["reweighted"], abs=1e-6)


def test_solve_config_echo(tmp_path):
    cfg = tmp_path / "low.cfg"
    cfg.write_text("# low-SNR run\nvariant = low_snr\nsigma0_sq = 0.6\nmax_outer = 3\n")
    out = tmp_path / "r"
    assert main(["solve", "--config", str(cfg), *TINY, "--trial=1", f"--out={out}"]) == 0
    s = read_summary(out / "summary.txt")
    assert float(s["config.sigma0_sq"]) == 0.6
    assert s["config.variant"] == "low_snr" and s["solver"] == "low_snr"


def test_solve_generated_trial_matches_gen(tmp_path):
    assert main(["gen", *TINY, "--n_trials=2", f"--out={tmp_path / 'p'}"]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", *TINY, "--trial=1", "--max_outer=4", f"--out={a}"]) == 0
    assert main(["solve", f"--problem={tmp_path / 'p' / 'trial_0001'}", "--max_outer=4",
                 f"--out={b}"]) == 0
    sa, sb = read_summary(a / "summary.txt"), read_summary(b / "summary.txt")
    assert sa["final_objective"] == sb["final_objective"]
    assert sa["recon_snr_db"] == sb["recon_snr_db"]


def test_trace_csv_schema(tmp_path):
    out = tmp_path / "r"
    assert main(["solve", *TINY, "--variant=champagne", "--max_outer=6", f"--out={out}"]) == 0
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "iter,wall_seconds,objective,data_fit,n_active,recon_snr_db"
    trace = bench.read_trace_csv(out / "trace.csv")
    assert list(trace["iter"]) == list(range(1, len(lines)))
    assert np.all(np.diff(trace["wall_seconds"]) >= 0)
    assert np.all(np.diff(trace["objective"]) <= 1e-9 * np.abs(trace["objective"][:-1]))
    assert np.all(np.isfinite(trace["recon_snr_db"]))


def bench_args(out, parallelism):
    return ["bench", *TINY, "--n_trials=3", "--solvers=champagne,reweighted",
            "--max_outer=20", f"--parallelism={parallelism}", f"--out={out}"]


def test_bench_outputs(tmp_path, capsys):
    out = tmp_path / "b"
    assert main(bench_args(out, 1)) == 0
    summaries = sorted(out.glob("trials/trial_*/*/summary.txt"))
    traces = sorted(out.glob("trials/trial_*/*/trace.csv"))
    assert len(summaries) == 6 and len(traces) == 6
    assert sorted(p.name for p in out.glob("aggregate_*.csv")) == [
        "aggregate_champagne.csv", "aggregate_reweighted.csv"]
    agg = (out / "aggregate_reweighted.csv").read_text().splitlines()
    assert agg[0] == "time,median_recon_snr_db,median_objective"
    assert len(agg) == 201
    comp = (out / "comparison.csv").read_text().splitlines()
    assert comp[0].startswith("solver,variant,n_ok,n_failed")
    assert len(comp) == 3
    printed = capsys.readouterr().out
    assert "champagne" in printed and "reweighted" in printed


def test_bench_parallel_matches_serial(tmp_path):
    a, b = tmp_path / "serial", tmp_path / "par"
    assert main(bench_args(a, 1)) == 0
    assert main(bench_args(b, 8)) == 0
    for sa in sorted(a.glob("trials/*/*/summary.txt")):
        sb = b / sa.relative_to(a)
        assert bench.strip_timing(read_summary(sa)) == bench.strip_timing(read_summary(sb))


def test_bench_per_solver_overrides(tmp_path):
    cfg = tmp_path / "b.cfg"
    cfg.write_text("\n".join([
        "solvers = rw, low03",
        "rw.variant = reweighted",
        "low03.variant = low_snr",
        "low03.sigma0_sq = 0.3",
        "max_outer = 4",
        "M = 4", "N = 8", "T = 2", "active_fraction = 0.25",
        f"out = {tmp_path / 'o'}",
    ]))
    assert main(["bench", "--config", str(cfg)]) == 0
    s = read_summary(tmp_path / "o" / "trials" / "trial_0000" / "low03" / "summary.txt")
    assert s["config.variant"] == "low_snr" and float(s["config.sigma0_sq"]) == 0.3
    s = read_summary(tmp_path / "o" / "trials" / "trial_0000" / "rw" / "summary.txt")
    assert s["config.variant"] == "reweighted" and s["config.sigma0_sq"] == ""


@pytest.mark.parametrize("args", [
    ["bench", "--no_such_key=1"],
    ["bench", "--solvers=em"],
    ["bench", "--M=abc"],
    ["bench", "--n_trials=0"],
    ["bench", "--inner_k=0"],
    ["gen", "--matrix_format=hdf5"],
    ["bench", "positional"],
    ["solve", "--G=/nonexistent/G.bin", "--Y=/nonexistent/Y.bin", "--noise_var=1"],
])
def test_config_errors_exit_1(args, tmp_path, capsys):
    assert main(args + [f"--out={tmp_path / 'o'}"]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["bench", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_trial_failure_exit_2(tmp_path, capsys):
    write_matrix(tmp_path / "L.bin", np.ones((5, 5)))
    out = tmp_path / "o"
    rc = main(["bench", "--generator=meg_like", "--M=6", "--N=10", "--T=2",
               "--active_fraction=0.2", f"--leadfield={tmp_path / 'L.bin'}", "--solvers=reweighted",
               f"--out={out}"])
    assert rc == 2
    err = (out / "trials" / "trial_0000" / "reweighted" / "error.txt").read_text()
    assert "generation failed" in err and "shape" in err
    assert "failed" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "sblcode", "gen", "--M=2", "--N=3", "--T=1",
                        "--active_fraction=0.4", f"--out={tmp_path / 'g'}"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    r = subprocess.run([sys.executable, "-m", "sblcode", "bench", "--bogus=1"],
                       capture_output=True, text=True, cwd=tmp_path)
    assert r.returncode == 1
