"""Command-line front end: ``sbl-bench gen|solve|bench``.

Every setting is a ``key = value`` line of the optional ``--config`` file
and can be overridden on the command line as ``--key=value``::

    sbl-bench gen   --config cs.cfg --n_trials=5 --out=problems
    sbl-bench solve --problem=problems/trial_0000 --variant=reweighted --out=run
    sbl-bench bench --config cs.cfg --solvers=champagne,reweighted --parallelism=4

Exit codes: 0 on success, 1 on configuration errors, 2 when any trial fails.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import bench
from .matrix_io import MatrixFormatError

logger = logging.getLogger("sblcode")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sbl-bench",
        description="Sparse Bayesian learning solvers and benchmarks.",
        epilog="Any other option is a --key=value configuration override.",
    )
    p.add_argument("command", choices=("gen", "solve", "bench"))
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args, rest = _parser().parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        kv = bench.load_kv(args.config, rest)
        if args.command == "gen":
            if "solvers" not in kv and "variant" not in kv:
                kv["solvers"] = "reweighted"
            cfg = bench.build_config(kv)
            dirs = bench.run_gen(cfg)
            print(f"wrote {len(dirs)} trial(s) to {cfg.out}")
            return bench.EXIT_OK
        if args.command == "solve":
            summary = bench.run_solve(kv)
            for k in ("solver", "final_objective", "final_type2", "recon_snr_db", "f1",
                      "n_active", "outer_iterations", "wall_seconds"):
                print(f"{k}={bench._fmt(summary.get(k))}")
            return bench.EXIT_OK
        cfg = bench.build_config(kv)
        code, table = bench.run_bench(cfg)
        print(bench.format_table(table))
        if code != bench.EXIT_OK:
            print("one or more trials failed; see error.txt files under "
                  f"{cfg.out}/trials", file=sys.stderr)
        return code
    except (bench.ConfigError, MatrixFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return bench.EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return bench.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
