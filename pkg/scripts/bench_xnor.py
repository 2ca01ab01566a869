"""Time packed XNOR dots against float dots over a range of vector lengths.

    python3 scripts/bench_xnor.py [--trials 50]

Measured ratios depend on the interpreter and the machine; the analytic
column is the cost-model prediction for a 64-bit popcount.
"""

import argparse
import io
import json
from contextlib import redirect_stdout

from xncaps.cli import main as cli_main


def bench(n: int, trials: int, seed: int) -> dict:
    out = io.StringIO()
    with redirect_stdout(out):
        code = cli_main(["--json", "--seed", str(seed), "bench", "--n", str(n), "--trials", str(trials)])
    if code != 0:
        raise SystemExit(code)
    return json.loads(out.getvalue())


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--trials", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    print(f"{'n':>7}{'analytic':>10}{'vs scalar':>11}{'vs numpy':>10}  correct")
    for n in (64, 256, 1024, 4096, 16384, 65536):
        r = bench(n, args.trials, args.seed)
        print(
            f"{n:>7}{r['analytic_speedup']:>10.2f}{r['measured_speedup_vs_scalar']:>11.2f}"
            f"{r['measured_speedup_vs_numpy']:>10.2f}  {r['correct']}"
        )


if __name__ == "__main__":
    main()
