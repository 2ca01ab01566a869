"""Write the forward-command fixture archives and their oracle golden scores.

Goldens come from the loop oracles in tests/oracles.py, never from the package
under test. Run from the repository root:

    python3 scripts/make_forward_fixtures.py
"""

import json
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

from oracles import scores_loop  # noqa: E402
from xncaps.data import WeightArchive, save_weights  # noqa: E402

OUT = ROOT / "tests" / "fixtures"
SHAPE = dict(bs=2, caps_in=6, caps_out=3, dim_in=4, dim_out=5)
ITERATIONS = 3


def main() -> None:
    rng = np.random.default_rng(20240607)
    s = SHAPE
    W = rng.normal(0, 0.5, (s["caps_in"], s["caps_out"], s["dim_in"], s["dim_out"])).astype(np.float32)
    primary = rng.normal(0, 1, (s["bs"], s["caps_in"], s["dim_in"])).astype(np.float32)
    OUT.mkdir(parents=True, exist_ok=True)
    save_weights(WeightArchive({"W": W}), OUT / "forward_weights.xncw")
    save_weights(WeightArchive({"primary": primary}), OUT / "forward_input.xncw")
    golden = {
        "iterations": ITERATIONS,
        "scores": {
            layer: scores_loop(primary, W, ITERATIONS, layer).tolist() for layer in ("capsfc", "xnodr", "xnidr")
        },
    }
    (OUT / "forward_golden.json").write_text(json.dumps(golden, indent=2, sort_keys=True) + "\n")
    print(f"wrote fixtures to {OUT}")


if __name__ == "__main__":
    main()
