"""Sweep the number of session segments (m, with SSE) and the temporal width (d_T, with TAS).

    python scripts/sweeps.py --data DATA_DIR_OR_GENERATOR --out runs/sweeps

Each sweep writes its own sweep.csv; the two are concatenated into
sweeps.csv under --out, ready for plotting metric against value.
"""

import argparse
import os
import sys

from sabr.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))
VALUES = {"m": [2, 3, 4, 5], "d_T": [8, 16, 32, 64]}


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="synthetic:session")
    p.add_argument("--config", default=os.path.join(HERE, "configs", "synthetic.json"))
    p.add_argument("--out", default="runs/sweeps")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)
    merged = []
    for param, values in VALUES.items():
        out = os.path.join(a.out, param)
        code = main(["-v", "sweep", "--data", a.data, "--config", a.config, "--seed", str(a.seed),
                     "--param", param, "--values", *map(str, values), "--out", out])
        if code:
            return code
        with open(os.path.join(out, "sweep.csv"), encoding="utf-8") as f:
            lines = f.read().splitlines()
        merged = merged or lines[:1]
        merged += lines[1:]
    with open(os.path.join(a.out, "sweeps.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(merged) + "\n")
    print("\n".join(merged))
    return 0


if __name__ == "__main__":
    sys.exit(run())
