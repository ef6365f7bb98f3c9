"""Preprocess raw MovieLens 1M ratings and compare the counts with the reference table.

    python scripts/ml1m_calibration.py path/to/ratings.dat [--out runs/ml1m]
"""

import argparse
import sys

from sabr.ingest import compute_stats, parse_movielens_1m, preprocess, write_dataset

REFERENCE = {"users": 1196, "items": 3327, "rows": 158_498}


def run(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("ratings")
    p.add_argument("--out", default="runs/ml1m")
    a = p.parse_args(argv)
    dataset = preprocess(parse_movielens_1m(a.ratings), name="ml-1m")
    write_dataset(dataset, a.out)
    stats = compute_stats(dataset)
    worst = 0.0
    for key, want in REFERENCE.items():
        got = getattr(stats, key)
        worst = max(worst, abs(got / want - 1))
        print(f"{key:6s} {got:8d}  reference {want:8d}  ({got / want - 1:+.2%})")
    print(f"density {stats.density:.4f}; items/user quartiles {stats.items_per_user}; "
          f"sessions/user {stats.sessions_per_user}; items/session {stats.items_per_session}")
    # filter order is not pinned down, so a miss is informative rather than an error
    print("within 2%" if worst <= 0.02 else "outside 2%")
    return 0


if __name__ == "__main__":
    sys.exit(run())
