"""False-positive rate and attribution power of the windowed drift test.

Stationary 3-teacher streams estimate the joint false-positive rate; streams
where one teacher moves TV mass ``--tv`` off its modal token halfway through
estimate how often exactly that teacher is flagged.
"""

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import test_acceptance as acc  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--null-trials", type=int, default=1000)
    ap.add_argument("--drift-trials", type=int, default=200)
    ap.add_argument("--permutations", type=int, default=200)
    ap.add_argument("--tv", type=float, default=acc.A5_TV)
    args = ap.parse_args()
    acc.A5_TV = args.tv

    t0 = time.perf_counter()
    fp = sum(acc._a5_trial(s, permutations=args.permutations).joint.flagged for s in range(args.null_trials))
    hits = sum(
        acc._a5_trial(10_000 + s, s % 3, args.permutations).flagged_teachers == [f"T{s % 3}"] for s in range(args.drift_trials)
    )
    print(f"joint FPR {fp / args.null_trials:.3f} over {args.null_trials} stationary streams")
    print(f"attributed {hits / args.drift_trials:.3f} over {args.drift_trials} drifted streams (TV {args.tv})")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
