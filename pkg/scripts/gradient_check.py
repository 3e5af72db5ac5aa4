"""Finite-difference check of the APO gradient on random small instances."""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import test_acceptance as acc  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    ok, line = acc.check_a2(args.instances, args.seed)
    print(line)
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
