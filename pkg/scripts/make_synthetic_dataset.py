#!/usr/bin/env python3
"""Regenerate the bundled synthetic cohort at data/synthetic_cohort.csv.

The bundled file is a completed two-arm trial with 19 baseline covariates,
fair-coin historical assignments, and responses whose signal is carried
almost entirely by the first column (a discrete 0-17 symptom scale leading a
collinear block of binary flags). It is the fixture the retrospective-replay
documentation and tests run against; regeneration with the default arguments
reproduces the committed file byte for byte.
"""

from __future__ import annotations

import argparse
from pathlib import Path

from matchflow.cli import write_replay_csv
from matchflow.simharness import make_synthetic_cohort

REPO_ROOT = Path(__file__).resolve().parent.parent
DEFAULT_OUT = REPO_ROOT / "data" / "synthetic_cohort.csv"

# one name per generated column, in generation order: the dominant symptom
# scale, its five binary siblings, three continuous biomarkers, age, a skewed
# lab value, three binary flags, a genetic marker, and four auxiliary scores
COLUMN_NAMES = (
    "symptom_score",
    "symptom_flag_a",
    "symptom_flag_b",
    "symptom_flag_c",
    "symptom_flag_d",
    "symptom_flag_e",
    "biomarker_a",
    "biomarker_b",
    "biomarker_c",
    "age",
    "lab_value",
    "flag_a",
    "flag_b",
    "flag_c",
    "genetic_marker",
    "aux_a",
    "aux_b",
    "aux_c",
    "aux_d",
)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=224, help="cohort size")
    parser.add_argument("--seed", type=int, default=20240811, help="generation seed")
    parser.add_argument(
        "--response",
        choices=("dominant", "noise"),
        default="dominant",
        help="response signal mode",
    )
    parser.add_argument(
        "--out", type=Path, default=DEFAULT_OUT, help="output CSV path"
    )
    args = parser.parse_args(argv)

    cohort = make_synthetic_cohort(n=args.n, seed=args.seed, response=args.response)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_replay_csv(args.out, cohort, COLUMN_NAMES)
    print(f"wrote {args.out} ({args.n} subjects, {len(COLUMN_NAMES)} covariates)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
