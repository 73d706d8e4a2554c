"""Run the ablation suite on the reference data and print the comparison table."""

import argparse
import json
from pathlib import Path

from doco.pipeline import ExperimentConfig, ablation_suite, format_table

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "reference.json")
    parser.add_argument("--steps", type=int, help="override the step budget of every variant")
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--report", type=Path)
    args = parser.parse_args()

    exp = ExperimentConfig.from_file(args.config)
    if args.steps:
        exp.train.steps = args.steps
    train, heldout = exp.datasets()
    rows = ablation_suite(train, heldout, exp.train, n_jobs=args.jobs)
    print(format_table(rows))
    if args.report:
        args.report.parent.mkdir(parents=True, exist_ok=True)
        args.report.write_text(json.dumps(
            [{"name": r.name, "flags": r.flags, "top1": r.report.top1_retrieval_accuracy,
              "final_loss": r.final_loss} for r in rows], indent=2))


if __name__ == "__main__":
    main()
