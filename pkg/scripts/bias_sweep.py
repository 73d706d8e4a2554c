"""Held-out retrieval as a function of the ROI attention-bias strength.

Each setting trains the reference configuration from scratch with only the
aggregation settings changed, so one line costs one full training run.
"""

import argparse
import dataclasses
from pathlib import Path

from doco.pipeline import ExperimentConfig, eval_retrieval, pretrain

ROOT = Path(__file__).resolve().parents[1]
SETTINGS = [
    ("roi", 1.0, "additive"),
    ("roi", 5.0, "additive"),
    ("roi", 10.0, "additive"),
    ("roi", 20.0, "additive"),
    ("roi", 1.0, "hard"),
    ("average", 1.0, "additive"),
]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "reference.json")
    parser.add_argument("--steps", type=int)
    args = parser.parse_args()

    exp = ExperimentConfig.from_file(args.config)
    train, heldout = exp.datasets()
    print(f"{'mode':<8} {'scale':>6} {'bias':<9} {'top1':>7}")
    for mode, scale, bias_mode in SETTINGS:
        agg = dataclasses.replace(exp.train.model.aggregation, mode=mode, bias_scale=scale, bias_mode=bias_mode)
        cfg = dataclasses.replace(exp.train, model=dataclasses.replace(exp.train.model, aggregation=agg))
        store, _ = pretrain(train, cfg, steps=args.steps)
        acc = eval_retrieval(store, heldout, cfg.model).top1_retrieval_accuracy
        print(f"{mode:<8} {scale:>6.1f} {bias_mode:<9} {acc:>7.4f}", flush=True)


if __name__ == "__main__":
    main()
