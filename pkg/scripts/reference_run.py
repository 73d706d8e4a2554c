"""Train the reference configuration, evaluate on the held-out set, write a report."""

import argparse
import json
import logging
import time
from pathlib import Path

from doco.checkpoint import save_checkpoint
from doco.model import build_store
from doco.pipeline import ExperimentConfig, eval_retrieval, pretrain

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=ROOT / "configs" / "reference.json")
    parser.add_argument("--out", default=ROOT / "results" / "reference")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    exp = ExperimentConfig.from_file(args.config)
    train, heldout = exp.datasets()
    model = exp.train.model
    untrained = eval_retrieval(build_store(model), heldout, model).top1_retrieval_accuracy

    start = time.perf_counter()
    store, history = pretrain(train, exp.train)
    seconds = time.perf_counter() - start
    report = eval_retrieval(store, heldout, model, [h["total"] for h in history])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(store, out / "model.ckpt")
    report.write(out / "report.json")
    (out / "history.json").write_text(json.dumps(history))
    print(f"untrained held-out top-1 {untrained:.4f}")
    print(f"trained   held-out top-1 {report.top1_retrieval_accuracy:.4f} "
          f"({report.n_objects} objects, {len(history)} steps, {seconds:.0f}s)")


if __name__ == "__main__":
    main()
