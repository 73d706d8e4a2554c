"""Command-line entry point: ``doco <command> ...``.

Exit codes: 0 success, 2 validation error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import export_annotations, find_annotation_file, generate_dataset, load_annotations
from .errors import DivergenceError, DocoError
from .geometry import PatchGrid, compute_overlap_mask, format_mask
from .model import ModelConfig
from .pipeline import (
    ExperimentConfig,
    ablation_suite,
    eval_retrieval,
    format_table,
    gradcheck_doco,
    pretrain,
)

EXIT_OK, EXIT_FAILED, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("doco")


def _experiment(path) -> ExperimentConfig:
    return ExperimentConfig.from_file(path) if path else ExperimentConfig()


def _load_data(data, max_tokens: int):
    return load_annotations(find_annotation_file(data), max_tokens)


def cmd_gen(args) -> int:
    exp = _experiment(args.config)
    images = generate_dataset(exp.data, args.count, start=args.start)
    path = export_annotations(images, args.out)
    print(f"wrote {len(images)} images to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    exp = _experiment(args.config)
    max_tokens = exp.train.model.multimodal.max_tokens
    if args.data:
        train = _load_data(args.data, max_tokens)
    else:
        train, _ = exp.datasets()
    try:
        store, history = pretrain(train, exp.train, steps=args.steps, checkpoint_path=args.out)
    except DivergenceError as exc:
        print(f"diverged: {exc}; last good state saved to {args.out}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(store, args.out)
    history_path = Path(str(args.out) + ".history.json")
    history_path.write_text(json.dumps(history))
    last = history[-1] if history else {}
    print(f"trained {len(history)} steps; final loss {last.get('total', float('nan')):.4f}; "
          f"checkpoint {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    store = load_checkpoint(args.ckpt)
    model = ModelConfig.from_dict(store.config.get("model", {}))
    data = _load_data(args.data, model.multimodal.max_tokens)
    curve = []
    history_path = Path(str(args.ckpt) + ".history.json")
    if history_path.exists():
        curve = [h["total"] for h in json.loads(history_path.read_text())]
    report = eval_retrieval(store, data, model, curve)
    if args.report:
        report.write(args.report)
    print(f"top-1 retrieval accuracy {report.top1_retrieval_accuracy:.4f} over {report.n_objects} objects")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.full:
        model, samples = ModelConfig(), args.samples or 256
    else:
        from .aggregation import AggregationConfig
        from .encoders import MultimodalConfig, VisionEncoderConfig

        model = ModelConfig(
            vision=VisionEncoderConfig(image_size=32, dim=16, layers=1, heads=2),
            multimodal=MultimodalConfig(image_size=32, dim=16, layers=1, heads=2, max_tokens=8, layout_bins=8),
            aggregation=AggregationConfig(),
        )
        samples = args.samples or 64
    worst = gradcheck_doco(model, n_samples=samples, seed=args.seed)
    ok = worst < args.tol
    print(f"max relative error {worst:.3e} over {samples} coordinates: {'ok' if ok else 'FAILED'}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_inspect_mask(args) -> int:
    images = _load_data(args.data, 32)
    by_id = {a.id: a for a in images}
    if args.image not in by_id:
        raise DocoError(f"no image with id {args.image!r}")
    ann = by_id[args.image]
    if not 0 <= args.object < len(ann.objects):
        raise DocoError(f"image {args.image!r} has {len(ann.objects)} objects")
    obj = ann.objects[args.object]
    grid = PatchGrid(ann.height, ann.width, args.patch_size)
    print(f"{ann.id} object {args.object} {obj.text!r} box {obj.bbox.as_list()}")
    print(format_mask(compute_overlap_mask(obj.bbox, grid), grid, args.precision))
    return EXIT_OK


def cmd_ablate(args) -> int:
    exp = _experiment(args.config)
    train, heldout = exp.datasets()
    rows = ablation_suite(train, heldout, exp.train, n_jobs=args.jobs)
    print(format_table(rows))
    if args.report:
        payload = [{"name": r.name, "flags": r.flags, "final_loss": r.final_loss, **r.report.to_dict()}
                   for r in rows]
        Path(args.report).write_text(json.dumps(payload, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doco", description="Object-level contrastive pre-training at desk scale")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic annotated dataset")
    p.add_argument("--config")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="train the vision side and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--data", help="annotation file or directory; default: synthetic set from the config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="held-out top-1 object retrieval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--full", action="store_true", help="default-size model and 256 coordinates")
    p.add_argument("--samples", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-mask", help="print an object's patch overlap mask")
    p.add_argument("--data", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--object", type=int, required=True)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--precision", type=int, default=3)
    p.set_defaults(func=cmd_inspect_mask)

    p = sub.add_parser("ablate", help="run the ablation suite and print a table")
    p.add_argument("--config")
    p.add_argument("--report")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DocoError, ValueError, FileNotFoundError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
