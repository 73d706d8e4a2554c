"""Pre-training loop, retrieval probe and ablation suite."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .aggregation import aggregate, object_masks
from .checkpoint import save_checkpoint
from .data import AnnotatedImage, BatchItem, SynthConfig, epoch_order, generate_dataset, with_global
from .encoders import encode_multimodal, encode_visual, project_multimodal
from .errors import ConfigurationError, DivergenceError
from .losses import DoCoBatch, doco_loss, temperature_value
from .model import ModelConfig, build_store, frozen_names
from .numerics import OptimizerConfig, ParameterStore, Tensor, adamw_step, learning_rate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    batch_size: int = 8
    epochs: int = 1
    steps: int | None = None  # overrides epochs when set
    seed: int = 0
    intra: bool = True
    inter: bool = True
    image_level: bool = False
    eval_every: int = 0

    def __post_init__(self):
        if not (self.intra or self.inter):
            raise ConfigurationError("at least one loss term must be enabled")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.image_level and self.intra:
            raise ConfigurationError("image_level contrast is the inter-only baseline")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d or {})
        opt = OptimizerConfig(**d.pop("optimizer", {}))
        model = ModelConfig.from_dict(d.pop("model", {}))
        return cls(optimizer=opt, model=model, **d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def total_steps(self, n_images: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(n_images / self.batch_size)


@dataclass
class ExperimentConfig:
    """Everything one reference run needs: data, model/training, acceptance thresholds."""

    train: TrainConfig = field(default_factory=TrainConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    n_train: int = 512
    n_heldout: int = 128
    heldout_offset: int = 1_000_000
    thresholds: dict = field(default_factory=dict)
    version: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        train = TrainConfig.from_dict(d.pop("train", {}))
        data = d.pop("data", {})
        for key in ("n_objects_range", "text_length_range"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(train=train, data=SynthConfig(**data), **d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def datasets(self) -> tuple[list[AnnotatedImage], list[AnnotatedImage]]:
        train = generate_dataset(self.data, self.n_train)
        heldout = generate_dataset(self.data, self.n_heldout, start=self.heldout_offset)
        return train, heldout


# forward --------------------------------------------------------------------

class FeatureCache:
    """Frozen multimodal features and overlap masks keyed by image id.

    Valid because the multimodal backbone never changes during pre-training.
    """

    def __init__(self, store: ParameterStore, model: ModelConfig):
        self.store = store
        self.model = model
        self._mm: dict[str, np.ndarray] = {}
        self._masks: dict[str, np.ndarray] = {}

    def multimodal(self, item: BatchItem) -> np.ndarray:
        if item.id not in self._mm:
            self._mm[item.id] = encode_multimodal(item.image, item.objects, self.store, self.model.multimodal).data
        return self._mm[item.id]

    def masks(self, item: BatchItem) -> np.ndarray:
        if item.id not in self._masks:
            self._masks[item.id] = object_masks(item.objects, self.model.vision.grid)
        return self._masks[item.id]


def forward_batch(items: Sequence[BatchItem], store: ParameterStore, model: ModelConfig,
                  cache: FeatureCache | None = None) -> DoCoBatch:
    """Aggregated visual and projected multimodal features for each image."""
    cache = cache or FeatureCache(store, model)
    images = np.stack([it.image for it in items])
    patches = encode_visual(images, model.vision, store)
    mm = np.concatenate([cache.multimodal(it) for it in items], axis=0)
    projected = project_multimodal(Tensor(mm), store)
    pairs = []
    offset = 0
    for b, it in enumerate(items):
        n = len(it.objects)
        visual = aggregate(patches[b], cache.masks(it), store, model.aggregation)
        pairs.append((visual, projected[offset:offset + n]))
        offset += n
    return DoCoBatch(pairs, [it.global_row for it in items])


# training -------------------------------------------------------------------

def _batch_for_step(data, config: TrainConfig, step: int, orders: dict) -> list[BatchItem]:
    per_epoch = math.ceil(len(data) / config.batch_size)
    epoch, pos = divmod(step, per_epoch)
    if epoch not in orders:
        orders.clear()
        orders[epoch] = epoch_order(len(data), config.seed, epoch)
    idx = orders[epoch][pos * config.batch_size:(pos + 1) * config.batch_size]
    max_tokens = config.model.multimodal.max_tokens
    return [with_global(data[i], max_tokens) for i in idx]


def pretrain(data: Sequence[AnnotatedImage], config: TrainConfig, store: ParameterStore | None = None,
             steps: int | None = None, heldout: Sequence[AnnotatedImage] | None = None,
             checkpoint_path=None) -> tuple[ParameterStore, list[dict]]:
    """Optimise the vision side with the contrastive loss; the multimodal backbone stays frozen.

    Resumes from ``store.step_count`` when a store is given. ``steps`` caps
    how many steps this call runs (default: up to the configured total).
    Returns the store and one history record per step.
    """
    if not data:
        raise ConfigurationError("cannot train on an empty dataset")
    model = config.model
    store = store if store is not None else build_store(model)
    frozen = frozen_names(store)
    frozen_digest = store.digest(frozen)
    cache = FeatureCache(store, model)
    total = config.total_steps(len(data))
    end = total if steps is None else min(total, store.step_count + steps)
    orders: dict = {}
    history: list[dict] = []
    last_good = store.copy()

    for k in range(store.step_count, end):
        items = _batch_for_step(data, config, k, orders)
        store.zero_grad()
        batch = forward_batch(items, store, model, cache)
        report = doco_loss(batch, model.similarity, store, config.intra, config.inter, config.image_level)
        if not math.isfinite(report.total):
            if checkpoint_path is not None:
                save_checkpoint(last_good, checkpoint_path)
            raise DivergenceError(f"non-finite loss at step {k + 1}", store=last_good, step=k + 1)
        last_good = store.copy()
        report.tensor.backward()
        for t in store.trainable().values():
            # parameters outside the active loss path (e.g. roi.* under average aggregation)
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        lr = learning_rate(config.optimizer, k + 1)
        adamw_step(store, config.optimizer, k + 1)
        record = {
            "step": k + 1,
            "total": report.total,
            "intra": report.intra,
            "inter": report.inter,
            "lr": lr,
            "tau": temperature_value(model.similarity, store),
        }
        if heldout is not None and config.eval_every and (k + 1) % config.eval_every == 0:
            record["heldout_top1"] = eval_retrieval(store, heldout, model).top1_retrieval_accuracy
        history.append(record)
        if (k + 1) % 100 == 0:
            log.info("step %d total %.4f intra %.4f inter %.4f", k + 1, report.total, report.intra, report.inter)

    store.zero_grad()
    if store.digest(frozen) != frozen_digest:
        raise RuntimeError("frozen multimodal parameters changed during pre-training")
    store.config = dict(store.config, model=model.to_dict(), train=config.to_dict())
    return store, history


# evaluation -------------------------------------------------------------------

@dataclass
class EvalReport:
    top1_retrieval_accuracy: float
    per_image_counts: list[int]
    n_objects: int
    loss_curve: list[float] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def retrieval_hits(visual: np.ndarray, multimodal: np.ndarray) -> np.ndarray:
    """Per visual row: is the best-matching multimodal row (cosine) the paired one?"""
    v = visual / np.linalg.norm(visual, axis=1, keepdims=True)
    m = multimodal / np.linalg.norm(multimodal, axis=1, keepdims=True)
    return np.argmax(v @ m.T, axis=1) == np.arange(len(v))


def eval_retrieval(store: ParameterStore, data: Sequence[AnnotatedImage], model: ModelConfig | None = None,
                   loss_curve: Sequence[float] = (), chunk: int = 32) -> EvalReport:
    """Top-1 object retrieval within each image, global objects included."""
    if model is None:
        model = ModelConfig.from_dict(store.config.get("model", {}))
    start = time.perf_counter()
    cache = FeatureCache(store, model)
    hits, counts = [], []
    with nx.no_grad():
        for s in range(0, len(data), chunk):
            items = [with_global(a, model.multimodal.max_tokens) for a in data[s:s + chunk]]
            batch = forward_batch(items, store, model, cache)
            for v, m in batch.pairs:
                h = retrieval_hits(v.data, m.data)
                hits.append(h)
                counts.append(len(h))
    all_hits = np.concatenate(hits)
    return EvalReport(
        top1_retrieval_accuracy=float(all_hits.mean()),
        per_image_counts=counts,
        n_objects=int(all_hits.size),
        loss_curve=list(loss_curve),
        wall_clock=time.perf_counter() - start,
    )


# ablations --------------------------------------------------------------------

ABLATIONS = {
    "w/o DoCo": {"intra": False, "inter": True, "image_level": True},
    "intra": {"intra": True, "inter": False},
    "intra+inter (ROI)": {"intra": True, "inter": True},
    "intra+inter (Average)": {"intra": True, "inter": True, "aggregation": "average"},
}


def ablation_config(base: TrainConfig, flags: dict) -> TrainConfig:
    flags = dict(flags)
    agg_mode = flags.pop("aggregation", base.model.aggregation.mode)
    model = dataclasses.replace(
        base.model, aggregation=dataclasses.replace(base.model.aggregation, mode=agg_mode)
    )
    defaults = {"intra": True, "inter": True, "image_level": False}
    defaults.update(flags)
    return dataclasses.replace(base, model=model, **defaults)


@dataclass
class AblationRow:
    name: str
    flags: dict
    report: EvalReport
    final_loss: float


def _run_ablation(name, flags, train, heldout, base):
    cfg = ablation_config(base, flags)
    store, history = pretrain(train, cfg)
    report = eval_retrieval(store, heldout, cfg.model, [h["total"] for h in history])
    return AblationRow(name, flags, report, history[-1]["total"])


def ablation_suite(train: Sequence[AnnotatedImage], heldout: Sequence[AnnotatedImage], base: TrainConfig,
                   variants: dict | None = None, n_jobs: int = 1) -> list[AblationRow]:
    """Train once per flag combination (same seed, data order and step budget) and evaluate."""
    variants = variants or ABLATIONS
    if n_jobs == 1:
        return [_run_ablation(n, f, train, heldout, base) for n, f in variants.items()]
    from joblib import Parallel, delayed

    return Parallel(n_jobs=n_jobs)(
        delayed(_run_ablation)(n, f, train, heldout, base) for n, f in variants.items()
    )


def format_table(rows: Sequence[AblationRow]) -> str:
    header = f"{'configuration':<24} {'intra':>5} {'inter':>5} {'agg':>7} {'top1':>7} {'final loss':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        f = r.flags
        lines.append(
            f"{r.name:<24} {str(f.get('intra', True)):>5} {str(f.get('inter', True)):>5} "
            f"{f.get('aggregation', 'roi'):>7} {r.report.top1_retrieval_accuracy:>7.3f} {r.final_loss:>10.4f}"
        )
    return "\n".join(lines)


# gradient check ---------------------------------------------------------------

def gradcheck_doco(model: ModelConfig | None = None, n_images: int = 2, n_objects: int = 3,
                   n_samples: int = 256, seed: int = 0, h: float = 1e-6,
                   return_details: bool = False):
    """Finite-difference check of the full loss against every trainable parameter.

    Uses ``n_images`` synthetic documents with exactly ``n_objects`` objects
    each (plus the global object).
    """
    model = model or ModelConfig()
    size = model.vision.image_size
    synth = SynthConfig(seed=seed, image_size=size, n_objects_range=(n_objects, n_objects),
                        glyph_size=7, max_tokens=model.multimodal.max_tokens)
    items = [with_global(a, model.multimodal.max_tokens) for a in generate_dataset(synth, n_images)]
    store = build_store(model)
    cache = FeatureCache(store, model)

    def loss(s):
        return doco_loss(forward_batch(items, s, model, cache), model.similarity, s).tensor

    return nx.finite_diff_check(loss, store, h=h, n_samples=n_samples, seed=seed,
                                return_details=return_details)
