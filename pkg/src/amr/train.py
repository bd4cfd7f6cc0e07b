"""Cold-start and distillation training, and the full augmentation pipeline."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import formats
from . import tensor as T
from .augment import (AugmentConfig, MinedNegative, attach_negatives, build_augmented_dataset,
                      mine_negatives)
from .domain import Dataset, Sample, draw_saliency_pair, from_normalized, NormalizedSpan
from .evaluate import EvalResult, evaluate
from .losses import (LossWeights, PredictionSet, loss_dill, total_loss_stage1, total_loss_stage2)
from .model import BaseModel, Batch, ConfigError, Model, ModelConfig, freeze_as_base, make_distill_model
from .optim import AdamWState, adamw_step, clip_global_norm

log = logging.getLogger(__name__)

# fixed stream ids so each consumer of randomness is independent of the others
_STREAM = {"split": 1, "mine-d1": 2, "mine-d2": 3, "augment": 4, "cold-init": 5, "cold-data": 6,
           "distill-init": 7, "distill-data": 8, "single-init": 9, "single-data": 10}


class NonFiniteLossError(ArithmeticError):
    pass


@dataclass(frozen=True)
class AblationFlags:
    use_splice: bool = True
    use_boost: bool = True
    two_stage_vanilla: bool = False
    use_dill: bool = True
    use_dcl: bool = True

    @property
    def two_stage(self) -> bool:
        return self.two_stage_vanilla or self.use_dill or self.use_dcl

    @property
    def needs_mining(self) -> bool:
        # contrastive loss needs mined ambiguous spans on real data even without Boost
        return self.use_splice and (self.use_boost or self.use_dcl)


@dataclass
class StagePlan:
    stage1_epochs: int = 100
    stage2_epochs: int = 100
    single_stage_epochs: int | None = None
    mining_epochs: int | None = 280
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 8
    seed: int = 0
    theta: float = 0.7
    grad_clip: float = 1.0
    act_noise: float = 0.01
    ablation: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationFlags(**self.ablation)
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def fold_epochs(self) -> int:
        """Epochs per mining fold; the single-stage budget when ``mining_epochs`` is unset."""
        return self.mining_epochs or self.single_epochs

    @property
    def single_epochs(self) -> int:
        """Single-stage rows get the same epoch budget as both stages together."""
        return self.single_stage_epochs or self.stage1_epochs + self.stage2_epochs

    def to_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAM[name]])


@dataclass
class StageResult:
    model: Model
    history: list[dict]
    steps: int


@dataclass
class TrainReport:
    stages: list[str] = field(default_factory=list)
    traces: dict[str, list[dict]] = field(default_factory=dict)
    metrics: EvalResult | None = None
    checkpoints: list[str] = field(default_factory=list)
    seed: int = 0
    wall_clock: float = 0.0
    mining: dict = field(default_factory=dict)
    augmentation: dict = field(default_factory=dict)
    negatives: list[MinedNegative] = field(default_factory=list)
    model: Model | None = None
    base: BaseModel | None = None


def make_batches(dataset: Dataset, order: Sequence[int], batch_size: int) -> list[list[Sample]]:
    """Consecutive slices of ``order``; a slice mixing shapes is split per shape."""
    out = []
    for lo in range(0, len(order), batch_size):
        chunk = [dataset[i] for i in order[lo:lo + batch_size]]
        groups: dict[tuple, list[Sample]] = {}
        for s in chunk:
            groups.setdefault((s.length, s.num_tokens), []).append(s)
        out.extend(groups.values())
    return out


def _resample_saliency(samples: Sequence[Sample], rng: np.random.Generator) -> list[Sample]:
    return [s.with_saliency(*draw_saliency_pair(s, rng)) for s in samples]


class _Writer:
    def __init__(self, run_dir: Path | None):
        self.run_dir = run_dir
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)

    def epoch(self, record: dict) -> None:
        if self.run_dir is not None:
            with open(self.run_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    def existing(self, name: str) -> str | None:
        if self.run_dir is None or not (self.run_dir / name).exists():
            return None
        return str(self.run_dir / name)

    def checkpoint(self, model: Model, name: str) -> str | None:
        if self.run_dir is None:
            return None
        path = self.run_dir / name
        formats.save_checkpoint(path, model)
        return str(path)


def train_stage(model: Model, dataset: Dataset, epochs: int, plan: StagePlan, weights: LossWeights,
                rng: np.random.Generator, stage: str, base: BaseModel | None = None,
                use_dill: bool = False, use_disc: bool = False, run_dir: Path | None = None,
                on_epoch: Callable[[dict], None] | None = None) -> StageResult:
    """Train ``model`` in place for ``epochs`` passes over ``dataset``."""
    if len(dataset) == 0:
        raise ValueError(f"{stage}: empty training set")
    if use_dill and (base is None or not model.config.dual_query_mode):
        raise ConfigError("distillation needs a dual-path model and a frozen base")
    writer = _Writer(run_dir)
    opt = AdamWState()
    history: list[dict] = []
    steps = 0
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        data = Dataset(_resample_saliency(dataset.samples, rng), dataset.split_tag)
        sums: dict[str, float] = {}
        nb = 0
        for samples in make_batches(data, order, plan.batch_size):
            batch = Batch.from_samples(samples)
            out = model(batch)
            # a non-finite forward pass would otherwise surface as a matching error
            if not (np.all(np.isfinite(out.logits.data)) and np.all(np.isfinite(out.spans.data))):
                raise NonFiniteLossError(f"{stage} epoch {epoch}: non-finite outputs "
                                         f"(last good checkpoint: {writer.existing(f'{stage}_last.ckpt')})")
            if stage == "distill" and (use_dill or use_disc):
                base_dec = base.decoded_queries(batch) if use_dill else None
                res = total_loss_stage2(out, base_dec, samples, weights, use_dill=use_dill, use_disc=use_disc)
            else:
                res = total_loss_stage1(out, samples, weights)
            loss = res.total.item()
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"{stage} epoch {epoch}: non-finite loss "
                                         f"(last good checkpoint: {writer.existing(f'{stage}_last.ckpt')})")
            model.zero_grad()
            res.total.backward()
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            clip_global_norm(grads, plan.grad_clip)
            adamw_step({k: p.data for k, p in model.params.items()}, grads, opt,
                       lr=plan.learning_rate, wd=plan.weight_decay)
            steps += 1
            nb += 1
            sums["total"] = sums.get("total", 0.0) + loss
            for k, v in res.terms.items():
                sums[k] = sums.get(k, 0.0) + v
        record = {"stage": stage, "epoch": epoch, "steps": steps}
        record.update({k: v / nb for k, v in sums.items()})
        history.append(record)
        writer.epoch(record)
        writer.checkpoint(model, f"{stage}_last.ckpt")
        if on_epoch is not None:
            on_epoch(record)
    writer.checkpoint(model, f"{stage}_final.ckpt")
    return StageResult(model, history, steps)


def predict(model: Model, samples: Sequence[Sample], batch_size: int = 32) -> list[PredictionSet]:
    """Frame-level windows and confidences for every sample, in input order."""
    ds = Dataset(tuple(samples), "val") if not isinstance(samples, Dataset) else samples
    index = {id(s): i for i, s in enumerate(ds.samples)}
    out: list[PredictionSet | None] = [None] * len(ds)
    with T.no_grad():
        for chunk in make_batches(ds, list(range(len(ds))), batch_size):
            spans, scores = model.inference_predictions(model(Batch.from_samples(chunk)))
            for b, s in enumerate(chunk):
                windows = [from_normalized(NormalizedSpan(c, w), s.length) for c, w in spans[b]]
                out[index[id(s)]] = PredictionSet([[w.start, w.end] for w in windows], scores[b])
    return out


def evaluate_model(model: Model, dataset: Dataset) -> EvalResult:
    return evaluate(predict(model, dataset), [s.gt_spans for s in dataset])


def run_cold_start(augmented: Dataset, plan: StagePlan, model_cfg: ModelConfig, weights: LossWeights,
                   run_dir: Path | None = None, epochs: int | None = None,
                   init_stream: str = "cold-init", data_stream: str = "cold-data") -> StageResult:
    """Single-path training on ``augmented`` with the stage-1 objective."""
    if len(augmented) == 0:
        raise ValueError("cold start needs a non-empty dataset")
    cfg = copy.deepcopy(model_cfg)
    cfg.dual_query_mode = False
    model = Model(cfg, stream(plan.seed, init_stream))
    return train_stage(model, augmented, epochs or plan.stage1_epochs, plan, weights,
                       stream(plan.seed, data_stream), "cold", run_dir=run_dir)


def run_distill_stage(real: Dataset, base: BaseModel | Model | str | Path, plan: StagePlan,
                      weights: LossWeights, run_dir: Path | None = None,
                      model_cfg: ModelConfig | None = None) -> tuple[StageResult, BaseModel]:
    """Stage 2 on real data, initialised from the frozen cold-start model."""
    if isinstance(base, (str, Path)):
        base = formats.load_checkpoint(base)
    if isinstance(base, Model):
        base = freeze_as_base(base)
    if model_cfg is not None:
        for key in ("hidden_dim", "num_encoder_layers", "num_decoder_layers", "num_heads", "num_queries",
                    "ffn_dim", "video_dim", "text_dim"):
            if getattr(model_cfg, key) != getattr(base.config, key):
                raise ConfigError(f"base checkpoint {key}={getattr(base.config, key)} "
                                  f"does not match config {getattr(model_cfg, key)}")
    flags = plan.ablation
    if flags.use_dill:
        model = make_distill_model(base, stream(plan.seed, "distill-init"), plan.act_noise)
        if model_cfg is not None:
            model.config.pool_mode = model_cfg.pool_mode
    else:
        model = Model(copy.deepcopy(base.config))
        model.params = {k: T.Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in base.model.params.items()}
    weights = copy.deepcopy(weights)
    res = train_stage(model, real, plan.stage2_epochs, plan, weights, stream(plan.seed, "distill-data"),
                      "distill", base=base, use_dill=flags.use_dill, use_disc=flags.use_dcl, run_dir=run_dir)
    return res, base


def fold_trainer(plan: StagePlan, model_cfg: ModelConfig, weights: LossWeights):
    """Trainer for the mining folds: a fresh cold-config model per fold."""
    calls = iter(("mine-d1", "mine-d2"))

    def trainer(fold: Dataset):
        name = next(calls)
        res = run_cold_start(fold, plan, model_cfg, weights, epochs=plan.fold_epochs,
                             init_stream=name, data_stream=name)
        return lambda samples: predict(res.model, samples)

    return trainer


def run_mining(train: Dataset, plan: StagePlan, model_cfg: ModelConfig, weights: LossWeights) -> list[MinedNegative]:
    return mine_negatives(train, fold_trainer(plan, model_cfg, weights), plan.theta, stream(plan.seed, "split"))


def anchoring_distance(model: Model, base: BaseModel, samples: Sequence[Sample]) -> float:
    """Mean per-layer distillation loss between the ori path and the base on ``samples``."""
    batch = Batch.from_samples(samples)
    with T.no_grad():
        enc = model.encode(batch.features, batch.tokens)
        if model.config.dual_query_mode:
            dec = model.decode_dual(enc.video).decoded_ori
        else:
            dec = model.decode_single(enc.video)
        return loss_dill(dec, base.decoded_queries(batch)).item()


def run_full_pipeline(real: Dataset, val: Dataset, plan: StagePlan, model_cfg: ModelConfig | None = None,
                      weights: LossWeights | None = None, augment_cfg: AugmentConfig | None = None,
                      run_dir: Path | str | None = None, negatives: list[MinedNegative] | None = None) -> TrainReport:
    """Mining, augmentation, cold start, distillation and evaluation, as the ablation flags allow.

    ``negatives`` may be supplied to reuse an earlier mining pass.
    """
    model_cfg = model_cfg or ModelConfig()
    weights = weights or LossWeights()
    augment_cfg = copy.deepcopy(augment_cfg or AugmentConfig())
    flags = plan.ablation
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        snapshot = {"plan": plan.to_dict(), "model": model_cfg.to_dict(), "loss": asdict(weights),
                    "augment": asdict(augment_cfg)}
        (run_dir / "config.json").write_text(json.dumps(snapshot, sort_keys=True, indent=2) + "\n")
    t0 = time.perf_counter()
    report = TrainReport(seed=plan.seed)

    if flags.needs_mining:
        if negatives is None:
            negatives = run_mining(real, plan, model_cfg, weights)
        report.negatives = list(negatives)
        report.mining = {"count": len(negatives),
                         "samples_with_negatives": len({n.query_id for n in negatives})}
        report.stages.append("mining")
        if run_dir is not None:
            formats.write_jsonl(run_dir / "negatives.jsonl", formats.negatives_to_records(negatives))
    else:
        negatives = []

    real_stage2 = attach_negatives(real, negatives) if negatives else real

    if flags.use_splice:
        augment_cfg.use_boost = flags.use_boost
        augment_cfg.seed = plan.seed
        augmented = build_augmented_dataset(real, negatives, augment_cfg)
        report.augmentation = {"size": len(augmented), "skipped": augmented.meta.get("skipped", 0),
                               "with_ambiguous": sum(1 for s in augmented if s.ambiguous_spans)}
        if run_dir is not None:
            manifest = [{"qid": s.query_id, "vid": s.video_id, "spans": [g.as_list() for g in s.gt_spans],
                         "ambiguous_spans": [a.as_list() for a in s.ambiguous_spans]} for s in augmented]
            formats.write_jsonl(run_dir / "augmented_manifest.jsonl", manifest)
        first_stage_data = augmented
    else:
        first_stage_data = real

    if flags.two_stage:
        cold = run_cold_start(first_stage_data, plan, model_cfg, weights, run_dir=run_dir)
        report.stages.append("cold")
        report.traces["cold"] = cold.history
        stage2, base = run_distill_stage(real_stage2, cold.model, plan, weights, run_dir=run_dir,
                                         model_cfg=model_cfg)
        report.stages.append("distill")
        report.traces["distill"] = stage2.history
        model = stage2.model
        report.base = base
    else:
        single = run_cold_start(first_stage_data, plan, model_cfg, weights, run_dir=run_dir,
                                epochs=plan.single_epochs, init_stream="single-init", data_stream="single-data")
        report.stages.append("single")
        report.traces["single"] = single.history
        model = single.model

    report.model = model
    report.metrics = evaluate_model(model, val)
    report.wall_clock = time.perf_counter() - t0
    if run_dir is not None:
        formats.write_report(run_dir / "report.json", report.metrics.report())
        report.checkpoints = sorted(str(p) for p in run_dir.glob("*_final.ckpt"))
    return report
