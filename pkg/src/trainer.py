"""
File: trainer.py
Purpose: Two-stage training: contrastive pretraining of the dual encoder, then adapter training on a frozen backbone
Version: 1.0.0
Last Updated: 2026-10-16
"""
import logging
import math
import time
import uuid
from dataclasses import asdict, dataclass, field, replace
from datetime import timedelta
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from src.ag_adapter import INSERTION_MODES, AdapterConfig
from src.checkpoint import Checkpoint, checkpoint_from_model, model_from_checkpoint, save_checkpoint
from src.encoders import ModelConfig
from src.exceptions import ConfigurationError, DivergenceError, FrozenParameterError
from src.model import GiveModel
from src.objectives import (DEFAULT_WEIGHTS, BatchFeatures, OIDBatch, pretrain_itc_loss, sample_negative_object,
                            total_giv_loss, validate_weights)
from src.run_logger import TrainingLogger
from src.synth_moinst import CLASS_BY_NAME, CLASS_NAMES, ManifestRecord, SynthDataset, prompt
from src.tensor_core import Tensor, backward, no_grad

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "adapter")
DEFAULT_STEPS = {"pretrain": 3000, "adapter": 2000}
DEFAULT_TAU = {"pretrain": 0.07, "adapter": 1.0}

PRETRAIN_CHECKPOINT = "backbone.ckpt"
ADAPTER_CHECKPOINT = "adapter.ckpt"
LAST_GOOD_CHECKPOINT = "last_good.ckpt"


@dataclass
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class TrainConfig:
    """Settings for one training stage; ``steps`` and ``tau`` default per stage."""
    stage: str = "adapter"
    batch_size: int = 32
    steps: Optional[int] = None
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    weight_decay: float = 0.01
    loss_weights: Tuple[float, float, float] = DEFAULT_WEIGHTS
    tau: Optional[float] = None
    fusion: str = "dense"
    seed: int = 17
    clip_norm: float = 1.0
    use_instruction: bool = True
    include_self: bool = True
    holdout_classes: Tuple[str, ...] = ()
    log_every: int = 50
    val_records: int = 256
    tags: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r} (expected one of {STAGES})")
        if self.steps is None:
            self.steps = DEFAULT_STEPS[self.stage]
        if self.tau is None:
            self.tau = DEFAULT_TAU[self.stage]
        if self.batch_size < 2:
            raise ConfigurationError(f"contrastive stages need batch size >= 2, got {self.batch_size}")
        if self.lr <= 0 or self.tau <= 0:
            raise ConfigurationError(f"lr and tau must be positive (lr={self.lr}, tau={self.tau})")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        if self.fusion not in INSERTION_MODES:
            raise ConfigurationError(f"unknown fusion mode {self.fusion!r}")
        self.loss_weights = validate_weights(self.loss_weights)
        unknown = [c for c in self.holdout_classes if c not in CLASS_BY_NAME]
        if unknown:
            raise ConfigurationError(f"unknown holdout classes {unknown}")
        self.holdout_classes = tuple(self.holdout_classes)
        self.tags = tuple(self.tags)

    @property
    def hyper(self) -> AdamHyper:
        return AdamHyper(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        for key in ("loss_weights", "holdout_classes", "tags"):
            values[key] = list(values[key])
        return values


def adam_step(params: Sequence[Tuple[str, Tensor]], grads: Dict[str, np.ndarray], state: AdamState,
              hyper: AdamHyper) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Decay applies to matrices only; biases, norm affines and other vectors are not decayed.
    """
    state.step += 1
    correction1 = 1.0 - hyper.beta1 ** state.step
    correction2 = 1.0 - hyper.beta2 ** state.step
    for name, param in params:
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - hyper.beta1) * g if m is None else hyper.beta1 * m + (1.0 - hyper.beta1) * g
        v = (1.0 - hyper.beta2) * g * g if v is None else hyper.beta2 * v + (1.0 - hyper.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = hyper.lr * (m / correction1) / (np.sqrt(v / correction2) + hyper.eps)
        if hyper.weight_decay and param.ndim >= 2:
            param.data = param.data - hyper.lr * hyper.weight_decay * param.data
        param.data = param.data - update
    return state


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the norm before.

    A non-finite norm leaves the gradients untouched; callers must not step on it.
    """
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if math.isfinite(total) and max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for name in grads:
            grads[name] = grads[name] * scale
    return total


@dataclass
class LastGood:
    """Trainable arrays and sampler state at the start of the latest step with a finite loss."""
    step: int
    arrays: Dict[str, np.ndarray]
    rng_state: Dict[str, Any]

    @classmethod
    def capture(cls, step: int, trainable: Sequence[Tuple[str, Tensor]], rng_state: Dict[str, Any]) -> "LastGood":
        return cls(step, {name: t.data.copy() for name, t in trainable}, rng_state)

    def diverged(self, model: GiveModel, trainable: Sequence[Tuple[str, Tensor]], echo: Dict[str, Any],
                 step: int, reason: str, out_dir: Optional[Path] = None) -> DivergenceError:
        """Restore the saved arrays into ``model`` and wrap a checkpoint of them in the error.

        With ``out_dir`` the checkpoint is also written there as ``last_good.ckpt``.
        """
        for name, t in trainable:
            t.data = self.arrays[name]
        ckpt = checkpoint_from_model(model, echo, self.step)
        ckpt.rng_state = self.rng_state
        if out_dir is not None:
            save_checkpoint(out_dir / LAST_GOOD_CHECKPOINT, ckpt)
        logger.warning(f"💥 Diverged at step {step} ({reason}); keeping parameters from step {self.step}")
        return DivergenceError(step, ckpt, reason)


class PerformanceTracker:
    """Tracks performance metrics during training."""

    def __init__(self, report_interval: int = 50, batch_size: int = 1):
        self.start_time = time.time()
        self.last_report_time = self.start_time
        self.report_interval = report_interval
        self.batch_size = batch_size
        self.steps_done = 0
        self.timings: Dict[str, float] = {}

    def start_step(self) -> float:
        return time.time()

    def end_step(self, start_time: float) -> None:
        self.add_time("step", time.time() - start_time)
        self.steps_done += 1
        if self.report_interval and self.steps_done % self.report_interval == 0:
            self._report_progress()

    def time_operation(self, operation_name: str) -> "TimingContext":
        """Context manager for timing operations."""
        return TimingContext(self, operation_name)

    def add_time(self, operation_name: str, duration: float) -> None:
        self.timings[operation_name] = self.timings.get(operation_name, 0.0) + duration

    def _report_progress(self) -> None:
        now = time.time()
        elapsed_total = now - self.start_time
        elapsed_since_last = now - self.last_report_time
        overall_rate = self.steps_done / elapsed_total if elapsed_total > 0 else 0
        recent_rate = self.report_interval / elapsed_since_last if elapsed_since_last > 0 else 0
        logger.info(f"⚡ Performance: {overall_rate:.2f} steps/sec overall, {recent_rate:.2f} steps/sec recent, "
                    f"{overall_rate * self.batch_size:.1f} samples/sec")
        logger.debug(f"🕐 Elapsed: {timedelta(seconds=int(elapsed_total))}")
        self.last_report_time = now

    def get_final_report(self) -> Dict[str, Any]:
        total_time = time.time() - self.start_time
        return {
            "total_time": total_time,
            "steps": self.steps_done,
            "steps_per_sec": self.steps_done / total_time if total_time > 0 else 0.0,
            "samples_per_sec": self.steps_done * self.batch_size / total_time if total_time > 0 else 0.0,
            "timings": dict(self.timings),
        }


class TimingContext:
    """Context manager for timing operations."""

    def __init__(self, tracker: PerformanceTracker, operation_name: str):
        self.tracker = tracker
        self.operation_name = operation_name
        self.start_time = 0.0

    def __enter__(self):
        self.start_time = time.time()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.tracker.add_time(self.operation_name, time.time() - self.start_time)


class PairedBatchSampler:
    """Draws batches where at least ceil(b/4) samples share their object with another sample."""

    def __init__(self, records: Sequence[ManifestRecord], batch_size: int, rng: np.random.Generator):
        if len(records) < batch_size:
            raise ConfigurationError(f"{len(records)} training records cannot fill a batch of {batch_size}")
        self.n = len(records)
        self.batch_size = batch_size
        self.rng = rng
        by_object: Dict[str, List[int]] = {}
        for i, record in enumerate(records):
            by_object.setdefault(record.object, []).append(i)
        self.by_object = {k: np.array(v) for k, v in sorted(by_object.items())}
        self.pairable = [k for k, v in self.by_object.items() if len(v) >= 2]
        self.n_pairs = min(math.ceil(math.ceil(batch_size / 4) / 2), len(self.pairable), batch_size // 2)
        if self.n_pairs * 2 < math.ceil(batch_size / 4):
            raise ConfigurationError("not enough repeated objects to build paired batches")

    def sample(self) -> np.ndarray:
        chosen: List[int] = []
        objects = self.rng.choice(len(self.pairable), size=self.n_pairs, replace=False)
        for k in objects:
            chosen.extend(int(i) for i in self.rng.choice(self.by_object[self.pairable[k]], size=2, replace=False))
        pool = np.setdiff1d(np.arange(self.n), np.array(chosen))
        rest = self.rng.choice(pool, size=self.batch_size - len(chosen), replace=False)
        batch = np.concatenate([np.array(chosen, dtype=np.int64), rest.astype(np.int64)])
        return batch[self.rng.permutation(self.batch_size)]


class TextFeatureCache:
    """Detached text features keyed by string; valid while the text encoder is frozen."""

    def __init__(self, model: GiveModel):
        self.model = model
        self._features: Dict[str, np.ndarray] = {}

    def warm(self, texts: Sequence[str]) -> None:
        missing = sorted(set(texts) - set(self._features))
        if missing:
            for text, row in zip(missing, self.model.text_features(missing)):
                self._features[text] = row

    def get(self, texts: Sequence[str]) -> np.ndarray:
        self.warm(texts)
        return np.stack([self._features[t] for t in texts])


@dataclass
class TrainResult:
    model: GiveModel
    checkpoint: Checkpoint
    history: List[Dict[str, float]]
    val_loss_start: Optional[float] = None
    val_loss_end: Optional[float] = None
    performance: Dict[str, Any] = field(default_factory=dict)
    checkpoint_path: Optional[Path] = None


def _stream(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, key]))


def evaluate_itc(model: GiveModel, dataset: SynthDataset, records: Sequence[ManifestRecord], tau: float,
                 batch_size: int) -> Optional[float]:
    """Mean pretraining loss over fixed consecutive chunks of ``records``."""
    if len(records) < 2:
        return None
    losses = []
    with no_grad():
        for start in range(0, len(records) - 1, batch_size):
            chunk = records[start:start + batch_size]
            if len(chunk) < 2:
                break
            y_img = model.encode_images(dataset.images(chunk))
            y_txt = model.encode_texts([r.caption for r in chunk])
            losses.append(pretrain_itc_loss(y_img, y_txt, tau).item())
    return float(np.mean(losses))


def _grads(trainable: Sequence[Tuple[str, Tensor]]) -> Dict[str, np.ndarray]:
    return {name: tensor.grad for name, tensor in trainable}


def pretrain(config: TrainConfig, dataset: SynthDataset, model_config: Optional[ModelConfig] = None,
             out_dir: Optional[Union[str, Path]] = None, session_id: Optional[str] = None,
             show_progress: bool = False) -> TrainResult:
    """Train the dual encoder with image-text contrast on salient-only captions.

    Raises:
        DivergenceError: loss or gradient became non-finite; carries the parameters of the last finite step
    """
    if config.stage != "pretrain":
        raise ConfigurationError(f"pretrain needs stage 'pretrain', got {config.stage!r}")
    model_config = model_config or ModelConfig()
    records = dataset.pretrain("train")
    if not all(r.is_salient for r in records):
        raise ConfigurationError("pretraining records must all describe the salient object")
    if len(records) < config.batch_size:
        raise ConfigurationError(f"{len(records)} pretraining records cannot fill a batch of {config.batch_size}")

    model = GiveModel.create(model_config, _stream(config.seed, 0), dataset.vocab)
    sample_rng = _stream(config.seed, 1)
    trainable = model.set_stage("pretrain")
    tensors = [t for _, t in trainable]
    state = AdamState()
    hyper = config.hyper
    echo = {"train": config.to_dict()}

    out_dir = Path(out_dir) if out_dir is not None else None
    session_id = session_id or uuid.uuid4().hex[:12]
    run_log = TrainingLogger(session_id, "pretrain", out_dir / "pretrain_log.jsonl" if out_dir else None,
                             tags=config.tags)
    tracker = PerformanceTracker(report_interval=config.log_every, batch_size=config.batch_size)

    val = dataset.pretrain("val")[:config.val_records]
    val_start = evaluate_itc(model, dataset, val, config.tau, config.batch_size)
    logger.info(f"🚀 Pretraining {config.steps} steps, b={config.batch_size}, tau={config.tau}, "
                f"{model.count_parameters():,} parameters; val ITC {val_start}")

    history: List[Dict[str, float]] = []
    good = LastGood.capture(0, trainable, sample_rng.bit_generator.state)
    for step in tqdm(range(config.steps), desc="pretrain", disable=not show_progress):
        started = tracker.start_step()
        rng_state = sample_rng.bit_generator.state
        batch = [records[i] for i in sample_rng.choice(len(records), size=config.batch_size, replace=False)]
        with tracker.time_operation("forward"):
            y_txt = model.encode_texts([r.caption for r in batch])
            y_img = model.encode_images(dataset.images(batch))
            loss = pretrain_itc_loss(y_img, y_txt, config.tau)
        value = loss.item()
        if not math.isfinite(value):
            run_log.log_step(step, {"itc": value, "total": value})
            raise good.diverged(model, trainable, echo, step, "non-finite loss", out_dir)
        good = LastGood.capture(step, trainable, rng_state)
        with tracker.time_operation("backward"):
            for t in tensors:
                t.grad = None
            backward(loss, params=tensors)
        with tracker.time_operation("optimizer"):
            grads = _grads(trainable)
            grad_norm = clip_grad_norm(grads, config.clip_norm)
            if not math.isfinite(grad_norm):
                run_log.log_step(step, {"itc": value, "total": value}, grad_norm=grad_norm)
                raise good.diverged(model, trainable, echo, step, "non-finite gradient", out_dir)
            adam_step(trainable, grads, state, hyper)
        history.append({"step": step, "itc": value, "total": value})
        run_log.log_step(step, {"itc": value, "total": value}, grad_norm=grad_norm)
        if config.log_every and (step + 1) % config.log_every == 0:
            logger.info(f"step {step + 1}/{config.steps}: itc={value:.4f} |g|={grad_norm:.3f}")
        tracker.end_step(started)

    val_end = evaluate_itc(model, dataset, val, config.tau, config.batch_size)
    ckpt = checkpoint_from_model(model, echo, config.steps, sample_rng)
    path = save_checkpoint(out_dir / PRETRAIN_CHECKPOINT, ckpt) if out_dir else None
    report = tracker.get_final_report()
    logger.info(f"🏁 Pretraining done in {report['total_time']:.1f}s; val ITC {val_start} -> {val_end}")
    return TrainResult(model, ckpt, history, val_start, val_end, report, path)


def _check_frozen_grads(frozen: Sequence[Tuple[str, Tensor]]) -> None:
    for name, tensor in frozen:
        if tensor.grad is not None and np.any(tensor.grad != 0.0):
            raise FrozenParameterError(f"frozen tensor {name} received a non-zero gradient")


def train_adapter(config: TrainConfig, frozen: Checkpoint, dataset: SynthDataset,
                  adapter_config: Optional[AdapterConfig] = None, out_dir: Optional[Union[str, Path]] = None,
                  session_id: Optional[str] = None, show_progress: bool = False) -> TrainResult:
    """Insert an adapter into the frozen backbone and train it with the three object-focused losses.

    Positives and their sampled absent-object negatives run through the
    encoder as one 2b batch; the OID head scores both halves.

    Raises:
        FrozenParameterError: a backbone tensor received a gradient or changed
        DivergenceError: loss or gradient became non-finite; carries the parameters of the last finite step
    """
    if config.stage != "adapter":
        raise ConfigurationError(f"train_adapter needs stage 'adapter', got {config.stage!r}")
    adapter_config = replace(adapter_config or AdapterConfig(), mode=config.fusion)
    model = model_from_checkpoint(frozen, with_adapter=False)
    model.attach_adapter(adapter_config, _stream(config.seed, 2))
    sample_rng = _stream(config.seed, 3)
    trainable = model.set_stage("adapter")
    tensors = [t for _, t in trainable]
    frozen_tensors = model.backbone_tensors()
    snapshot = {name: t.data.copy() for name, t in frozen_tensors}
    for _, t in frozen_tensors:
        t.grad = np.zeros_like(t.data)

    holdout = set(config.holdout_classes)
    records = [r for r in dataset.triplets("train") if r.object not in holdout]
    sampler = PairedBatchSampler(records, config.batch_size, sample_rng)
    captions_by_object: Dict[str, List[str]] = {}
    for r in records:
        captions_by_object.setdefault(r.object, []).append(r.caption)
    negative_vocab = [c for c in CLASS_NAMES if c not in holdout]
    if not config.use_instruction:
        negative_vocab = [c for c in negative_vocab if c in captions_by_object]

    cache = TextFeatureCache(model)
    cache.warm([prompt(c) for c in CLASS_NAMES] + [r.caption for r in records])

    state = AdamState()
    hyper = config.hyper
    echo = {"train": config.to_dict()}
    out_dir = Path(out_dir) if out_dir is not None else None
    session_id = session_id or uuid.uuid4().hex[:12]
    tags = list(config.tags) + ([] if config.use_instruction else ["no-instruction"])
    run_log = TrainingLogger(session_id, "adapter", out_dir / "adapter_log.jsonl" if out_dir else None, tags=tags)
    tracker = PerformanceTracker(report_interval=config.log_every, batch_size=config.batch_size)
    logger.info(f"🚀 Adapter training {config.steps} steps, b={config.batch_size}, fusion={config.fusion}, "
                f"weights={config.loss_weights}, instruction={'on' if config.use_instruction else 'off'}, "
                f"holdout={sorted(holdout)}")

    b = config.batch_size
    history: List[Dict[str, float]] = []
    good = LastGood.capture(0, trainable, sample_rng.bit_generator.state)
    for step in tqdm(range(config.steps), desc="adapter", disable=not show_progress):
        started = tracker.start_step()
        rng_state = sample_rng.bit_generator.state
        batch = [records[i] for i in sampler.sample()]
        negatives = [sample_negative_object(r.objects_present, negative_vocab, sample_rng) for r in batch]
        if config.use_instruction:
            positive_text = [prompt(r.object) for r in batch]
            negative_text = [prompt(o) for o in negatives]
        else:
            positive_text = [r.caption for r in batch]
            negative_text = [captions_by_object[o][int(sample_rng.integers(len(captions_by_object[o])))]
                             for o in negatives]
        images = dataset.images(batch)

        with tracker.time_operation("forward"):
            instructions = np.concatenate([cache.get(positive_text), cache.get(negative_text)])
            y_all = model.encode_images(np.concatenate([images, images]), instructions)
            features = BatchFeatures(
                y_img=y_all[:b],
                y_txt=Tensor(cache.get([r.caption for r in batch])),
                image_ids=np.array([r.scene_id for r in batch]),
                object_ids=np.array([CLASS_BY_NAME[r.object].id for r in batch]),
            )
            oid = OIDBatch.from_logits(model.oid_logits(y_all))
            total, breakdown = total_giv_loss(features, oid, config.loss_weights, config.tau, config.include_self)
        if not math.isfinite(breakdown["total"]):
            run_log.log_step(step, breakdown)
            raise good.diverged(model, trainable, echo, step, "non-finite loss", out_dir)
        good = LastGood.capture(step, trainable, rng_state)
        with tracker.time_operation("backward"):
            for t in tensors:
                t.grad = None
            backward(total, params=tensors)
            _check_frozen_grads(frozen_tensors)
        with tracker.time_operation("optimizer"):
            grads = _grads(trainable)
            grad_norm = clip_grad_norm(grads, config.clip_norm)
            if not math.isfinite(grad_norm):
                run_log.log_step(step, breakdown, grad_norm=grad_norm)
                raise good.diverged(model, trainable, echo, step, "non-finite gradient", out_dir)
            adam_step(trainable, grads, state, hyper)

        history.append({"step": step, **breakdown})
        run_log.log_step(step, breakdown)
        if config.log_every and (step + 1) % config.log_every == 0:
            logger.info(f"step {step + 1}/{config.steps}: oitc={breakdown['oitc']:.4f} oiic={breakdown['oiic']:.4f} "
                        f"oid={breakdown['oid']:.4f} total={breakdown['total']:.4f} |g|={grad_norm:.3f}")
        tracker.end_step(started)

    for name, t in frozen_tensors:
        if not np.array_equal(t.data, snapshot[name]):
            raise FrozenParameterError(f"frozen tensor {name} changed during adapter training")

    ckpt = checkpoint_from_model(model, echo, config.steps, sample_rng)
    path = save_checkpoint(out_dir / ADAPTER_CHECKPOINT, ckpt) if out_dir else None
    report = tracker.get_final_report()
    logger.info(f"🏁 Adapter training done in {report['total_time']:.1f}s")
    return TrainResult(model, ckpt, history, performance=report, checkpoint_path=path)
