"""
File: evaluator.py
Purpose: Presence classification, bidirectional retrieval, OID accuracy and the ablation runner
Version: 1.0.0
Last Updated: 2026-10-16
"""
import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.metrics import f1_score, roc_auc_score

from src.ag_adapter import AdapterConfig
from src.checkpoint import Checkpoint, meta_path
from src.exceptions import ConfigurationError, ContractError, DivergenceError, MetricError
from src.model import GiveModel
from src.objectives import DROP_LOSS_WEIGHTS, sample_negative_object
from src.synth_moinst import CLASS_NAMES, ManifestRecord, SynthDataset, prompt
from src.tensor_core import Tensor, no_grad
from src.trainer import TrainConfig, train_adapter

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("config", "f1_raw", "f1_instr", "f1_adj", "auc_raw", "auc_instr", "auc_adj",
               "i2t_r1", "i2t_r5", "t2i_r1", "t2i_r5", "oid_acc")
METRIC_NAMES = CSV_COLUMNS[1:]
RECALL_KS = (1, 5)
SUBSETS = ("all", "salient", "non_salient")
# Cosine scores are compared at this many decimals so exact self-similarities tie
SCORE_DECIMALS = 12


@dataclass
class ScoreMatrix:
    """Presence scores [images x classes] and the instruction-only scores beside them."""
    scores: np.ndarray
    instruction_only: np.ndarray
    classes: List[str]

    def __post_init__(self):
        if self.scores.shape != self.instruction_only.shape or self.scores.shape[1] != len(self.classes):
            raise ContractError(f"score shapes {self.scores.shape}/{self.instruction_only.shape} do not match "
                                f"{len(self.classes)} classes")
        if not (np.all(np.isfinite(self.scores)) and np.all(np.isfinite(self.instruction_only))):
            raise MetricError("presence scores must be finite")


@dataclass
class MetricReport:
    config: str
    f1_raw: float = math.nan
    f1_instr: float = math.nan
    f1_adj: float = math.nan
    auc_raw: float = math.nan
    auc_instr: float = math.nan
    auc_adj: float = math.nan
    i2t_r1: float = math.nan
    i2t_r5: float = math.nan
    t2i_r1: float = math.nan
    t2i_r5: float = math.nan
    oid_acc: float = math.nan
    n_trainable: int = 0
    fingerprint: str = ""
    extra: Dict[str, Any] = field(default_factory=dict)

    def csv_row(self) -> List[str]:
        row = [self.config]
        for name in METRIC_NAMES:
            value = getattr(self, name)
            row.append("nan" if value is None or not math.isfinite(value) else f"{value:.4f}")
        return row

    def to_dict(self) -> Dict[str, Any]:
        values = asdict(self)
        for key, value in values.items():
            if isinstance(value, float) and not math.isfinite(value):
                values[key] = None
        return values


def _unit(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norm < 1e-12, 1.0, norm)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity, rows of a against rows of b."""
    return np.round(np.clip(_unit(a) @ _unit(b).T, -1.0, 1.0), SCORE_DECIMALS)


def presence_scores(model: GiveModel, images: np.ndarray, classes: Sequence[str] = CLASS_NAMES) -> ScoreMatrix:
    """score(img, c) = cos(encode_image(img, y_c), encode_text(prompt(c))).

    The instruction-only score replaces the image feature by y_c itself.
    """
    classes = list(classes)
    prompts = model.text_features([prompt(c) for c in classes])
    scores = np.zeros((len(images), len(classes)))
    baseline = None if model.has_adapter else model.image_features(images)
    for j in range(len(classes)):
        feats = baseline if baseline is not None else model.image_features(images, prompts[j])
        scores[:, j] = cosine(feats, prompts[j:j + 1])[:, 0]
    instr = np.diag(cosine(prompts, prompts))
    return ScoreMatrix(scores, np.tile(instr, (len(images), 1)), classes)


def _top1_predictions(scores: np.ndarray) -> np.ndarray:
    pred = np.zeros(scores.shape, dtype=bool)
    pred[np.arange(scores.shape[0]), np.argmax(scores, axis=1)] = True
    return pred


def _f1(scores: np.ndarray, truth: np.ndarray, mode: str, threshold: float, columns: np.ndarray) -> float:
    if mode == "top1":
        pred = _top1_predictions(scores)
    elif mode == "threshold":
        pred = scores >= threshold
    else:
        raise ConfigurationError(f"unknown F1 mode {mode!r}")
    return 100.0 * f1_score(truth[:, columns].ravel().astype(int), pred[:, columns].ravel().astype(int),
                            zero_division=0)


def _auc(scores: np.ndarray, truth: np.ndarray, columns: np.ndarray) -> float:
    labels = truth[:, columns].ravel().astype(int)
    if labels.all() or not labels.any():
        raise MetricError("AUC is undefined when every pair has the same truth value")
    return 100.0 * roc_auc_score(labels, scores[:, columns].ravel())


def f1_auc(scores: ScoreMatrix, truth: np.ndarray, mode: str = "top1", threshold: float = 0.0,
           columns: Optional[Sequence[int]] = None) -> Dict[str, float]:
    """Raw, instruction-only and interference-adjusted F1 and AUC on a 0-100 scale.

    Adjusted F1 = F1 - F1_instr; adjusted AUC = AUC - (AUC_instr - 50). With
    ``columns`` predictions still use every class but only those columns are scored.
    """
    truth = np.asarray(truth, dtype=bool)
    if truth.shape != scores.scores.shape:
        raise ContractError(f"truth shape {truth.shape} does not match scores {scores.scores.shape}")
    cols = np.arange(truth.shape[1]) if columns is None else np.asarray(columns)
    f1_raw = _f1(scores.scores, truth, mode, threshold, cols)
    f1_instr = _f1(scores.instruction_only, truth, mode, threshold, cols)
    auc_raw = _auc(scores.scores, truth, cols)
    auc_instr = _auc(scores.instruction_only, truth, cols)
    return {
        "f1_raw": f1_raw, "f1_instr": f1_instr, "f1_adj": f1_raw - f1_instr,
        "auc_raw": auc_raw, "auc_instr": auc_instr, "auc_adj": auc_raw - (auc_instr - 50.0),
    }


def rank_of_target(scores: np.ndarray, target: np.ndarray, gallery_ids: np.ndarray) -> np.ndarray:
    """0-based rank of each row's target column; equal scores rank by ascending gallery id."""
    rows = np.arange(scores.shape[0])
    target_scores = scores[rows, target][:, None]
    better = scores > target_scores
    tied_before = (scores == target_scores) & (gallery_ids[None, :] < gallery_ids[target][:, None])
    return better.sum(axis=1) + tied_before.sum(axis=1)


def recall_at(ranks: np.ndarray, ks: Sequence[int], gallery_size: int) -> Dict[int, float]:
    if gallery_size < max(ks):
        raise ConfigurationError(f"gallery of {gallery_size} items is smaller than k={max(ks)}")
    if ranks.size == 0:
        return {k: math.nan for k in ks}
    return {k: 100.0 * float(np.mean(ranks < k)) for k in ks}


@dataclass
class EvalSet:
    """Evaluation records with their distinct scenes in ascending id order."""
    records: List[ManifestRecord]
    scene_ids: np.ndarray
    images: np.ndarray
    present: List[List[str]]

    @classmethod
    def from_records(cls, dataset: SynthDataset, records: Sequence[ManifestRecord]) -> "EvalSet":
        by_scene: Dict[int, ManifestRecord] = {}
        for r in records:
            by_scene.setdefault(r.scene_id, r)
        scene_ids = np.array(sorted(by_scene), dtype=np.int64)
        firsts = [by_scene[s] for s in scene_ids]
        images = dataset.images(firsts) if firsts else np.zeros((0, 64, 64, 3), dtype=np.uint8)
        return cls(list(records), scene_ids, images, [list(r.objects_present) for r in firsts])

    def truth(self, classes: Sequence[str] = CLASS_NAMES) -> np.ndarray:
        return np.array([[c in present for c in classes] for present in self.present], dtype=bool)

    def scene_index(self, scene_id: int) -> int:
        return int(np.searchsorted(self.scene_ids, scene_id))


def _query_mask(records: Sequence[ManifestRecord], subset: str) -> np.ndarray:
    if subset == "all":
        return np.ones(len(records), dtype=bool)
    if subset == "salient":
        return np.array([r.is_salient for r in records], dtype=bool)
    if subset == "non_salient":
        return np.array([not r.is_salient for r in records], dtype=bool)
    raise ConfigurationError(f"unknown query subset {subset!r} (expected one of {SUBSETS})")


def retrieval(model: GiveModel, eval_set: EvalSet, subset: str = "all", ks: Sequence[int] = RECALL_KS,
              instruction_only: bool = False) -> Dict[str, float]:
    """Recall@k in both directions, queries filtered by ``subset``.

    Image to text: the query image is encoded under its record's object and the
    gallery holds every caption. Text to image: the caption queries the distinct
    scenes, each encoded under the query record's object. ``instruction_only``
    replaces every image feature by the instruction feature.
    """
    records = eval_set.records
    mask = _query_mask(records, subset)
    objects = sorted({r.object for r in records})
    instr = dict(zip(objects, model.text_features([prompt(o) for o in objects])))
    captions = model.text_features([r.caption for r in records])

    # Scene features under each object instruction, shared by both directions
    gallery: Dict[str, np.ndarray] = {}
    baseline = None if (model.has_adapter or instruction_only) else model.image_features(eval_set.images)
    for obj in objects:
        if instruction_only:
            gallery[obj] = np.tile(instr[obj], (len(eval_set.scene_ids), 1))
        elif baseline is not None:
            gallery[obj] = baseline
        else:
            gallery[obj] = model.image_features(eval_set.images, instr[obj])
        logger.debug(f"Encoded {len(eval_set.scene_ids)} gallery scenes under {obj!r}")

    queries = [i for i in range(len(records)) if mask[i]]
    record_ids = np.array([r.id for r in records], dtype=np.int64)
    scene_pos = np.array([eval_set.scene_index(r.scene_id) for r in records], dtype=np.int64)

    if queries:
        query_feats = np.stack([gallery[records[i].object][scene_pos[i]] for i in queries])
        i2t_scores = cosine(query_feats, captions)
        i2t_ranks = rank_of_target(i2t_scores, np.array(queries), record_ids)
        t2i_ranks = np.empty(len(queries), dtype=np.int64)
        for n, i in enumerate(queries):
            row = cosine(captions[i:i + 1], gallery[records[i].object])
            t2i_ranks[n] = rank_of_target(row, scene_pos[i:i + 1], eval_set.scene_ids)[0]
    else:
        i2t_ranks = t2i_ranks = np.zeros(0, dtype=np.int64)

    i2t = recall_at(i2t_ranks, ks, len(records))
    t2i = recall_at(t2i_ranks, ks, len(eval_set.scene_ids))
    result = {f"i2t_r{k}": i2t[k] for k in ks}
    result.update({f"t2i_r{k}": t2i[k] for k in ks})
    result["n_queries"] = len(queries)
    return result


def build_oid_pairs(eval_set: EvalSet, rng: np.random.Generator,
                    vocab: Sequence[str] = CLASS_NAMES) -> List[Tuple[int, str, int]]:
    """One positive and one absent-object negative per scene, as (scene index, object, label)."""
    pairs = []
    for index, present in enumerate(eval_set.present):
        pairs.append((index, present[int(rng.integers(len(present)))], 1))
        pairs.append((index, sample_negative_object(present, vocab, rng), 0))
    return pairs


def oid_accuracy(model: GiveModel, eval_set: EvalSet, pairs: Sequence[Tuple[int, str, int]]) -> float:
    """Accuracy (0-100) of the OID head at p = 0.5 on a balanced pair set."""
    labels = np.array([label for _, _, label in pairs], dtype=np.int64)
    if labels.size == 0 or labels.sum() * 2 != labels.size:
        raise ContractError(f"OID evaluation needs balanced pairs, got {int(labels.sum())} positives "
                            f"of {labels.size}")
    if model.oid_head is None:
        raise ConfigurationError("OID accuracy needs a model with an OID head")
    images = eval_set.images[[index for index, _, _ in pairs]]
    instructions = model.text_features([prompt(obj) for _, obj, _ in pairs])
    features = model.image_features(images, instructions)
    with no_grad():
        logits = model.oid_logits(Tensor(features)).data
    return 100.0 * float(np.mean((logits >= 0.0).astype(np.int64) == labels))


def model_fingerprint(model: GiveModel) -> str:
    digest = hashlib.sha256()
    for name, tensor in model.named_tensors():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.data.tobytes())
    return digest.hexdigest()[:16]


def checkpoint_digest(path: Union[str, Path]) -> str:
    """SHA-256 over a checkpoint file and its sidecar."""
    digest = hashlib.sha256(Path(path).read_bytes())
    sidecar = meta_path(path)
    if sidecar.exists():
        digest.update(sidecar.read_bytes())
    return digest.hexdigest()


def evaluate(model: GiveModel, dataset: SynthDataset, name: str = "model", split: str = "test",
             seed: int = 17, f1_mode: str = "top1", threshold: float = 0.0) -> MetricReport:
    """Full metric report for one model on one split."""
    eval_set = EvalSet.from_records(dataset, dataset.triplets(split))
    if not eval_set.records:
        raise ConfigurationError(f"split {split!r} has no records")
    logger.info(f"📊 Evaluating {name} on {len(eval_set.records)} {split} records "
                f"({len(eval_set.scene_ids)} scenes)")

    scores = presence_scores(model, eval_set.images)
    presence = f1_auc(scores, eval_set.truth(), mode=f1_mode, threshold=threshold)
    report = MetricReport(config=name, n_trainable=model.count_parameters(trainable_only=True),
                          fingerprint=model_fingerprint(model), **presence)

    for subset in SUBSETS:
        result = retrieval(model, eval_set, subset)
        if subset == "all":
            for key in ("i2t_r1", "i2t_r5", "t2i_r1", "t2i_r5"):
                setattr(report, key, result[key])
        else:
            report.extra.update({f"{key}_{subset}": value for key, value in result.items()})
    instr = retrieval(model, eval_set, "all", instruction_only=True)
    report.extra.update({f"{key}_instr": instr[key] for key in ("i2t_r1", "i2t_r5", "t2i_r1", "t2i_r5")})
    report.extra["t2i_chance"] = 100.0 / len(eval_set.scene_ids)
    report.extra["i2t_chance"] = 100.0 / len(eval_set.records)

    if model.oid_head is not None:
        pairs = build_oid_pairs(eval_set, np.random.default_rng(np.random.SeedSequence([seed, 99])))
        report.oid_acc = oid_accuracy(model, eval_set, pairs)
    logger.info(f"{name}: F1 {report.f1_raw:.1f} (adj {report.f1_adj:.1f}), AUC {report.auc_raw:.1f} "
                f"(adj {report.auc_adj:.1f}), t2i R@1 {report.t2i_r1:.1f}, OID {report.oid_acc:.1f}")
    return report


def transfer_presence(model: GiveModel, dataset: SynthDataset, classes: Sequence[str],
                   split: str = "test") -> Dict[str, float]:
    """Presence metrics scored only on the given (held-out) class columns."""
    unknown = [c for c in classes if c not in CLASS_NAMES]
    if unknown or not classes:
        raise ConfigurationError(f"transfer check needs known classes, got {list(classes)}")
    eval_set = EvalSet.from_records(dataset, dataset.triplets(split))
    scores = presence_scores(model, eval_set.images)
    columns = [CLASS_NAMES.index(c) for c in classes]
    return f1_auc(scores, eval_set.truth(), columns=columns)


def improvement(baseline: MetricReport, candidate: MetricReport) -> Dict[str, Optional[float]]:
    """Relative change of every metric in percent; None where the baseline is 0 or missing."""
    result: Dict[str, Optional[float]] = {}
    for name in METRIC_NAMES:
        base, cand = getattr(baseline, name), getattr(candidate, name)
        if base is None or cand is None or not (math.isfinite(base) and math.isfinite(cand)) or base == 0:
            result[name] = None
        else:
            result[name] = 100.0 * (cand - base) / abs(base)
    return result


def write_csv(reports: Sequence[MetricReport], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for report in reports:
            writer.writerow(report.csv_row())
    return path


def write_json(payload: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, MetricReport):
        payload = payload.to_dict()
    elif isinstance(payload, list):
        payload = [p.to_dict() if isinstance(p, MetricReport) else p for p in payload]
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def ablation_grid(grid: str = "table4") -> List[Tuple[str, Dict[str, Any]]]:
    """Cells as (name, TrainConfig overrides): full model, one loss removed, fusion placement, no instruction."""
    if grid != "table4":
        raise ConfigurationError(f"unknown ablation grid {grid!r}")
    return [
        ("full", {}),
        ("-OITC", {"loss_weights": DROP_LOSS_WEIGHTS["oitc"]}),
        ("-OIIC", {"loss_weights": DROP_LOSS_WEIGHTS["oiic"]}),
        ("-OID", {"loss_weights": DROP_LOSS_WEIGHTS["oid"]}),
        ("early", {"fusion": "early"}),
        ("late", {"fusion": "late"}),
        ("sparse", {"fusion": "sparse"}),
        ("no-inst", {"use_instruction": False}),
    ]


def _soft_checks(reports: Dict[str, MetricReport]) -> List[str]:
    """Expected orderings; failures are reported, never raised."""
    notes = []
    full = reports.get("full")
    for other in ("early", "sparse"):
        cell = reports.get(other)
        if full and cell and math.isfinite(full.auc_adj) and math.isfinite(cell.auc_adj) \
                and full.auc_adj < cell.auc_adj:
            notes.append(f"dense adjusted AUC {full.auc_adj:.1f} below {other} {cell.auc_adj:.1f}")
    no_oitc = reports.get("-OITC")
    if no_oitc and math.isfinite(no_oitc.t2i_r1):
        chance = no_oitc.extra.get("t2i_chance", math.nan)
        if no_oitc.t2i_r1 > 2 * chance:
            notes.append(f"-OITC t2i R@1 {no_oitc.t2i_r1:.2f} above twice chance {chance:.2f}")
    for note in notes:
        logger.warning(f"⚠️ Ablation soft check: {note}")
    return notes


def run_ablation(backbone: Checkpoint, dataset: SynthDataset, base_config: TrainConfig,
                 out_dir: Union[str, Path], adapter_config: Optional[AdapterConfig] = None,
                 grid: str = "table4", split: str = "test") -> List[MetricReport]:
    """Train and evaluate one adapter per grid cell with a shared seed; writes ablation.csv.

    A diverged cell is recorded with NaN metrics and the grid continues.
    """
    out_dir = Path(out_dir)
    reports: List[MetricReport] = []
    for name, overrides in ablation_grid(grid):
        cell_config = replace(base_config, tags=tuple(base_config.tags) + (name,), **overrides)
        cell_dir = out_dir / name.lstrip("-").lower()
        logger.info(f"🧪 Ablation cell {name}: {overrides or 'full model'}")
        try:
            result = train_adapter(cell_config, backbone, dataset, adapter_config, out_dir=cell_dir)
            report = evaluate(result.model, dataset, name=name, split=split, seed=base_config.seed)
        except DivergenceError as e:
            logger.warning(f"⚠️ Ablation cell {name} diverged at step {e.step}; recorded as NaN")
            report = MetricReport(config=name, extra={"diverged_at": e.step})
        write_json(report, cell_dir / "metrics.json")
        reports.append(report)

    notes = _soft_checks({r.config: r for r in reports})
    write_csv(reports, out_dir / "ablation.csv")
    write_json({"soft_check_failures": notes, "cells": [r.to_dict() for r in reports]},
               out_dir / "ablation.json")
    return reports
