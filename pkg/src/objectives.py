"""
File: objectives.py
Purpose: Object-focused training losses (OITC, OIIC, OID) and the baseline image-text contrast
Version: 1.0.0
Last Updated: 2026-10-16
"""
import logging
from dataclasses import dataclass
from typing import Collection, Dict, Hashable, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import ConfigurationError, ContractError, DimensionError, SamplingError
from src.tensor_core import Tensor, as_tensor, logsumexp, matmul, mean, mul, softplus, swap_last, take, tsum

logger = logging.getLogger(__name__)

LOSS_NAMES = ("oitc", "oiic", "oid")
DEFAULT_WEIGHTS = (1.0, 1.0, 1.0)

# Weights used when one loss is removed from training
DROP_LOSS_WEIGHTS = {
    "oitc": (0.0, 1.0, 1.0),
    "oiic": (1.0, 0.0, 1.0),
    "oid": (1.0, 1.0, 0.0),
}


@dataclass
class BatchFeatures:
    """Conditional image features, caption features and the ids defining positives."""
    y_img: Tensor
    y_txt: Tensor
    image_ids: np.ndarray
    object_ids: np.ndarray

    def __post_init__(self):
        self.y_img = as_tensor(self.y_img)
        self.y_txt = as_tensor(self.y_txt)
        self.image_ids = np.asarray(self.image_ids)
        self.object_ids = np.asarray(self.object_ids)
        b = self.y_img.shape[0]
        if b < 1 or self.y_img.ndim != 2 or self.y_txt.shape != self.y_img.shape:
            raise DimensionError("BatchFeatures", self.y_img.shape, self.y_txt.shape)
        if self.image_ids.shape != (b,) or self.object_ids.shape != (b,):
            raise DimensionError("BatchFeatures", self.y_img.shape, self.image_ids.shape, self.object_ids.shape)

    @property
    def size(self) -> int:
        return self.y_img.shape[0]


@dataclass
class OIDBatch:
    """Discriminator logits for b positive pairs followed by b negative pairs."""
    logits: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.logits = as_tensor(self.logits)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.logits.ndim != 1 or self.labels.shape != self.logits.shape or self.labels.size % 2:
            raise DimensionError("OIDBatch", self.logits.shape, self.labels.shape)
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ContractError("OID labels must be 0 or 1")
        if self.labels.sum() * 2 != self.labels.size:
            raise ContractError(f"OID batch needs as many positives as negatives, got {int(self.labels.sum())} "
                                f"of {self.labels.size}")

    @classmethod
    def from_logits(cls, logits: Tensor) -> "OIDBatch":
        """First half of ``logits`` are positives, second half negatives."""
        n = logits.shape[0]
        if n % 2:
            raise DimensionError("OIDBatch.from_logits", logits.shape)
        return cls(logits, np.concatenate([np.ones(n // 2), np.zeros(n // 2)]))


def similarity(a: Tensor, b: Tensor, tau: float) -> Tensor:
    """Scaled dot-product logits a_i . b_j / tau."""
    if tau <= 0:
        raise ConfigurationError(f"temperature must be positive, got {tau}")
    return mul(matmul(a, swap_last(b)), 1.0 / tau)


def positive_log_ratio(logits: Tensor, positives: np.ndarray) -> Tensor:
    """Per-row -log(sum over positives of exp / sum over all of exp)."""
    if not np.all(positives.any(axis=-1)):
        raise ContractError("every row needs at least one positive")
    return logsumexp(logits) - logsumexp(logits, positives)


def oitc_loss(features: BatchFeatures, tau: float = 1.0) -> Tensor:
    """Image-text contrast where positives share both source image and instructed object."""
    b = features.size
    positives = ((features.image_ids[:, None] == features.image_ids[None, :])
                 & (features.object_ids[:, None] == features.object_ids[None, :]))
    s = similarity(features.y_img, features.y_txt, tau)
    image_rows = positive_log_ratio(s, positives)
    text_rows = positive_log_ratio(swap_last(s), positives.T)
    return mul(tsum(image_rows) + tsum(text_rows), 0.5 / b)


def oiic_loss(y_img: Tensor, object_ids: np.ndarray, tau: float = 1.0, include_self: bool = True) -> Tensor:
    """Image-image contrast where positives share the instructed object.

    With ``include_self`` off the diagonal leaves both numerator and
    denominator, and rows without another positive contribute nothing.
    """
    y_img = as_tensor(y_img)
    object_ids = np.asarray(object_ids)
    b = y_img.shape[0]
    if object_ids.shape != (b,):
        raise DimensionError("oiic_loss", y_img.shape, object_ids.shape)
    positives = object_ids[:, None] == object_ids[None, :]
    s = similarity(y_img, y_img, tau)
    if include_self:
        return mul(tsum(positive_log_ratio(s, positives)), 1.0 / b)

    off_diagonal = ~np.eye(b, dtype=bool)
    rows = np.flatnonzero((positives & off_diagonal).any(axis=1))
    if rows.size == 0:
        return mul(tsum(s), 0.0)
    s_rows = take(s, rows)
    kept = logsumexp(s_rows, off_diagonal[rows]) - logsumexp(s_rows, (positives & off_diagonal)[rows])
    return mul(tsum(kept), 1.0 / b)


def oid_loss(batch: OIDBatch) -> Tensor:
    """Mean binary cross-entropy of sigmoid(z) against the labels.

    -[t log p + (1 - t) log(1 - p)] equals softplus((1 - 2t) z) for t in {0, 1}.
    """
    return mean(softplus(mul(batch.logits, 1.0 - 2.0 * batch.labels)))


def pretrain_itc_loss(y_img: Tensor, y_txt: Tensor, tau: float = 0.07) -> Tensor:
    """Symmetric InfoNCE with the matching pair on the diagonal as the only positive."""
    y_img, y_txt = as_tensor(y_img), as_tensor(y_txt)
    if y_img.shape != y_txt.shape or y_img.ndim != 2:
        raise DimensionError("pretrain_itc_loss", y_img.shape, y_txt.shape)
    b = y_img.shape[0]
    diagonal = np.eye(b, dtype=bool)
    s = similarity(y_img, y_txt, tau)
    return mul(tsum(positive_log_ratio(s, diagonal)) + tsum(positive_log_ratio(swap_last(s), diagonal)),
               0.5 / b)


def validate_weights(weights: Sequence[float]) -> Tuple[float, float, float]:
    weights = tuple(float(w) for w in weights)
    if len(weights) != 3:
        raise ConfigurationError(f"expected three loss weights (oitc, oiic, oid), got {weights}")
    if any(w < 0 for w in weights):
        raise ConfigurationError(f"loss weights must be non-negative, got {weights}")
    if not any(weights):
        raise ConfigurationError("at least one loss weight must be positive")
    return weights


def total_giv_loss(features: BatchFeatures, oid: OIDBatch,
                   weights: Sequence[float] = DEFAULT_WEIGHTS, tau: float = 1.0,
                   include_self: bool = True) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of the three object-focused losses.

    Every term is evaluated for the breakdown; only terms with a positive
    weight enter the returned graph.

    Returns:
        (total loss tensor, {"oitc", "oiic", "oid", "total"} as floats)
    """
    weights = validate_weights(weights)
    terms = {
        "oitc": oitc_loss(features, tau),
        "oiic": oiic_loss(features.y_img, features.object_ids, tau, include_self),
        "oid": oid_loss(oid),
    }
    total: Optional[Tensor] = None
    for name, weight in zip(LOSS_NAMES, weights):
        if weight == 0.0:
            continue
        weighted = mul(terms[name], weight)
        total = weighted if total is None else total + weighted
    breakdown = {name: terms[name].item() for name in LOSS_NAMES}
    breakdown["total"] = total.item()
    return total, breakdown


def sample_negative_object(present: Collection[Hashable], vocab: Collection[Hashable],
                           rng: np.random.Generator) -> Hashable:
    """Uniform draw from the vocabulary objects absent from ``present``."""
    present = set(present)
    candidates = sorted(v for v in set(vocab) if v not in present)
    if not candidates:
        raise SamplingError(f"no absent object to sample: all {len(set(vocab))} vocabulary objects are present")
    return candidates[int(rng.integers(len(candidates)))]
