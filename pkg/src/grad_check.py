"""
File: grad_check.py
Purpose: Named finite-difference suites over every differentiable path (ops, losses, adapter + total loss)
Version: 1.0.0
Last Updated: 2026-10-16
"""
import logging
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from src.ag_adapter import AdapterConfig
from src.encoders import ModelConfig
from src.exceptions import ConfigurationError
from src.model import GiveModel
from src.objectives import BatchFeatures, OIDBatch, oid_loss, oiic_loss, oitc_loss, pretrain_itc_loss, total_giv_loss
from src.tensor_core import (Tensor, attention, concat, exp, finite_diff_check, gelu, l2_normalize, layer_norm, log,
                             logsumexp, matmul, mean, mul, permute, reshape, sigmoid, softmax_rows, softplus, take,
                             tanh, tsum)

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-5
STEP = 1e-5
# Denominator floors: float64 central differences resolve gradients to roughly
# 1e-10 absolute, so smaller gradients are compared on an absolute scale
LOSS_FLOOR = 1e-4
DEEP_FLOOR = 1e-3
# Literal relative error over every coordinate; loss suites only
STRICT_FLOOR = 1e-12
STRICT_SUITES = ("oitc", "oiic", "oid", "itc")
# Two-positive rows, no all-positive row and no single-object batch
STRICT_IMAGE_IDS = np.array([0, 0, 1, 1])
STRICT_OBJECT_IDS = np.array([0, 0, 1, 2])

# Small enough to difference coordinate by coordinate, deep enough to cross every adapter op
TINY_MODEL = ModelConfig(d=8, d_text=8, d_vision=8, n_text_layers=1, n_image_layers=2, n_heads=2, patch=4,
                         image_size=8, mlp_ratio=2)
TINY_ADAPTER = AdapterConfig(mode="dense", d_mlp=8, n_heads=2)

Problem = Tuple[Callable[[], Tensor], List[Tensor], float, int]


def _leaf(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _unit_rows(rng: np.random.Generator, b: int, d: int) -> np.ndarray:
    x = rng.normal(size=(b, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def tensor_ops_problem(rng: np.random.Generator) -> Problem:
    """One scalar through every differentiable op in tensor_core."""
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    w, bias = Tensor(1.0 + 0.1 * rng.normal(size=5), requires_grad=True), _leaf(rng, 5, scale=0.1)

    def f() -> Tensor:
        x = matmul(a, b)
        h = layer_norm(x, 1e-5, w, bias)
        h = gelu(h) + tanh(h) * sigmoid(h)
        p = softmax_rows(h)
        n = l2_normalize(concat([h, p], axis=1))
        q = reshape(n, (1, 3, 10))
        att = attention(q, q, q, n_heads=2)
        lse = logsumexp(permute(att, (0, 2, 1)))
        return (mean(lse) + mean(exp(mul(p, 0.5))) + mul(tsum(softplus(take(x, (slice(None), 0)))), 0.1)
                + mean(log(p)))
    return f, [a, b, w, bias], LOSS_FLOOR, 0


def _features_problem(rng: np.random.Generator, b: int = 4, d: int = 8,
                      strict: bool = False) -> Tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    y_img = Tensor(_unit_rows(rng, b, d), requires_grad=True)
    y_txt = Tensor(_unit_rows(rng, b, d), requires_grad=True)
    if strict:
        return y_img, y_txt, STRICT_IMAGE_IDS[:b], STRICT_OBJECT_IDS[:b]
    # Repeated ids so multi-positive rows occur
    image_ids = rng.integers(0, 2, size=b)
    object_ids = rng.integers(0, 3, size=b)
    return y_img, y_txt, image_ids, object_ids


def oitc_problem(rng: np.random.Generator, strict: bool = False) -> Problem:
    y_img, y_txt, image_ids, object_ids = _features_problem(rng, strict=strict)
    return (lambda: oitc_loss(BatchFeatures(y_img, y_txt, image_ids, object_ids), tau=1.0)), [y_img, y_txt], \
        LOSS_FLOOR, 0


def oiic_problem(rng: np.random.Generator, strict: bool = False) -> Problem:
    y_img, _, _, object_ids = _features_problem(rng, strict=strict)
    return (lambda: oiic_loss(y_img, object_ids, tau=1.0)), [y_img], LOSS_FLOOR, 0


def oid_problem(rng: np.random.Generator, strict: bool = False) -> Problem:
    logits = _leaf(rng, 8, scale=2.0)
    return (lambda: oid_loss(OIDBatch.from_logits(logits))), [logits], LOSS_FLOOR, 0


def itc_problem(rng: np.random.Generator, strict: bool = False) -> Problem:
    y_img, y_txt, _, _ = _features_problem(rng, strict=strict)
    return (lambda: pretrain_itc_loss(y_img, y_txt, tau=0.5)), [y_img, y_txt], LOSS_FLOOR, 0


def tiny_adapter_model(rng: np.random.Generator, perturb: float = 0.3) -> GiveModel:
    """Tiny backbone with an adapter whose output projection is non-zero."""
    model = GiveModel.create(TINY_MODEL, rng)
    model.attach_adapter(TINY_ADAPTER, rng)
    for _, tensor in model.adapter_tensors():
        tensor.data = tensor.data + rng.normal(0.0, perturb, size=tensor.shape)
    return model


def adapter_problem(rng: np.random.Generator, b: int = 3) -> Problem:
    """Full conditional forward (positives and negatives) into the weighted total loss."""
    model = tiny_adapter_model(rng)
    size = TINY_MODEL.image_size
    images = rng.integers(0, 256, size=(b, size, size, 3)).astype(np.uint8)
    instructions = _unit_rows(rng, 2 * b, TINY_MODEL.d)
    y_txt = Tensor(_unit_rows(rng, b, TINY_MODEL.d))
    image_ids = np.arange(b) % 2
    object_ids = np.array([0, 1, 1][:b])

    def f() -> Tensor:
        y_all = model.encode_images(np.concatenate([images, images]), instructions)
        features = BatchFeatures(take(y_all, slice(0, b)), y_txt, image_ids, object_ids)
        total, _ = total_giv_loss(features, OIDBatch.from_logits(model.oid_logits(y_all)), (1.0, 1.0, 1.0), 1.0)
        return total
    return f, [t for _, t in model.adapter_tensors()], DEEP_FLOOR, 6


SUITES: Dict[str, Callable[[np.random.Generator], Problem]] = {
    "tensor_core": tensor_ops_problem,
    "oitc": oitc_problem,
    "oiic": oiic_problem,
    "oid": oid_problem,
    "itc": itc_problem,
    "adapter": adapter_problem,
}


def run_suite(name: str, seeds: Iterable[int] = range(20), strict: bool = False) -> float:
    """Worst relative gradient error of one suite over the given seeds.

    ``strict`` checks every coordinate against the 1e-12 denominator floor on
    fixed id layouts; only the loss suites support it.
    """
    if name not in SUITES:
        raise ConfigurationError(f"unknown gradient suite {name!r} (expected one of {sorted(SUITES)} or 'all')")
    if strict and name not in STRICT_SUITES:
        raise ConfigurationError(f"suite {name!r} has no strict variant (expected one of {list(STRICT_SUITES)})")
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        if strict:
            f, params, _, _ = SUITES[name](rng, strict=True)
            err = finite_diff_check(f, params, h=STEP, floor=STRICT_FLOOR)
        else:
            f, params, floor, max_coords = SUITES[name](rng)
            err = finite_diff_check(f, params, h=STEP, floor=floor, max_coords=max_coords or None, rng=rng)
        logger.debug(f"grad-check {name}{' (strict)' if strict else ''} seed {seed}: {err:.3e}")
        worst = max(worst, err)
    return worst


def run_suites(names: Sequence[str], seeds: Iterable[int] = range(20), strict: bool = False) -> Dict[str, float]:
    if list(names) == ["all"]:
        names = list(STRICT_SUITES) if strict else list(SUITES)
    names = list(names)
    seeds = list(seeds)
    results = {}
    for name in names:
        results[name] = run_suite(name, seeds, strict)
        status = "✅" if results[name] <= GRAD_TOLERANCE else "❌"
        logger.info(f"{status} grad-check {name}: max rel err {results[name]:.3e}")
    return results
