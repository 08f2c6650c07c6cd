"""
File: model.py
Purpose: Named parameter store for the dual encoder, the adapter and the OID head
Version: 1.0.0
Last Updated: 2026-10-16
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.ag_adapter import AdapterConfig, AdapterState
from src.encoders import (ImageEncoderParams, ModelConfig, TextEncoderParams, Vocabulary, encode_image,
                          encode_text)
from src.exceptions import ConfigurationError, ContractError, DimensionError
from src.tensor_core import Tensor, linear, no_grad, reshape

logger = logging.getLogger(__name__)

BACKBONE_PREFIX = "backbone."
ADAPTER_PREFIX = "adapter."
OID_HEAD_PREFIX = "adapter.oid_head"


def is_frozen_name(name: str) -> bool:
    """Backbone tensors are frozen, adapter tensors (layers and OID head) trainable."""
    if name.startswith(BACKBONE_PREFIX):
        return True
    if name.startswith(ADAPTER_PREFIX):
        return False
    raise ContractError(f"tensor name {name!r} has no partition prefix")


@dataclass
class OIDHead:
    """Linear d -> 1 classifier on conditional image features."""
    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, d: int, rng: np.random.Generator, std: float = 0.02) -> "OIDHead":
        return cls(weight=Tensor(rng.normal(0.0, std, (d, 1)), requires_grad=True),
                   bias=Tensor(np.zeros(1), requires_grad=True))

    def __call__(self, y_img: Tensor) -> Tensor:
        z = linear(y_img, self.weight, self.bias)
        return reshape(z, (z.shape[0],))

    def named_tensors(self, prefix: str = OID_HEAD_PREFIX) -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class GiveModel:
    """Dual encoder plus optional adapter and OID head, addressed by tensor name."""

    def __init__(self, config: ModelConfig, text: TextEncoderParams, image: ImageEncoderParams,
                 vocab: Vocabulary, adapter: Optional[AdapterState] = None, oid_head: Optional[OIDHead] = None):
        if config.vocab_size < len(vocab):
            raise ConfigurationError(f"vocab_size {config.vocab_size} < vocabulary size {len(vocab)}")
        if (adapter is None) != (oid_head is None):
            raise ConfigurationError("adapter and OID head are created together")
        self.config = config
        self.text = text
        self.image = image
        self.vocab = vocab
        self.adapter = adapter
        self.oid_head = oid_head

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator,
               vocab: Optional[Vocabulary] = None) -> "GiveModel":
        vocab = vocab or Vocabulary.default()
        text = TextEncoderParams.create(config, rng)
        image = ImageEncoderParams.create(config, rng)
        return cls(config, text, image, vocab)

    def attach_adapter(self, adapter_config: AdapterConfig, rng: np.random.Generator) -> None:
        """Insert a fresh adapter and OID head and freeze the backbone."""
        self.adapter = AdapterState.create(adapter_config, len(self.image.blocks), self.config.d,
                                           self.config.d_vision, rng)
        self.oid_head = OIDHead.create(self.config.d, rng, adapter_config.init_std)
        self.set_stage("adapter")
        logger.info(f"🔌 Adapter attached ({adapter_config.mode}), "
                    f"{self.count_parameters(trainable_only=True):,} trainable parameters")

    def detach_adapter(self) -> None:
        self.adapter = None
        self.oid_head = None

    @property
    def has_adapter(self) -> bool:
        return self.adapter is not None

    # Parameter access

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        yield from self.text.named_tensors("backbone.text")
        yield from self.image.named_tensors("backbone.image")
        if self.adapter is not None:
            yield from self.adapter.named_tensors("adapter.layers")
            yield from self.oid_head.named_tensors(OID_HEAD_PREFIX)

    def backbone_tensors(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if is_frozen_name(n)]

    def adapter_tensors(self) -> List[Tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors() if not is_frozen_name(n)]

    def set_stage(self, stage: str) -> List[Tuple[str, Tensor]]:
        """Mark which tensors take gradients; returns the trainable ones.

        pretrain trains the backbone (no adapter allowed); adapter trains only
        adapter tensors and freezes the backbone.
        """
        if stage == "pretrain":
            if self.has_adapter:
                raise ConfigurationError("pretraining runs without an adapter")
            trainable = self.backbone_tensors()
        elif stage == "adapter":
            if not self.has_adapter:
                raise ConfigurationError("adapter stage needs an attached adapter")
            trainable = self.adapter_tensors()
        else:
            raise ConfigurationError(f"unknown stage {stage!r}")
        names = {n for n, _ in trainable}
        for name, tensor in self.named_tensors():
            tensor.requires_grad = name in names
            tensor.name = name
        return trainable

    def count_parameters(self, trainable_only: bool = False) -> int:
        tensors = self.adapter_tensors() if trainable_only else list(self.named_tensors())
        return int(sum(t.data.size for _, t in tensors))

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: tensor.data.copy() for name, tensor in self.named_tensors()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy values in by name; names and shapes must match exactly."""
        own = dict(self.named_tensors())
        if set(own) != set(arrays):
            missing = sorted(set(own) - set(arrays))[:5]
            extra = sorted(set(arrays) - set(own))[:5]
            raise ContractError(f"tensor names differ: missing {missing}, unexpected {extra}")
        for name, tensor in own.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != tensor.shape:
                raise DimensionError(f"load {name}", value.shape, tensor.shape)
            tensor.data = np.ascontiguousarray(value)

    # Forward passes

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        return encode_text(self.text, self.vocab.tokenize_batch(texts), self.config)

    def encode_images(self, images: np.ndarray, instruction: Optional[Union[Tensor, np.ndarray]] = None) -> Tensor:
        """Baseline features without ``instruction``, conditional features with it."""
        if instruction is None:
            return encode_image(self.image, images, self.config)
        if not self.has_adapter:
            raise ConfigurationError("conditional encoding needs an attached adapter")
        return encode_image(self.image, images, self.config, instruction=instruction, adapter=self.adapter)

    def oid_logits(self, y_img: Tensor) -> Tensor:
        if self.oid_head is None:
            raise ConfigurationError("model has no OID head")
        return self.oid_head(y_img)

    def text_features(self, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
        """Detached text features, one row per text."""
        rows = []
        with no_grad():
            for start in range(0, len(texts), batch_size):
                rows.append(self.encode_texts(texts[start:start + batch_size]).data)
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, self.config.d))

    def image_features(self, images: np.ndarray, instruction: Optional[np.ndarray] = None,
                       batch_size: int = 64) -> np.ndarray:
        """Detached image features in chunks; ``instruction`` is one [d] row or one per image."""
        if instruction is not None:
            instruction = np.asarray(instruction, dtype=np.float64)
            if instruction.ndim == 1:
                instruction = np.broadcast_to(instruction, (len(images), instruction.shape[0]))
        rows = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                chunk = images[start:start + batch_size]
                cond = None if instruction is None else np.ascontiguousarray(instruction[start:start + batch_size])
                rows.append(self.encode_images(chunk, cond).data)
        return np.concatenate(rows, axis=0) if rows else np.zeros((0, self.config.d))


def count_parameters(model: GiveModel, trainable_only: bool = False) -> int:
    return model.count_parameters(trainable_only)
