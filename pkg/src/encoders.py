"""
File: encoders.py
Purpose: Word-level text transformer and patch-based image transformer for the joint space
Version: 1.0.0
Last Updated: 2026-10-16
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.ag_adapter import AdapterState, adapter_forward
from src.config import (CAPTION_TEMPLATES, COLORS, EOS_TOKEN, IMAGE_SIZE, MAX_TOKENS, PAD_TOKEN,
                        POSITION_WORDS, PROMPT_TEMPLATE, SHAPES, SIZE_WORDS)
from src.exceptions import ConfigurationError, ContractError, DimensionError, VocabularyError
from src.tensor_core import (Tensor, add, attention, concat, embedding, gelu, l2_normalize, layer_norm,
                             linear)

logger = logging.getLogger(__name__)

# Additive attention bias that hides padding keys; exp() of it underflows to 0
MASKED_LOGIT = -1e9


def default_words() -> List[str]:
    """All words the scene generator can emit, specials first, the rest sorted."""
    words = set(COLORS) | set(SHAPES) | set(SIZE_WORDS.values()) | set(POSITION_WORDS)
    for template in CAPTION_TEMPLATES + [PROMPT_TEMPLATE]:
        words.update(w for w in template.split() if not w.startswith("{"))
    return [PAD_TOKEN, EOS_TOKEN] + sorted(words)


class Vocabulary:
    """Fixed word-level vocabulary; line number in vocab.txt is the token id."""

    def __init__(self, words: Sequence[str], max_len: int = MAX_TOKENS):
        if list(words[:2]) != [PAD_TOKEN, EOS_TOKEN]:
            raise ConfigurationError(f"vocabulary must start with {PAD_TOKEN}, {EOS_TOKEN}")
        if len(set(words)) != len(words):
            raise ConfigurationError("vocabulary contains duplicate words")
        self.words = list(words)
        self.ids = {w: i for i, w in enumerate(self.words)}
        self.max_len = max_len

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(default_words())

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "Vocabulary":
        with open(path, "r", encoding="utf-8") as f:
            return cls([line.rstrip("\n") for line in f if line.strip()])

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(self.words) + "\n")

    @property
    def pad_id(self) -> int:
        return self.ids[PAD_TOKEN]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS_TOKEN]

    def __len__(self) -> int:
        return len(self.words)

    def tokenize(self, text: str) -> np.ndarray:
        """Lowercase, split on whitespace, map to ids, append EOS, pad to max_len."""
        words = text.lower().split()
        if len(words) + 1 > self.max_len:
            raise ContractError(f"text has {len(words)} words, at most {self.max_len - 1} fit: {text!r}")
        ids = []
        for word in words:
            if word not in self.ids:
                raise VocabularyError(word)
            ids.append(self.ids[word])
        ids.append(self.eos_id)
        ids.extend([self.pad_id] * (self.max_len - len(ids)))
        return np.array(ids, dtype=np.int64)

    def tokenize_batch(self, texts: Iterable[str]) -> np.ndarray:
        return np.stack([self.tokenize(t) for t in texts])


def tokenize(text: str, vocab: Optional[Vocabulary] = None) -> np.ndarray:
    return (vocab or Vocabulary.default()).tokenize(text)


@dataclass
class ModelConfig:
    """Dual-encoder shape; defaults are the CPU-trainable toy configuration."""
    d: int = 64
    d_text: int = 64
    d_vision: int = 64
    n_text_layers: int = 2
    n_image_layers: int = 4
    n_heads: int = 4
    patch: int = 8
    image_size: int = IMAGE_SIZE
    max_len: int = MAX_TOKENS
    vocab_size: int = 64
    mlp_ratio: int = 4
    eps: float = 1e-5
    init_std: float = 0.02
    normalize: bool = True

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ConfigurationError(f"image size {self.image_size} not divisible by patch {self.patch}")
        for width in (self.d_text, self.d_vision):
            if width % self.n_heads:
                raise ConfigurationError(f"width {width} not divisible by {self.n_heads} heads")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelConfig":
        known = {k: v for k, v in values.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class BlockParams:
    """Pre-norm transformer block: self-attention then GELU MLP, both residual."""
    ln1_w: Tensor
    ln1_b: Tensor
    w_qkv: Tensor
    b_qkv: Tensor
    w_out: Tensor
    b_out: Tensor
    ln2_w: Tensor
    ln2_b: Tensor
    w_fc1: Tensor
    b_fc1: Tensor
    w_fc2: Tensor
    b_fc2: Tensor

    @classmethod
    def create(cls, width: int, mlp_ratio: int, rng: np.random.Generator, std: float) -> "BlockParams":
        hidden = width * mlp_ratio
        return cls(
            ln1_w=Tensor(np.ones(width)), ln1_b=Tensor(np.zeros(width)),
            w_qkv=Tensor(rng.normal(0.0, std, (width, 3 * width))), b_qkv=Tensor(np.zeros(3 * width)),
            w_out=Tensor(rng.normal(0.0, std, (width, width))), b_out=Tensor(np.zeros(width)),
            ln2_w=Tensor(np.ones(width)), ln2_b=Tensor(np.zeros(width)),
            w_fc1=Tensor(rng.normal(0.0, std, (width, hidden))), b_fc1=Tensor(np.zeros(hidden)),
            w_fc2=Tensor(rng.normal(0.0, std, (hidden, width))), b_fc2=Tensor(np.zeros(width)),
        )

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.__dataclass_fields__:
            yield name, getattr(self, name)


@dataclass
class TextEncoderParams:
    tok_embed: Tensor
    pos_embed: Tensor
    blocks: List[BlockParams]
    ln_f_w: Tensor
    ln_f_b: Tensor
    proj: Tensor

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "TextEncoderParams":
        std, width = config.init_std, config.d_text
        return cls(
            tok_embed=Tensor(rng.normal(0.0, std, (config.vocab_size, width))),
            pos_embed=Tensor(rng.normal(0.0, std, (config.max_len, width))),
            blocks=[BlockParams.create(width, config.mlp_ratio, rng, std) for _ in range(config.n_text_layers)],
            ln_f_w=Tensor(np.ones(width)),
            ln_f_b=Tensor(np.zeros(width)),
            proj=Tensor(rng.normal(0.0, width ** -0.5, (width, config.d))),
        )

    def named_tensors(self, prefix: str = "backbone.text") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.tok_embed", self.tok_embed
        yield f"{prefix}.pos_embed", self.pos_embed
        for i, block in enumerate(self.blocks):
            for name, tensor in block.named_tensors():
                yield f"{prefix}.blocks.{i}.{name}", tensor
        yield f"{prefix}.ln_f_w", self.ln_f_w
        yield f"{prefix}.ln_f_b", self.ln_f_b
        yield f"{prefix}.proj", self.proj


@dataclass
class ImageEncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    pos_embed: Tensor
    blocks: List[BlockParams]
    ln_f_w: Tensor
    ln_f_b: Tensor
    proj: Tensor

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator) -> "ImageEncoderParams":
        std, width = config.init_std, config.d_vision
        patch_dim = config.patch * config.patch * 3
        return cls(
            patch_w=Tensor(rng.normal(0.0, patch_dim ** -0.5, (patch_dim, width))),
            patch_b=Tensor(np.zeros(width)),
            cls_token=Tensor(rng.normal(0.0, std, (1, width))),
            pos_embed=Tensor(rng.normal(0.0, std, (config.n_patches + 1, width))),
            blocks=[BlockParams.create(width, config.mlp_ratio, rng, std) for _ in range(config.n_image_layers)],
            ln_f_w=Tensor(np.ones(width)),
            ln_f_b=Tensor(np.zeros(width)),
            proj=Tensor(rng.normal(0.0, width ** -0.5, (width, config.d))),
        )

    def named_tensors(self, prefix: str = "backbone.image") -> Iterator[Tuple[str, Tensor]]:
        yield f"{prefix}.patch_w", self.patch_w
        yield f"{prefix}.patch_b", self.patch_b
        yield f"{prefix}.cls_token", self.cls_token
        yield f"{prefix}.pos_embed", self.pos_embed
        for i, block in enumerate(self.blocks):
            for name, tensor in block.named_tensors():
                yield f"{prefix}.blocks.{i}.{name}", tensor
        yield f"{prefix}.ln_f_w", self.ln_f_w
        yield f"{prefix}.ln_f_b", self.ln_f_b
        yield f"{prefix}.proj", self.proj


def transformer_block(x: Tensor, block: BlockParams, n_heads: int, eps: float,
                      attn_bias: Optional[np.ndarray] = None) -> Tensor:
    width = x.shape[-1]
    h = layer_norm(x, eps, block.ln1_w, block.ln1_b)
    qkv = linear(h, block.w_qkv, block.b_qkv)
    q, k, v = qkv[..., :width], qkv[..., width:2 * width], qkv[..., 2 * width:]
    x = x + linear(attention(q, k, v, n_heads, attn_bias), block.w_out, block.b_out)
    h = layer_norm(x, eps, block.ln2_w, block.ln2_b)
    h = linear(gelu(linear(h, block.w_fc1, block.b_fc1)), block.w_fc2, block.b_fc2)
    return x + h


def encode_text(params: TextEncoderParams, toks: np.ndarray, config: ModelConfig,
                normalize: Optional[bool] = None) -> Tensor:
    """Joint-space feature pooled at the EOS position.

    ``toks`` is one token sequence [L] or a batch [b, L]; the result is [d] or [b, d].
    """
    toks = np.asarray(toks, dtype=np.int64)
    single = toks.ndim == 1
    if single:
        toks = toks[None]
    b, length = toks.shape
    if length > params.pos_embed.shape[0]:
        raise DimensionError("encode_text", toks.shape, params.pos_embed.shape)
    # pad is id 0 and EOS id 1 in every vocabulary built here
    is_eos = toks == 1
    if not np.all(is_eos.sum(axis=1) == 1):
        raise ContractError("every token sequence needs exactly one end-of-sequence token")

    x = embedding(params.tok_embed, toks) + params.pos_embed[:length]
    key_bias = np.where(toks == 0, MASKED_LOGIT, 0.0)[:, None, None, :]
    for block in params.blocks:
        x = transformer_block(x, block, config.n_heads, config.eps, key_bias)
    x = layer_norm(x, config.eps, params.ln_f_w, params.ln_f_b)

    pooled = x[np.arange(b), np.argmax(is_eos, axis=1)]
    y = linear(pooled, params.proj)
    if (config.normalize if normalize is None else normalize):
        y = l2_normalize(y)
    return y[0] if single else y


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[b, H, W, 3] uint8 -> [b, (H/p)(W/p), p*p*3] floats scaled to [-1, 1], row-major patches."""
    b, height, width, channels = images.shape
    gh, gw = height // patch, width // patch
    x = images.astype(np.float64) / 127.5 - 1.0
    x = x.reshape(b, gh, patch, gw, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch * patch * channels))


def encode_image(params: ImageEncoderParams, images: np.ndarray, config: ModelConfig,
                 instruction: Optional[Union[Tensor, np.ndarray]] = None,
                 adapter: Optional[AdapterState] = None, normalize: Optional[bool] = None,
                 trace: Optional[List[Tuple[int, ...]]] = None) -> Tensor:
    """Joint-space image feature, optionally conditioned on an instruction feature.

    Without an adapter this is the plain transformer forward. With one, every
    layer selected by the adapter mask first passes its token stream through
    ``adapter_forward``. Tokens are laid out as M image tokens followed by the
    class token, which is pooled. ``trace`` collects the stream shape entering
    each block.
    """
    if (instruction is None) != (adapter is None):
        raise ConfigurationError("instruction and adapter must be given together")
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    expected = (config.image_size, config.image_size, 3)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError("encode_image", images.shape, expected)
    if adapter is not None and adapter.n_layers != len(params.blocks):
        raise ConfigurationError(f"adapter mask has {adapter.n_layers} layers, encoder has {len(params.blocks)}")

    b = images.shape[0]
    m = config.n_patches
    tokens = linear(Tensor(patchify(images, config.patch)), params.patch_w, params.patch_b)
    cls = add(Tensor(np.zeros((b, 1, config.d_vision))), params.cls_token)
    x = concat([tokens, cls], axis=1) + params.pos_embed

    if instruction is not None:
        instruction = instruction if isinstance(instruction, Tensor) else Tensor(instruction)
        if instruction.ndim == 1:
            instruction = instruction.reshape(1, instruction.shape[0])
        if instruction.shape[0] != b:
            raise DimensionError("encode_image", images.shape, instruction.shape)

    for i, block in enumerate(params.blocks):
        if adapter is not None and adapter.mask[i]:
            x = adapter_forward(adapter, i, x, instruction, n_other=1)
        if trace is not None:
            trace.append(x.shape)
        x = transformer_block(x, block, config.n_heads, config.eps)
    x = layer_norm(x, config.eps, params.ln_f_w, params.ln_f_b)

    y = linear(x[:, m], params.proj)
    if (config.normalize if normalize is None else normalize):
        y = l2_normalize(y)
    return y[0] if single else y
