"""
File: ag_adapter.py
Purpose: Attention-guided adapter that conditions image tokens on an instruction feature
Version: 1.0.0
Last Updated: 2026-10-16
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import ConfigurationError, ContractError, DimensionError
from src.tensor_core import Tensor, attention, concat, gelu, layer_norm, linear, matmul

logger = logging.getLogger(__name__)

INSERTION_MODES = ("early", "late", "sparse", "dense", "explicit")


def make_mask(mode: str, n_layers: int, explicit: Optional[Sequence[bool]] = None) -> Tuple[bool, ...]:
    """Map a fusion placement to a per-layer insertion mask.

    early = first ceil(n/2) layers, late = last floor(n/2), sparse = every other
    layer starting at 0, dense = all layers.
    """
    if n_layers < 1:
        raise ConfigurationError(f"n_layers must be >= 1, got {n_layers}")
    if mode == "dense":
        mask = [True] * n_layers
    elif mode == "early":
        cut = math.ceil(n_layers / 2)
        mask = [i < cut for i in range(n_layers)]
    elif mode == "late":
        cut = n_layers - n_layers // 2
        mask = [i >= cut for i in range(n_layers)]
    elif mode == "sparse":
        mask = [i % 2 == 0 for i in range(n_layers)]
    elif mode == "explicit":
        if explicit is None or len(explicit) != n_layers:
            raise ConfigurationError(f"explicit mask must list {n_layers} layers, got {explicit}")
        mask = [bool(v) for v in explicit]
    else:
        raise ConfigurationError(f"Unknown insertion mode: {mode!r} (expected one of {INSERTION_MODES})")
    if not any(mask):
        raise ConfigurationError(f"Insertion mode {mode!r} selects no layer out of {n_layers}")
    return tuple(mask)


@dataclass
class AdapterConfig:
    """Adapter hyperparameters; ``mask`` is only read for the explicit mode."""
    mode: str = "dense"
    d_mlp: int = 128
    n_heads: int = 4
    eps: float = 1e-5
    init_std: float = 0.02
    mask: Optional[Tuple[bool, ...]] = None

    def to_dict(self) -> Dict:
        return {"mode": self.mode, "d_mlp": self.d_mlp, "n_heads": self.n_heads, "eps": self.eps,
                "init_std": self.init_std, "mask": list(self.mask) if self.mask is not None else None}

    @classmethod
    def from_dict(cls, values: Dict) -> "AdapterConfig":
        values = dict(values)
        if values.get("mask") is not None:
            values["mask"] = tuple(bool(v) for v in values["mask"])
        return cls(**values)


@dataclass
class AdapterLayer:
    """Parameters of the adapter inserted before one encoder layer."""
    bridge_w1: Tensor
    bridge_b1: Tensor
    bridge_w2: Tensor
    bridge_b2: Tensor
    norm_w: Tensor
    norm_b: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    TENSOR_NAMES = ("bridge_w1", "bridge_b1", "bridge_w2", "bridge_b2", "norm_w", "norm_b",
                    "w_q", "w_k", "w_v", "w_o")

    @classmethod
    def create(cls, d: int, d_vision: int, d_mlp: int, rng: np.random.Generator,
               init_std: float = 0.02) -> "AdapterLayer":
        def normal(*shape):
            return Tensor(rng.normal(0.0, init_std, size=shape), requires_grad=True)

        return cls(
            bridge_w1=normal(d, d_mlp),
            bridge_b1=Tensor(np.zeros(d_mlp), requires_grad=True),
            bridge_w2=normal(d_mlp, d_vision),
            bridge_b2=Tensor(np.zeros(d_vision), requires_grad=True),
            norm_w=Tensor(np.ones(d_vision), requires_grad=True),
            norm_b=Tensor(np.zeros(d_vision), requires_grad=True),
            w_q=normal(d_vision, d_vision),
            w_k=normal(d_vision, d_vision),
            w_v=normal(d_vision, d_vision),
            # Zero output projection: inserting the adapter leaves the encoder unchanged
            w_o=Tensor(np.zeros((d_vision, d_vision)), requires_grad=True),
        )

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        for name in self.TENSOR_NAMES:
            yield name, getattr(self, name)


@dataclass
class AdapterState:
    """Per-insertion-layer adapter parameters plus the insertion mask."""
    config: AdapterConfig
    mask: Tuple[bool, ...]
    layers: Dict[int, AdapterLayer] = field(default_factory=dict)

    def __post_init__(self):
        if not any(self.mask):
            raise ConfigurationError("adapter mask selects no layer")
        if sorted(self.layers) != [i for i, on in enumerate(self.mask) if on]:
            raise ConfigurationError(
                f"adapter layers {sorted(self.layers)} do not match mask {list(self.mask)}")

    @classmethod
    def create(cls, config: AdapterConfig, n_layers: int, d: int, d_vision: int,
               rng: np.random.Generator) -> "AdapterState":
        if d_vision % config.n_heads:
            raise ConfigurationError(f"d_vision={d_vision} not divisible by {config.n_heads} heads")
        mask = make_mask(config.mode, n_layers, config.mask)
        layers = {i: AdapterLayer.create(d, d_vision, config.d_mlp, rng, config.init_std)
                  for i, on in enumerate(mask) if on}
        logger.debug(f"Adapter created on layers {sorted(layers)} ({config.mode})")
        return cls(config=config, mask=mask, layers=layers)

    @property
    def n_layers(self) -> int:
        return len(self.mask)

    def layer(self, index: int) -> AdapterLayer:
        if index < 0 or index >= len(self.mask) or not self.mask[index]:
            raise ContractError(f"layer {index} is not selected by adapter mask {list(self.mask)}")
        return self.layers[index]

    def named_tensors(self, prefix: str = "adapter.layers") -> Iterator[Tuple[str, Tensor]]:
        for index in sorted(self.layers):
            for name, tensor in self.layers[index].named_tensors():
                yield f"{prefix}.{index}.{name}", tensor


def _as_batched_instruction(y_o: Union[Tensor, np.ndarray]) -> Tuple[Tensor, bool]:
    y_o = y_o if isinstance(y_o, Tensor) else Tensor(y_o)
    if y_o.ndim == 1:
        return y_o.reshape(1, y_o.shape[0]), True
    return y_o, False


def mlp_bridge(state: AdapterState, layer: int, y_o: Union[Tensor, np.ndarray]) -> Tensor:
    """f^O = W2 GELU(W1 y^O + b1) + b2, shaped as a length-1 token sequence.

    A [d] instruction gives [1, d_v]; a [b, d] batch gives [b, 1, d_v].
    """
    params = state.layer(layer)
    y, single = _as_batched_instruction(y_o)
    if y.shape[-1] != params.bridge_w1.shape[0]:
        raise DimensionError("mlp_bridge", y.shape, params.bridge_w1.shape)
    hidden = gelu(linear(y, params.bridge_w1, params.bridge_b1))
    f_o = linear(hidden, params.bridge_w2, params.bridge_b2)
    f_o = f_o.reshape(f_o.shape[0], 1, f_o.shape[1])
    return f_o[0] if single else f_o


def adapter_forward(state: AdapterState, layer: int, f_v: Tensor, y_o: Union[Tensor, np.ndarray],
                    n_other: int = 1) -> Tensor:
    """Condition the token stream of one layer on the instruction feature.

    The stream holds M image tokens followed by ``n_other`` other tokens. Image
    tokens are layer-normalized and used as queries against the bridged
    instruction (single key/value token); the W_O-projected result is added
    back to the raw image tokens and the other tokens are appended unchanged.
    """
    params = state.layer(layer)
    single = f_v.ndim == 2
    stream = f_v.reshape(1, *f_v.shape) if single else f_v
    y, _ = _as_batched_instruction(y_o)
    b, t, d_v = stream.shape
    if d_v != params.w_q.shape[0] or t <= n_other or y.shape[0] != b:
        raise DimensionError("adapter_forward", f_v.shape, params.w_q.shape, y.shape)

    m = t - n_other
    f_i = stream[:, :m]
    f_h = stream[:, m:]
    f_o = mlp_bridge(state, layer, y)

    f_i_hat = layer_norm(f_i, state.config.eps, params.norm_w, params.norm_b)
    fused = attention(matmul(f_i_hat, params.w_q), matmul(f_o, params.w_k), matmul(f_o, params.w_v),
                      state.config.n_heads)
    f_i_cond = f_i + matmul(fused, params.w_o)
    out = concat([f_i_cond, f_h], axis=1) if n_other else f_i_cond
    return out[0] if single else out
