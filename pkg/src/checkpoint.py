"""
File: checkpoint.py
Purpose: Binary checkpoint format with frozen/trainable tags, FNV-1a trailer and JSON metadata sidecar
Version: 1.0.0
Last Updated: 2026-10-16
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from src.ag_adapter import AdapterConfig
from src.encoders import ModelConfig, Vocabulary
from src.exceptions import ContractError, CorruptCheckpointError
from src.model import GiveModel, is_frozen_name

logger = logging.getLogger(__name__)

MAGIC = b"GIVE"
FORMAT_VERSION = 1
DTYPE_F32 = 0
DTYPE_F64 = 1
_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8")}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


@dataclass
class Checkpoint:
    """Named tensors in file order plus the metadata kept in the sidecar."""
    tensors: Dict[str, np.ndarray]
    frozen: Dict[str, bool]
    dtypes: Dict[str, int] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    step: int = 0
    rng_state: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        for name in self.tensors:
            self.dtypes.setdefault(name, DTYPE_F64)
            if name not in self.frozen:
                raise ContractError(f"tensor {name!r} has no frozen flag")

    def backbone(self) -> Dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if self.frozen[n]}

    def trainable(self) -> Dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors.items() if not self.frozen[n]}

    def metadata(self) -> Dict[str, Any]:
        return {"format_version": FORMAT_VERSION, "config": self.config, "step": self.step,
                "rng_state": self.rng_state}


def meta_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(ckpt.tensors))]
    for name, array in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        dtype = ckpt.dtypes[name]
        array = np.asarray(array)
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BBB", dtype, int(ckpt.frozen[name]), array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Write the binary file and its ``.meta.json`` sidecar.

    Both are encoded up front and written under ``.tmp`` names, then renamed
    into place sidecar first; an encoding or write failure leaves any previous
    pair untouched.
    """
    path = Path(path)
    sidecar = meta_path(path)
    body = encode_checkpoint(ckpt)
    try:
        meta = json.dumps(ckpt.metadata(), indent=2, sort_keys=True) + "\n"
    except (TypeError, ValueError) as e:
        raise ContractError(f"checkpoint metadata for {path} is not JSON-serializable: {e}") from e

    staged = [(path.with_name(path.name + ".tmp"), path), (sidecar.with_name(sidecar.name + ".tmp"), sidecar)]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        staged[0][0].write_bytes(body)
        staged[1][0].write_text(meta, encoding="utf-8")
        staged[1][0].replace(sidecar)
        staged[0][0].replace(path)
    except OSError as e:
        for tmp, _ in staged:
            tmp.unlink(missing_ok=True)
        raise OSError(f"Failed to write checkpoint {path}: {e}") from e
    logger.debug(f"Saved checkpoint {path} ({len(ckpt.tensors)} tensors, step {ckpt.step})")
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptCheckpointError(self.path, f"truncated at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, path: Union[str, Path] = "<bytes>") -> Checkpoint:
    path = Path(path)
    if len(data) < len(MAGIC) + 16:
        raise CorruptCheckpointError(path, f"file too short ({len(data)} bytes)")
    if data[:4] != MAGIC:
        raise CorruptCheckpointError(path, f"bad magic {data[:4]!r}")
    body, trailer = data[:-8], data[-8:]
    expected = struct.unpack("<Q", trailer)[0]
    if fnv1a64(body) != expected:
        raise CorruptCheckpointError(path, "checksum mismatch")

    reader = _Reader(body, path)
    reader.take(4)
    version, count = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(path, f"unsupported version {version}")

    tensors: Dict[str, np.ndarray] = {}
    frozen: Dict[str, bool] = {}
    dtypes: Dict[str, int] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptCheckpointError(path, "tensor name is not UTF-8") from None
        dtype, flag, ndim = reader.unpack("<BBB")
        if dtype not in _DTYPES:
            raise CorruptCheckpointError(path, f"unknown dtype code {dtype} for {name}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n_bytes = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
        array = np.frombuffer(reader.take(n_bytes), dtype=_DTYPES[dtype]).reshape(shape).copy()
        tensors[name] = array
        frozen[name] = bool(flag)
        dtypes[name] = dtype
    if reader.pos != len(body):
        raise CorruptCheckpointError(path, f"{len(body) - reader.pos} trailing bytes")
    return Checkpoint(tensors=tensors, frozen=frozen, dtypes=dtypes)


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read and validate a checkpoint; metadata is taken from the sidecar when present."""
    path = Path(path)
    ckpt = decode_checkpoint(path.read_bytes(), path)
    sidecar = meta_path(path)
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise CorruptCheckpointError(sidecar, f"invalid metadata JSON: {e}") from e
        ckpt.config = meta.get("config", {})
        ckpt.step = int(meta.get("step", 0))
        ckpt.rng_state = meta.get("rng_state")
    return ckpt


def checkpoint_from_model(model: GiveModel, config: Optional[Dict[str, Any]] = None, step: int = 0,
                          rng: Optional[np.random.Generator] = None, dtype: int = DTYPE_F64) -> Checkpoint:
    """Snapshot a model; the config echo always carries the model and adapter shapes."""
    config = dict(config or {})
    config["model"] = model.config.to_dict()
    config["adapter"] = model.adapter.config.to_dict() if model.has_adapter else None
    config["vocab"] = list(model.vocab.words)
    tensors = {name: tensor.data.copy() for name, tensor in model.named_tensors()}
    return Checkpoint(
        tensors=tensors,
        frozen={name: is_frozen_name(name) for name in tensors},
        dtypes={name: dtype for name in tensors},
        config=config,
        step=step,
        rng_state=rng.bit_generator.state if rng is not None else None,
    )


def model_from_checkpoint(ckpt: Checkpoint, with_adapter: bool = True) -> GiveModel:
    """Rebuild a model with the checkpoint's shapes and copy its tensors in.

    ``with_adapter=False`` keeps only the backbone of an adapter checkpoint.
    """
    model_cfg = ModelConfig.from_dict(ckpt.config.get("model") or {})
    words = ckpt.config.get("vocab")
    vocab = Vocabulary(words) if words else Vocabulary.default()
    model = GiveModel.create(model_cfg, np.random.default_rng(0), vocab)
    adapter_cfg = ckpt.config.get("adapter")
    arrays = dict(ckpt.tensors)
    if adapter_cfg and with_adapter:
        model.attach_adapter(AdapterConfig.from_dict(adapter_cfg), np.random.default_rng(0))
    else:
        arrays = {n: a for n, a in arrays.items() if is_frozen_name(n)}
    model.load_arrays(arrays)
    return model
