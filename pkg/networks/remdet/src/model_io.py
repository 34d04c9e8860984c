"""Architecture documents (JSON) and the RMDT binary weights format.

RMDT layout, all integers little-endian::

    magic "RMDT" | version u32 | record count u32
    per record: name_len u16 | name utf-8 | dtype u8 (0=f32, 1=f64) | rank u8
                | dims u32 x rank | raw little-endian scalars

Records are written in parameter-tree order, so saving a model twice yields
identical bytes.
"""

import json
import struct
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from networks.remdet.src.blocks import Model, assign_tensor, build_backbone, resolve_stages
from networks.remdet.src.config import settings
from networks.remdet.src.errors import (
    BadMagicError,
    ConfigSyntaxError,
    InvalidConfigError,
    ShapeMismatchError,
    TruncatedFileError,
    UnknownBlockKindError,
    VersionUnsupportedError,
)
from networks.remdet.src.tensor import Tensor, to_numpy_dtype
from shared.models import BlockKind, DType, ModelCfg
from shared.monitoring import get_logger

logger = get_logger(__name__)

MAGIC = b"RMDT"
FORMAT_VERSION = 1
CONFIG_SUFFIXES = (".json", ".cfg")

DTYPE_CODES = {DType.F32: 0, DType.F64: 1}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}
WIRE_DTYPES = {DType.F32: np.dtype("<f4"), DType.F64: np.dtype("<f8")}

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_META = struct.Struct("<BB")
_DIM = struct.Struct("<I")

BLOCK_KINDS = frozenset(
    {"conv_module", "convffn", "mult", "repdw", "gatedffn", "ced", "bottleneck", "c2f"}
)
# Shorthand accepted in explicit block lists
CHANNEL_C2F_DEFAULTS = {"kind": "c2f", "e_overall": 1.0, "e_bottleneck": 0.25}


# Architecture documents


def _document_path(loc: Sequence[int | str]) -> str:
    """Dotted document path from a pydantic error location, minus union tags."""
    parts: list[str] = []
    for index, part in enumerate(loc):
        after_index = index > 0 and isinstance(loc[index - 1], int)
        if isinstance(part, str) and after_index and part in BLOCK_KINDS:
            continue
        parts.append(str(part))
    return ".".join(parts)


def _check_block_kinds(document: dict[str, Any]) -> None:
    stages = document.get("stages")
    if not isinstance(stages, list):
        return
    known_stage_kinds = {kind.value for kind in BlockKind}
    for index, stage in enumerate(stages):
        if not isinstance(stage, dict):
            continue
        kind = stage.get("block_kind")
        if kind is not None and kind not in known_stage_kinds:
            raise UnknownBlockKindError(
                f"unknown block kind {kind!r}; expected one of {sorted(known_stage_kinds)}",
                f"stages.{index}.block_kind",
            )
        blocks = stage.get("blocks")
        if not isinstance(blocks, list):
            continue
        for position, block in enumerate(blocks):
            if not isinstance(block, dict):
                continue
            kind = block.get("kind")
            if kind == "channel_c2f":
                blocks[position] = {**block, **CHANNEL_C2F_DEFAULTS}
            elif kind not in BLOCK_KINDS:
                raise UnknownBlockKindError(
                    f"unknown block kind {kind!r}; expected one of {sorted(BLOCK_KINDS)}",
                    f"stages.{index}.blocks.{position}.kind",
                )


def parse_config(text: str) -> ModelCfg:
    """Parse and validate a JSON architecture document.

    Raises:
        ConfigSyntaxError: Not well-formed JSON, or not a JSON object
        UnknownBlockKindError: A block kind is not recognised
        WidthMismatchError: Stage or block widths do not chain
        InvalidConfigError: Any other schema violation, with its document path

    """
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        error_msg = f"malformed JSON at line {e.lineno} column {e.colno}: {e.msg}"
        logger.error(error_msg)
        raise ConfigSyntaxError(error_msg) from e
    if not isinstance(document, dict):
        error_msg = f"config must be a JSON object, got {type(document).__name__}"
        logger.error(error_msg)
        raise ConfigSyntaxError(error_msg)

    try:
        _check_block_kinds(document)
        cfg = ModelCfg.model_validate(document)
        resolve_stages(cfg)
    except ValidationError as e:
        first = e.errors()[0]
        path = _document_path(first["loc"])
        error_msg = f"{path}: {first['msg']}"
        logger.error(f"Invalid config: {error_msg}")
        raise InvalidConfigError(first["msg"], path) from e
    except InvalidConfigError as e:
        logger.error(f"Invalid config: {e}")
        raise
    return cfg


def resolve_config_path(name_or_path: str | Path) -> Path:
    """A path that exists as given, or a bundled config named by its stem.

    ``remdet-tiny-desk``, ``remdet-tiny-desk.cfg`` and ``remdet-tiny-desk.json``
    all resolve to the bundled ``remdet-tiny-desk.json``.
    """
    candidate = Path(name_or_path)
    if candidate.is_file():
        return candidate
    stem = candidate.name
    for suffix in CONFIG_SUFFIXES:
        stem = stem.removesuffix(suffix)
    bundled = Path(settings.configs_directory) / f"{stem}.json"
    if bundled.is_file():
        return bundled
    error_msg = f"config {name_or_path} not found (also looked for {bundled})"
    logger.error(error_msg)
    raise FileNotFoundError(error_msg)


def load_config(name_or_path: str | Path) -> ModelCfg:
    path = resolve_config_path(name_or_path)
    cfg = parse_config(path.read_text(encoding="utf-8"))
    logger.info(f"Loaded config {cfg.name} from {path}")
    return cfg


def dump_config(cfg: ModelCfg) -> str:
    """Canonical JSON text that parses back to an equal config."""
    return json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n"


def save_config(cfg: ModelCfg, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
    logger.info(f"Saved config {cfg.name} to {path}")


# Weights


def encode_weights(named: Iterable[tuple[str, Tensor]]) -> bytes:
    """Serialize (name, tensor) records in the given order."""
    records = []
    seen: set[str] = set()
    for name, tensor in named:
        if name in seen:
            raise ShapeMismatchError(f"duplicate tensor name {name}")
        seen.add(name)
        encoded = name.encode("utf-8")
        parts = [
            _NAME_LEN.pack(len(encoded)),
            encoded,
            _META.pack(DTYPE_CODES[tensor.dtype], tensor.ndim),
            *(_DIM.pack(extent) for extent in tensor.shape),
            tensor.numpy().astype(WIRE_DTYPES[tensor.dtype]).tobytes(),
        ]
        records.append(b"".join(parts))
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(records)) + b"".join(records)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise TruncatedFileError(
                f"file ends at byte {len(self.data)} while reading {what} "
                f"({size} bytes from offset {self.offset})"
            )
        chunk = self.data[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, layout: struct.Struct, what: str) -> tuple[Any, ...]:
        return layout.unpack(self.take(layout.size, what))


def decode_weights(data: bytes) -> dict[str, Tensor]:
    """Parse RMDT bytes into tensors, in file order.

    Raises:
        BadMagicError: The file does not start with "RMDT"
        VersionUnsupportedError: Version other than 1
        TruncatedFileError: The file ends early or carries trailing bytes

    """
    if data[:4] != MAGIC:
        if len(data) < len(MAGIC) and MAGIC.startswith(data):
            raise TruncatedFileError(f"file holds only {len(data)} bytes")
        raise BadMagicError(f"expected magic {MAGIC!r}, found {data[:4]!r}")
    reader = _Reader(data)
    _, version, count = reader.unpack(_HEADER, "header")
    if version != FORMAT_VERSION:
        raise VersionUnsupportedError(
            f"weights format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    tensors: dict[str, Tensor] = {}
    for record in range(count):
        (name_len,) = reader.unpack(_NAME_LEN, f"record {record} name length")
        raw_name = reader.take(name_len, f"record {record} name")
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TruncatedFileError(f"record {record} name is not valid UTF-8") from e
        code, rank = reader.unpack(_META, f"{name} dtype and rank")
        if code not in CODE_DTYPES:
            raise ShapeMismatchError(f"{name}: unknown dtype code {code}")
        dims = tuple(reader.unpack(_DIM, f"{name} dims")[0] for _ in range(rank))
        dtype = CODE_DTYPES[code]
        wire = WIRE_DTYPES[dtype]
        size = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = reader.take(size * wire.itemsize, f"{name} data")
        if name in tensors:
            raise ShapeMismatchError(f"duplicate tensor name {name}")
        array = np.frombuffer(payload, dtype=wire).reshape(dims)
        tensors[name] = Tensor(array.astype(to_numpy_dtype(dtype)))
    if reader.offset != len(data):
        trailing = len(data) - reader.offset
        raise TruncatedFileError(f"{trailing} trailing bytes after {count} records")
    return tensors


def save_weights(model: Model, path: str | Path) -> None:
    """Write every tensor of the model, running batch-norm statistics included."""
    payload = encode_weights(model.named_tensors())
    Path(path).write_bytes(payload)
    logger.info(f"Saved weights of {model.cfg.name} to {path} ({len(payload)} bytes)")


def load_weights(path: str | Path, cfg: ModelCfg) -> Model:
    """Build the model described by `cfg` and fill it from an RMDT file.

    Raises:
        ShapeMismatchError: Stored names, shapes or dtypes do not match `cfg`

    """
    stored = decode_weights(Path(path).read_bytes())
    model = build_backbone(cfg)
    expected = dict(model.named_tensors())
    missing = sorted(expected.keys() - stored.keys())
    unexpected = sorted(stored.keys() - expected.keys())
    if missing or unexpected:
        error_msg = (
            f"weights in {path} do not match {cfg.name}: "
            f"missing {missing[:5]}, unexpected {unexpected[:5]}"
        )
        logger.error(error_msg)
        raise ShapeMismatchError(error_msg)
    for name, tensor in stored.items():
        reference = expected[name]
        if tensor.shape != reference.shape or tensor.dtype != reference.dtype:
            error_msg = (
                f"{name}: stored {tensor.shape}/{tensor.dtype.value} but {cfg.name} expects "
                f"{reference.shape}/{reference.dtype.value}"
            )
            logger.error(error_msg)
            raise ShapeMismatchError(error_msg)
        assign_tensor(model.params, name, tensor)
    logger.info(f"Loaded {len(stored)} tensors into {cfg.name} from {path}")
    return model
