"""On-disk formats: versioned binary checkpoints, dataset JSONL, and the
JSON config file shared by the CLI subcommands.

Checkpoint layout (all integers little-endian unsigned 32-bit):

    magic b"TDLT" | version | l_h N_L N_h l_A l_I input_dim num_classes |
    tensors as little-endian float32 in canonical order | CRC-32

The CRC covers every byte before it. Total size is exactly
4 (magic) + 4 (version) + 28 (config) + 4 * param_count(config) + 4 (CRC).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geometry import BlockLabel, Box, Page, TextBlock
from .model import ModelConfig, ModelWeights, param_count, tensor_shapes
from .training import TrainConfig

CHECKPOINT_MAGIC = b"TDLT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI7I")


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class DatasetFormatError(ValueError):
    """A dataset JSONL line failed to parse or validate; names the line."""


def checkpoint_num_bytes(config: ModelConfig) -> int:
    return _HEADER.size + 4 * param_count(config) + 4


def save_checkpoint(weights: ModelWeights, config: ModelConfig, path: str | Path) -> None:
    """Write weights + config in the canonical binary layout."""
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        config.hidden_size,
        config.num_layers,
        config.num_heads,
        config.attention_out,
        config.embed_dim,
        config.input_dim,
        config.num_classes,
    )
    chunks = [header]
    for name in tensor_shapes(config):
        chunks.append(np.ascontiguousarray(weights[name], dtype="<f4").tobytes())
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, ModelConfig]:
    """Read a checkpoint, verifying magic, version, length, and CRC."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise LengthMismatchError(
            f"{path}: file holds {len(raw)} bytes, shorter than any valid checkpoint"
        )
    magic, version, l_h, n_l, n_h, l_a, l_i, input_dim, num_classes = _HEADER.unpack(
        raw[: _HEADER.size]
    )
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: magic {magic!r} != {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version} != {CHECKPOINT_VERSION}")
    try:
        config = ModelConfig(
            hidden_size=l_h,
            num_layers=n_l,
            num_heads=n_h,
            attention_out=l_a,
            embed_dim=l_i,
            input_dim=input_dim,
            num_classes=num_classes,
        )
    except ValueError as exc:
        raise CheckpointError(f"{path}: stored config is invalid: {exc}") from exc
    expected = checkpoint_num_bytes(config)
    if len(raw) != expected:
        raise LengthMismatchError(
            f"{path}: {len(raw)} bytes, expected {expected} for this config"
        )
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    actual_crc = zlib.crc32(raw[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"{path}: CRC {actual_crc:#010x} != stored {stored_crc:#010x}")

    weights = ModelWeights.zeros(config)
    offset = _HEADER.size
    for name, shape in tensor_shapes(config).items():
        n = int(np.prod(shape))
        flat = np.frombuffer(raw, dtype="<f4", count=n, offset=offset)
        weights[name] = flat.reshape(shape).astype(np.float64)
        offset += 4 * n
    return weights, config


def _block_to_dict(block: TextBlock) -> dict:
    out = {"x1": block.x1, "y1": block.y1, "x2": block.x2, "y2": block.y2}
    if block.label is not None:
        out["label"] = block.label.value
    return out


def page_to_dict(page: Page) -> dict:
    return {
        "page_id": page.page_id,
        "width": page.width,
        "height": page.height,
        "blocks": [_block_to_dict(b) for b in page.blocks],
        "tables": [list(t) for t in page.tables],
    }


_PAGE_KEYS = {"page_id", "width", "height", "blocks", "tables"}
_BLOCK_KEYS = {"x1", "y1", "x2", "y2", "label"}


def page_from_dict(data: dict) -> Page:
    """Strict parse of one dataset record; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ValueError(f"record must be a JSON object, got {type(data).__name__}")
    unknown = set(data) - _PAGE_KEYS
    if unknown:
        raise ValueError(f"unknown page fields: {sorted(unknown)}")
    missing = _PAGE_KEYS - set(data)
    if missing:
        raise ValueError(f"missing page fields: {sorted(missing)}")
    if not isinstance(data["blocks"], list) or not isinstance(data["tables"], list):
        raise ValueError("blocks and tables must be JSON arrays")
    blocks = []
    for i, b in enumerate(data["blocks"]):
        if not isinstance(b, dict):
            raise ValueError(f"block {i}: must be a JSON object")
        unknown = set(b) - _BLOCK_KEYS
        if unknown:
            raise ValueError(f"block {i}: unknown fields {sorted(unknown)}")
        label = None
        if "label" in b:
            try:
                label = BlockLabel(b["label"])
            except ValueError:
                raise ValueError(
                    f"block {i}: label {b['label']!r} is not one of "
                    f"{[lab.value for lab in BlockLabel]}"
                ) from None
        coords = []
        for key in ("x1", "y1", "x2", "y2"):
            if key not in b:
                raise ValueError(f"block {i}: missing coordinate {key}")
            v = float(b[key])
            if not np.isfinite(v):
                raise ValueError(f"block {i}: {key} is not finite")
            coords.append(v)
        blocks.append(TextBlock(*coords, label=label))
    tables = []
    for i, t in enumerate(data["tables"]):
        if len(t) != 4:
            raise ValueError(f"table {i}: expected 4 coordinates, got {len(t)}")
        box = tuple(float(v) for v in t)
        if not all(np.isfinite(v) for v in box):
            raise ValueError(f"table {i}: coordinates must be finite")
        tables.append(box)
    return Page(
        page_id=str(data["page_id"]),
        width=float(data["width"]),
        height=float(data["height"]),
        blocks=tuple(blocks),
        tables=tuple(tables),
    )


def write_pages(pages: Iterable[Page], path: str | Path) -> None:
    """Write pages as one compact JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for page in pages:
            fh.write(json.dumps(page_to_dict(page), separators=(",", ":")))
            fh.write("\n")


def read_pages(path: str | Path) -> list[Page]:
    """Read a dataset JSONL file; failures name the offending line."""
    pages = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip() == "":
                raise DatasetFormatError(f"{path}:{lineno}: blank line")
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            try:
                pages.append(page_from_dict(data))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from exc
    return pages


_MODEL_FIELDS = set(ModelConfig.__dataclass_fields__)
_TRAIN_FIELDS = set(TrainConfig.__dataclass_fields__)


def parse_config(text: str) -> tuple[ModelConfig, TrainConfig]:
    """Parse a flat JSON config holding model and training fields.

    Every key must match a ModelConfig or TrainConfig field name exactly;
    unknown keys are rejected. Missing fields keep their defaults.
    """
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(data) - _MODEL_FIELDS - _TRAIN_FIELDS
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    model_kwargs = {k: v for k, v in data.items() if k in _MODEL_FIELDS}
    train_kwargs = {k: v for k, v in data.items() if k in _TRAIN_FIELDS}
    return ModelConfig(**model_kwargs), TrainConfig(**train_kwargs)


def write_detections(results: Sequence, path: str | Path) -> None:
    """Write DetectionResult records as JSONL via their to_json_dict."""
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            fh.write(json.dumps(result.to_json_dict(), separators=(",", ":")))
            fh.write("\n")


def read_detections(path: str | Path) -> list[dict]:
    """Read a detection JSONL file into raw dicts (boxes stay lists)."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed JSON: {exc}") from exc
            if not isinstance(data, dict) or "page_id" not in data or "detections" not in data:
                raise DatasetFormatError(
                    f"{path}:{lineno}: record needs page_id and detections"
                )
            records.append(data)
    return records
