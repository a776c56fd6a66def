"""
Versioned binary model files.

Layout (little-endian)::

    bytes 0-3   magic "FADM"
    u32         version (1)
    u32 + bytes JSON configuration echo (ModelHeader)
    u32 + bytes genotype in canonical text form
    u32         tensor count
    per tensor: u32 + bytes name, u32 ndim, u32 * ndim shape, float64 values

Tensors are the network parameters in ``named_parameters`` order followed by
the frozen channel statistics.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .exceptions import GenotypeParseError, ModelFormatError
from .genotype import format_genotype, parse_genotype
from .layers import load_norm_statistics, norm_statistics
from .models import ModelHeader
from .supernet import DiscreteNetwork, instantiate_discrete

logger = logging.getLogger(__name__)

MAGIC = b"FADM"
FORMAT_VERSION = 1
_U32 = struct.Struct("<I")

PathLike = Union[str, Path]


def _pack_bytes(data: bytes) -> bytes:
    return _U32.pack(len(data)) + data


def encode_model(
    header: ModelHeader, genotype_text: str, tensors: List[Tuple[str, np.ndarray]]
) -> bytes:
    parts = [
        MAGIC,
        _U32.pack(FORMAT_VERSION),
        _pack_bytes(header.model_dump_json().encode("utf-8")),
        _pack_bytes(genotype_text.encode("utf-8")),
        _U32.pack(len(tensors)),
    ]
    for name, values in tensors:
        values = np.ascontiguousarray(values, dtype="<f8")
        parts.append(_pack_bytes(name.encode("utf-8")))
        parts.append(_U32.pack(values.ndim))
        parts.extend(_U32.pack(dim) for dim in values.shape)
        parts.append(values.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes, path: PathLike):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.raw):
            raise ModelFormatError(f"{self.path}: truncated model file")
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def decode_model(
    raw: bytes, path: PathLike = "<bytes>"
) -> Tuple[ModelHeader, str, Dict[str, np.ndarray]]:
    reader = _Reader(raw, path)
    if reader.take(4) != MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not a FADM model file")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: unsupported model version {version}")
    try:
        header = ModelHeader.model_validate_json(reader.blob())
    except ValidationError as exc:
        message = exc.errors()[0]["msg"]
        raise ModelFormatError(f"{path}: bad configuration echo: {message}") from None
    genotype_text = reader.blob().decode("utf-8")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = reader.blob().decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape)
        tensors[name] = values.astype(np.float64)
    if reader.offset != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - reader.offset} trailing bytes")
    return header, genotype_text, tensors


def save_model(net: DiscreteNetwork, path: PathLike, frames: int) -> None:
    """Write parameters, frozen statistics, genotype and configuration echo."""
    header = ModelHeader(
        feature_dim=net.feature_dim,
        frames=frames,
        cells=net.cell_count,
        channels=net.channels,
        seed=net.seed,
    )
    tensors = [(name, tensor.data) for name, tensor in net.named_parameters()]
    tensors.extend(sorted(norm_statistics(net).items()))
    Path(path).write_bytes(encode_model(header, format_genotype(net.genotype), tensors))
    logger.info(f"Saved model with {net.num_parameters()} parameters to {path}")


def load_model(path: PathLike) -> Tuple[DiscreteNetwork, ModelHeader]:
    """
    Rebuild the network from its genotype and load the stored tensors.

    Raises:
        ModelFormatError: If the file is corrupt or its tensors do not fit the
            network its genotype describes
    """
    header, genotype_text, tensors = decode_model(Path(path).read_bytes(), path)
    try:
        genotype = parse_genotype(genotype_text)
    except GenotypeParseError as exc:
        raise ModelFormatError(f"{path}: bad genotype: {exc}") from None
    net = instantiate_discrete(
        genotype, header.cells, header.channels, header.feature_dim, header.seed
    )

    expected = dict(net.named_parameters())
    stat_names = {name for name in tensors if name not in expected}
    missing = [name for name in expected if name not in tensors]
    if missing:
        raise ModelFormatError(
            f"{path}: model does not match its genotype; missing {len(missing)} tensors "
            f"(first: {missing[0]})"
        )
    for name, tensor in expected.items():
        if tensors[name].shape != tensor.shape:
            raise ModelFormatError(
                f"{path}: model does not match its genotype; {name} has shape "
                f"{tensors[name].shape}, expected {tensor.shape}"
            )
        tensor.data = tensors[name].copy()

    stats = {name: tensors[name] for name in stat_names}
    valid_stats = set(norm_statistics_names(net))
    unknown = sorted(stat_names - valid_stats)
    if unknown:
        raise ModelFormatError(
            f"{path}: model does not match its genotype; unknown tensor {unknown[0]}"
        )
    load_norm_statistics(net, stats)
    return net, header


def norm_statistics_names(net: DiscreteNetwork) -> List[str]:
    names = []
    for name, _ in net.named_parameters():
        if name.endswith(".gamma"):
            prefix = name[: -len("gamma")]
            names.extend([f"{prefix}frozen_mean", f"{prefix}frozen_var"])
    return names
