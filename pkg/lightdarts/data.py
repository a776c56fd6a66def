"""
Feature files, manifests, deterministic batching and the synthetic corpus.

Feature file layout (little-endian)::

    bytes 0-3   magic "FAFD"
    u32         version (1)
    u32         T, frame count
    u32         F, feature dimension
    T*F float32 row-major values
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .exceptions import DatasetError, FeatureFormatError, ManifestError
from .models import LABEL_INDEX, ManifestEntry
from .seeding import rng_for

logger = logging.getLogger(__name__)

MAGIC = b"FAFD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")
# 2**28 float32 values is 1 GiB, far beyond any utterance
MAX_ELEMENTS = 2**28

GENERATOR_VERSION = "1"
SPLITS = ("train", "val", "eval")

FEATURE_DIMS = {"desk": 16, "wav2vec": 512, "wav2vec2-base": 768, "wav2vec2-large": 1024}

PathLike = Union[str, Path]


class FeatureMatrix(BaseModel):
    """T x F feature matrix of one utterance."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray

    @field_validator("values")
    @classmethod
    def validate_values(cls, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"features must be a non-empty T x F matrix, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("features contain NaN or Inf")
        return values

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def dims(self) -> int:
        return self.values.shape[1]


def store_feature(matrix: FeatureMatrix, path: PathLike) -> None:
    values = np.ascontiguousarray(matrix.values, dtype="<f4")
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, matrix.frames, matrix.dims)
    Path(path).write_bytes(header + values.tobytes())


def load_feature(path: PathLike) -> FeatureMatrix:
    """
    Read a feature file.

    Raises:
        FeatureFormatError: On bad magic or version, dimension overflow, or a
            payload that does not match the header
    """
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FeatureFormatError(f"{path}: bad magic, not a FAFD feature file")
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(f"{path}: truncated header, {len(raw)} bytes")
    _, version, frames, dims = _HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if frames < 1 or dims < 1 or frames * dims > MAX_ELEMENTS:
        raise FeatureFormatError(f"{path}: dimension overflow, header claims T={frames} F={dims}")
    expected = frames * dims * 4
    payload = len(raw) - _HEADER.size
    if payload < expected:
        raise FeatureFormatError(
            f"{path}: truncated payload, {payload} bytes for {frames}x{dims} float32 values"
        )
    if payload > expected:
        raise FeatureFormatError(f"{path}: {payload - expected} trailing bytes after payload")
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(frames, dims)
    try:
        return FeatureMatrix(values=values.astype(np.float32))
    except ValidationError:
        raise FeatureFormatError(f"{path}: payload contains NaN or Inf") from None


def fix_frames(matrix: FeatureMatrix, target: int = 400) -> FeatureMatrix:
    """Truncate to the first ``target`` frames, or repeat the utterance cyclically."""
    if target < 1:
        raise ValueError(f"frame target must be positive, got {target}")
    if matrix.frames == target:
        return matrix
    rows = np.arange(target) % matrix.frames
    return FeatureMatrix(values=matrix.values[rows])


def load_manifest(path: PathLike) -> List[ManifestEntry]:
    """
    Read a ``utt_id<TAB>path<TAB>label`` manifest.

    Raises:
        ManifestError: With the line number of the first bad line
    """
    entries: List[ManifestEntry] = []
    seen: Dict[str, int] = {}
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.split("\n"), start=1):
        if not line.strip():
            continue
        fields = line.rstrip("\r").split("\t")
        if len(fields) != 3:
            raise ManifestError(f"expected 3 tab-separated fields, got {len(fields)}", line_no)
        utt_id, rel_path, label = fields
        if label not in ("bonafide", "spoof", "unknown"):
            raise ManifestError(f"unknown label {label!r}", line_no)
        if utt_id in seen:
            raise ManifestError(
                f"duplicate utt_id {utt_id!r} (first on line {seen[utt_id]})", line_no
            )
        try:
            entries.append(ManifestEntry(utt_id=utt_id, path=rel_path, label=label))
        except ValidationError as exc:
            raise ManifestError(exc.errors()[0]["msg"], line_no) from None
        seen[utt_id] = line_no
    return entries


def write_manifest(entries: Sequence[ManifestEntry], path: PathLike) -> None:
    lines = [f"{e.utt_id}\t{e.path}\t{e.label}\n" for e in entries]
    Path(path).write_text("".join(lines), encoding="utf-8")


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    utt_ids: List[str]
    index: int


class Dataset:
    """Manifest entries plus frame-fixed, cached features."""

    def __init__(self, entries: Sequence[ManifestEntry], root: PathLike, frames: int = 40):
        if frames < 1:
            raise ValueError(f"frame target must be positive, got {frames}")
        self.entries = list(entries)
        self.root = Path(root)
        self.frames = frames
        self._cache: Dict[int, np.ndarray] = {}

    @classmethod
    def from_manifest(cls, path: PathLike, frames: int = 40) -> "Dataset":
        return cls(load_manifest(path), Path(path).parent, frames)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def utt_ids(self) -> List[str]:
        return [e.utt_id for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        """Class indices; -1 marks unlabeled entries."""
        return np.array([LABEL_INDEX.get(e.label, -1) for e in self.entries], dtype=np.int64)

    @property
    def labeled(self) -> bool:
        return bool(self.entries) and all(e.labeled for e in self.entries)

    @property
    def feature_dim(self) -> int:
        if not self.entries:
            raise DatasetError("empty dataset has no feature dimension")
        return self.features(0).shape[1]

    def features(self, index: int) -> np.ndarray:
        """Frame-fixed (T, F) float64 features of entry ``index``."""
        cached = self._cache.get(index)
        if cached is not None:
            return cached
        entry = self.entries[index]
        try:
            matrix = fix_frames(load_feature(self.root / entry.path), self.frames)
        except (FeatureFormatError, OSError) as exc:
            raise DatasetError(str(exc), entry.utt_id) from exc
        values = matrix.values.astype(np.float64)
        self._cache[index] = values
        return values

    def batch(self, indices: Sequence[int], batch_index: int = 0) -> Batch:
        feats = [self.features(i) for i in indices]
        dims = {f.shape[1] for f in feats}
        if len(dims) > 1:
            raise DatasetError(f"mixed feature dimensions {sorted(dims)} in one batch")
        labels = self.labels[list(indices)]
        utt_ids = [self.entries[i].utt_id for i in indices]
        return Batch(np.stack(feats), labels, utt_ids, batch_index)


def permutation(size: int, seed: int, epoch: int) -> np.ndarray:
    return rng_for(seed, epoch).permutation(size)


def batches(
    dataset: Dataset, batch_size: int, seed: int, epoch: int, shuffle: bool = True
) -> Iterator[Batch]:
    """
    Deterministic mini-batches; the order is a pure function of (seed, epoch).

    Every entry appears exactly once per epoch; the last batch may be short.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be at least 1, got {batch_size}")
    order = permutation(len(dataset), seed, epoch) if shuffle else np.arange(len(dataset))
    for batch_index, start in enumerate(range(0, len(order), batch_size)):
        yield dataset.batch(order[start : start + batch_size].tolist(), batch_index)


def _ridge(rng: np.random.Generator, frames: int, dims: int) -> np.ndarray:
    centre = rng.uniform(2.0, dims - 3.0)
    swing = rng.uniform(0.5, 2.0)
    cycles = rng.uniform(0.5, 2.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    t = np.arange(frames)[:, None]
    f = np.arange(dims)[None, :]
    path = centre + swing * np.sin(2 * np.pi * cycles * t / frames + phase)
    return 2.0 * np.exp(-((f - path) ** 2) / (2 * 1.5**2))


def synthetic_utterance(
    rng: np.random.Generator,
    spoof: bool,
    frames: int,
    dims: int,
    artifact_amplitude: float = 1.0,
    noise_sigma: float = 0.5,
) -> np.ndarray:
    """
    Smooth spectral ridge plus white noise; spoofed utterances add a
    (-1)**(t+f) checkerboard of ``artifact_amplitude``.
    """
    values = _ridge(rng, frames, dims) + noise_sigma * rng.standard_normal((frames, dims))
    if spoof:
        t = np.arange(frames)[:, None]
        f = np.arange(dims)[None, :]
        values = values + artifact_amplitude * np.where((t + f) % 2 == 0, 1.0, -1.0)
    return values.astype(np.float32)


def artifact_energy(values: np.ndarray) -> float:
    """Mean squared residual after a 3x3 mean filter; high for checkerboard artifacts."""
    padded = np.pad(np.asarray(values, dtype=np.float64), 1, mode="edge")
    smooth = sliding_window_view(padded, (3, 3)).mean(axis=(-2, -1))
    return float(np.mean((values - smooth) ** 2))


def gen_synthetic(
    out_dir: PathLike,
    n_per_split: Union[int, Mapping[str, int]] = 200,
    frames: int = 40,
    dims: int = 16,
    seed: int = 0,
    artifact_amplitude: float = 1.0,
    noise_sigma: float = 0.5,
) -> Dict[str, Path]:
    """
    Write train/val/eval manifests and their feature files.

    Labels alternate bonafide/spoof, so even split sizes are balanced. Output
    is a pure function of the arguments.

    Args:
        out_dir: Output directory, created if needed
        n_per_split: Utterances per split, or a per-split mapping
        frames: T, at least 8
        dims: F, at least 8
        seed: Generator seed
        artifact_amplitude: Checkerboard amplitude of spoofed utterances
        noise_sigma: White-noise standard deviation

    Returns:
        Manifest path per split
    """
    if frames < 8 or dims < 8:
        raise ValueError(f"synthetic features need T >= 8 and F >= 8, got T={frames} F={dims}")
    sizes = (
        {split: int(n_per_split) for split in SPLITS}
        if isinstance(n_per_split, int)
        else {split: int(n_per_split.get(split, 0)) for split in SPLITS}
    )
    if any(size < 1 for size in sizes.values()):
        raise ValueError(f"every split needs at least one utterance, got {sizes}")

    out = Path(out_dir)
    manifests: Dict[str, Path] = {}
    for split_index, split in enumerate(SPLITS):
        feature_dir = out / "features" / split
        feature_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for i in range(sizes[split]):
            utt_id = f"{split}_{i:05d}"
            spoof = i % 2 == 1
            rng = rng_for(seed, split_index, i)
            values = synthetic_utterance(rng, spoof, frames, dims, artifact_amplitude, noise_sigma)
            rel_path = f"features/{split}/{utt_id}.fafd"
            store_feature(FeatureMatrix(values=values), out / rel_path)
            entries.append(
                ManifestEntry(utt_id=utt_id, path=rel_path, label="spoof" if spoof else "bonafide")
            )
        manifests[split] = out / f"{split}.tsv"
        write_manifest(entries, manifests[split])
        logger.info(f"Wrote {len(entries)} {split} utterances to {manifests[split]}")
    return manifests


def resolve_feature_dim(value: Optional[Union[int, str]]) -> Optional[int]:
    """Accept an integer or a preset name (desk, wav2vec, wav2vec2-base, wav2vec2-large)."""
    if value is None or isinstance(value, int):
        return value
    if value in FEATURE_DIMS:
        return FEATURE_DIMS[value]
    try:
        return int(value)
    except ValueError:
        raise ValueError(
            f"unknown feature dimension {value!r}; use an integer or one of {sorted(FEATURE_DIMS)}"
        ) from None
