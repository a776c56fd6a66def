"""
Countermeasure scoring, EER and DET data, score files and embedding dumps.

A score is the bonafide logit minus the spoof logit; an utterance is accepted
as bonafide at threshold t when score >= t. Then

    FAR(t) = #{spoof >= t} / #spoof
    FRR(t) = #{bonafide < t} / #bonafide
"""

import csv
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .data import Dataset, batches
from .exceptions import EvaluationError, ScoreFileError
from .models import BONAFIDE, SPOOF, DetPoint, ManifestEntry, ScoreRecord
from .supernet import ArchParams, network_forward

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def score_batch(model, features, alpha: Optional[ArchParams] = None) -> np.ndarray:
    """Scores of a (B, T, F) batch."""
    logits = network_forward(model, features, alpha).logits.data
    return logits[:, BONAFIDE] - logits[:, SPOOF]


def score_utterance(model, features, alpha: Optional[ArchParams] = None) -> float:
    """
    Score of one (T, F) feature matrix.

    Raises:
        ShapeError: If F does not match the model
    """
    values = features.values if hasattr(features, "values") else np.asarray(features)
    values = np.asarray(values, dtype=np.float64)
    return float(score_batch(model, values[None], alpha)[0])


def score_dataset(
    model, dataset: Dataset, batch_size: int = 32, alpha: Optional[ArchParams] = None
) -> List[ScoreRecord]:
    """Score every entry in manifest order."""
    if not getattr(model, "frozen", True):
        logger.warning("Scoring with batch statistics; scores depend on batch composition")
    records: List[ScoreRecord] = []
    for batch in batches(dataset, batch_size, seed=0, epoch=0, shuffle=False):
        scores = score_batch(model, batch.features, alpha)
        for utt_id, score in zip(batch.utt_ids, scores):
            entry = dataset.entries[len(records)]
            records.append(ScoreRecord(utt_id=utt_id, score=float(score), label=entry.label))
    return records


def _split(records: Sequence[ScoreRecord]) -> Tuple[np.ndarray, np.ndarray]:
    bonafide = np.sort([r.score for r in records if r.label == "bonafide"])
    spoof = np.sort([r.score for r in records if r.label == "spoof"])
    if bonafide.size == 0 or spoof.size == 0:
        raise EvaluationError(
            f"need both classes, got {bonafide.size} bonafide and {spoof.size} spoof scores"
        )
    return bonafide.astype(np.float64), spoof.astype(np.float64)


def _operating_points(
    bonafide: np.ndarray, spoof: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    thresholds = np.concatenate(
        ([-np.inf], np.unique(np.concatenate((bonafide, spoof))), [np.inf])
    )
    far = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    frr = np.searchsorted(bonafide, thresholds, side="left") / bonafide.size
    return thresholds, far, frr


def det_points(records: Sequence[ScoreRecord]) -> List[DetPoint]:
    """One operating point per unique score, plus the -inf and +inf endpoints."""
    thresholds, far, frr = _operating_points(*_split(records))
    return [
        DetPoint(threshold=float(t), far=float(a), frr=float(r))
        for t, a, r in zip(thresholds, far, frr)
    ]


def compute_eer(records: Sequence[ScoreRecord]) -> Tuple[float, float]:
    """
    Equal error rate and its threshold.

    Walks the operating points in threshold order to the first one where
    FAR - FRR <= 0 and interpolates linearly with the previous point.

    Returns:
        (eer, threshold), eer as a fraction

    Raises:
        EvaluationError: If either class is missing
    """
    thresholds, far, frr = _operating_points(*_split(records))
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return float(far[k]), float(thresholds[k])
    lam = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = far[k - 1] + lam * (far[k] - far[k - 1])
    low, high = thresholds[k - 1], thresholds[k]
    if not np.isfinite(low):
        threshold = high
    elif not np.isfinite(high):
        threshold = low
    else:
        threshold = low + lam * (high - low)
    return float(eer), float(threshold)


def format_scores(records: Sequence[ScoreRecord]) -> str:
    return "".join(f"{r.utt_id} {r.score:.6f}\n" for r in records)


def parse_scores(text: str) -> List[ScoreRecord]:
    """
    Parse ``utt_id score`` lines; blank lines are ignored.

    Raises:
        ScoreFileError: With the number of the first malformed line
    """
    records: List[ScoreRecord] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 2:
            raise ScoreFileError(f"expected 'utt_id score', got {len(fields)} fields", line_no)
        try:
            records.append(ScoreRecord(utt_id=fields[0], score=float(fields[1])))
        except (ValueError, ValidationError):
            raise ScoreFileError(f"invalid score {fields[1]!r}", line_no) from None
    return records


def write_scores(records: Sequence[ScoreRecord], path: PathLike) -> None:
    Path(path).write_text(format_scores(records), encoding="utf-8")


def read_scores(path: PathLike) -> List[ScoreRecord]:
    return parse_scores(Path(path).read_text(encoding="utf-8"))


def attach_labels(
    records: Sequence[ScoreRecord], entries: Sequence[ManifestEntry]
) -> List[ScoreRecord]:
    """
    Label score records from a manifest, joining on utt_id.

    Raises:
        EvaluationError: Listing every scored utt_id the manifest lacks
    """
    labels: Dict[str, str] = {e.utt_id: e.label for e in entries}
    missing = [r.utt_id for r in records if r.utt_id not in labels]
    if missing:
        raise EvaluationError(f"utt_ids not in the labels manifest: {', '.join(missing)}")
    return [r.model_copy(update={"label": labels[r.utt_id]}) for r in records]


def write_det(points: Sequence[DetPoint], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["threshold", "far", "frr"])
        for point in points:
            writer.writerow([repr(point.threshold), repr(point.far), repr(point.frr)])


def embed_batch(model, features, alpha: Optional[ArchParams] = None) -> np.ndarray:
    """Penultimate (globally pooled) vectors, one row per utterance."""
    return network_forward(model, features, alpha).embedding.data


def dump_embeddings(
    model,
    dataset: Dataset,
    out: PathLike,
    batch_size: int = 32,
    alpha: Optional[ArchParams] = None,
) -> int:
    """
    Write ``utt_id,label,e0..e{D-1}`` rows in manifest order.

    Returns:
        The embedding width D
    """
    width = int(model.embedding_dim)
    with open(out, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["utt_id", "label"] + [f"e{i}" for i in range(width)])
        position = 0
        for batch in batches(dataset, batch_size, seed=0, epoch=0, shuffle=False):
            for utt_id, row in zip(batch.utt_ids, embed_batch(model, batch.features, alpha)):
                label = dataset.entries[position].label
                writer.writerow([utt_id, label] + [repr(float(v)) for v in row])
                position += 1
    logger.info(f"Wrote {position} embeddings of width {width} to {out}")
    return width


def format_eer(eer: float) -> str:
    return f"EER% = {100.0 * eer:.2f}"
