"""
Bilevel architecture search and discrete retraining.

Weights w minimise the training loss, architecture logits alpha minimise the
validation loss at the current w. Each search step updates w on a training
batch, then alpha on a validation batch.
"""

import csv
import logging
import time
from pathlib import Path
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple, Union

import numpy as np

from . import functional as F
from .data import Dataset, batches
from .evaluation import compute_eer, score_dataset
from .exceptions import DatasetError, NonFiniteError
from .genotype import Genotype
from .layers import load_norm_statistics, norm_statistics
from .models import HISTORY_COLUMNS, HistoryRow, RetrainRow, ScoreRecord, SearchConfig
from .optim import Adam, adam_update
from .seeding import derive_seed
from .supernet import (
    LIGHT_PRIMITIVES,
    ArchParams,
    DiscreteNetwork,
    SearchNetwork,
    derive_genotype,
    instantiate_discrete,
    network_forward,
)
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

# shuffle streams, kept apart from parameter seeds
_TRAIN_STREAM, _VAL_STREAM, _RETRAIN_STREAM = 101, 102, 103

BatchLike = Tuple[np.ndarray, np.ndarray]


class SearchModel(Protocol):
    """Anything the bilevel step can optimise."""

    def weight_parameters(self) -> List[Tensor]: ...

    def arch_parameters(self) -> List[Tensor]: ...

    def loss(self, features: np.ndarray, labels: np.ndarray) -> Tuple[Tensor, np.ndarray]: ...


class Supernet:
    """A SearchNetwork bound to its architecture logits."""

    def __init__(self, net: SearchNetwork, arch: ArchParams):
        self.net = net
        self.arch = arch

    def weight_parameters(self) -> List[Tensor]:
        return self.net.parameters()

    def arch_parameters(self) -> List[Tensor]:
        return self.arch.tensors()

    def loss(self, features: np.ndarray, labels: np.ndarray) -> Tuple[Tensor, np.ndarray]:
        logits = network_forward(self.net, features, self.arch).logits
        return F.cross_entropy(logits, labels), logits.data


class StepResult(NamedTuple):
    train_loss: float
    val_loss: float
    train_correct: int
    val_correct: int


def _correct(logits: np.ndarray, labels: np.ndarray) -> int:
    return int((np.argmax(logits, axis=1) == labels).sum())


def _loss_and_grads(
    model: SearchModel,
    params: Sequence[Tensor],
    batch: BatchLike,
    batch_id: Optional[int],
) -> Tuple[float, np.ndarray, List[np.ndarray]]:
    everything = model.weight_parameters() + model.arch_parameters()
    for tensor in everything:
        tensor.zero_grad()
    features, labels = batch[0], batch[1]
    with Tape() as tape:
        loss, logits = model.loss(features, labels)
    if not np.isfinite(loss.item()):
        raise NonFiniteError(f"loss is {loss.item()}", batch_id)
    tape.backward(loss)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    return loss.item(), logits, grads


def _unrolled_arch_grads(
    model: SearchModel,
    train_batch: BatchLike,
    val_batch: BatchLike,
    xi: float,
    batch_id: Optional[int],
) -> Tuple[float, np.ndarray, List[np.ndarray]]:
    """
    Second-order alpha gradient: dL_val(w', a)/da - xi * finite-difference
    Hessian-vector term, with w' = w - xi * dL_train(w, a)/dw.
    """
    weights = model.weight_parameters()
    arch = model.arch_parameters()
    if xi == 0:
        return _loss_and_grads(model, arch, val_batch, batch_id)

    saved = [w.data.copy() for w in weights]
    try:
        _, _, train_grads = _loss_and_grads(model, weights, train_batch, batch_id)
        for w, g in zip(weights, train_grads):
            w.data = w.data - xi * g
        val_loss, val_logits, grads = _loss_and_grads(model, weights + arch, val_batch, batch_id)
        dw, dalpha = grads[: len(weights)], grads[len(weights) :]

        norm = float(np.sqrt(sum(float((g * g).sum()) for g in dw)))
        if norm == 0.0:
            return val_loss, val_logits, dalpha
        radius = 0.01 / norm

        def arch_grads_at(sign: float) -> List[np.ndarray]:
            for w, base, g in zip(weights, saved, dw):
                w.data = base + sign * radius * g
            return _loss_and_grads(model, arch, train_batch, batch_id)[2]

        plus = arch_grads_at(1.0)
        minus = arch_grads_at(-1.0)
        hessian = [(p - m) / (2 * radius) for p, m in zip(plus, minus)]
        return val_loss, val_logits, [d - xi * h for d, h in zip(dalpha, hessian)]
    finally:
        for w, base in zip(weights, saved):
            w.data = base


def search_step(
    model: SearchModel,
    train_batch: BatchLike,
    val_batch: BatchLike,
    w_opt: Adam,
    a_opt: Adam,
    config: SearchConfig,
    batch_id: Optional[int] = None,
) -> StepResult:
    """
    One alternation: an Adam step on the weights, then one on alpha.

    With first order, the weight step only reads ``train_batch`` and the alpha
    step only reads ``val_batch``. Second order also reads ``train_batch`` in
    the alpha step for the virtual step and the Hessian-vector term.

    Raises:
        NonFiniteError: With ``batch_id`` if a loss or gradient is not finite
    """
    weights = model.weight_parameters()
    arch = model.arch_parameters()

    train_loss, train_logits, w_grads = _loss_and_grads(model, weights, train_batch, batch_id)
    adam_update(weights, w_grads, w_opt.state, w_opt.lr, batch_id)

    if config.order == "second":
        val_loss, val_logits, a_grads = _unrolled_arch_grads(
            model, train_batch, val_batch, config.xi, batch_id
        )
    else:
        val_loss, val_logits, a_grads = _loss_and_grads(model, arch, val_batch, batch_id)
    adam_update(arch, a_grads, a_opt.state, a_opt.lr, batch_id)

    return StepResult(
        train_loss,
        val_loss,
        _correct(train_logits, train_batch[1]),
        _correct(val_logits, val_batch[1]),
    )


class SearchResult(NamedTuple):
    genotype: Genotype
    history: List[HistoryRow]
    arch: ArchParams
    trajectory: List[Tuple[np.ndarray, np.ndarray]]
    network: SearchNetwork


def _check_labeled(name: str, dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise DatasetError(f"the {name} split is empty")
    if not dataset.labeled:
        raise DatasetError(f"the {name} split has unlabeled entries")
    if len(set(dataset.labels.tolist())) < 2:
        logger.warning(f"The {name} split contains a single class")


def run_search(
    config: SearchConfig,
    train_set: Dataset,
    val_set: Dataset,
    run_logger=None,
) -> SearchResult:
    """
    Run ``config.epochs`` epochs of bilevel search and derive the genotype.

    Training batches drive the epoch; validation batches are cycled alongside.
    """
    _check_labeled("train", train_set)
    _check_labeled("val", val_set)
    feature_dim = train_set.feature_dim
    if val_set.feature_dim != feature_dim:
        raise DatasetError(
            f"train features have F={feature_dim} but val features have F={val_set.feature_dim}"
        )

    primitives = tuple(config.primitives) or LIGHT_PRIMITIVES
    net = SearchNetwork(
        feature_dim, config.init_channels, config.cells, config.nodes, primitives, config.seed
    )
    arch = net.new_arch_params()
    model = Supernet(net, arch)
    w_opt = Adam(model.weight_parameters(), lr=config.lr)
    a_opt = Adam(model.arch_parameters(), lr=config.arch_lr)
    logger.info(
        f"Searching: {config.cells} cells, C={config.init_channels}, {len(primitives)} ops, "
        f"{net.num_parameters()} weights, order={config.order}"
    )

    history: List[HistoryRow] = []
    trajectory: List[Tuple[np.ndarray, np.ndarray]] = []
    step_id = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        val_batches = list(
            batches(val_set, config.batch_size, derive_seed(config.seed, _VAL_STREAM), epoch)
        )
        totals = np.zeros(4)
        seen = np.zeros(2)
        train_stream = batches(
            train_set, config.batch_size, derive_seed(config.seed, _TRAIN_STREAM), epoch
        )
        for index, train_batch in enumerate(train_stream):
            val_batch = val_batches[index % len(val_batches)]
            result = search_step(
                model,
                (train_batch.features, train_batch.labels),
                (val_batch.features, val_batch.labels),
                w_opt,
                a_opt,
                config,
                batch_id=step_id,
            )
            step_id += 1
            n_train, n_val = len(train_batch.labels), len(val_batch.labels)
            totals += (
                result.train_loss * n_train,
                result.val_loss * n_val,
                result.train_correct,
                result.val_correct,
            )
            seen += (n_train, n_val)

        row = HistoryRow(
            epoch=epoch,
            train_loss=totals[0] / seen[0],
            val_loss=totals[1] / seen[1],
            train_acc=totals[2] / seen[0],
            val_acc=totals[3] / seen[1],
            alpha_entropy_normal=arch.entropy(False),
            alpha_entropy_reduce=arch.entropy(True),
        )
        history.append(row)
        trajectory.append((arch.weights(False), arch.weights(True)))
        elapsed_ms = (time.perf_counter() - started) * 1000
        logger.info(
            f"search epoch {epoch}: train_loss={row.train_loss:.4f} val_loss={row.val_loss:.4f} "
            f"train_acc={row.train_acc:.3f} val_acc={row.val_acc:.3f}"
        )
        if run_logger is not None:
            run_logger.log_epoch("search", row, elapsed_ms)

    genotype = derive_genotype(arch)
    return SearchResult(genotype, history, arch, trajectory, net)


class RetrainResult(NamedTuple):
    model: DiscreteNetwork
    history: List[RetrainRow]
    best_epoch: Optional[int]


def _stats_batches(dataset: Dataset, batch_size: int):
    return (b.features for b in batches(dataset, batch_size, seed=0, epoch=0, shuffle=False))


def _dev_eer(net: DiscreteNetwork, dev_set: Dataset, batch_size: int) -> Optional[float]:
    records: List[ScoreRecord] = score_dataset(net, dev_set, batch_size)
    labels = {r.label for r in records}
    if not {"bonafide", "spoof"} <= labels:
        return None
    return compute_eer(records)[0]


def retrain_discrete(
    genotype: Genotype,
    config: SearchConfig,
    train_set: Dataset,
    dev_set: Optional[Dataset] = None,
    run_logger=None,
) -> RetrainResult:
    """
    Train the discrete network of ``genotype`` from fresh seeded parameters.

    After training, channel statistics are estimated over the training split
    and frozen into the model. With ``dev_set``, the parameters and statistics
    of the epoch with the lowest development EER are kept.
    """
    _check_labeled("train", train_set)
    net = instantiate_discrete(
        genotype, config.cells, config.init_channels, train_set.feature_dim, config.seed
    )
    optimizer = Adam(net.parameters(), lr=config.effective_retrain_lr)
    epochs = config.effective_retrain_epochs
    logger.info(f"Retraining {net.num_parameters()} weights for {epochs} epochs")

    history: List[RetrainRow] = []
    best: Optional[Tuple[float, int, List[np.ndarray], dict]] = None
    step_id = 0
    for epoch in range(epochs):
        started = time.perf_counter()
        net.unfreeze_norm_statistics()
        loss_sum = correct = seen = 0.0
        stream = batches(
            train_set, config.batch_size, derive_seed(config.seed, _RETRAIN_STREAM), epoch
        )
        for batch in stream:
            optimizer.zero_grad()
            with Tape() as tape:
                logits = network_forward(net, batch.features).logits
                loss = F.cross_entropy(logits, batch.labels)
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"loss is {loss.item()}", step_id)
            tape.backward(loss)
            optimizer.step(batch_id=step_id)
            step_id += 1
            loss_sum += loss.item() * len(batch.labels)
            correct += _correct(logits.data, batch.labels)
            seen += len(batch.labels)

        dev_eer = None
        if dev_set is not None:
            net.freeze_norm_statistics(_stats_batches(train_set, config.batch_size))
            dev_eer = _dev_eer(net, dev_set, config.batch_size)
            if dev_eer is not None and (best is None or dev_eer < best[0]):
                best = (
                    dev_eer,
                    epoch,
                    [p.data.copy() for p in net.parameters()],
                    norm_statistics(net),
                )
        row = RetrainRow(
            epoch=epoch, train_loss=loss_sum / seen, train_acc=correct / seen, dev_eer=dev_eer
        )
        history.append(row)
        logger.info(
            f"retrain epoch {epoch}: train_loss={row.train_loss:.4f} train_acc={row.train_acc:.3f}"
            + (f" dev_eer={dev_eer:.4f}" if dev_eer is not None else "")
        )
        if run_logger is not None:
            run_logger.log_epoch("retrain", row, (time.perf_counter() - started) * 1000)

    if best is not None:
        _, best_epoch, params, stats = best
        for tensor, data in zip(net.parameters(), params):
            tensor.data = data
        load_norm_statistics(net, stats)
        logger.info(f"Kept epoch {best_epoch} with dev EER {best[0]:.4f}")
        return RetrainResult(net, history, best_epoch)

    net.freeze_norm_statistics(_stats_batches(train_set, config.batch_size))
    return RetrainResult(net, history, None)


def write_history(rows: Sequence[HistoryRow], path: Union[str, Path]) -> None:
    """Search history as CSV; missing values are written as empty fields."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            values = row.model_dump()
            writer.writerow(
                ["" if values[c] is None else repr(values[c]) for c in HISTORY_COLUMNS]
            )
