"""
Continuous relaxation of the cell search space and its discretisation.

A cell is a DAG over two inputs and ``nodes`` intermediate nodes; every
(source, target) pair is a mixed edge whose output is the softmax(alpha)
weighted sum of all candidate operations. Networks stack cells with
reductions at one third and two thirds of the depth.
"""

import logging
from typing import Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from . import functional as F
from .exceptions import NonFiniteError, ShapeError
from .genotype import Genotype
from .layers import ChannelNorm, Conv2d, Linear, Module, ModuleList, norm_layers
from .operations import (
    OP_NAMES,
    FactorizedReduce,
    OpKind,
    Operation,
    ReLUConvNorm,
    apply,
    build_op,
)
from .seeding import derive_seed, rng_for
from .tensor import Tensor

logger = logging.getLogger(__name__)

LIGHT_PRIMITIVES: Tuple[str, ...] = OP_NAMES
DARTS_PRIMITIVES: Tuple[str, ...] = tuple(
    name for name in OP_NAMES if name != OpKind.MAX_FEATURE_MAP.value
)
SEARCH_SPACES = {"light": LIGHT_PRIMITIVES, "darts": DARTS_PRIMITIVES}

# seed paths: (seed, component, ...)
_STEM, _HEAD, _CELL, _ALPHA = 0, 1, 2, 3
_PRE0, _PRE1, _EDGE = 0, 1, 2


def edge_count(nodes: int) -> int:
    return sum(node + 2 for node in range(nodes))


def edge_index(node: int, source: int) -> int:
    """Index of the edge feeding intermediate ``node`` from ``source``."""
    return edge_count(node) + source


def reduction_indices(cells: int) -> Set[int]:
    # cells=1 gives a single reduction; cells=2 reduces in both (adjacent) cells
    return {cells // 3, (2 * cells) // 3}


def canonical_primitives(names: Iterable[str]) -> Tuple[str, ...]:
    chosen = set()
    for name in names:
        OpKind.parse(name)
        if name in chosen:
            raise ValueError(f"duplicate operation {name!r}")
        chosen.add(name)
    if not chosen:
        raise ValueError("the candidate set is empty")
    return tuple(name for name in OP_NAMES if name in chosen)


class ArchParams:
    """Edge x operation logits, one matrix per cell type, shared by all cells of that type."""

    def __init__(self, alpha_normal: Tensor, alpha_reduce: Tensor, primitives: Sequence[str]):
        self.primitives = canonical_primitives(primitives)
        for name, alpha in (("alpha_normal", alpha_normal), ("alpha_reduce", alpha_reduce)):
            if alpha.ndim != 2 or alpha.shape[1] != len(self.primitives):
                raise ShapeError(
                    f"{name} has shape {alpha.shape}, expected (E, {len(self.primitives)})"
                )
        if alpha_normal.shape != alpha_reduce.shape:
            raise ShapeError(
                f"alpha_normal {alpha_normal.shape} and alpha_reduce {alpha_reduce.shape} differ"
            )
        self.alpha_normal = alpha_normal
        self.alpha_reduce = alpha_reduce

    @classmethod
    def initial(
        cls, nodes: int = 4, primitives: Sequence[str] = LIGHT_PRIMITIVES, seed: int = 0
    ) -> "ArchParams":
        """Small random logits, 1e-3 * N(0, 1), as DARTS initialises them."""
        primitives = canonical_primitives(primitives)
        shape = (edge_count(nodes), len(primitives))
        rng = rng_for(seed, _ALPHA)
        return cls(
            Tensor(1e-3 * rng.standard_normal(shape), requires_grad=True, name="alpha_normal"),
            Tensor(1e-3 * rng.standard_normal(shape), requires_grad=True, name="alpha_reduce"),
            primitives,
        )

    @classmethod
    def from_arrays(
        cls, normal: np.ndarray, reduce: np.ndarray, primitives: Sequence[str] = LIGHT_PRIMITIVES
    ) -> "ArchParams":
        return cls(
            Tensor(normal, requires_grad=True, name="alpha_normal"),
            Tensor(reduce, requires_grad=True, name="alpha_reduce"),
            primitives,
        )

    @property
    def edges(self) -> int:
        return self.alpha_normal.shape[0]

    @property
    def nodes(self) -> int:
        nodes = 0
        while edge_count(nodes) < self.edges:
            nodes += 1
        if edge_count(nodes) != self.edges:
            raise ShapeError(f"{self.edges} edges do not form a complete cell DAG")
        return nodes

    def tensors(self) -> List[Tensor]:
        return [self.alpha_normal, self.alpha_reduce]

    def for_cell(self, reduction: bool) -> Tensor:
        return self.alpha_reduce if reduction else self.alpha_normal

    def weights(self, reduction: bool) -> np.ndarray:
        logits = self.for_cell(reduction).data
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)

    def entropy(self, reduction: bool) -> float:
        """Mean Shannon entropy (nats) of the per-edge softmax."""
        probs = self.weights(reduction)
        return float(-(probs * np.log(np.clip(probs, 1e-300, None))).sum(axis=1).mean())

    def copy(self) -> "ArchParams":
        return ArchParams.from_arrays(
            self.alpha_normal.numpy(), self.alpha_reduce.numpy(), self.primitives
        )


class MixedEdge(Module):
    """All candidate operations of one (source, target) pair."""

    def __init__(
        self, channels: int, stride: int, primitives: Sequence[str], seed_path: Tuple[int, ...]
    ):
        super().__init__()
        self.stride = stride
        self.primitives = tuple(primitives)
        self.ops = ModuleList(
            [
                build_op(name, channels, stride, derive_seed(*seed_path, OpKind(name).op_index))
                for name in self.primitives
            ]
        )


def mixed_forward(edge: MixedEdge, x: Tensor, alpha_row: Tensor) -> Tensor:
    """
    Softmax-weighted sum of every candidate operation on ``x``.

    Raises:
        NonFiniteError: If any logit is NaN or infinite
    """
    if alpha_row.shape != (len(edge.ops),):
        raise ShapeError(
            f"mixed edge has {len(edge.ops)} operations but alpha row has shape {alpha_row.shape}"
        )
    if not np.all(np.isfinite(alpha_row.data)):
        raise NonFiniteError(f"non-finite architecture logits {alpha_row.data.tolist()}")
    weights = F.softmax(alpha_row)
    outputs = [apply(op, x) for op in edge.ops]
    return F.weighted_sum(outputs, weights)


def _sum(terms: Sequence[Tensor]) -> Tensor:
    total = terms[0]
    for term in terms[1:]:
        total = F.add(total, term)
    return total


class _Cell(Module):
    def __init__(
        self,
        nodes: int,
        c_prev_prev: int,
        c_prev: int,
        channels: int,
        reduction: bool,
        reduction_prev: bool,
        seed: int,
        index: int,
    ):
        super().__init__()
        self.nodes = nodes
        self.channels = channels
        self.reduction = reduction
        self.index = index
        self.seed = seed
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(
                c_prev_prev, channels, rng_for(seed, _CELL, index, _PRE0)
            )
        else:
            self.preprocess0 = ReLUConvNorm(
                c_prev_prev, channels, rng_for(seed, _CELL, index, _PRE0)
            )
        self.preprocess1 = ReLUConvNorm(c_prev, channels, rng_for(seed, _CELL, index, _PRE1))

    def edge_stride(self, source: int) -> int:
        return 2 if self.reduction and source < 2 else 1

    def _inputs(self, s0: Tensor, s1: Tensor) -> List[Tensor]:
        return [self.preprocess0(s0), self.preprocess1(s1)]


class SearchCell(_Cell):
    """Cell whose every edge is a MixedEdge."""

    def __init__(self, primitives: Sequence[str], *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.edges = ModuleList()
        for node in range(self.nodes):
            for source in range(node + 2):
                path = (self.seed, _CELL, self.index, _EDGE, edge_index(node, source))
                self.edges.append(
                    MixedEdge(self.channels, self.edge_stride(source), primitives, path)
                )


class DiscreteCell(_Cell):
    """Cell holding the two chosen operations of every intermediate node."""

    def __init__(self, pairs: Sequence[Tuple[str, int]], *args, **kwargs):
        super().__init__(*args, **kwargs)
        if len(pairs) != 2 * self.nodes:
            raise ShapeError(f"{len(pairs)} genotype pairs for {self.nodes} nodes")
        self.pairs = tuple(pairs)
        self.ops = ModuleList()
        for position, (name, source) in enumerate(self.pairs):
            node = position // 2
            if not 0 <= source < node + 2:
                raise ShapeError(f"node {node + 2} cannot read node {source}")
            kind = OpKind.parse(name)
            op_seed = derive_seed(
                self.seed, _CELL, self.index, _EDGE, edge_index(node, source), kind.op_index
            )
            self.ops.append(build_op(kind, self.channels, self.edge_stride(source), op_seed))


def cell_forward(cell: _Cell, s0: Tensor, s1: Tensor, alpha: Optional[Tensor] = None) -> Tensor:
    """
    Evaluate one cell on the outputs of the two preceding cells.

    Each intermediate node sums the outputs of its incoming edges; the cell
    output concatenates all intermediate nodes along channels.
    """
    states = cell._inputs(s0, s1)
    for node in range(cell.nodes):
        if isinstance(cell, SearchCell):
            if alpha is None:
                raise ValueError("a search cell needs architecture logits")
            terms = [
                mixed_forward(
                    cell.edges[edge_index(node, source)],
                    states[source],
                    F.index_row(alpha, edge_index(node, source)),
                )
                for source in range(node + 2)
            ]
        else:
            terms = [
                apply(cell.ops[position], states[cell.pairs[position][1]])
                for position in (2 * node, 2 * node + 1)
            ]
        states.append(_sum(terms))
    return F.concat_channels(states[2:])


class NetworkOutput(NamedTuple):
    logits: Tensor
    embedding: Tensor


class _Network(Module):
    def __init__(self, feature_dim: int, channels: int, cells: int, nodes: int, seed: int):
        super().__init__()
        if cells < 1:
            raise ValueError(f"a network needs at least one cell, got {cells}")
        if channels < 2 or channels % 2:
            raise ShapeError(f"initial channels must be even and at least 2, got {channels}")
        self.feature_dim = feature_dim
        self.channels = channels
        self.cell_count = cells
        self.nodes = nodes
        self.seed = seed
        self.reductions = reduction_indices(cells)

        stem_rng = rng_for(seed, _STEM)
        self.stem_conv = Conv2d(1, channels, 3, stem_rng, padding=1)
        self.stem_norm = ChannelNorm(channels)

        self.cells = ModuleList()
        c_prev_prev, c_prev, c_curr = channels, channels, channels
        reduction_prev = False
        for index in range(cells):
            reduction = index in self.reductions
            if reduction:
                c_curr *= 2
            self.cells.append(
                self._make_cell(index, c_prev_prev, c_prev, c_curr, reduction, reduction_prev)
            )
            reduction_prev = reduction
            c_prev_prev, c_prev = c_prev, nodes * c_curr
        self.embedding_dim = c_prev
        self.classifier = Linear(c_prev, 2, rng_for(seed, _HEAD))

    def _make_cell(self, index, c_prev_prev, c_prev, c_curr, reduction, reduction_prev) -> _Cell:
        raise NotImplementedError

    def forward(self, features, alpha: Optional[ArchParams] = None) -> NetworkOutput:
        x = as_input(features)
        if x.shape[3] != self.feature_dim:
            raise ShapeError(
                f"features have F={x.shape[3]} but the stem was built for F={self.feature_dim}"
            )
        s0 = s1 = self.stem_norm(self.stem_conv(x))
        for cell in self.cells:
            cell_alpha = alpha.for_cell(cell.reduction) if alpha is not None else None
            s0, s1 = s1, cell_forward(cell, s0, s1, cell_alpha)
        embedding = F.global_avg_pool(s1)
        return NetworkOutput(self.classifier(embedding), embedding)

    def freeze_norm_statistics(self, batches: Iterable[np.ndarray], alpha=None) -> None:
        """Estimate per-layer channel statistics over ``batches`` and freeze them."""
        layers = norm_layers(self)
        for layer in layers:
            layer.frozen = None
            layer.collecting = True
            layer.collected = []
        for features in batches:
            self.forward(features, alpha)
        for layer in layers:
            layer.freeze_collected()

    def unfreeze_norm_statistics(self) -> None:
        for layer in norm_layers(self):
            layer.frozen = None

    @property
    def frozen(self) -> bool:
        layers = norm_layers(self)
        return bool(layers) and all(layer.frozen is not None for layer in layers)


class SearchNetwork(_Network):
    """The supernet: stem, cells of mixed edges, pooled linear head."""

    def __init__(
        self,
        feature_dim: int,
        channels: int = 16,
        cells: int = 8,
        nodes: int = 4,
        primitives: Sequence[str] = LIGHT_PRIMITIVES,
        seed: int = 0,
    ):
        self.primitives = canonical_primitives(primitives)
        super().__init__(feature_dim, channels, cells, nodes, seed)

    def _make_cell(self, index, c_prev_prev, c_prev, c_curr, reduction, reduction_prev):
        return SearchCell(
            self.primitives,
            self.nodes,
            c_prev_prev,
            c_prev,
            c_curr,
            reduction,
            reduction_prev,
            self.seed,
            index,
        )

    def new_arch_params(self) -> ArchParams:
        return ArchParams.initial(self.nodes, self.primitives, self.seed)


class DiscreteNetwork(_Network):
    """Network derived from a genotype: one operation per kept edge."""

    def __init__(
        self,
        genotype: Genotype,
        feature_dim: int,
        channels: int = 16,
        cells: int = 8,
        seed: int = 0,
    ):
        self.genotype = genotype
        super().__init__(feature_dim, channels, cells, genotype.nodes, seed)

    def _make_cell(self, index, c_prev_prev, c_prev, c_curr, reduction, reduction_prev):
        return DiscreteCell(
            self.genotype.cell(reduction),
            self.nodes,
            c_prev_prev,
            c_prev,
            c_curr,
            reduction,
            reduction_prev,
            self.seed,
            index,
        )


def as_input(features) -> Tensor:
    """
    Turn features into a (B, 1, T, F) Tensor.

    Accepts a Tensor or array of shape (B, 1, T, F) or (B, T, F), a single
    FeatureMatrix, or a sequence of equally shaped FeatureMatrix objects.
    """
    if isinstance(features, Tensor):
        data = features.data
    elif hasattr(features, "values") and hasattr(features, "frames"):
        data = np.asarray(features.values, dtype=np.float64)[None]
    elif isinstance(features, (list, tuple)):
        data = np.stack([np.asarray(m.values, dtype=np.float64) for m in features])
    else:
        data = np.asarray(features, dtype=np.float64)
    if data.ndim == 3:
        data = data[:, None]
    if data.ndim != 4 or data.shape[1] != 1:
        raise ShapeError(f"features must be (B, T, F) or (B, 1, T, F), got shape {data.shape}")
    if isinstance(features, Tensor) and features.data.ndim == 4:
        return features
    return Tensor(data)


def network_forward(net: _Network, features, alpha: Optional[ArchParams] = None) -> NetworkOutput:
    """Logits of shape (B, 2) plus the pooled penultimate embedding."""
    if isinstance(net, SearchNetwork) and alpha is None:
        raise ValueError("the supernet needs architecture parameters")
    return net.forward(features, alpha)


def _best_op(logits: np.ndarray, candidates: Sequence[int]) -> int:
    best = candidates[0]
    for k in candidates[1:]:
        if logits[k] > logits[best]:
            best = k
    return best


def _derive_cell(arch: ArchParams, reduction: bool) -> List[Tuple[str, int]]:
    logits = arch.for_cell(reduction).data
    weights = arch.weights(reduction)
    candidates = [k for k, name in enumerate(arch.primitives) if name != OpKind.ZERO.value]
    if not candidates:
        raise ValueError("the candidate set has no operation besides zero")
    pairs: List[Tuple[str, int]] = []
    for node in range(arch.nodes):
        ranked = []
        for source in range(node + 2):
            edge = edge_index(node, source)
            best = _best_op(logits[edge], candidates)
            ranked.append((-weights[edge, best], best, source))
        ranked.sort()
        pairs.extend((arch.primitives[best], source) for _, best, source in ranked[:2])
    return pairs


def derive_genotype(arch: ArchParams) -> Genotype:
    """
    Discretise: per edge the strongest non-zero operation, per node the two
    strongest incoming edges.

    Ties between operations go to the lower op index; ties between edges go
    to the lower op index and then the lower source node.
    """
    for alpha in arch.tensors():
        if not np.all(np.isfinite(alpha.data)):
            raise NonFiniteError("architecture logits contain NaN or Inf")
    nodes = arch.nodes
    return Genotype(
        normal=_derive_cell(arch, False),
        reduce=_derive_cell(arch, True),
        concat=list(range(2, 2 + nodes)),
    )


def instantiate_discrete(
    genotype: Genotype, cells: int, channels: int, feature_dim: int = 16, seed: int = 0
) -> DiscreteNetwork:
    """Build the discrete network of ``genotype`` with the supernet's layout and seeding."""
    return DiscreteNetwork(genotype, feature_dim, channels=channels, cells=cells, seed=seed)


def one_hot_arch(genotype: Genotype, primitives: Sequence[str] = LIGHT_PRIMITIVES) -> ArchParams:
    """
    Logits whose softmax is exactly one-hot on the genotype's choices.

    Edges the genotype drops are put on the zero operation, which therefore
    has to be in ``primitives``.
    """
    primitives = canonical_primitives(primitives)
    if OpKind.ZERO.value not in primitives:
        raise ValueError("one-hot logits need the zero operation for dropped edges")
    nodes = genotype.nodes
    off = -1000.0  # exp(-1000) underflows to exactly 0
    matrices = []
    for reduction in (False, True):
        logits = np.full((edge_count(nodes), len(primitives)), off)
        logits[:, primitives.index(OpKind.ZERO.value)] = 0.0
        for position, (name, source) in enumerate(genotype.cell(reduction)):
            row = edge_index(position // 2, source)
            logits[row] = off
            logits[row, primitives.index(name)] = 0.0
        matrices.append(logits)
    return ArchParams.from_arrays(matrices[0], matrices[1], primitives)


def count_parameters(net: Module) -> int:
    return net.num_parameters()


def discrete_ops(net: DiscreteNetwork) -> List[Operation]:
    return [op for cell in net.cells for op in cell.ops]
