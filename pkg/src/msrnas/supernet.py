"""Over-parameterized cell supernet and its genotype-pruned discrete variant.

Cells are DAGs over N nodes: two input nodes fed by the previous two cells,
intermediate nodes summing their incoming edges, and an output node that
concatenates the intermediates. In the supernet every edge carries all four
candidate operators with fixed unit mixing weights; reduction cells sit at
one and two thirds of the depth and stride-2 only on edges leaving the input
nodes. Every convolution registers a spectral handle; the final pointwise
conv of each candidate is additionally tagged for rank measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .derive import CELL_TYPES, Genotype, RankTable, cell_edges, intermediate_nodes
from .errors import (
    ConstructionError,
    DegenerateOperatorError,
    DimensionError,
    GenotypeError,
    StateError,
)
from .layers import BatchNorm2d, Conv2d, Linear, Module, cross_entropy, global_avg_pool
from .operators import (
    OPERATOR_ORDER,
    FactorizedReduce,
    OperatorKind,
    OpInstance,
    ReLUConvBN,
    build_operator,
)
from .spectral import ConvHandle, SpectralConfig, spectral_norm_adjust, stable_rank

STEM_MULTIPLIER = 3


@dataclass
class SupernetConfig:
    cells: int = 8
    nodes: int = 7
    initial_channels: int = 16
    num_classes: int = 10
    input_channels: int = 3
    input_hw: tuple[int, int] = (32, 32)

    def __post_init__(self):
        if self.cells < 1:
            raise ConstructionError("need at least one cell")
        if self.nodes < 4:
            raise ConstructionError("need at least 4 nodes per cell")
        if self.initial_channels < 1 or self.num_classes < 2:
            raise ConstructionError("invalid channel or class count")
        if min(self.input_hw) < 4:
            raise ConstructionError("input spatial extent too small")

    @property
    def reduction_indices(self) -> tuple[int, ...]:
        return tuple(sorted({self.cells // 3, (2 * self.cells) // 3}))

    @property
    def multiplier(self) -> int:
        """Number of intermediate nodes, hence output-channel multiplier."""
        return self.nodes - 3


@dataclass
class FinTag:
    """Locates one candidate's final conv inside the network."""

    cell_index: int
    cell_type: str
    edge: tuple[int, int]
    kind: OperatorKind
    handle: ConvHandle = field(repr=False, default=None)


class MixedEdge(Module):
    """Sum of all candidate operators with immutable unit mixing weights."""

    ALPHA = 1.0  # fixed; candidate mixing is not learned

    def __init__(self, channels: int, stride: int, in_hw: tuple[int, int], *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.ops: list[OpInstance] = []
        for kind in OPERATOR_ORDER:
            op = build_operator(kind, channels, stride, in_hw, rng=rng, dtype=dtype)
            self.add_module(f"op_{kind.value}", op)
            self.ops.append(op)

    @property
    def alpha(self) -> float:
        return self.ALPHA

    def forward(self, x: Tensor) -> Tensor:
        total = self.ops[0](x)
        for op in self.ops[1:]:
            total = total + op(x)
        return total


def _preprocess(in_channels: int, out_channels: int, in_hw: tuple[int, int],
                reduce_spatial: bool, *, rng, dtype) -> Module:
    if reduce_spatial:
        return FactorizedReduce(in_channels, out_channels, in_hw, rng=rng, dtype=dtype)
    return ReLUConvBN(in_channels, out_channels, 1, 1, in_hw, rng=rng, dtype=dtype)


class MixedCell(Module):
    """One supernet cell: preprocessing plus a full mixed edge per DAG edge."""

    def __init__(self, cfg: SupernetConfig, index: int, channels: int,
                 prev_channels: int, prev_prev_channels: int,
                 in_hw_pp: tuple[int, int], in_hw_p: tuple[int, int],
                 prev_reduced: bool, reduction: bool, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.index = index
        self.reduction = reduction
        self.cell_type = "reduce" if reduction else "normal"
        self.nodes = cfg.nodes
        self.in_hw = in_hw_p
        h, w = in_hw_p
        self.out_hw = ((h + 1) // 2, (w + 1) // 2) if reduction else in_hw_p
        self.pre0 = _preprocess(prev_prev_channels, channels, in_hw_pp,
                                prev_reduced, rng=rng, dtype=dtype)
        self.pre1 = _preprocess(prev_channels, channels, in_hw_p, False,
                                rng=rng, dtype=dtype)
        self.edges: dict[tuple[int, int], MixedEdge] = {}
        for (i, j) in cell_edges(cfg.nodes):
            stride = 2 if (reduction and i < 2) else 1
            edge_in_hw = in_hw_p if (not reduction or i < 2) else self.out_hw
            edge = MixedEdge(channels, stride, edge_in_hw, rng=rng, dtype=dtype)
            self.add_module(f"edge_{i}_{j}", edge)
            self.edges[(i, j)] = edge
        self.out_channels = channels * cfg.multiplier

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        states = [self.pre0(s0), self.pre1(s1)]
        for j in intermediate_nodes(self.nodes):
            total = None
            for i in range(j):
                contribution = self.edges[(i, j)](states[i])
                total = contribution if total is None else total + contribution
            states.append(total)
        return ad.concat(states[2:], axis=1)


class DiscreteCell(Module):
    """Genotype-pruned cell: two retained (operator, predecessor) edges per node."""

    def __init__(self, cfg: SupernetConfig, genotype: Genotype, index: int,
                 channels: int, prev_channels: int, prev_prev_channels: int,
                 in_hw_pp: tuple[int, int], in_hw_p: tuple[int, int],
                 prev_reduced: bool, reduction: bool, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.index = index
        self.reduction = reduction
        self.cell_type = "reduce" if reduction else "normal"
        self.nodes = cfg.nodes
        h, w = in_hw_p
        self.out_hw = ((h + 1) // 2, (w + 1) // 2) if reduction else in_hw_p
        self.pre0 = _preprocess(prev_prev_channels, channels, in_hw_pp,
                                prev_reduced, rng=rng, dtype=dtype)
        self.pre1 = _preprocess(prev_channels, channels, in_hw_p, False,
                                rng=rng, dtype=dtype)
        self.picks: list[list[tuple[int, OpInstance]]] = []
        rows = genotype.rows(self.cell_type)
        for j, pairs in zip(intermediate_nodes(cfg.nodes), rows):
            node_ops = []
            for op_name, i in pairs:
                stride = 2 if (reduction and i < 2) else 1
                edge_in_hw = in_hw_p if (not reduction or i < 2) else self.out_hw
                op = build_operator(OperatorKind(op_name), channels, stride,
                                    edge_in_hw, rng=rng, dtype=dtype)
                self.add_module(f"node{j}_from{i}_{op_name}", op)
                node_ops.append((i, op))
            self.picks.append(node_ops)
        self.out_channels = channels * cfg.multiplier

    def forward(self, s0: Tensor, s1: Tensor) -> Tensor:
        states = [self.pre0(s0), self.pre1(s1)]
        for node_ops in self.picks:
            (i_a, op_a), (i_b, op_b) = node_ops
            states.append(op_a(states[i_a]) + op_b(states[i_b]))
        return ad.concat(states[2:], axis=1)


class Stem(Module):
    """3x3 conv to the stem width followed by BN (no ReLU)."""

    def __init__(self, in_channels: int, out_channels: int,
                 in_hw: tuple[int, int], *, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, padding=1,
                           rng=rng, dtype=dtype)
        self.conv.in_hw = in_hw
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class _NetworkBase(Module):
    """Shared stem/cells/classifier plumbing for both network variants."""

    def __init__(self, cfg: SupernetConfig, *, dtype, seed: int,
                 genotype: Genotype | None = None):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.Generator(np.random.PCG64([seed & 0xFFFFFFFF, 0x5EED]))
        stem_channels = STEM_MULTIPLIER * cfg.initial_channels
        self.stem = Stem(cfg.input_channels, stem_channels, cfg.input_hw,
                         rng=rng, dtype=dtype)
        self.cells: list[Module] = []
        c_pp, c_p = stem_channels, stem_channels
        hw_pp, hw_p = cfg.input_hw, cfg.input_hw
        channels = cfg.initial_channels
        prev_reduced = False
        for index in range(cfg.cells):
            reduction = index in cfg.reduction_indices
            if reduction:
                channels *= 2
            cell_cls_args = (cfg,) if genotype is None else (cfg, genotype)
            cell_cls = MixedCell if genotype is None else DiscreteCell
            cell = cell_cls(*cell_cls_args, index, channels, c_p, c_pp,
                            hw_pp, hw_p, prev_reduced, reduction,
                            rng=rng, dtype=dtype)
            self.add_module(f"cell{index}", cell)
            self.cells.append(cell)
            c_pp, c_p = c_p, cell.out_channels
            hw_pp, hw_p = hw_p, cell.out_hw
            prev_reduced = reduction
        self.final_hw = hw_p
        self.classifier = Linear(c_p, cfg.num_classes, rng=rng, dtype=dtype)
        self.assign_paths("net")

    def forward_features(self, x: Tensor) -> Tensor:
        s0 = s1 = self.stem(x)
        for cell in self.cells:
            s0, s1 = s1, cell(s0, s1)
        return s1

    def logits(self, x: Tensor) -> Tensor:
        return self.classifier(global_avg_pool(self.forward_features(x)))

    def loss(self, x: Tensor, labels: np.ndarray) -> Tensor:
        return cross_entropy(self.logits(x), labels)


class Supernet(_NetworkBase):
    """Mixed-edge supernet with spectral handles on every convolution."""

    def __init__(self, cfg: SupernetConfig, spectral_cfg: SpectralConfig, *,
                 dtype=np.float32, seed: int = 0):
        super().__init__(cfg, dtype=dtype, seed=seed)
        self.spectral_cfg = spectral_cfg
        self.enforce_adjustment = True
        self._step = 0
        self._adjusted_step = -1
        self.handles: list[ConvHandle] = []
        self.fin_tags: list[FinTag] = []
        self._register_handles()

    def _register_handles(self) -> None:
        for name, module in self._walk_convs():
            if module.in_hw is None:
                raise ConstructionError(f"conv {name} has no input extents")
            handle = ConvHandle(module.spec, module.in_hw,
                                seed=self.spectral_cfg.seed, name=name)
            module.handle = handle
            self.handles.append(handle)
        for cell in self.cells:
            for edge, mixed in cell.edges.items():
                for op in mixed.ops:
                    self.fin_tags.append(FinTag(
                        cell_index=cell.index,
                        cell_type=cell.cell_type,
                        edge=edge,
                        kind=op.kind,
                        handle=op.fin_conv.handle,
                    ))

    def _walk_convs(self):
        for module in self.modules():
            if isinstance(module, Conv2d):
                yield module.path, module

    # Step bookkeeping -------------------------------------------------------

    def begin_step(self) -> None:
        self._step += 1

    def adjust_all(self, iterations: int | None = None) -> None:
        """Spectral-norm adjust every registered conv (before the forward pass)."""
        cfg = self.spectral_cfg
        if iterations is not None and iterations != cfg.iterations:
            cfg = SpectralConfig(
                target_norm=cfg.target_norm, iterations=iterations,
                rank_iterations=max(cfg.rank_iterations, iterations),
                seed=cfg.seed, frobenius_mode=cfg.frobenius_mode,
            )
        for handle in self.handles:
            spectral_norm_adjust(handle, cfg)
        self._adjusted_step = self._step

    def forward(self, x: Tensor) -> Tensor:
        if (self.training and self.enforce_adjustment
                and self._adjusted_step != self._step):
            raise StateError(
                "spectral adjustment has not been applied this step; call "
                "adjust_all() after begin_step() and before the forward pass"
            )
        if x.data.shape[1] != self.cfg.input_channels:
            raise DimensionError(
                f"expected {self.cfg.input_channels} input channels, "
                f"got {x.data.shape[1]}"
            )
        return self.logits(x)

    def edge_handle_count(self, cell_index: int) -> int:
        return sum(len(op.conv_layers)
                   for mixed in self.cells[cell_index].edges.values()
                   for op in mixed.ops)


class DiscreteNetwork(_NetworkBase):
    """Genotype-pruned network trained from scratch; no spectral machinery."""

    def __init__(self, genotype: Genotype, cfg: SupernetConfig, *,
                 dtype=np.float32, seed: int = 0):
        if genotype.nodes != cfg.nodes:
            raise GenotypeError(
                f"genotype built for {genotype.nodes} nodes, config has {cfg.nodes}"
            )
        genotype.validate()
        super().__init__(cfg, dtype=dtype, seed=seed, genotype=genotype)

    def forward(self, x: Tensor) -> Tensor:
        return self.logits(x)


def build_supernet(cfg: SupernetConfig,
                   spectral_cfg: SpectralConfig | None = None, *,
                   dtype=np.float32, seed: int = 0) -> Supernet:
    return Supernet(cfg, spectral_cfg or SpectralConfig(), dtype=dtype, seed=seed)


def build_discrete_network(genotype: Genotype, cfg: SupernetConfig, *,
                           dtype=np.float32, seed: int = 0) -> DiscreteNetwork:
    return DiscreteNetwork(genotype, cfg, dtype=dtype, seed=seed)


def mixed_edge_forward(edge: MixedEdge, x: Tensor) -> Tensor:
    """Sum of the candidate-operator outputs on one edge."""
    return edge(x)


def supernet_forward(net: Supernet, batch: Tensor) -> Tensor:
    """Logits for a batch; requires this step's spectral adjustment."""
    return net(batch)


def collect_rank_table(net: Supernet, cfg: SpectralConfig | None = None, *,
                       epoch: int = 0) -> RankTable:
    """Average stable rank of every candidate's final conv per cell type.

    Degenerate convolutions flag their whole (type, edge, operator) entry.
    Also records the per-cell values on the table for reporting.
    """
    cfg = cfg or net.spectral_cfg
    present = {cell.cell_type for cell in net.cells}
    missing = [t for t in CELL_TYPES if t not in present]
    if missing:
        raise StateError(
            f"cannot build a complete rank table: no cells of type {missing}"
        )
    groups: dict[tuple[str, tuple[int, int], str], list[tuple[int, float | None]]] = {}
    with no_grad():
        for tag in net.fin_tags:
            key = (tag.cell_type, tag.edge, tag.kind.value)
            try:
                value = stable_rank(tag.handle.spec, tag.handle.in_hw, cfg)
            except DegenerateOperatorError:
                value = None
            groups.setdefault(key, []).append((tag.cell_index, value))
    table = RankTable(nodes=net.cfg.nodes, epoch=epoch, seed=cfg.seed,
                      rank_iterations=cfg.rank_iterations, per_cell={})
    for key, cells in groups.items():
        values = [v for _, v in cells]
        if any(v is None for v in values):
            table.set(*key, None)
        else:
            table.set(*key, float(np.mean(values)))
        table.per_cell[key] = sorted(cells)
    table.require_complete()
    return table


def conv_rank_report(net: Supernet, cfg: SpectralConfig | None = None, *,
                     epoch: int = 0) -> str:
    """Structured text report: averaged and per-cell ranks, fresh spectral-norm
    estimates and Frobenius norms for every candidate's final conv."""
    from .spectral import ConvHandle as _Handle
    from .spectral import frobenius_norm_of_map, power_iteration

    cfg = cfg or net.spectral_cfg
    table = collect_rank_table(net, cfg, epoch=epoch)
    lines = [
        "# msrnas conv rank report",
        f"meta epoch {epoch}",
        f"meta rank_iterations {cfg.rank_iterations}",
    ]
    detail: dict[tuple, list[str]] = {}
    with no_grad():
        for tag in net.fin_tags:
            probe = _Handle(tag.handle.spec, tag.handle.in_hw, seed=cfg.seed,
                            name="report-probe")
            try:
                sigma = power_iteration(probe, cfg.rank_iterations)
            except DegenerateOperatorError:
                sigma = float("nan")
            fro = frobenius_norm_of_map(tag.handle.spec, tag.handle.in_hw,
                                        mode=cfg.frobenius_mode)
            key = (tag.cell_type, tag.edge, tag.kind.value)
            ranks = dict(table.per_cell[key])
            rank = ranks.get(tag.cell_index)
            rank_text = "degenerate" if rank is None else f"{rank:.6g}"
            detail.setdefault(key, []).append(
                f"  cell={tag.cell_index} rank={rank_text} "
                f"sigma={sigma:.6g} fro={fro:.6g}"
            )
    for cell_type in CELL_TYPES:
        for edge in cell_edges(net.cfg.nodes):
            for kind in OPERATOR_ORDER:
                key = (cell_type, edge, kind.value)
                avg = table.entries[key]
                avg_text = "degenerate" if avg is None else f"{avg:.6g}"
                lines.append(
                    f"op {cell_type} edge=({edge[0]},{edge[1]}) "
                    f"kind={kind.value} rbar={avg_text}"
                )
                lines.extend(sorted(detail[key]))
    lines.append(
        f"total rows={2 * len(cell_edges(net.cfg.nodes)) * len(OPERATOR_ORDER)} "
        f"handles={len(net.handles)} fin_convs={len(net.fin_tags)}"
    )
    return "\n".join(lines) + "\n"
