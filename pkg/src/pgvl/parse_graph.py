"""Channel-wise parse graphs over token matrices.

A token matrix of shape (rows, C) is split top-down along channels.  The
branching list is written root-first, ``[g_n, ..., g_1]``: a node at level
k has ``g_k`` children at level k-1, each owning ``C_k / g_k`` contiguous
channels.  Leaves live at level 0, the root at level n.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import prod

from .engine import Array, ShapeError, concat, slice_axis


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DecompositionSpec:
    branching: tuple[int, ...]
    root_channels: int

    def __post_init__(self):
        object.__setattr__(self, "branching", tuple(int(g) for g in self.branching))
        if not self.branching:
            raise ConfigError("branching must have at least one level")
        if self.root_channels < 1:
            raise ConfigError(f"root_channels must be positive, got {self.root_channels}")
        width = self.root_channels
        for pos, g in enumerate(self.branching):
            level = self.depth - pos
            if g < 1:
                raise ConfigError(f"level {level}: branching factor must be >= 1, got {g}")
            if width % g:
                raise ConfigError(
                    f"level {level}: {width} channels are not divisible by branching factor {g}")
            width //= g

    @property
    def depth(self) -> int:
        return len(self.branching)

    def factor(self, level: int) -> int:
        """Branching factor g_k used to split a level-k node."""
        return self.branching[self.depth - level]

    def channels(self, level: int) -> int:
        width = self.root_channels
        for k in range(self.depth, level, -1):
            width //= self.factor(k)
        return width


@dataclass(frozen=True)
class NodeRecord:
    level: int
    index: int  # 1-based within the level
    parent: int | None
    span: tuple[int, int]

    @property
    def width(self) -> int:
        return self.span[1] - self.span[0]


@dataclass(frozen=True)
class ParseGraph:
    spec: DecompositionSpec
    nodes: tuple[NodeRecord, ...]
    _by_level: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def depth(self) -> int:
        return self.spec.depth

    @property
    def levels(self) -> int:
        return self.depth + 1

    @property
    def root(self) -> int:
        return 0

    def level_nodes(self, level: int) -> list[int]:
        return list(self._by_level[level])

    def children(self, node: int) -> list[int]:
        return [i for i in self._by_level.get(self.nodes[node].level - 1, ()) if self.nodes[i].parent == node]

    def leaves(self) -> list[int]:
        return self.level_nodes(0)

    def find(self, level: int, index: int) -> int:
        return self._by_level[level][index - 1]


def build_parse_graph(spec: DecompositionSpec) -> ParseGraph:
    """Realize the node tree, ordered level-major from the root down."""
    nodes = [NodeRecord(spec.depth, 1, None, (0, spec.root_channels))]
    by_level = {spec.depth: [0]}
    for level in range(spec.depth, 0, -1):
        g = spec.factor(level)
        by_level[level - 1] = []
        index = 1
        for parent in by_level[level]:
            start, end = nodes[parent].span
            width = (end - start) // g
            for j in range(g):
                by_level[level - 1].append(len(nodes))
                nodes.append(NodeRecord(level - 1, index, parent, (start + j * width, start + (j + 1) * width)))
                index += 1
    return ParseGraph(spec, tuple(nodes), by_level)


def node_count(spec: DecompositionSpec) -> int:
    """Closed form 1 + sum_k prod_{j>=k} g_j."""
    gs = spec.branching
    return 1 + sum(prod(gs[:i]) for i in range(1, len(gs) + 1))


def slice_node_features(tokens: Array, graph: ParseGraph, node: int) -> Array:
    if tokens.shape[-1] != graph.spec.root_channels:
        raise ShapeError(
            f"tokens carry {tokens.shape[-1]} channels, graph root has {graph.spec.root_channels}")
    start, end = graph.nodes[node].span
    if (start, end) == (0, tokens.shape[-1]):
        return tokens
    return slice_axis(tokens, start, end, axis=-1)


def assemble_leaves(parts: list[Array]) -> Array:
    return concat(parts, axis=-1)


def sibling_groups(graph: ParseGraph, level: int) -> list[list[int]]:
    """Groups of level-``level`` nodes that share a parent, in index order."""
    if not 0 <= level < graph.depth:
        raise ValueError(f"level {level} has no parent level (depth {graph.depth})")
    return [graph.children(p) for p in graph.level_nodes(level + 1)]


def render_tree(graph: ParseGraph) -> str:
    """One line per node, depth-first from the root."""
    lines = []

    def visit(i: int):
        rec = graph.nodes[i]
        pad = "  " * (graph.depth - rec.level)
        parent = "-" if rec.parent is None else f"{graph.nodes[rec.parent].level}.{graph.nodes[rec.parent].index}"
        lines.append(f"{pad}node {rec.level}.{rec.index} parent={parent} "
                     f"channels=[{rec.span[0]},{rec.span[1]}) width={rec.width}")
        for c in graph.children(i):
            visit(c)

    visit(graph.root)
    return "\n".join(lines)
