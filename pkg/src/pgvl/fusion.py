"""Parse-graph visual-language fusion.

Both token matrices are decomposed along channels with one shared parse
graph.  Bottom-up, every node gathers sibling context (self-attention over
its sibling group stacked along rows) and cross-modal information (attention
into the matching node of the other modality); the two are summed.  The
Guided Module then rebuilds each parent from its children's channel
concatenation, queried once by the parent's top-down features and once by a
width-adjusted copy of the root.  The rebuilt root goes through a
zero-initialized output projection and is added back onto the input tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import (Array, ParamStore, ShapeError, concat, linear, matmul, scale, softmax_rows, split,
                     transpose)
from .parse_graph import ParseGraph, sibling_groups, slice_node_features

MODALITIES = ("language", "vision")


@dataclass(frozen=True)
class FusionOptions:
    context: bool = True
    cross: bool = True
    guided: bool = True
    heads: int = 1


@dataclass
class FusionTrace:
    """Per-node intermediate features, keyed by (modality, node id)."""

    graph: ParseGraph
    nodes: dict[tuple[str, int], dict[str, np.ndarray]] = field(default_factory=dict)

    def record(self, modality: str, node: int, key: str, value: Array) -> None:
        self.nodes.setdefault((modality, node), {})[key] = value.data.copy()

    def fused(self, modality: str, node: int) -> np.ndarray:
        """The node's fused feature: X below the root, the GM output at the root."""
        entry = self.nodes[(modality, node)]
        return entry["combined"] if "combined" in entry else entry["gm"]


# ---------------------------------------------------------------- attention

def attention(q: Array, k: Array, v: Array, heads: int = 1) -> Array:
    """softmax(q k^T / sqrt(d)) v over the trailing (rows, channels) axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    if heads == 1:
        d = q.shape[-1]
        weights = softmax_rows(matmul(scale(q, 1.0 / math.sqrt(d)), transpose(k)))
        return matmul(weights, v)
    d, dv = q.shape[-1], v.shape[-1]
    if d % heads or dv % heads:
        raise ShapeError(f"attention: widths {d}/{dv} not divisible by {heads} heads")
    qs, ks, vs = (split(x, [x.shape[-1] // heads] * heads) for x in (q, k, v))
    return concat([attention(a, b, c) for a, b, c in zip(qs, ks, vs)], axis=-1)


def _project(x: Array, params: ParamStore | None, key: str | None) -> Array:
    if params is None or key is None:
        return x
    return linear(x, params[f"{key}/weight"], params[f"{key}/bias"])


def context_attention(group: list[Array], params: ParamStore | None = None, key: str | None = None,
                      heads: int = 1) -> list[Array]:
    """Self-attention over a sibling group stacked along the row axis.

    ``key`` names the projection block; with no params the raw features act
    as queries, keys and values.
    """
    if not group:
        raise ShapeError("context_attention: empty sibling group")
    if any(g.shape != group[0].shape for g in group):
        raise ShapeError(f"context_attention: heterogeneous sibling shapes {[g.shape for g in group]}")
    stacked = group[0] if len(group) == 1 else concat(group, axis=-2)
    q = _project(stacked, params, key and f"{key}/q")
    k = _project(stacked, params, key and f"{key}/k")
    v = _project(stacked, params, key and f"{key}/v")
    out = attention(q, k, v, heads)
    if len(group) == 1:
        return [out]
    return split(out, [g.shape[-2] for g in group], axis=-2)


def cross_modal(node_l: Array, node_v: Array, params: ParamStore | None = None,
                key_l: str | None = None, key_v: str | None = None, heads: int = 1) -> tuple[Array, Array]:
    """Language rows attend to visual rows and vice versa."""
    if node_l.shape[-1] != node_v.shape[-1]:
        raise ShapeError(f"cross_modal: channel mismatch {node_l.shape} vs {node_v.shape}")
    m_l = attention(_project(node_l, params, key_l and f"{key_l}/q"),
                    _project(node_v, params, key_l and f"{key_l}/k"),
                    _project(node_v, params, key_l and f"{key_l}/v"), heads)
    m_v = attention(_project(node_v, params, key_v and f"{key_v}/q"),
                    _project(node_l, params, key_v and f"{key_v}/k"),
                    _project(node_l, params, key_v and f"{key_v}/v"), heads)
    return m_l, m_v


def guided_module(children_x: list[Array], parent: Array, root: Array, params: ParamStore | None = None,
                  key: str | None = None, heads: int = 1) -> Array:
    """Rebuild a parent from its processed children.

    The children are concatenated along channels into F_c, which must match
    the parent's width.  The root, mapped to that width by a linear layer,
    and the parent each query F_c; the two results are summed.
    """
    f_c = children_x[0] if len(children_x) == 1 else concat(children_x, axis=-1)
    if f_c.shape != parent.shape:
        raise ShapeError(f"guided_module: children concatenate to {f_c.shape}, parent is {parent.shape}")
    if key is None:
        if root.shape[-1] != parent.shape[-1]:
            raise ShapeError("guided_module: without params the root must already match the parent width")
        root_q = root
    else:
        root_q = linear(root, params[f"{key}/root_linear/weight"], params[f"{key}/root_linear/bias"])
        root_q = _project(root_q, params, f"{key}/root_query")
    parent_q = _project(parent, params, key and f"{key}/parent_query")
    return attention(root_q, f_c, f_c, heads) + attention(parent_q, f_c, f_c, heads)


# ---------------------------------------------------------------- parameters

def _proj_block(store: ParamStore, name: str, d_in: int, d_out: int, rng, dtype, scheme="normal",
                sigma=0.02):
    store.create(f"{name}/weight", (d_in, d_out), rng, scheme, sigma, dtype)
    store.create(f"{name}/bias", (d_out,), rng, "zeros", dtype=dtype)


def init_fusion_params(graph: ParseGraph, rng: np.random.Generator, prefix: str = "", sigma: float = 0.02,
                       dtype=np.float32) -> ParamStore:
    """Weights for one fusion block, shared across siblings within a level."""
    store = ParamStore()
    c = graph.spec.root_channels
    for level in range(graph.depth):
        ch = graph.spec.channels(level)
        for mod in MODALITIES:
            for role in ("context", "cross"):
                for p in "qkv":
                    _proj_block(store, f"{prefix}level{level}/{role}/{mod}/{p}", ch, ch, rng, dtype, sigma=sigma)
    for level in range(1, graph.depth + 1):
        ch = graph.spec.channels(level)
        for mod in MODALITIES:
            base = f"{prefix}level{level}/gm/{mod}"
            _proj_block(store, f"{base}/root_linear", c, ch, rng, dtype, sigma=sigma)
            _proj_block(store, f"{base}/root_query", ch, ch, rng, dtype, sigma=sigma)
            _proj_block(store, f"{base}/parent_query", ch, ch, rng, dtype, sigma=sigma)
    for mod in MODALITIES:
        _proj_block(store, f"{prefix}output/{mod}", c, c, rng, dtype, scheme="zeros")
    return store


# ---------------------------------------------------------------- forward

def pgvl_forward(tokens_l: Array, tokens_v: Array, graph: ParseGraph, params: ParamStore, prefix: str = "",
                 options: FusionOptions = FusionOptions(), trace: bool = False):
    """Run the bottom-up recursion; returns (F_L_res, F_V_res, trace or None)."""
    c = graph.spec.root_channels
    if tokens_l.shape[-1] != c or tokens_v.shape[-1] != c:
        raise ShapeError(f"fusion expects {c} channels, got {tokens_l.shape} and {tokens_v.shape}")
    tr = FusionTrace(graph) if trace else None
    tokens = {"language": tokens_l, "vision": tokens_v}
    topdown = {mod: {i: slice_node_features(tokens[mod], graph, i) for i in range(len(graph.nodes))}
               for mod in MODALITIES}
    current = {mod: {i: topdown[mod][i] for i in graph.leaves()} for mod in MODALITIES}
    heads = options.heads

    for level in range(graph.depth):
        ctx = {mod: {} for mod in MODALITIES}
        if options.context:
            for group in sibling_groups(graph, level):
                for mod in MODALITIES:
                    outs = context_attention([current[mod][i] for i in group], params,
                                             f"{prefix}level{level}/context/{mod}", heads)
                    ctx[mod].update(zip(group, outs))
        combined = {mod: {} for mod in MODALITIES}
        for i in graph.level_nodes(level):
            if options.cross:
                m_l, m_v = cross_modal(current["language"][i], current["vision"][i], params,
                                       f"{prefix}level{level}/cross/language",
                                       f"{prefix}level{level}/cross/vision", heads)
                cross = {"language": m_l, "vision": m_v}
            for mod in MODALITIES:
                if options.context and options.cross:
                    x = ctx[mod][i] + cross[mod]
                elif options.context:
                    x = ctx[mod][i]
                elif options.cross:
                    x = cross[mod]
                else:
                    x = current[mod][i]
                combined[mod][i] = x
                if tr is not None:
                    if options.context:
                        tr.record(mod, i, "context", ctx[mod][i])
                    if options.cross:
                        tr.record(mod, i, "cross", cross[mod])
                    tr.record(mod, i, "combined", x)

        parent_level = level + 1
        nxt = {mod: {} for mod in MODALITIES}
        for p in graph.level_nodes(parent_level):
            kids = graph.children(p)
            for mod in MODALITIES:
                xs = [combined[mod][i] for i in kids]
                width = sum(x.shape[-1] for x in xs)
                if width != graph.nodes[p].width:
                    raise ShapeError(f"channel conservation violated at node {p}: {width} != {graph.nodes[p].width}")
                if options.guided:
                    new = guided_module(xs, topdown[mod][p], tokens[mod], params,
                                        f"{prefix}level{parent_level}/gm/{mod}", heads)
                else:
                    new = xs[0] if len(xs) == 1 else concat(xs, axis=-1)
                nxt[mod][p] = new
                if tr is not None:
                    tr.record(mod, p, "gm", new)
        current = nxt

    root = graph.root
    out = []
    for mod in MODALITIES:
        delta = linear(current[mod][root], params[f"{prefix}output/{mod}/weight"],
                       params[f"{prefix}output/{mod}/bias"])
        out.append(tokens[mod] + delta)
    return out[0], out[1], tr


def init_global_cross_params(channels: int, rng: np.random.Generator, sigma: float = 0.02,
                             dtype=np.float32) -> ParamStore:
    store = ParamStore()
    for mod in MODALITIES:
        for p in "qkv":
            _proj_block(store, f"global/cross/{mod}/{p}", channels, channels, rng, dtype, sigma=sigma)
        _proj_block(store, f"global/output/{mod}", channels, channels, rng, dtype, scheme="zeros")
    return store


def global_cross_attention(tokens_l: Array, tokens_v: Array, params: ParamStore, heads: int = 1):
    """Single bidirectional cross-attention at full width, with residual."""
    m_l, m_v = cross_modal(tokens_l, tokens_v, params, "global/cross/language", "global/cross/vision", heads)
    f_l = tokens_l + _project(m_l, params, "global/output/language")
    f_v = tokens_v + _project(m_v, params, "global/output/vision")
    return f_l, f_v
