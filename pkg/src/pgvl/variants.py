"""Fusion over several semantic spaces.

Tokens are linearly mapped into t spaces of widths D = [d_1, ..., d_t], each
space runs its own fusion block, the per-space results are concatenated
along channels and a zero-initialized projection brings the sum of widths
back to the encoder width before the residual.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .engine import Array, ParamStore, concat, linear
from .fusion import MODALITIES, FusionOptions, init_fusion_params, pgvl_forward
from .parse_graph import ConfigError, DecompositionSpec, ParseGraph, build_parse_graph


@dataclass(frozen=True)
class VariantSpec:
    dims: tuple[int, ...]
    branching: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "branching", tuple(int(g) for g in self.branching))
        if not self.dims:
            raise ConfigError("at least one semantic space is required")
        leaves = prod(self.branching)
        for d in self.dims:
            if d < 1 or d % leaves:
                raise ConfigError(f"space width {d} is not divisible by the leaf count {leaves}")

    def graphs(self) -> list[ParseGraph]:
        return [build_parse_graph(DecompositionSpec(self.branching, d)) for d in self.dims]


def init_variant_params(spec: VariantSpec, in_channels: int, rng: np.random.Generator, sigma: float = 0.02,
                        dtype=np.float32) -> ParamStore:
    store = ParamStore()
    for i, (d, graph) in enumerate(zip(spec.dims, spec.graphs()), start=1):
        for mod in MODALITIES:
            store.create(f"space{i}/map/{mod}/weight", (in_channels, d), rng, "normal", sigma, dtype)
            store.create(f"space{i}/map/{mod}/bias", (d,), rng, "zeros", dtype=dtype)
        store.update(init_fusion_params(graph, rng, prefix=f"space{i}/", sigma=sigma, dtype=dtype))
    total = sum(spec.dims)
    for mod in MODALITIES:
        store.create(f"merge/{mod}/weight", (total, in_channels), rng, "zeros", dtype=dtype)
        store.create(f"merge/{mod}/bias", (in_channels,), rng, "zeros", dtype=dtype)
    return store


def map_to_spaces(tokens: Array, modality: str, spec: VariantSpec, params: ParamStore) -> list[Array]:
    return [linear(tokens, params[f"space{i}/map/{modality}/weight"], params[f"space{i}/map/{modality}/bias"])
            for i in range(1, len(spec.dims) + 1)]


def variants_concat(tokens_l: Array, tokens_v: Array, spec: VariantSpec, params: ParamStore,
                    options: FusionOptions = FusionOptions(), trace: bool = False, graphs=None):
    """Per-space fusion results concatenated along channels (before merging)."""
    graphs = graphs or spec.graphs()
    spaces_l = map_to_spaces(tokens_l, "language", spec, params)
    spaces_v = map_to_spaces(tokens_v, "vision", spec, params)
    outs_l, outs_v, traces = [], [], []
    for i, (g, sl, sv) in enumerate(zip(graphs, spaces_l, spaces_v), start=1):
        fl, fv, tr = pgvl_forward(sl, sv, g, params, prefix=f"space{i}/", options=options, trace=trace)
        outs_l.append(fl)
        outs_v.append(fv)
        traces.append(tr)
    cat_l = outs_l[0] if len(outs_l) == 1 else concat(outs_l, axis=-1)
    cat_v = outs_v[0] if len(outs_v) == 1 else concat(outs_v, axis=-1)
    return cat_l, cat_v, traces


def variants_forward(tokens_l: Array, tokens_v: Array, spec: VariantSpec, params: ParamStore,
                     options: FusionOptions = FusionOptions(), trace: bool = False, graphs=None):
    """Returns (F_L_multi, F_V_multi, per-space traces)."""
    cat_l, cat_v, traces = variants_concat(tokens_l, tokens_v, spec, params, options, trace, graphs)
    f_l = tokens_l + linear(cat_l, params["merge/language/weight"], params["merge/language/bias"])
    f_v = tokens_v + linear(cat_v, params["merge/vision/weight"], params["merge/vision/bias"])
    return f_l, f_v, traces
