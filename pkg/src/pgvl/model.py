"""Desk-scale pose network: tiny encoders, a fusion block and a heatmap head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Array, Parameter, ParamStore, expand, gather_rows, linear, reshape, transpose
from .fusion import FusionOptions, global_cross_attention, init_fusion_params, init_global_cross_params, pgvl_forward
from .synthetic import SceneConfig, base_name
from .variants import VariantSpec, init_variant_params, variants_forward

ARCHITECTURES = ("full", "no_context", "no_cross", "no_gm", "no_direction", "no_pgvl",
                 "global_cross_attention_baseline")


@dataclass(frozen=True)
class PromptTable:
    """Maps each joint to a row of the learnable prompt embedding."""

    names: tuple[str, ...]
    direction_words: bool = True

    @property
    def prompts(self) -> tuple[str, ...]:
        return self.names if self.direction_words else tuple(base_name(n) for n in self.names)

    @property
    def vocabulary(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(self.prompts))

    @property
    def rows(self) -> np.ndarray:
        vocab = self.vocabulary
        return np.array([vocab.index(p) for p in self.prompts], dtype=np.int64)


@dataclass(frozen=True)
class ModelSpec:
    scene: SceneConfig
    channels: int = 64
    branching: tuple[int, ...] = (2, 2)
    dims: tuple[int, ...] = (64,)
    architecture: str = "full"
    heads: int = 1
    sigma_init: float = 0.02
    sigma_pos: float = 0.02
    sigma_embed: float = 1.0
    position: str = "sinusoidal"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}")
        if self.position not in ("sinusoidal", "normal"):
            raise ValueError(f"position must be 'sinusoidal' or 'normal', got {self.position!r}")

    @property
    def prompt_table(self) -> PromptTable:
        return PromptTable(self.scene.joints, direction_words=self.architecture != "no_direction")

    @property
    def fusion_options(self) -> FusionOptions:
        return FusionOptions(context=self.architecture != "no_context", cross=self.architecture != "no_cross",
                             guided=self.architecture != "no_gm", heads=self.heads)

    @property
    def uses_pgvl(self) -> bool:
        return self.architecture not in ("no_pgvl", "global_cross_attention_baseline")

    @property
    def variant_spec(self) -> VariantSpec:
        return VariantSpec(self.dims, self.branching)

    @property
    def uses_variants(self) -> bool:
        """False when D is one space at the encoder width: plain PGVL, no map or merge."""
        return tuple(self.dims) != (self.channels,)


def grid_positions(height: int, width: int, channels: int) -> np.ndarray:
    """Fixed 2-D sin/cos table of shape (H*W, C).

    Channels cycle through (row sin, row cos, col sin, col cos), so any
    contiguous slice of four or more channels sees both axes.  Wavelengths
    are log-spaced from 2 cells to twice the grid side and interleaved so
    each quarter of the channels spans short and long ones.  Products of
    these features depend on cell offsets only, which lets attention scores
    express relative positions.
    """
    nf = max(1, -(-channels // 4))
    waves = np.geomspace(2.0, 2.0 * max(height, width), nf)
    if nf % 4 == 0:
        q = nf // 4
        waves = waves[[(j % 4) * q + j // 4 for j in range(nf)]]
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    rows, cols = rows.reshape(-1, 1), cols.reshape(-1, 1)
    omega = 2 * np.pi / waves
    table = np.empty((height * width, 4 * nf))
    table[:, 0::4] = np.sin(rows * omega)
    table[:, 1::4] = np.cos(rows * omega)
    table[:, 2::4] = np.sin(cols * omega)
    table[:, 3::4] = np.cos(cols * omega)
    return table[:, :channels]


def init_model(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> ParamStore:
    sc = spec.scene
    c, s = spec.channels, sc.height * sc.width
    store = ParamStore()
    store.create("visual/patch/weight", (sc.in_channels, c), rng, "normal", 1.0 / np.sqrt(sc.in_channels), dtype)
    store.create("visual/patch/bias", (c,), rng, "zeros", dtype=dtype)
    if spec.position == "sinusoidal":
        table = Array(grid_positions(sc.height, sc.width, c).astype(dtype), requires_grad=True)
        store.add(Parameter("visual/position", table, "sinusoidal"))
    else:
        store.create("visual/position", (s, c), rng, "normal", spec.sigma_pos, dtype)
    store.create("language/embedding", (len(spec.prompt_table.vocabulary), c), rng, "normal", spec.sigma_embed,
                 dtype)
    store.create("language/prefix", (c,), rng, "normal", spec.sigma_init, dtype)
    if spec.uses_pgvl and spec.uses_variants:
        store.update(init_variant_params(spec.variant_spec, c, rng, spec.sigma_init, dtype))
    elif spec.uses_pgvl:
        graph = spec.variant_spec.graphs()[0]
        store.update(init_fusion_params(graph, rng, "pgvl/", spec.sigma_init, dtype))
    elif spec.architecture == "global_cross_attention_baseline":
        store.update(init_global_cross_params(c, rng, spec.sigma_init, dtype))
    store.create("head/weight", (c, sc.num_joints), rng, "normal", spec.sigma_init, dtype)
    store.create("head/bias", (sc.num_joints,), rng, "zeros", dtype=dtype)
    return store


def encode_visual(images: np.ndarray, params: ParamStore) -> Array:
    """Per-cell linear embedding plus a learnable position table: (B, H*W, C)."""
    b, cin, h, w = images.shape
    cells = Array(np.ascontiguousarray(images.reshape(b, cin, h * w).transpose(0, 2, 1)),
                  dtype=params["visual/patch/weight"].dtype)
    return linear(cells, params["visual/patch/weight"], params["visual/patch/bias"]) + params["visual/position"]


def encode_language(table: PromptTable, params: ParamStore, batch: int | None = None) -> Array:
    tokens = gather_rows(params["language/embedding"], table.rows) + params["language/prefix"]
    return tokens if batch is None else expand(tokens, batch)


@dataclass
class Forward:
    heatmaps: Array  # (B, K, H, W)
    tokens_l: Array
    tokens_v: Array
    fused_l: Array
    fused_v: Array
    traces: list


def model_forward(spec: ModelSpec, params: ParamStore, images: np.ndarray, trace: bool = False,
                  graphs=None) -> Forward:
    sc = spec.scene
    b = images.shape[0]
    tok_v = encode_visual(images, params)
    tok_l = encode_language(spec.prompt_table, params, b)
    traces = []
    if spec.uses_pgvl and spec.uses_variants:
        f_l, f_v, traces = variants_forward(tok_l, tok_v, spec.variant_spec, params, spec.fusion_options, trace,
                                            graphs)
    elif spec.uses_pgvl:
        graph = graphs[0] if graphs else spec.variant_spec.graphs()[0]
        f_l, f_v, tr = pgvl_forward(tok_l, tok_v, graph, params, "pgvl/", spec.fusion_options, trace)
        traces = [tr]
    elif spec.architecture == "global_cross_attention_baseline":
        f_l, f_v = global_cross_attention(tok_l, tok_v, params, spec.heads)
    else:
        f_l, f_v = tok_l, tok_v
    logits = linear(f_v, params["head/weight"], params["head/bias"])  # (B, S, K)
    heat = reshape(transpose(logits), (b, sc.num_joints, sc.height, sc.width))
    return Forward(heat, tok_l, tok_v, f_l, f_v, traces)
