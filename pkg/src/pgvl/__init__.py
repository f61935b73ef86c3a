"""Parse-graph visual-language fusion with a small reverse-mode array engine."""

from .engine import Array, Parameter, ParamStore, backward
from .fusion import FusionOptions, FusionTrace, attention, context_attention, cross_modal, guided_module, pgvl_forward
from .parse_graph import DecompositionSpec, ParseGraph, build_parse_graph, sibling_groups, slice_node_features
from .variants import VariantSpec, variants_forward

__version__ = "0.1.0"
