"""Multi-relational graph networks with gated messages, relation-value
attention, and a stacked-gate recurrent update, plus the two synthetic
long-range tasks used to compare them."""

from .errors import (ConfigError, ContractError, DimensionError, ParseError,
                     RelgnnError, VocabError)
from .graph import RelGraph, add_self_edges, from_text, incoming, to_text, union
from .models import MODEL_NAMES, Model, ModelConfig, build_model
from .tasks import (Dataset, TaskInstance, conditional_recall_label,
                    gen_conditional_recall, gen_tree, gen_tree_max,
                    seq_to_graph, tree_max_label, tree_to_graph)

__all__ = [
    "ConfigError", "ContractError", "DimensionError", "ParseError",
    "RelgnnError", "VocabError",
    "RelGraph", "add_self_edges", "from_text", "incoming", "to_text", "union",
    "MODEL_NAMES", "Model", "ModelConfig", "build_model",
    "Dataset", "TaskInstance", "conditional_recall_label",
    "gen_conditional_recall", "gen_tree", "gen_tree_max", "seq_to_graph",
    "tree_max_label", "tree_to_graph",
]

__version__ = "0.1.0"
