"""The seven named architectures, assembled from layer components.

Every model embeds node symbols, projects them to the state dimension, runs
K synchronous GNN steps, and reads out logits through a linear projection of
the final states at the requested nodes. The architectures differ only in
which message, aggregation, and update functions the steps use:

    RGCN          reduced relation matrices, per-relation normalized sum, tanh
    GGNN          reduced relation matrices, sum, GRU (variational dropout)
    RGAT          relational multi-head attention steps, no recurrent update
    SGGNN-RV-GAT  gated messages, relation-value attention, SGRU
    GGNN-RV-GAT   gated messages, relation-value attention, GRU
    SGGNN-RV-mean gated messages, mean aggregation, SGRU
    SGGNN-RM-GAT  full relation matrices, relation-value attention, SGRU

Construction is deterministic in (config, seed). Checkpoints store the
config plus named flat arrays; reloading restores bit-identical evaluation.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, VocabError
from .graph import RelGraph
from .layers import GnnLayer, RgatLayer, glorot, run_gnn, unit_uniform
from .optim import Parameter
from .tensor import ScatterPlan, gather_rows, matmul

CHECKPOINT_VERSION = 1

# message kind, aggregation kind, update kind
_RECIPES = {
    "RGCN": ("mm_red", "rgcn_norm", "tanh"),
    "GGNN": ("mm_red", "sum", "gru"),
    "SGGNN-RV-GAT": ("gcm", "rv_gat", "sgru"),
    "GGNN-RV-GAT": ("gcm", "rv_gat", "gru"),
    "SGGNN-RV-mean": ("gcm", "mean", "sgru"),
    "SGGNN-RM-GAT": ("mm", "rv_gat", "sgru"),
}

MODEL_NAMES = ("RGCN", "GGNN", "RGAT", "SGGNN-RV-GAT", "GGNN-RV-GAT",
               "SGGNN-RV-mean", "SGGNN-RM-GAT")


@dataclass
class ModelConfig:
    model_name: str
    num_relations: int
    num_symbols: int
    num_classes: int
    dim: int = 100
    num_steps: int = 8
    heads: int = 4
    embed_dim: int = 20
    dropout: float = 0.0
    variational_dropout: bool | None = None  # None: on for GGNN, off otherwise
    rgat_sigma: str = "relu"
    rgat_normalization: str = "softmax"
    d_star: int = 50
    weight_sharing: bool = True

    def validate(self):
        if self.model_name not in MODEL_NAMES:
            raise ConfigError(f"unknown model {self.model_name!r}; known: {MODEL_NAMES}")
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        for field in ("num_relations", "num_symbols", "num_classes", "dim",
                      "embed_dim", "heads", "d_star"):
            if getattr(self, field) < 1:
                raise ConfigError(f"{field} must be positive, got {getattr(self, field)}")
        uses_attention = self.model_name == "RGAT" or (
            self.model_name in _RECIPES and _RECIPES[self.model_name][1] == "rv_gat")
        if uses_attention and self.dim % self.heads != 0:
            raise ConfigError(
                f"heads ({self.heads}) must divide dim ({self.dim}) for {self.model_name}")
        if self.rgat_sigma not in ("relu", "linear"):
            raise ConfigError(f"rgat_sigma must be 'relu' or 'linear', got {self.rgat_sigma!r}")
        if self.rgat_normalization not in ("softmax", "ratio"):
            raise ConfigError(
                f"rgat_normalization must be 'softmax' or 'ratio', got {self.rgat_normalization!r}")

    @property
    def variational(self):
        if self.variational_dropout is None:
            return self.model_name == "GGNN"
        return self.variational_dropout


class Model:
    """Embedding, input projection, stacked (or shared) GNN layers, readout."""

    def __init__(self, config, seed):
        config.validate()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        c = config
        self.embedding = Parameter("embedding", unit_uniform(rng, (c.num_symbols, c.embed_dim)))
        self.input_proj = Parameter("input_proj", glorot(rng, c.embed_dim, c.dim))
        n_layers = 1 if c.weight_sharing else c.num_steps
        self.layers = []
        for i in range(n_layers):
            prefix = f"layer{i}"
            if c.model_name == "RGAT":
                self.layers.append(RgatLayer(rng, c.dim, c.num_relations, heads=c.heads,
                                             sigma=c.rgat_sigma,
                                             normalization=c.rgat_normalization,
                                             prefix=prefix))
            else:
                msg, agg, upd = _RECIPES[c.model_name]
                self.layers.append(GnnLayer(rng, c.dim, c.num_relations, msg, agg, upd,
                                            heads=c.heads, d_star=c.d_star, prefix=prefix))
        self.readout = Parameter("readout", glorot(rng, c.dim, c.num_classes))

    def params(self):
        out = [self.embedding, self.input_proj]
        for layer in self.layers:
            out.extend(layer.params())
        out.append(self.readout)
        return out

    def named_params(self):
        named = {p.name: p for p in self.params()}
        if len(named) != len(self.params()):
            raise ConfigError("parameter names are not unique")
        return named

    def num_params(self):
        return sum(p.data.size for p in self.params())

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.params()}

    def load_state_dict(self, state):
        named = self.named_params()
        if set(state) != set(named):
            missing = set(named) - set(state)
            extra = set(state) - set(named)
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in state.items():
            p = named[name]
            if p.data.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: {p.data.shape} vs {arr.shape}")
            p.tensor.data = np.array(arr, dtype=np.float64)

    def initial_states(self, graph):
        labels = graph.node_labels
        if labels.size and labels.max() >= self.config.num_symbols:
            raise VocabError(
                f"symbol id {int(labels.max())} outside vocabulary of {self.config.num_symbols}")
        index = graph.index()
        key = ("label_plan", self.config.num_symbols)
        plan = index.memo.get(key)
        if plan is None:
            plan = ScatterPlan(labels, self.config.num_symbols)
            index.memo[key] = plan
        emb = gather_rows(self.embedding.tensor, labels, plan=plan)
        return matmul(emb, self.input_proj.tensor)

    def forward(self, graph, readout_nodes, training=False, rng=None, capture=None):
        """Logits [len(readout_nodes) x num_classes] for the given graph."""
        c = self.config
        if graph.num_relations != c.num_relations:
            raise ConfigError(
                f"graph has {graph.num_relations} relations, model expects {c.num_relations}")
        h0 = self.initial_states(graph)
        states = run_gnn(graph, h0, c.num_steps, self.layers,
                         weight_sharing=c.weight_sharing, dropout_rate=c.dropout,
                         variational=c.variational, training=training, rng=rng)
        if capture is not None:
            capture["initial_states"] = h0
            capture["final_states"] = states
        readout_nodes = np.asarray(readout_nodes, dtype=np.int64)
        picked = gather_rows(states, readout_nodes)
        return matmul(picked, self.readout.tensor)


def build_model(config, seed):
    return Model(config, seed)


def save_checkpoint(model, path):
    meta = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "seed": model.seed,
        "config": asdict(model.config),
    })
    arrays = {f"param:{p.name}": p.data for p in model.params()}
    np.savez(path, meta=np.array(meta), **arrays)


def load_checkpoint(path):
    with np.load(path) as archive:
        meta = json.loads(str(archive["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError(
                f"checkpoint format {meta.get('format_version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        config = ModelConfig(**meta["config"])
        model = build_model(config, meta["seed"])
        state = {key.removeprefix("param:"): archive[key]
                 for key in archive.files if key.startswith("param:")}
    model.load_state_dict(state)
    return model
