"""Message, aggregation, and update functions, composed into GNN steps.

One step maps step-(k-1) node states to step-k states for every node
simultaneously: a message function computes one vector per edge from the
source state and the edge's relation, an aggregation function reduces each
node's incoming messages to a single vector, and an update function mixes
that aggregate with the node's previous state.

Everything here is batched: messages live in a [num_edges x D] matrix whose
rows follow the destination-sorted order of GraphIndex, so aggregation is a
segment reduction and per-relation weights are applied group by group and
restored with one permutation gather.

Weight matrices are stored in [in, out] orientation and applied as x @ W;
bias vectors start at zero. The candidate pre-activations of both recurrent
updates carry a bias vector even though the referenced formulations print
them without one; see phi_gru / phi_sgru.
"""

import math

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .graph import RelGraph
from .optim import Parameter
from .tensor import (add, block_colsum, celu, concat, div, dropout,
                     gather_rows, make_dropout_mask, matmul, mul, one_minus,
                     relu, repeat_cols, reshape, scale, scale_rows,
                     segment_mean, segment_softmax, segment_sum, sigmoid,
                     softmax, split, tanh)

MESSAGE_KINDS = ("mm", "mm_red", "gcm")
AGGREGATE_KINDS = ("sum", "mean", "rgcn_norm", "rv_gat")
UPDATE_KINDS = ("tanh", "gru", "sgru")


def glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def unit_uniform(rng, shape, scale_=1.0):
    # Embeddings and relation vectors need O(1) magnitude: far smaller and the
    # gates all sit at their neutral points (sigmoids at 0.5, mixtures uniform,
    # attention flat), which leaves the whole network a slow linear contraction
    # that optimization struggles to escape.
    return rng.uniform(-scale_, scale_, size=shape)


# ---------------------------------------------------------------------------
# parameter records

class RelationTable:
    """Per-relation parameters: embedding vectors a_r, plus whichever matrix
    family the active message function needs (full D x D, or the shared-
    projection reduced form with a d* x d* core per relation)."""

    def __init__(self, rng, num_relations, dim, kind, d_star=None,
                 with_vectors=True, prefix="rel"):
        self.num_relations = num_relations
        self.dim = dim
        self.kind = kind
        # only message gating and attention keys read the relation vectors;
        # plain matrix models must not carry parameters that get no gradient
        self.vectors = (Parameter(f"{prefix}.vectors",
                                  unit_uniform(rng, (num_relations, dim)))
                        if with_vectors else None)
        self.full = None
        self.w_a = self.w_b = None
        self.core = None
        if kind == "mm":
            self.full = [Parameter(f"{prefix}.w[{r}]", glorot(rng, dim, dim))
                         for r in range(num_relations)]
        elif kind == "mm_red":
            if d_star is None:
                raise ConfigError("reduced relation matrices need d_star")
            self.w_a = Parameter(f"{prefix}.w_a", glorot(rng, dim, d_star))
            self.w_b = Parameter(f"{prefix}.w_b", glorot(rng, d_star, dim))
            self.core = [Parameter(f"{prefix}.core[{r}]", glorot(rng, d_star, d_star))
                         for r in range(num_relations)]
        elif kind == "gcm":
            pass
        else:
            raise ConfigError(f"unknown relation table kind {kind!r}")

    def params(self):
        out = [self.vectors] if self.vectors is not None else []
        if self.full:
            out.extend(self.full)
        if self.core:
            out.extend([self.w_a, self.w_b])
            out.extend(self.core)
        return out


class GcmParams:
    """Weights of the gated message function (shared across relations)."""

    def __init__(self, rng, dim, prefix="gcm"):
        self.w_a = Parameter(f"{prefix}.w_a", glorot(rng, 2 * dim, dim))
        self.b_a = Parameter(f"{prefix}.b_a", np.zeros(dim))
        self.w_m = Parameter(f"{prefix}.w_m", glorot(rng, dim, dim))
        self.b_m = Parameter(f"{prefix}.b_m", np.zeros(dim))
        self.w_b = Parameter(f"{prefix}.w_b", glorot(rng, dim, dim))
        self.b_b = Parameter(f"{prefix}.b_b", np.zeros(dim))

    def params(self):
        return [self.w_a, self.b_a, self.w_m, self.b_m, self.w_b, self.b_b]


class AttnParams:
    """Multi-head attention over incoming messages.

    Heads are stored stacked: query [D, D] and key [2D, D] hold all H head
    matrices side by side, head h owning output columns h*D/H..(h+1)*D/H.
    """

    def __init__(self, rng, dim, heads, prefix="attn"):
        if dim % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide state dim ({dim})")
        self.heads = heads
        self.query = Parameter(f"{prefix}.query", glorot(rng, dim, dim))
        self.key = Parameter(f"{prefix}.key", glorot(rng, 2 * dim, dim))

    def params(self):
        return [self.query, self.key]


class GruParams:
    def __init__(self, rng, dim, prefix="gru"):
        self.w_r = Parameter(f"{prefix}.w_r", glorot(rng, dim, dim))
        self.u_r = Parameter(f"{prefix}.u_r", glorot(rng, dim, dim))
        self.b_r = Parameter(f"{prefix}.b_r", np.zeros(dim))
        self.w_z = Parameter(f"{prefix}.w_z", glorot(rng, dim, dim))
        self.u_z = Parameter(f"{prefix}.u_z", glorot(rng, dim, dim))
        self.b_z = Parameter(f"{prefix}.b_z", np.zeros(dim))
        self.w = Parameter(f"{prefix}.w", glorot(rng, dim, dim))
        self.u = Parameter(f"{prefix}.u", glorot(rng, dim, dim))
        self.b = Parameter(f"{prefix}.b", np.zeros(dim))

    def params(self):
        return [self.w_r, self.u_r, self.b_r, self.w_z, self.u_z, self.b_z,
                self.w, self.u, self.b]


class SgruParams:
    def __init__(self, rng, dim, prefix="sgru"):
        def mat(name):
            return Parameter(f"{prefix}.{name}", glorot(rng, dim, dim))

        def vec(name):
            return Parameter(f"{prefix}.{name}", np.zeros(dim))

        self.w_rh, self.u_rh, self.b_rh = mat("w_rh"), mat("u_rh"), vec("b_rh")
        self.w_rx, self.u_rx, self.b_rx = mat("w_rx"), mat("u_rx"), vec("b_rx")
        self.w_zx, self.u_zx, self.b_zx = mat("w_zx"), mat("u_zx"), vec("b_zx")
        self.w_zh, self.u_zh, self.b_zh = mat("w_zh"), mat("u_zh"), vec("b_zh")
        self.w_zu, self.u_zu, self.b_zu = mat("w_zu"), mat("u_zu"), vec("b_zu")
        self.w, self.u, self.b = mat("w"), mat("u"), vec("b")

    def params(self):
        return [self.w_rh, self.u_rh, self.b_rh, self.w_rx, self.u_rx, self.b_rx,
                self.w_zx, self.u_zx, self.b_zx, self.w_zh, self.u_zh, self.b_zh,
                self.w_zu, self.u_zu, self.b_zu, self.w, self.u, self.b]


class RgatParams:
    """Per-relation transformation plus per-relation stacked-head q/k/v."""

    def __init__(self, rng, dim, heads, num_relations, prefix="rgat"):
        if dim % heads != 0:
            raise ConfigError(f"heads ({heads}) must divide state dim ({dim})")
        self.heads = heads
        self.w = [Parameter(f"{prefix}.w[{r}]", glorot(rng, dim, dim))
                  for r in range(num_relations)]
        self.q = [Parameter(f"{prefix}.q[{r}]", glorot(rng, dim, dim))
                  for r in range(num_relations)]
        self.k = [Parameter(f"{prefix}.k[{r}]", glorot(rng, dim, dim))
                  for r in range(num_relations)]
        self.v = [Parameter(f"{prefix}.v[{r}]", glorot(rng, dim, dim))
                  for r in range(num_relations)]

    def params(self):
        return [p for group in (self.w, self.q, self.k, self.v) for p in group]


# ---------------------------------------------------------------------------
# message functions (edge-row batched)

def mu_mm(h_rows, rel_matrix):
    """Per-relation matrix message: rows of h_rows share one relation."""
    return matmul(h_rows, rel_matrix)


def mu_mm_red(h_rows, w_a, core, w_b):
    """Reduced-rank relation message: project in, relation core, project out."""
    return matmul(matmul(matmul(h_rows, w_a), core), w_b)


def mu_gcm(h_rows, a_rows, params):
    """Gated message: a sigmoid gate mixes the source state with a
    relation-aware update, both computed from one shared CELU feature."""
    if h_rows.shape != a_rows.shape:
        raise DimensionError(
            f"state rows {h_rows.shape} and relation rows {a_rows.shape} must match")
    c = celu(add(matmul(concat([h_rows, a_rows], axis=1), params.w_a.tensor),
                 params.b_a.tensor))
    m = sigmoid(add(matmul(c, params.w_m.tensor), params.b_m.tensor))
    u = add(matmul(c, params.w_b.tensor), params.b_b.tensor)
    return add(mul(m, h_rows), mul(one_minus(m), u))


def _per_relation(h, index, apply_one):
    """Apply a relation-specific map to each relation's source states and
    reassemble the rows in destination-sorted edge order."""
    parts = []
    for r, pos in enumerate(index.rel_groups):
        if len(pos) == 0:
            continue
        rows = gather_rows(h, index.src[pos], plan=index.group_src_plans[r])
        parts.append(apply_one(r, rows))
    return gather_rows(concat(parts, axis=0), index.restore, plan=index.restore_plan)


def edge_messages(kind, h, index, table, gcm=None):
    """Messages for every edge, rows in destination-sorted order."""
    if kind == "mm":
        return _per_relation(h, index, lambda r, rows: mu_mm(rows, table.full[r].tensor))
    if kind == "mm_red":
        return _per_relation(
            h, index,
            lambda r, rows: mu_mm_red(rows, table.w_a.tensor,
                                      table.core[r].tensor, table.w_b.tensor))
    if kind == "gcm":
        h_src = gather_rows(h, index.src, plan=index.src_plan)
        a_rows = gather_rows(table.vectors.tensor, index.rel, plan=index.rel_plan)
        return mu_gcm(h_src, a_rows, gcm)
    raise ConfigError(f"unknown message kind {kind!r}; known: {MESSAGE_KINDS}")


# ---------------------------------------------------------------------------
# aggregation functions

def gamma_sum(messages, index):
    return segment_sum(messages, index.offsets)


def gamma_mean(messages, index):
    return segment_mean(messages, index.offsets)


def gamma_rgcn_norm(messages, index):
    """Sum with each message scaled by 1/|N_r(v)| for its (node, relation)."""
    return segment_sum(scale_rows(messages, index.rel_norm), index.offsets)


def gamma_rv_gat(h_nodes, messages, a_rows, index, attn):
    """Scaled multi-head attention over incoming messages.

    Queries come from the destination's current state, keys from the message
    concatenated with the relation vector, and values are the untransformed
    messages split into H equal slices.
    """
    dim = h_nodes.shape[1]
    heads = attn.heads
    if dim % heads != 0:
        raise ConfigError(f"heads ({heads}) must divide state dim ({dim})")
    head_dim = dim // heads
    q_nodes = matmul(h_nodes, attn.query.tensor)
    q_edges = gather_rows(q_nodes, index.dst, plan=index.dst_plan)
    k_edges = matmul(concat([messages, a_rows], axis=1), attn.key.tensor)
    scores = scale(block_colsum(mul(q_edges, k_edges), heads),
                   1.0 / math.sqrt(head_dim))
    alpha = segment_softmax(scores, index.offsets)
    weighted = mul(messages, repeat_heads(alpha, head_dim))
    return segment_sum(weighted, index.offsets)


def repeat_heads(alpha, head_dim):
    """Expand per-head weights [e, H] to the block column layout [e, D]."""
    return repeat_cols(alpha, head_dim)


# ---------------------------------------------------------------------------
# update functions

def phi_gru(h_prev, hbar, p):
    """Gated recurrent update between previous state and aggregate.

    r and z follow the usual reset/update gating; the candidate carries a
    bias vector (a deliberate addition, the referenced form has none)."""
    r = sigmoid(add(add(matmul(hbar, p.w_r.tensor), matmul(h_prev, p.u_r.tensor)),
                    p.b_r.tensor))
    z = sigmoid(add(add(matmul(hbar, p.w_z.tensor), matmul(h_prev, p.u_z.tensor)),
                    p.b_z.tensor))
    cand = tanh(add(add(matmul(hbar, p.w.tensor),
                        matmul(mul(h_prev, r), p.u.tensor)), p.b.tensor))
    return add(mul(one_minus(z), h_prev), mul(z, cand))


def phi_sgru(h_prev, hbar, p):
    """Symmetrically gated update: both inputs get their own reset gate and
    the output is a per-dimension softmax mixture of aggregate, previous
    state, and candidate. Candidate bias added as in phi_gru."""
    def gate_pre(w, u, b):
        return add(add(matmul(hbar, w.tensor), matmul(h_prev, u.tensor)), b.tensor)

    r_h = sigmoid(gate_pre(p.w_rh, p.u_rh, p.b_rh))
    r_x = sigmoid(gate_pre(p.w_rx, p.u_rx, p.b_rx))
    z_x = gate_pre(p.w_zx, p.u_zx, p.b_zx)
    z_h = gate_pre(p.w_zh, p.u_zh, p.b_zh)
    z_u = gate_pre(p.w_zu, p.u_zu, p.b_zu)

    n, d = z_x.shape
    stacked = concat([reshape(z, (n, d, 1)) for z in (z_x, z_h, z_u)], axis=2)
    mix = softmax(stacked, axis=2)
    zx_hat, zh_hat, zu_hat = (reshape(part, (n, d))
                              for part in split(mix, [1, 1, 1], axis=2))

    cand = tanh(add(add(matmul(mul(hbar, r_x), p.w.tensor),
                        matmul(mul(h_prev, r_h), p.u.tensor)), p.b.tensor))
    return add(add(mul(zx_hat, hbar), mul(zh_hat, h_prev)), mul(zu_hat, cand))


# ---------------------------------------------------------------------------
# layers

class GnnLayer:
    """One composed message/aggregate/update step."""

    def __init__(self, rng, dim, num_relations, message_kind, aggregate_kind,
                 update_kind, heads=4, d_star=50, prefix="layer"):
        if message_kind not in MESSAGE_KINDS:
            raise ConfigError(f"unknown message kind {message_kind!r}")
        if aggregate_kind not in AGGREGATE_KINDS:
            raise ConfigError(f"unknown aggregation kind {aggregate_kind!r}")
        if update_kind not in UPDATE_KINDS:
            raise ConfigError(f"unknown update kind {update_kind!r}")
        self.dim = dim
        self.message_kind = message_kind
        self.aggregate_kind = aggregate_kind
        self.update_kind = update_kind
        table_kind = message_kind if message_kind in ("mm", "mm_red") else "gcm"
        needs_vectors = message_kind == "gcm" or aggregate_kind == "rv_gat"
        self.table = RelationTable(rng, num_relations, dim, table_kind,
                                   d_star=d_star, with_vectors=needs_vectors,
                                   prefix=f"{prefix}.rel")
        self.gcm = GcmParams(rng, dim, prefix=f"{prefix}.gcm") if message_kind == "gcm" else None
        self.attn = (AttnParams(rng, dim, heads, prefix=f"{prefix}.attn")
                     if aggregate_kind == "rv_gat" else None)
        self.gru = GruParams(rng, dim, prefix=f"{prefix}.gru") if update_kind == "gru" else None
        self.sgru = SgruParams(rng, dim, prefix=f"{prefix}.sgru") if update_kind == "sgru" else None

    def params(self):
        out = self.table.params()
        for rec in (self.gcm, self.attn, self.gru, self.sgru):
            if rec is not None:
                out.extend(rec.params())
        return out

    def step(self, h, index, training=False, rng=None, dropout_rate=0.0, mask=None):
        h_in = dropout(h, dropout_rate, training, rng=rng, mask=mask)
        msgs = edge_messages(self.message_kind, h_in, index, self.table, self.gcm)
        if self.aggregate_kind == "sum":
            hbar = gamma_sum(msgs, index)
        elif self.aggregate_kind == "mean":
            hbar = gamma_mean(msgs, index)
        elif self.aggregate_kind == "rgcn_norm":
            hbar = gamma_rgcn_norm(msgs, index)
        else:
            a_rows = gather_rows(self.table.vectors.tensor, index.rel, plan=index.rel_plan)
            hbar = gamma_rv_gat(h_in, msgs, a_rows, index, self.attn)
        if self.update_kind == "tanh":
            return tanh(hbar)
        if self.update_kind == "gru":
            return phi_gru(h_in, hbar, self.gru)
        return phi_sgru(h_in, hbar, self.sgru)


class RgatLayer:
    """Relational attention step: per-relation node transforms feed
    relation-and-head-specific queries and keys, values come from the raw
    state, and the head concatenation passes through relu or identity.

    Scores are normalized with a softmax by default; the raw-ratio
    normalization (score over summed scores) is available as an alternative
    but divides by zero whenever a node's scores sum to zero.
    """

    def __init__(self, rng, dim, num_relations, heads=4, sigma="relu",
                 normalization="softmax", prefix="layer"):
        if sigma not in ("relu", "linear"):
            raise ConfigError(f"rgat sigma must be 'relu' or 'linear', got {sigma!r}")
        if normalization not in ("softmax", "ratio"):
            raise ConfigError(f"rgat normalization must be 'softmax' or 'ratio', got {normalization!r}")
        self.dim = dim
        self.heads = heads
        self.sigma = sigma
        self.normalization = normalization
        self.p = RgatParams(rng, dim, heads, num_relations, prefix=f"{prefix}.rgat")

    def params(self):
        return self.p.params()

    def step(self, h, index, training=False, rng=None, dropout_rate=0.0, mask=None):
        h_in = dropout(h, dropout_rate, training, rng=rng, mask=mask)
        head_dim = self.dim // self.heads
        value_parts, score_parts = [], []
        for r, pos in enumerate(index.rel_groups):
            if len(pos) == 0:
                continue
            g_r = matmul(h_in, self.p.w[r].tensor)
            q_r = matmul(g_r, self.p.q[r].tensor)
            k_r = matmul(g_r, self.p.k[r].tensor)
            v_r = matmul(h_in, self.p.v[r].tensor)
            q_e = gather_rows(q_r, index.dst[pos], plan=index.group_dst_plans[r])
            k_e = gather_rows(k_r, index.src[pos], plan=index.group_src_plans[r])
            v_e = gather_rows(v_r, index.src[pos], plan=index.group_src_plans[r])
            score_parts.append(block_colsum(mul(q_e, k_e), self.heads))
            value_parts.append(v_e)
        scores = gather_rows(concat(score_parts, axis=0), index.restore,
                             plan=index.restore_plan)
        values = gather_rows(concat(value_parts, axis=0), index.restore,
                             plan=index.restore_plan)
        if self.normalization == "softmax":
            alpha = segment_softmax(scores, index.offsets)
        else:
            denom = segment_sum(scores, index.offsets)
            alpha = div(scores, gather_rows(denom, index.dst, plan=index.dst_plan))
        summary = segment_sum(mul(values, repeat_heads(alpha, head_dim)), index.offsets)
        return relu(summary) if self.sigma == "relu" else summary


def rgat_attention(h, graph, layer):
    """One RGAT step on raw node states; provided for symmetry with the
    other layer entry points."""
    index = graph.index() if isinstance(graph, RelGraph) else graph
    index.require_full_coverage()
    return layer.step(h, index)


def gnn_step(states, graph, layer, training=False, rng=None, dropout_rate=0.0, mask=None):
    """Apply one synchronous step: all nodes update from step-(k-1) states."""
    index = graph.index() if isinstance(graph, RelGraph) else graph
    if states.shape[0] != index.graph.num_nodes:
        raise DimensionError(
            f"{states.shape[0]} state rows for {index.graph.num_nodes} nodes")
    index.require_full_coverage()
    return layer.step(states, index, training=training, rng=rng,
                      dropout_rate=dropout_rate, mask=mask)


def run_gnn(graph, init_states, num_steps, layers, weight_sharing=True,
            dropout_rate=0.0, variational=False, training=False, rng=None):
    """K synchronous steps. With weight sharing a single layer is reused;
    otherwise `layers` must hold one parameter set per step.

    Variational dropout draws one state mask and reuses it every step;
    otherwise each step draws fresh.
    """
    if num_steps < 1:
        raise ConfigError(f"need at least one step, got {num_steps}")
    if weight_sharing:
        if len(layers) != 1:
            raise ConfigError("weight sharing expects exactly one layer parameter set")
    elif len(layers) != num_steps:
        raise ConfigError(f"expected {num_steps} layer parameter sets, got {len(layers)}")
    index = graph.index() if isinstance(graph, RelGraph) else graph
    index.require_full_coverage()
    mask = None
    if variational and training and dropout_rate > 0.0:
        if rng is None:
            raise ContractError("variational dropout needs an rng")
        mask = make_dropout_mask(init_states.shape, dropout_rate, rng)
    h = init_states
    for k in range(num_steps):
        layer = layers[0] if weight_sharing else layers[k]
        h = layer.step(h, index, training=training, rng=rng,
                       dropout_rate=dropout_rate, mask=mask)
    return h
