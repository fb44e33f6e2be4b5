"""Multi-relational directed graphs with typed edges.

A RelGraph is immutable after construction: a label per node, a flat edge
list of (src, dst, relation id) triples, and an ordered relation vocabulary.
Parallel edges are allowed and every edge is one message; self-edges use a
dedicated relation id so they get their own relation parameters.

GraphIndex is the destination-sorted companion structure the layers compute
on: edges grouped contiguously by destination node (so aggregation is a
segment reduction), plus per-relation edge groups and precomputed scatter
plans for the backward passes of the gathers.
"""

import numpy as np

from .errors import ContractError, ParseError
from .tensor import ScatterPlan

SELF_RELATION = "self"


class RelGraph:
    __slots__ = ("num_nodes", "node_labels", "edge_src", "edge_dst", "edge_rel",
                 "relations", "_index")

    def __init__(self, num_nodes, node_labels, edges, relations):
        self.num_nodes = int(num_nodes)
        self.node_labels = np.asarray(node_labels, dtype=np.int64)
        if self.node_labels.shape != (self.num_nodes,):
            raise ContractError(
                f"expected {self.num_nodes} node labels, got shape {self.node_labels.shape}")
        self.relations = tuple(relations)
        if len(set(self.relations)) != len(self.relations):
            raise ContractError(f"duplicate relation names in {self.relations}")
        edges = list(edges)
        self.edge_src = np.array([e[0] for e in edges], dtype=np.int64)
        self.edge_dst = np.array([e[1] for e in edges], dtype=np.int64)
        self.edge_rel = np.array([e[2] for e in edges], dtype=np.int64)
        for arr, bound, what in ((self.edge_src, self.num_nodes, "src"),
                                 (self.edge_dst, self.num_nodes, "dst"),
                                 (self.edge_rel, len(self.relations), "relation")):
            if arr.size and (arr.min() < 0 or arr.max() >= bound):
                raise IndexError(f"edge {what} id out of range [0, {bound})")
        self._index = None

    @property
    def num_edges(self):
        return self.edge_src.size

    @property
    def num_relations(self):
        return len(self.relations)

    @property
    def relation_vocab(self):
        return {name: i for i, name in enumerate(self.relations)}

    def relation_id(self, name):
        try:
            return self.relations.index(name)
        except ValueError:
            raise ContractError(f"unknown relation {name!r}; have {self.relations}") from None

    def index(self):
        if self._index is None:
            self._index = GraphIndex(self)
        return self._index

    def edge_triples(self):
        """Edges in construction order as (src, dst, relation name)."""
        return [(int(s), int(d), self.relations[r])
                for s, d, r in zip(self.edge_src, self.edge_dst, self.edge_rel)]

    def same_structure(self, other):
        """Equal node labels and equal edge multiset, compared by relation name."""
        return (self.num_nodes == other.num_nodes
                and np.array_equal(self.node_labels, other.node_labels)
                and sorted(self.edge_triples()) == sorted(other.edge_triples()))

    def __repr__(self):
        return (f"RelGraph(nodes={self.num_nodes}, edges={self.num_edges}, "
                f"relations={self.relations})")


def add_self_edges(graph):
    """Append one (v, v, SELF_RELATION) edge per node.

    The self relation gets a fresh id if the vocabulary lacks it. Callers
    are expected to invoke this once per graph, right after construction.
    """
    relations = graph.relations
    if SELF_RELATION in relations:
        self_id = relations.index(SELF_RELATION)
    else:
        self_id = len(relations)
        relations = relations + (SELF_RELATION,)
    edges = list(zip(graph.edge_src.tolist(), graph.edge_dst.tolist(), graph.edge_rel.tolist()))
    edges.extend((v, v, self_id) for v in range(graph.num_nodes))
    return RelGraph(graph.num_nodes, graph.node_labels, edges, relations)


def incoming(graph, v):
    """All (src, relation id) pairs with destination v, in deterministic order.

    Order is edge construction order restricted to v (the index sort is
    stable), so repeated calls and reconstructions agree.
    """
    if not 0 <= v < graph.num_nodes:
        raise IndexError(f"node id {v} out of range [0, {graph.num_nodes})")
    idx = graph.index()
    lo, hi = idx.offsets[v], idx.offsets[v + 1]
    return [(int(s), int(r)) for s, r in zip(idx.src[lo:hi], idx.rel[lo:hi])]


class GraphIndex:
    """Destination-sorted edge views plus the scatter plans backward needs.

    `src`, `dst`, `rel` list the edges sorted stably by destination, so rows
    `offsets[v]:offsets[v+1]` are exactly the incoming edges of node v.
    `rel_groups[r]` gives the positions (in this sorted order) of relation
    r's edges; `restore` maps the concatenation of all groups back to
    destination order.
    """

    def __init__(self, graph):
        self.graph = graph
        n, r_count = graph.num_nodes, graph.num_relations
        self.order = np.argsort(graph.edge_dst, kind="stable")
        self.src = graph.edge_src[self.order]
        self.dst = graph.edge_dst[self.order]
        self.rel = graph.edge_rel[self.order]
        self.offsets = np.searchsorted(self.dst, np.arange(n + 1), side="left")
        self.counts = np.diff(self.offsets)

        self.src_plan = ScatterPlan(self.src, n)
        self.dst_plan = ScatterPlan(self.dst, n)
        self.rel_plan = ScatterPlan(self.rel, r_count)

        # 1 / |{edges into dst(e) with rel(e)}| per edge, the RGCN weight
        key = self.dst * r_count + self.rel
        _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
        self.rel_norm = 1.0 / counts[inverse]

        self.rel_groups = [np.flatnonzero(self.rel == r) for r in range(r_count)]
        grouped = (np.concatenate(self.rel_groups)
                   if self.src.size else np.zeros(0, dtype=np.int64))
        self.restore = np.empty(self.src.size, dtype=np.int64)
        self.restore[grouped] = np.arange(self.src.size)
        self.restore_plan = ScatterPlan(self.restore, self.src.size)
        self.group_src_plans = [ScatterPlan(self.src[pos], n) for pos in self.rel_groups]
        self.group_dst_plans = [ScatterPlan(self.dst[pos], n) for pos in self.rel_groups]

        self.memo = {}

    def require_full_coverage(self):
        if (self.counts == 0).any():
            bad = int(np.flatnonzero(self.counts == 0)[0])
            raise ContractError(
                f"node {bad} has no incoming edges; aggregation needs self-edges")


def union(graphs):
    """Disjoint union for batching. Returns (graph, node offsets [len+1]).

    All inputs must share the same relation vocabulary; node ids of graph i
    are shifted by offsets[i].
    """
    if not graphs:
        raise ContractError("union needs at least one graph")
    relations = graphs[0].relations
    for g in graphs[1:]:
        if g.relations != relations:
            raise ContractError(
                f"relation vocabularies differ: {relations} vs {g.relations}")
    offsets = np.zeros(len(graphs) + 1, dtype=np.int64)
    np.cumsum([g.num_nodes for g in graphs], out=offsets[1:])
    labels = np.concatenate([g.node_labels for g in graphs])
    src = np.concatenate([g.edge_src + off for g, off in zip(graphs, offsets)])
    dst = np.concatenate([g.edge_dst + off for g, off in zip(graphs, offsets)])
    rel = np.concatenate([g.edge_rel for g in graphs])
    merged = RelGraph(int(offsets[-1]), labels, zip(src, dst, rel), relations)
    return merged, offsets


def to_text(graph):
    """Serialize: header, one line per node, one line per edge (by name)."""
    lines = [f"nodes={graph.num_nodes} relations={graph.num_relations}"]
    lines.extend(f"node {v} {int(graph.node_labels[v])}" for v in range(graph.num_nodes))
    lines.extend(f"edge {s} {d} {r}" for s, d, r in graph.edge_triples())
    return "\n".join(lines) + "\n"


def from_text(text, relations=None):
    """Parse the `to_text` format.

    Without an explicit vocabulary, relation ids are assigned in order of
    first appearance; the header count must then match the number of
    distinct names actually used.
    """
    lines = [ln for ln in (raw.strip() for raw in text.splitlines()) if ln]
    if not lines:
        raise ParseError("empty graph text")
    head = lines[0].split()
    try:
        assert len(head) == 2
        num_nodes = int(head[0].removeprefix("nodes="))
        num_relations = int(head[1].removeprefix("relations="))
    except (AssertionError, ValueError):
        raise ParseError(f"bad header line {lines[0]!r}") from None

    labels = np.full(num_nodes, -1, dtype=np.int64)
    edges = []
    if relations is not None:
        vocab = {name: i for i, name in enumerate(relations)}
        if len(vocab) != num_relations:
            raise ParseError(
                f"header claims {num_relations} relations, vocabulary has {len(vocab)}")
    else:
        vocab = {}
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "node" and len(parts) == 3:
            v, sym = int(parts[1]), int(parts[2])
            if not 0 <= v < num_nodes:
                raise ParseError(f"node id {v} out of range in {ln!r}")
            labels[v] = sym
        elif parts[0] == "edge" and len(parts) == 4:
            s, d, name = int(parts[1]), int(parts[2]), parts[3]
            if name not in vocab:
                if relations is not None:
                    raise ParseError(f"unknown relation {name!r} in {ln!r}")
                vocab[name] = len(vocab)
            edges.append((s, d, vocab[name]))
        else:
            raise ParseError(f"unrecognized line {ln!r}")
    if (labels < 0).any():
        raise ParseError("some nodes are missing a label line")
    if relations is None and len(vocab) != num_relations:
        raise ParseError(
            f"header claims {num_relations} relations but {len(vocab)} names appear; "
            "pass the vocabulary explicitly")
    names = [None] * len(vocab)
    for name, i in vocab.items():
        names[i] = name
    return RelGraph(num_nodes, labels, edges, names)
