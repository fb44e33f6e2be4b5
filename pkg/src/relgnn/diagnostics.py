"""Gradient diagnostics: finite-difference checks and hop-distance profiles.

The finite-difference checker compares analytic gradients against central
differences on randomly sampled parameter coordinates. The hop profile
measures how much gradient signal survives propagation over a path graph:
the loss is attached to the final node and the gradient norm of each node's
initial state is bucketed by distance from that node.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .graph import RelGraph, add_self_edges
from .layers import (AttnParams, GcmParams, GruParams, RelationTable,
                     RgatLayer, SgruParams, edge_messages, gamma_mean,
                     gamma_rv_gat, gamma_sum, phi_gru, phi_sgru,
                     rgat_attention)
from .models import MODEL_NAMES, ModelConfig, build_model
from .tensor import (Tensor, backward, constant, cross_entropy, elementwise,
                     gather_rows, mul, sum_all)

FD_STEP = 1e-5
FD_REL_TOL = 1e-4
FD_DENOM_FLOOR = 1e-4  # treats near-zero gradients with absolute tolerance


@dataclass
class FiniteDiffReport:
    name: str
    num_coords: int
    max_rel_err: float
    worst: tuple | None        # (param_name, flat_index, analytic, numeric)
    passed: bool


def finite_diff_check(loss_fn, named_params, rng, name="check",
                      coords_per_param=10, step=FD_STEP, rel_tol=FD_REL_TOL):
    """Compare analytic gradients of `loss_fn` against central differences.

    `loss_fn` must be a deterministic closure returning a fresh scalar loss
    Tensor on every call. `named_params` is a list of (name, Tensor) leaves.
    Up to `coords_per_param` coordinates are sampled per tensor.
    """
    if not named_params:
        raise ContractError("finite_diff_check needs at least one parameter")
    for pname, tensor in named_params:
        if not tensor.requires_grad:
            raise ContractError(f"parameter {pname} does not require grad")
        tensor.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {}
    for pname, tensor in named_params:
        if tensor.grad is None:
            raise ContractError(f"no gradient reached parameter {pname}")
        analytic[pname] = tensor.grad.copy()
        tensor.grad = None

    max_rel_err = 0.0
    worst = None
    num_coords = 0
    for pname, tensor in named_params:
        flat = tensor.data.reshape(-1)
        count = min(coords_per_param, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for idx in picks:
            saved = flat[idx]
            flat[idx] = saved + step
            f_plus = float(loss_fn().data)
            flat[idx] = saved - step
            f_minus = float(loss_fn().data)
            flat[idx] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            ana = analytic[pname].reshape(-1)[idx]
            denom = max(abs(numeric), abs(ana), FD_DENOM_FLOOR)
            rel = abs(numeric - ana) / denom
            num_coords += 1
            if rel > max_rel_err:
                max_rel_err = rel
                worst = (pname, int(idx), float(ana), float(numeric))
    return FiniteDiffReport(name=name, num_coords=num_coords,
                            max_rel_err=max_rel_err, worst=worst,
                            passed=max_rel_err < rel_tol)


# ---------------------------------------------------------------------------
# fixtures for op-level checks

def _named(params):
    return [(p.name, p.tensor) for p in params]


def _small_graph(rng, num_nodes=5, num_relations=3, num_symbols=5):
    relations = tuple(f"r{i}" for i in range(num_relations - 1)) + ("self",)
    num_edges = 2 * num_nodes
    edges = zip(rng.integers(0, num_nodes, num_edges),
                rng.integers(0, num_nodes, num_edges),
                rng.integers(0, num_relations - 1, num_edges))
    g = RelGraph(num_nodes, rng.integers(0, num_symbols, num_nodes),
                 edges, relations)
    return add_self_edges(g)


def _weighted_loss(out, seed):
    # random cotangent so transposition/permutation mistakes cannot cancel
    weights = constant(np.random.default_rng([seed, 23])
                       .standard_normal(out.data.shape))
    return sum_all(mul(elementwise("tanh", out), weights))


OP_KINDS = ("mu_mm", "mu_mm_red", "mu_gcm", "gamma_sum", "gamma_mean",
            "gamma_rv_gat", "rgat_attention", "phi_gru", "phi_sgru")


def _op_fixture(kind, seed, dim=6, heads=2):
    rng = np.random.default_rng([seed, 17])
    graph = _small_graph(rng)
    index = graph.index()
    num_rel = len(graph.relations)
    h = Tensor(rng.standard_normal((graph.num_nodes, dim)), requires_grad=True)
    named = [("h", h)]

    if kind in ("mu_mm", "mu_mm_red", "mu_gcm", "gamma_sum", "gamma_mean",
                "gamma_rv_gat"):
        table_kind = {"mu_mm": "mm", "mu_mm_red": "mm_red"}.get(kind, "gcm")
        table = RelationTable(rng, num_rel, dim, table_kind, d_star=4,
                              with_vectors=table_kind == "gcm")
        gcm = GcmParams(rng, dim) if table_kind == "gcm" else None
        attn = AttnParams(rng, dim, heads) if kind == "gamma_rv_gat" else None
        named += _named(table.params())
        if gcm is not None:
            named += _named(gcm.params())
        if attn is not None:
            named += _named(attn.params())

        def loss_fn():
            msgs = edge_messages(table_kind, h, index, table, gcm)
            if kind.startswith("mu_"):
                out = msgs
            elif kind == "gamma_sum":
                out = gamma_sum(msgs, index)
            elif kind == "gamma_mean":
                out = gamma_mean(msgs, index)
            else:
                a_rows = gather_rows(table.vectors.tensor, index.rel,
                                     plan=index.rel_plan)
                out = gamma_rv_gat(h, msgs, a_rows, index, attn)
            return _weighted_loss(out, seed)

        return loss_fn, named

    if kind in ("phi_gru", "phi_sgru"):
        hbar = Tensor(rng.standard_normal((graph.num_nodes, dim)),
                      requires_grad=True)
        named.append(("hbar", hbar))
        cell = GruParams(rng, dim) if kind == "phi_gru" else SgruParams(rng, dim)
        named += _named(cell.params())
        apply_fn = phi_gru if kind == "phi_gru" else phi_sgru

        def loss_fn():
            return _weighted_loss(apply_fn(h, hbar, cell), seed)

        return loss_fn, named

    if kind == "rgat_attention":
        layer = RgatLayer(rng, dim, num_rel, heads)
        named += _named(layer.params())

        def loss_fn():
            return _weighted_loss(rgat_attention(h, graph, layer), seed)

        return loss_fn, named

    raise ConfigError(f"unknown op kind {kind!r}; known: {OP_KINDS}")


def gradcheck_op(kind, seed=0, **kwargs):
    loss_fn, named = _op_fixture(kind, seed)
    rng = np.random.default_rng([seed, 29])
    return finite_diff_check(loss_fn, named, rng, name=kind, **kwargs)


def gradcheck_model(model_name, seed=0, dim=8, **kwargs):
    """End-to-end check through embedding, propagation, readout, and loss."""
    if dim > 12:
        raise ConfigError("model gradient checks are meant for dim <= 12")
    rng = np.random.default_rng([seed, 31])
    graph = _small_graph(rng, num_nodes=6)
    config = ModelConfig(model_name=model_name, num_relations=3, num_symbols=5,
                         num_classes=4, dim=dim, num_steps=3, heads=2,
                         embed_dim=5, d_star=4)
    model = build_model(config, seed)
    readout = np.array([0, graph.num_nodes - 1])
    targets = rng.integers(0, config.num_classes, readout.size)

    def loss_fn():
        logits = model.forward(graph, readout)
        return cross_entropy(logits, targets, smoothing=0.1)

    named = [(name, p.tensor) for name, p in sorted(model.named_params().items())]
    return finite_diff_check(loss_fn, named, rng, name=model_name, **kwargs)


def gradcheck_suite(seed=0, models=MODEL_NAMES, coords_per_param=10):
    """All op-level and whole-model finite-difference reports."""
    reports = [gradcheck_op(kind, seed, coords_per_param=coords_per_param)
               for kind in OP_KINDS]
    reports += [gradcheck_model(name, seed, coords_per_param=coords_per_param)
                for name in models]
    return reports


# ---------------------------------------------------------------------------
# hop-distance gradient profile

def path_graph(num_nodes, seed, num_symbols=62):
    """Chain with forward/backward/self relations and random node symbols."""
    if num_nodes < 2:
        raise ConfigError("path graph needs at least 2 nodes")
    rng = np.random.default_rng([seed, 41])
    edges = [(v, v + 1, 0) for v in range(num_nodes - 1)]
    edges += [(v + 1, v, 1) for v in range(num_nodes - 1)]
    g = RelGraph(num_nodes, rng.integers(0, num_symbols, num_nodes),
                 edges, ("next", "previous", "self"))
    return add_self_edges(g)


def profile_dim(length):
    if length < 10:
        return 100
    if length == 10:
        return 120
    return 200


def hop_gradient_profile(model_name, num_nodes=30, seed=0, target_class=0,
                         num_steps=None):
    """Gradient norm of each node's initial state, indexed by distance from
    the readout node at the far end of a path graph.

    Returns an array `p` with `p[d]` the L2 norm of the loss gradient with
    respect to the initial state of the node `d` hops from the readout.
    `num_steps` defaults to one more than the path length; passing fewer
    steps exposes strict locality (zero gradient beyond that many hops).
    """
    graph = path_graph(num_nodes, seed)
    config = ModelConfig(model_name=model_name, num_relations=3,
                         num_symbols=62, num_classes=61,
                         dim=profile_dim(num_nodes),
                         num_steps=num_steps or num_nodes + 1, heads=4)
    model = build_model(config, seed)
    capture = {}
    logits = model.forward(graph, np.array([num_nodes - 1]), capture=capture)
    loss = cross_entropy(logits, np.array([target_class]), smoothing=0.0)
    backward(loss)
    init = capture["initial_states"]
    if init.grad is None:
        raise ContractError("initial states received no gradient")
    norms = np.linalg.norm(init.grad, axis=1)
    return norms[::-1].copy()   # index d = node num_nodes-1-d

def decay_ratio(profile):
    """How much gradient is lost across the path: near norm over far norm."""
    if profile[-1] == 0.0:
        return np.inf
    return float(profile[0] / profile[-1])


def median_decay_ratio(model_name, num_nodes=30, seeds=range(10)):
    ratios = [decay_ratio(hop_gradient_profile(model_name, num_nodes, s))
              for s in seeds]
    return float(np.median(ratios)), ratios


def profile_to_tsv(profile, model_name, num_nodes, seed):
    lines = [f"# model {model_name} num_nodes {num_nodes} seed {seed}",
             "distance\tgrad_norm"]
    lines += [f"{d}\t{v:.12e}" for d, v in enumerate(profile)]
    return "\n".join(lines) + "\n"
