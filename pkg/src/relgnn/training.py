"""Training loop, early stopping, and the two experimental protocols.

Graphs in a mini-batch are merged into one disjoint-union graph, which keeps
attention normalization per-graph correct since no edges cross instance
boundaries. Early stopping tracks validation node accuracy with a patience
window and a minimum epoch count, and the best checkpoint is reloaded before
test evaluation. A run that produces a non-finite loss is flagged failed
and recorded rather than raised.

Run logs are append-only text: comment headers (`# key value`), one line per
epoch `epoch <n> loss <x> val_node <x> val_graph <x>`, and a final line
`result test_node <x> test_graph <x> stopped <n>` (or `result failed
stopped <n>`).
"""

import os
import re
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError
from .graph import union
from .models import ModelConfig, build_model
from .optim import adam_step
from .tasks import gen_conditional_recall, gen_tree_max
from .tensor import backward, cross_entropy, no_grad

RECALL_DEFAULTS = dict(lr=0.001, batch_size=20, label_smoothing=0.1,
                       max_epochs=300, patience=30, min_epochs=20)
TREEMAX_DEFAULTS = dict(lr=0.00075, batch_size=20, label_smoothing=0.1,
                        max_epochs=200, patience=10, min_epochs=20)
TREEMAX_UNSTABLE_LR = 0.00025  # SGGNN-RM-GAT trains poorly at the shared rate


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 20
    label_smoothing: float = 0.1
    max_epochs: int = 300
    patience: int = 10
    min_epochs: int = 20
    seed: int = 0

    def validate(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.patience < 1 or self.min_epochs < 0:
            raise ConfigError("patience must be >= 1 and min_epochs >= 0")


@dataclass
class TrainRun:
    model_config: ModelConfig
    train_config: TrainConfig
    history: list = field(default_factory=list)
    best_checkpoint: dict | None = None
    best_epoch: int = 0
    best_val_node: float = 0.0
    stopped_epoch: int = 0
    failed: bool = False
    test_node: float | None = None
    test_graph: float | None = None


class Batch:
    """Disjoint union of several instances with readout/target bookkeeping."""

    __slots__ = ("graph", "readout", "targets", "counts")

    def __init__(self, instances):
        merged, offsets = union([inst.graph for inst in instances])
        self.graph = merged
        self.readout = np.concatenate([
            np.asarray(inst.readout_nodes, dtype=np.int64) + offsets[i]
            for i, inst in enumerate(instances)])
        self.targets = np.concatenate([inst.target_classes for inst in instances])
        self.counts = np.array([len(inst.readout_nodes) for inst in instances])


def iter_batches(instances, batch_size, order=None):
    if order is None:
        order = range(len(instances))
    chunk = []
    for i in order:
        chunk.append(instances[i])
        if len(chunk) == batch_size:
            yield Batch(chunk)
            chunk = []
    if chunk:
        yield Batch(chunk)


def evaluate(model, instances, batch_size=50):
    """Pooled node accuracy and mean per-instance graph accuracy."""
    if not instances:
        raise ContractError("cannot evaluate an empty split")
    correct_nodes = 0
    total_nodes = 0
    perfect_graphs = 0
    total_graphs = 0
    with no_grad():
        for batch in iter_batches(instances, batch_size):
            logits = model.forward(batch.graph, batch.readout)
            pred = logits.data.argmax(axis=1)
            good = pred == batch.targets
            correct_nodes += int(good.sum())
            total_nodes += good.size
            stops = np.cumsum(batch.counts)
            for lo, hi in zip(np.concatenate(([0], stops[:-1])), stops):
                perfect_graphs += bool(good[lo:hi].all())
                total_graphs += 1
    return correct_nodes / total_nodes, perfect_graphs / total_graphs


class RunLog:
    def __init__(self, path):
        self.path = path
        self.handle = None
        if path is not None:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            self.handle = open(path, "w", encoding="utf-8")

    def line(self, text):
        if self.handle is not None:
            self.handle.write(text + "\n")
            self.handle.flush()

    def close(self):
        if self.handle is not None:
            self.handle.close()


def train(model, dataset, config, log_path=None, meta=None):
    """Mini-batch Adam training with early stopping and best-epoch reload."""
    config.validate()
    for split in ("train", "validation", "test"):
        if not dataset.split(split):
            raise ContractError(f"dataset split {split!r} is empty")
    run = TrainRun(model.config, config)
    log = RunLog(log_path)
    for key, value in (meta or {}).items():
        log.line(f"# {key} {value}")
    log.line(f"# model {model.config.model_name}")
    log.line(f"# dim {model.config.dim} steps {model.config.num_steps} "
             f"heads {model.config.heads} dropout {model.config.dropout}")
    log.line(f"# lr {config.lr} batch {config.batch_size} "
             f"smoothing {config.label_smoothing} patience {config.patience} "
             f"min_epochs {config.min_epochs} max_epochs {config.max_epochs} "
             f"seed {config.seed}")

    params = model.params()
    rng = np.random.default_rng([config.seed, 0x5eed])
    train_set = dataset.train
    since_best = 0
    started = time.time()
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = rng.permutation(len(train_set))
            losses = []
            for batch in iter_batches(train_set, config.batch_size, order):
                logits = model.forward(batch.graph, batch.readout,
                                       training=True, rng=rng)
                loss = cross_entropy(logits, batch.targets, config.label_smoothing)
                losses.append(float(loss.data))
                if not np.isfinite(losses[-1]):
                    break
                backward(loss, free_graph=True)
                if config.lr > 0:
                    adam_step(params, config.lr)
                else:
                    for p in params:
                        p.zero_grad()
            mean_loss = float(np.mean(losses))
            run.stopped_epoch = epoch
            if not np.isfinite(mean_loss):
                run.failed = True
                log.line(f"epoch {epoch} loss {mean_loss} val_node nan val_graph nan")
                break
            val_node, val_graph = evaluate(model, dataset.validation)
            run.history.append({"epoch": epoch, "loss": mean_loss,
                                "val_node": val_node, "val_graph": val_graph})
            log.line(f"epoch {epoch} loss {mean_loss:.6f} "
                     f"val_node {val_node:.6f} val_graph {val_graph:.6f}")
            if val_node > run.best_val_node or run.best_checkpoint is None:
                run.best_val_node = val_node
                run.best_epoch = epoch
                run.best_checkpoint = model.state_dict()
                since_best = 0
            else:
                since_best += 1
            if epoch >= config.min_epochs and since_best >= config.patience:
                break

        if run.best_checkpoint is not None:
            model.load_state_dict(run.best_checkpoint)
        if run.failed:
            log.line(f"result failed stopped {run.stopped_epoch}")
        else:
            run.test_node, run.test_graph = evaluate(model, dataset.test)
            log.line(f"result test_node {run.test_node:.6f} "
                     f"test_graph {run.test_graph:.6f} stopped {run.stopped_epoch}")
        log.line(f"# wall_seconds {time.time() - started:.1f}")
    finally:
        log.close()
    return run


# ---------------------------------------------------------------------------
# protocols

def recall_dim(length):
    if length < 10:
        return 100
    if length == 10:
        return 120
    return 200


def recall_model_config(model_name, length, overrides=None):
    cfg = ModelConfig(model_name=model_name, num_relations=3, num_symbols=62,
                      num_classes=61, dim=recall_dim(length),
                      num_steps=length + 1, heads=4, dropout=0.0)
    return replace(cfg, **(overrides or {}))


def protocol_conditional_recall(model_name, length, seed=0, per_class=20,
                                model_overrides=None, train_overrides=None,
                                log_path=None):
    """Sequence-classification protocol: dimension picked by length, one
    propagation step per node plus one, test sequence accuracy reported."""
    if length < 2:
        raise ConfigError(f"protocol needs length >= 2, got {length}")
    dataset = gen_conditional_recall(length, per_class=per_class, seed=seed)
    model_cfg = recall_model_config(model_name, length, model_overrides)
    defaults = dict(RECALL_DEFAULTS)
    if per_class > 20:
        defaults["batch_size"] = 50
    defaults.update(train_overrides or {})
    train_cfg = TrainConfig(seed=seed, **defaults)
    model = build_model(model_cfg, seed)
    meta = {"task": "recall", "length": length, "per_class": per_class}
    return train(model, dataset, train_cfg, log_path=log_path, meta=meta)


def treemax_model_config(model_name, overrides=None):
    cfg = ModelConfig(model_name=model_name, num_relations=7, num_symbols=100,
                      num_classes=100, dim=150, num_steps=17, heads=2,
                      dropout=0.0)
    cfg = replace(cfg, **(overrides or {}))
    return cfg


def protocol_tree_max(model_name, seeds=(0, 1, 2, 3, 4), model_overrides=None,
                      train_overrides=None, log_dir=None):
    """Five-seed protocol: each seed generates its own dataset, trains, and
    the summary reports mean and sample std of node/graph accuracy. Failed
    runs are excluded with a warning entry."""
    runs = {}
    for seed in seeds:
        log_path = (os.path.join(log_dir, f"treemax_{model_name}_seed{seed}.log")
                    if log_dir else None)
        runs[seed] = run_tree_max_once(model_name, seed, model_overrides,
                                       train_overrides, log_path)
    return summarize_tree_max(model_name, runs), runs


def run_tree_max_once(model_name, seed, model_overrides=None,
                      train_overrides=None, log_path=None):
    dataset = gen_tree_max(seed)
    model_cfg = treemax_model_config(model_name, model_overrides)
    defaults = dict(TREEMAX_DEFAULTS)
    if model_name == "SGGNN-RM-GAT":
        defaults["lr"] = TREEMAX_UNSTABLE_LR
    defaults.update(train_overrides or {})
    train_cfg = TrainConfig(seed=seed, **defaults)
    model = build_model(model_cfg, seed)
    meta = {"task": "treemax", "seed": seed}
    return train(model, dataset, train_cfg, log_path=log_path, meta=meta)


def summarize_tree_max(model_name, runs):
    ok = {s: r for s, r in runs.items() if not r.failed}
    warnings = [f"seed {s} failed (non-finite loss); excluded"
                for s, r in runs.items() if r.failed]
    if not ok:
        return {"model": model_name, "node_mean": None, "node_std": None,
                "graph_mean": None, "graph_std": None, "seeds_used": [],
                "warnings": warnings}
    nodes = np.array([r.test_node for r in ok.values()])
    graphs = np.array([r.test_graph for r in ok.values()])
    std = lambda v: float(np.std(v, ddof=1)) if v.size > 1 else 0.0
    return {"model": model_name,
            "node_mean": float(nodes.mean()), "node_std": std(nodes),
            "graph_mean": float(graphs.mean()), "graph_std": std(graphs),
            "seeds_used": sorted(ok), "warnings": warnings}


# ---------------------------------------------------------------------------
# hyperparameter sweep

@dataclass
class SweepSpec:
    candidates: list            # dicts: model_overrides plus optional "lr"
    search_seed: int = 0
    task: str = "treemax"
    length: int = 10            # recall only

    def validate(self):
        if not self.candidates:
            raise ConfigError("sweep grid is empty")
        if self.task not in ("treemax", "recall"):
            raise ConfigError(f"unknown sweep task {self.task!r}")


def sweep(spec, model_name):
    """Evaluate every candidate on the fixed search seed and pick the best
    validation node accuracy; ties break to smaller dim, then lower dropout,
    then enumeration order."""
    spec.validate()
    results = []
    for i, candidate in enumerate(spec.candidates):
        overrides = dict(candidate)
        train_overrides = {}
        for key in ("lr", "batch_size", "max_epochs", "patience", "min_epochs"):
            if key in overrides:
                train_overrides[key] = overrides.pop(key)
        if spec.task == "treemax":
            run = run_tree_max_once(model_name, spec.search_seed,
                                    overrides, train_overrides)
        else:
            run = protocol_conditional_recall(model_name, spec.length,
                                              seed=spec.search_seed,
                                              model_overrides=overrides,
                                              train_overrides=train_overrides)
        dim = overrides.get("dim", run.model_config.dim)
        dropout = overrides.get("dropout", run.model_config.dropout)
        score = -1.0 if run.failed else run.best_val_node
        results.append((candidate, run, (-score, dim, dropout, i)))
    best = min(results, key=lambda item: item[2])
    return best[0], results


# ---------------------------------------------------------------------------
# run-log parsing (used by reports and cached acceptance runs)

def parse_run_log(text):
    """Parse a run log into {'meta', 'history', 'result'}.

    Raises ParseError naming the offending line for malformed records.
    """
    meta, history, result = {}, [], None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            for key, value in zip(parts[::2], parts[1::2]):
                meta[key] = value
            continue
        parts = line.split()
        try:
            if parts[0] == "epoch":
                history.append({"epoch": int(parts[1]),
                                "loss": float(parts[3]),
                                "val_node": float(parts[5]),
                                "val_graph": float(parts[7])})
            elif parts[0] == "result" and parts[1] == "failed":
                result = {"failed": True, "stopped": int(parts[3])}
            elif parts[0] == "result":
                result = {"failed": False,
                          "test_node": float(parts[2]),
                          "test_graph": float(parts[4]),
                          "stopped": int(parts[6])}
            else:
                raise ValueError
        except (IndexError, ValueError):
            raise ParseError(f"malformed run-log line {lineno}: {raw!r}") from None
    return {"meta": meta, "history": history, "result": result}


def load_cached_result(log_path, expect_meta):
    """Result dict from a finished run log, or None if absent/mismatched.

    `expect_meta` keys must match the log's comment header so a stale cache
    for a different configuration is never reused.
    """
    if not os.path.exists(log_path):
        return None
    with open(log_path, encoding="utf-8") as fh:
        parsed = parse_run_log(fh.read())
    if parsed["result"] is None:
        return None
    for key, value in expect_meta.items():
        if parsed["meta"].get(key) != str(value):
            return None
    return parsed["result"]


# ---------------------------------------------------------------------------
# dropout sweep over cached recall runs

RECALL_SWEEP_RATES = (0.0, 0.1, 0.25, 0.5)


def recall_log_name(model_name, length, seed, dropout=0.0):
    """Log filename for one recall run; the dropout-0 protocol run owns the
    bare name, swept rates carry a suffix so they can coexist."""
    base = f"recall_{model_name}_len{length}_seed{seed}"
    return f"{base}.log" if dropout == 0.0 else f"{base}_d{dropout:g}.log"


def best_recall_result(out_dir, model_name, length, seed):
    """Winner for one table cell among the protocol log and any swept
    variants present: highest validation node accuracy, ties to the lower
    dropout rate. Returns (result, dropout, best_val); (None, None, None)
    when no finished, non-failed run exists."""
    pattern = re.compile(
        re.escape(f"recall_{model_name}_len{length}_seed{seed}")
        + r"(_d[0-9.]+)?\.log")
    names = sorted(os.listdir(out_dir)) if os.path.isdir(out_dir) else []
    best = None
    for name in names:
        if not pattern.fullmatch(name):
            continue
        with open(os.path.join(out_dir, name), encoding="utf-8") as fh:
            parsed = parse_run_log(fh.read())
        result = parsed["result"]
        if result is None or result.get("failed"):
            continue
        rate = float(parsed["meta"].get("dropout", 0.0))
        val = max((h["val_node"] for h in parsed["history"]), default=-1.0)
        key = (-val, rate, name)
        if best is None or key < best[0]:
            best = (key, result, rate, val)
    if best is None:
        return None, None, None
    return best[1], best[2], best[3]
