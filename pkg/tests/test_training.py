"""Training harness: batching equivalence, early stopping, loss floor,
run logs, caching, and the protocol configuration rules."""

import math
import os

import numpy as np
import pytest

from relgnn.errors import ConfigError, ContractError, ParseError
from relgnn.models import ModelConfig, build_model
from relgnn.tasks import Dataset, gen_conditional_recall, seq_to_graph
from relgnn.training import (RECALL_DEFAULTS, RECALL_SWEEP_RATES,
                             TREEMAX_DEFAULTS, TREEMAX_UNSTABLE_LR, Batch,
                             TrainConfig, best_recall_result, evaluate,
                             iter_batches, load_cached_result, parse_run_log,
                             recall_dim, recall_log_name, recall_model_config,
                             train, treemax_model_config)


def tiny_config(name="SGGNN-RV-GAT", **kw):
    base = dict(model_name=name, num_relations=3, num_symbols=62,
                num_classes=61, dim=8, num_steps=4, heads=2, embed_dim=5,
                d_star=4)
    base.update(kw)
    return ModelConfig(**base)


def tiny_dataset(length=3, per_class=10, seed=0, n_train=40, n_val=10, n_test=10):
    ds = gen_conditional_recall(length, per_class=per_class, seed=seed)
    return Dataset(ds.kind, ds.train[:n_train], ds.validation[:n_val],
                   ds.test[:n_test], ds.class_symbols, ds.relations,
                   ds.num_symbols, ds.seed, ds.params)


def quick_train_config(**kw):
    base = dict(lr=0.001, batch_size=20, label_smoothing=0.1, max_epochs=3,
                patience=50, min_epochs=0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# batching

def test_batch_offsets_readout_and_targets():
    insts = [seq_to_graph("ab3"), seq_to_graph("Zyx"), seq_to_graph("qqq")]
    batch = Batch(insts)
    assert batch.graph.num_nodes == 9
    # readout = last node of each instance, shifted by its offset
    assert list(batch.readout) == [2, 5, 8]
    assert list(batch.targets) == [i.targets[0][1] for i in insts]
    assert list(batch.counts) == [1, 1, 1]


def test_iter_batches_chunking():
    insts = [seq_to_graph("abc")] * 7
    sizes = [b.counts.size for b in iter_batches(insts, 3)]
    assert sizes == [3, 3, 1]
    order = [6, 5, 4, 3, 2, 1, 0]
    assert [b.counts.size for b in iter_batches(insts, 4, order)] == [4, 3]


def test_evaluate_matches_per_instance_forward():
    # pooled/batched evaluation must agree with instance-at-a-time forwards
    model = build_model(tiny_config(), 3)
    insts = tiny_dataset().test
    batched_node, batched_graph = evaluate(model, insts, batch_size=3)
    correct = []
    for inst in insts:
        logits = model.forward(inst.graph, inst.readout_nodes)
        correct.append(
            bool((logits.data.argmax(axis=1) == inst.target_classes).all()))
    assert batched_node == pytest.approx(np.mean(correct))
    assert batched_graph == pytest.approx(np.mean(correct))


def test_evaluate_rejects_empty_split():
    model = build_model(tiny_config(), 0)
    with pytest.raises(ContractError):
        evaluate(model, [])


# ---------------------------------------------------------------------------
# training loop

def test_lr_zero_is_a_no_op():
    model = build_model(tiny_config(), 1)
    ds = tiny_dataset()
    before = {p.name: p.data.copy() for p in model.params()}
    base_acc = evaluate(model, ds.test)
    run = train(model, ds, quick_train_config(lr=0.0))
    for p in model.params():
        np.testing.assert_array_equal(p.data, before[p.name])
    assert evaluate(model, ds.test) == base_acc
    assert not run.failed


def test_training_improves_loss_and_reloads_best():
    model = build_model(tiny_config(), 2)
    ds = tiny_dataset()
    run = train(model, ds, quick_train_config(max_epochs=8))
    assert run.history[-1]["loss"] < run.history[0]["loss"]
    assert run.best_epoch <= run.stopped_epoch
    assert run.test_node is not None
    # reported best must be the maximum of the validation history
    assert run.best_val_node == pytest.approx(
        max(h["val_node"] for h in run.history))


def test_single_batch_overfit_reaches_perfect_train_accuracy():
    ds = gen_conditional_recall(3, per_class=20, seed=4)
    insts = ds.train[:20]
    one = Dataset("recall", insts, insts, insts, ds.class_symbols,
                  ds.relations, ds.num_symbols, ds.seed, ds.params)
    model = build_model(tiny_config(dim=40), 0)
    run = train(model, one, quick_train_config(max_epochs=200, patience=200))
    assert run.best_val_node == 1.0  # validation split aliases the batch
    assert run.stopped_epoch <= 200


def test_loss_never_beats_label_smoothing_floor():
    c = 61
    eps = 0.1
    on = 1.0 - eps + eps / c
    off = eps / c
    floor = -(on * math.log(on) + (c - 1) * off * math.log(off))
    model = build_model(tiny_config(dim=40), 0)
    ds = gen_conditional_recall(3, per_class=20, seed=4)
    insts = ds.train[:20]
    one = Dataset("recall", insts, insts, insts, ds.class_symbols,
                  ds.relations, ds.num_symbols, ds.seed, ds.params)
    run = train(model, one, quick_train_config(max_epochs=120, patience=120))
    assert min(h["loss"] for h in run.history) >= floor - 1e-9
    # the overfit run should get close to the floor, showing it is tight
    assert min(h["loss"] for h in run.history) < floor + 0.3


def test_patience_counts_from_last_improvement():
    model = build_model(tiny_config(), 1)
    ds = tiny_dataset()
    # lr=0 keeps validation constant: best is epoch 1, then patience runs out
    run = train(model, ds, quick_train_config(
        lr=0.0, max_epochs=50, patience=3, min_epochs=5))
    assert run.best_epoch == 1
    assert run.stopped_epoch == 5  # min_epochs delays the patience stop
    run2 = train(build_model(tiny_config(), 1), ds, quick_train_config(
        lr=0.0, max_epochs=50, patience=3, min_epochs=0))
    assert run2.stopped_epoch == 4  # epochs 2,3,4 without improvement


def test_training_is_deterministic_in_seed():
    ds = tiny_dataset()
    runs = [train(build_model(tiny_config(), 1), ds, quick_train_config())
            for _ in range(2)]
    assert runs[0].history == runs[1].history
    other = train(build_model(tiny_config(), 1), ds, quick_train_config(seed=9))
    assert other.history != runs[0].history


def test_failed_run_is_flagged_and_logged(tmp_path):
    model = build_model(tiny_config(), 1)
    model.embedding.tensor.data[...] = np.nan
    log_path = str(tmp_path / "run.log")
    run = train(model, tiny_dataset(), quick_train_config(), log_path=log_path)
    assert run.failed
    assert run.test_node is None
    text = open(log_path).read()
    assert "result failed" in text
    parsed = parse_run_log(text)
    assert parsed["result"]["failed"] is True


def test_train_rejects_empty_split_and_bad_config():
    ds = tiny_dataset()
    empty = Dataset(ds.kind, ds.train, [], ds.test, ds.class_symbols,
                    ds.relations, ds.num_symbols, ds.seed, ds.params)
    with pytest.raises(ContractError):
        train(build_model(tiny_config(), 0), empty, quick_train_config())
    with pytest.raises(ConfigError):
        quick_train_config(lr=-1.0).validate()
    with pytest.raises(ConfigError):
        quick_train_config(label_smoothing=1.0).validate()
    with pytest.raises(ConfigError):
        quick_train_config(patience=0).validate()


# ---------------------------------------------------------------------------
# run logs and caching

def test_run_log_round_trip(tmp_path):
    model = build_model(tiny_config(), 5)
    log_path = str(tmp_path / "run.log")
    run = train(model, tiny_dataset(), quick_train_config(),
                log_path=log_path, meta={"task": "recall", "length": 3})
    parsed = parse_run_log(open(log_path).read())
    assert parsed["meta"]["task"] == "recall"
    assert parsed["meta"]["model"] == "SGGNN-RV-GAT"
    assert len(parsed["history"]) == len(run.history)
    assert parsed["history"][0]["loss"] == pytest.approx(
        run.history[0]["loss"], abs=1e-6)
    assert parsed["result"]["test_node"] == pytest.approx(run.test_node, abs=1e-6)
    assert parsed["result"]["stopped"] == run.stopped_epoch


def test_parse_run_log_rejects_malformed_lines():
    with pytest.raises(ParseError, match="line 2"):
        parse_run_log("# model GGNN\nepoch one loss 0.5\n")
    with pytest.raises(ParseError):
        parse_run_log("wibble\n")
    parsed = parse_run_log("")
    assert parsed == {"meta": {}, "history": [], "result": None}


def test_load_cached_result(tmp_path):
    model = build_model(tiny_config(), 5)
    log_path = str(tmp_path / "run.log")
    train(model, tiny_dataset(), quick_train_config(),
          log_path=log_path, meta={"task": "recall"})
    hit = load_cached_result(log_path, {"task": "recall", "model": "SGGNN-RV-GAT"})
    assert hit is not None and not hit["failed"]
    assert load_cached_result(log_path, {"model": "GGNN"}) is None
    assert load_cached_result(str(tmp_path / "nope.log"), {}) is None
    unfinished = str(tmp_path / "partial.log")
    with open(unfinished, "w") as fh:
        fh.write("# model GGNN\nepoch 1 loss 1.0 val_node 0.5 val_graph 0.5\n")
    assert load_cached_result(unfinished, {"model": "GGNN"}) is None


def fake_log(path, dropout, val, test, failed=False):
    lines = [f"# task recall\n# model M\n# dim 100 steps 8 heads 4 dropout {dropout}\n"]
    for i, v in enumerate(np.linspace(0.1, val, 5), start=1):
        lines.append(f"epoch {i} loss 1.0 val_node {v:.6f} val_graph {v:.6f}\n")
    if failed:
        lines.append("result failed stopped 5\n")
    else:
        lines.append(f"result test_node {test:.6f} test_graph {test:.6f} stopped 5\n")
    with open(path, "w") as fh:
        fh.writelines(lines)


def test_best_recall_result_selects_by_validation(tmp_path):
    out = str(tmp_path)
    assert best_recall_result(out, "M", 10, 0) == (None, None, None)
    fake_log(os.path.join(out, recall_log_name("M", 10, 0, 0.0)), 0.0, 0.50, 0.40)
    fake_log(os.path.join(out, recall_log_name("M", 10, 0, 0.1)), 0.1, 0.90, 0.88)
    fake_log(os.path.join(out, recall_log_name("M", 10, 0, 0.25)), 0.25, 0.95, 0.70,
             failed=True)   # failed runs never win
    result, rate, val = best_recall_result(out, "M", 10, 0)
    assert (rate, result["test_node"]) == (0.1, 0.88)
    assert val == pytest.approx(0.9)
    # ties break to the lower dropout rate
    fake_log(os.path.join(out, recall_log_name("M", 10, 0, 0.5)), 0.5, 0.90, 0.91)
    _, rate, _ = best_recall_result(out, "M", 10, 0)
    assert rate == 0.1
    # other cells and seeds are not picked up (seed 0 vs seed 10)
    fake_log(os.path.join(out, recall_log_name("M", 10, 10, 0.0)), 0.0, 0.99, 0.99)
    _, rate, _ = best_recall_result(out, "M", 10, 0)
    assert rate == 0.1


# ---------------------------------------------------------------------------
# protocol configuration rules

def test_recall_dimension_rule():
    assert recall_dim(3) == 100 and recall_dim(7) == 100
    assert recall_dim(10) == 120
    assert recall_dim(12) == 200


def test_recall_model_config_rules():
    cfg = recall_model_config("SGGNN-RV-GAT", 10)
    assert (cfg.dim, cfg.num_steps) == (120, 11)  # K = length + 1
    assert (cfg.num_symbols, cfg.num_classes, cfg.num_relations) == (62, 61, 3)
    over = recall_model_config("SGGNN-RV-GAT", 10, {"dropout": 0.25})
    assert over.dropout == 0.25


def test_treemax_model_config_rules():
    cfg = treemax_model_config("GGNN")
    assert (cfg.dim, cfg.num_steps, cfg.heads) == (150, 17, 2)
    assert (cfg.num_symbols, cfg.num_classes, cfg.num_relations) == (100, 100, 7)


def test_protocol_defaults():
    assert RECALL_DEFAULTS["lr"] == 0.001
    assert RECALL_DEFAULTS["batch_size"] == 20
    assert RECALL_DEFAULTS["label_smoothing"] == 0.1
    assert TREEMAX_DEFAULTS["patience"] == 10
    assert TREEMAX_DEFAULTS["min_epochs"] == 20
    assert TREEMAX_UNSTABLE_LR == 0.00025
    assert RECALL_SWEEP_RATES == (0.0, 0.1, 0.25, 0.5)


def test_recall_log_names():
    assert recall_log_name("GGNN", 7, 0) == "recall_GGNN_len7_seed0.log"
    assert recall_log_name("GGNN", 7, 0, 0.25) == "recall_GGNN_len7_seed0_d0.25.log"