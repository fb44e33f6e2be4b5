"""Command-line entry point for the experiment suite.

Tasks: `recall` and `treemax` train models and render accuracy tables,
`gradcheck` runs the finite-difference suite, `gradprofile` measures
hop-distance gradient decay, `export` writes datasets in the text format,
and `report` aggregates previously written run logs.

Settings come from an optional plain-text `key = value` config file plus
command-line flags (flags win). Unknown config keys are rejected. Every
command echoes its resolved configuration into the output directory, emits
both a human-readable `.txt` and a machine-readable `.tsv` table, and
returns exit code 0 iff all requested runs completed; usage, config, and
I/O problems exit nonzero.

Finished run logs found in the output directory are reused instead of
retrained, but only when their recorded configuration matches the request.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from types import SimpleNamespace

import numpy as np

from .diagnostics import (decay_ratio, gradcheck_suite, hop_gradient_profile,
                          profile_to_tsv)
from .errors import ConfigError, ParseError, RelgnnError
from .models import MODEL_NAMES
from .tasks import export_dataset, gen_conditional_recall, gen_tree_max
from .training import (RECALL_DEFAULTS, RECALL_SWEEP_RATES, TREEMAX_DEFAULTS,
                       best_recall_result, load_cached_result, parse_run_log,
                       protocol_conditional_recall, recall_log_name,
                       recall_model_config, run_tree_max_once,
                       summarize_tree_max, treemax_model_config)

TASKS = ("recall", "treemax", "gradcheck", "gradprofile", "export", "report")

_INT_KEYS = {"dim", "heads", "num_steps", "embed_dim", "d_star", "batch_size",
             "max_epochs", "patience", "min_epochs", "per_class",
             "num_examples", "num_nodes", "length", "seed", "threads"}
_FLOAT_KEYS = {"dropout", "lr", "label_smoothing"}
_BOOL_KEYS = {"weight_sharing", "variational_dropout", "sweep"}
_STR_KEYS = {"task", "models", "lengths", "seeds", "out", "kind",
             "rgat_sigma", "rgat_normalization", "logs"}
CONFIG_KEYS = _INT_KEYS | _FLOAT_KEYS | _BOOL_KEYS | _STR_KEYS

MODEL_OVERRIDE_KEYS = ("dim", "heads", "num_steps", "embed_dim", "d_star",
                       "dropout", "weight_sharing", "variational_dropout",
                       "rgat_sigma", "rgat_normalization")
TRAIN_OVERRIDE_KEYS = ("lr", "batch_size", "label_smoothing", "max_epochs",
                       "patience", "min_epochs")


def parse_config_value(key, raw):
    raw = raw.strip()
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
        if key in _BOOL_KEYS:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError
    except ValueError:
        raise ConfigError(f"config key {key!r} has invalid value {raw!r}") from None
    return raw


def parse_config_file(path):
    settings = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        settings[key] = parse_config_value(key, value)
    return settings


def parse_int_list(text, what):
    try:
        return [int(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"invalid {what} list: {text!r}") from None


def resolve_models(text):
    if text in (None, "", "all"):
        return list(MODEL_NAMES)
    names = [tok.strip() for tok in text.split(",") if tok.strip()]
    for name in names:
        if name not in MODEL_NAMES:
            raise ConfigError(
                f"unknown model {name!r}; valid models: {', '.join(MODEL_NAMES)}")
    return names


def echo_config(out_dir, settings):
    os.makedirs(out_dir, exist_ok=True)
    lines = [f"{key} = {settings[key]}" for key in sorted(settings)]
    _write(os.path.join(out_dir, "config_used.txt"), "\n".join(lines) + "\n")


def _write(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _fmt(x):
    return "nan" if x is None else f"{100.0 * x:.1f}"


def _run_cells(cells, worker, threads):
    """Evaluate worker over cells, optionally in a thread pool; results come
    back keyed by cell so assembly order never depends on scheduling."""
    if threads <= 1:
        return {cell: worker(cell) for cell in cells}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = {cell: pool.submit(worker, cell) for cell in cells}
        return {cell: fut.result() for cell, fut in futures.items()}


def _split_overrides(settings):
    model_over = {k: settings[k] for k in MODEL_OVERRIDE_KEYS if k in settings}
    train_over = {k: settings[k] for k in TRAIN_OVERRIDE_KEYS if k in settings}
    return model_over, train_over


# ---------------------------------------------------------------------------
# recall

def cmd_recall(models, lengths, seed, out_dir, threads=1, settings=None):
    settings = settings or {}
    model_over, train_over = _split_overrides(settings)
    per_class = settings.get("per_class", 20)
    do_sweep = settings.get("sweep", False)
    if do_sweep and "dropout" in model_over:
        raise ConfigError("sweep varies dropout itself; drop the dropout setting")
    rates = RECALL_SWEEP_RATES if do_sweep else (model_over.get("dropout", 0.0),)

    def worker(cell):
        model_name, length = cell
        for rate in rates:
            over = dict(model_over)
            over["dropout"] = rate
            log_path = os.path.join(out_dir,
                                    recall_log_name(model_name, length, seed, rate))
            cfg = recall_model_config(model_name, length, over)
            expect = {"task": "recall", "model": model_name, "length": length,
                      "seed": seed, "dim": cfg.dim, "steps": cfg.num_steps,
                      "lr": train_over.get("lr", RECALL_DEFAULTS["lr"]),
                      "dropout": cfg.dropout}
            cached = load_cached_result(log_path,
                                        {k: str(v) for k, v in expect.items()})
            if cached is None:
                protocol_conditional_recall(model_name, length, seed=seed,
                                            per_class=per_class,
                                            model_overrides=over,
                                            train_overrides=train_over,
                                            log_path=log_path)
        # report the best run cached for this cell, swept or not
        result, rate, _ = best_recall_result(out_dir, model_name, length, seed)
        if result is None:
            return {"failed": True, "test_node": None, "test_graph": None,
                    "stopped": 0, "dropout": None}
        return {"failed": False, "test_node": result["test_node"],
                "test_graph": result["test_graph"],
                "stopped": result["stopped"], "dropout": rate}

    cells = [(m, length) for m in models for length in lengths]
    results = _run_cells(cells, worker, threads)

    human = ["model".ljust(14) + "".join(f"len={length}".rjust(9) for length in lengths)]
    tsv = ["model\tlength\tdropout\ttest_node\ttest_graph\tstopped\tfailed"]
    for m in models:
        row = m.ljust(14)
        for length in lengths:
            r = results[(m, length)]
            row += ("failed" if r["failed"] else _fmt(r["test_node"])).rjust(9)
            tsv.append(f"{m}\t{length}\t{r.get('dropout')}\t{r.get('test_node')}"
                       f"\t{r.get('test_graph')}\t{r['stopped']}\t{int(r['failed'])}")
        human.append(row)
    _write(os.path.join(out_dir, "recall_table.txt"), "\n".join(human) + "\n")
    _write(os.path.join(out_dir, "recall_table.tsv"), "\n".join(tsv) + "\n")
    print("\n".join(human))
    return results


# ---------------------------------------------------------------------------
# treemax

def cmd_treemax(models, seeds, out_dir, threads=1, settings=None):
    settings = settings or {}
    model_over, train_over = _split_overrides(settings)

    def worker(cell):
        model_name, seed = cell
        log_path = os.path.join(out_dir, f"treemax_{model_name}_seed{seed}.log")
        cfg = treemax_model_config(model_name, model_over)
        default_lr = (0.00025 if model_name == "SGGNN-RM-GAT"
                      else TREEMAX_DEFAULTS["lr"])
        expect = {"task": "treemax", "model": model_name, "seed": seed,
                  "dim": cfg.dim, "steps": cfg.num_steps,
                  "lr": train_over.get("lr", default_lr), "dropout": cfg.dropout}
        cached = load_cached_result(log_path, {k: str(v) for k, v in expect.items()})
        if cached is not None:
            return SimpleNamespace(failed=cached["failed"],
                                   test_node=cached.get("test_node"),
                                   test_graph=cached.get("test_graph"))
        run = run_tree_max_once(model_name, seed, model_over, train_over, log_path)
        return SimpleNamespace(failed=run.failed, test_node=run.test_node,
                               test_graph=run.test_graph)

    cells = [(m, s) for m in models for s in seeds]
    results = _run_cells(cells, worker, threads)

    human = ["model".ljust(16) + "node acc".rjust(14) + "graph acc".rjust(14)]
    tsv = ["model\tnode_mean\tnode_std\tgraph_mean\tgraph_std\tseeds_used\twarnings"]
    per_run_tsv = ["model\tseed\ttest_node\ttest_graph\tfailed"]
    summaries = {}
    for m in models:
        runs = {s: results[(m, s)] for s in seeds}
        summary = summarize_tree_max(m, runs)
        summaries[m] = summary
        for s in seeds:
            r = runs[s]
            per_run_tsv.append(f"{m}\t{s}\t{r.test_node}\t{r.test_graph}\t{int(r.failed)}")
        if summary["seeds_used"]:
            node = f"{_fmt(summary['node_mean'])}±{100 * summary['node_std']:.1f}"
            graph = f"{_fmt(summary['graph_mean'])}±{100 * summary['graph_std']:.1f}"
        else:
            node = graph = "failed"
        human.append(m.ljust(16) + node.rjust(14) + graph.rjust(14))
        for warning in summary["warnings"]:
            human.append(f"  warning: {m}: {warning}")
        tsv.append(f"{m}\t{summary['node_mean']}\t{summary['node_std']}"
                   f"\t{summary['graph_mean']}\t{summary['graph_std']}"
                   f"\t{','.join(map(str, summary['seeds_used']))}"
                   f"\t{'; '.join(summary['warnings'])}")
    _write(os.path.join(out_dir, "treemax_table.txt"), "\n".join(human) + "\n")
    _write(os.path.join(out_dir, "treemax_table.tsv"), "\n".join(tsv) + "\n")
    _write(os.path.join(out_dir, "treemax_runs.tsv"), "\n".join(per_run_tsv) + "\n")
    print("\n".join(human))
    return summaries


# ---------------------------------------------------------------------------
# diagnostics commands

def cmd_gradcheck(out_dir, seed=0):
    reports = gradcheck_suite(seed=seed)
    tsv = ["check\tnum_coords\tmax_rel_err\tpassed"]
    human = []
    for r in reports:
        tsv.append(f"{r.name}\t{r.num_coords}\t{r.max_rel_err:.3e}\t{int(r.passed)}")
        human.append(f"{r.name:16s} max_rel_err={r.max_rel_err:.3e} "
                     f"{'ok' if r.passed else 'FAILED'}")
    _write(os.path.join(out_dir, "gradcheck.tsv"), "\n".join(tsv) + "\n")
    _write(os.path.join(out_dir, "gradcheck.txt"), "\n".join(human) + "\n")
    print("\n".join(human))
    return reports


def cmd_gradprofile(models, seeds, num_nodes, out_dir, threads=1):
    def worker(cell):
        model_name, seed = cell
        profile = hop_gradient_profile(model_name, num_nodes, seed)
        path = os.path.join(out_dir, f"profile_{model_name}_N{num_nodes}_seed{seed}.tsv")
        _write(path, profile_to_tsv(profile, model_name, num_nodes, seed))
        return profile

    cells = [(m, s) for m in models for s in seeds]
    profiles = _run_cells(cells, worker, threads)

    tsv = ["model\tseed\tdecay_ratio"]
    medians = {}
    for m in models:
        ratios = [decay_ratio(profiles[(m, s)]) for s in seeds]
        medians[m] = float(np.median(ratios))
        for s, ratio in zip(seeds, ratios):
            tsv.append(f"{m}\t{s}\t{ratio:.6e}")
    human = [f"{m}: median decay ratio over {len(seeds)} seeds = {medians[m]:.3e}"
             for m in models]
    tsv.append("")
    for m in models:
        tsv.append(f"# median\t{m}\t{medians[m]:.6e}")
    if "GGNN" in medians and "SGGNN-RV-GAT" in medians:
        rel = medians["GGNN"] / medians["SGGNN-RV-GAT"]
        verdict = "PASS" if rel >= 100.0 else "FAIL"
        line = (f"ratio criterion GGNN/SGGNN-RV-GAT = {rel:.3e} "
                f"(needs >= 100): {verdict}")
        human.append(line)
        tsv.append(f"# criterion\t{rel:.6e}\t{verdict}")
    _write(os.path.join(out_dir, "gradprofile_summary.txt"), "\n".join(human) + "\n")
    _write(os.path.join(out_dir, "gradprofile_summary.tsv"), "\n".join(tsv) + "\n")
    print("\n".join(human))
    return medians


# ---------------------------------------------------------------------------
# export / report

def cmd_export(settings, out_dir):
    kind = settings.get("kind", "recall")
    seed = settings.get("seed", 0)
    if kind == "recall":
        length = settings.get("length", 5)
        dataset = gen_conditional_recall(length, per_class=settings.get("per_class", 20),
                                         seed=seed)
        name = f"dataset_recall_len{length}_seed{seed}.txt"
    elif kind == "treemax":
        dataset = gen_tree_max(seed, num_examples=settings.get("num_examples", 800))
        name = f"dataset_treemax_seed{seed}.txt"
    else:
        raise ConfigError(f"unknown export kind {kind!r}; use recall or treemax")
    path = os.path.join(out_dir, name)
    try:
        _write(path, export_dataset(dataset))
    except OSError as exc:
        raise ParseError(f"cannot write {path}: {exc}") from None
    print(path)
    return path


def _collect_logs(spec_text):
    paths = []
    for token in spec_text.split(","):
        token = token.strip()
        if not token:
            continue
        if os.path.isdir(token):
            paths.extend(sorted(
                os.path.join(token, n) for n in os.listdir(token)
                if n.endswith(".log")))
        else:
            paths.append(token)
    return paths


def cmd_report(log_spec, out_dir):
    groups = {}
    for path in _collect_logs(log_spec):
        try:
            with open(path, encoding="utf-8") as fh:
                parsed = parse_run_log(fh.read())
        except OSError as exc:
            raise ParseError(f"cannot read {path}: {exc}") from None
        except ParseError as exc:
            raise ParseError(f"{path}: {exc}") from None
        meta, result = parsed["meta"], parsed["result"]
        if result is None:
            continue
        key = (meta.get("task", "?"), meta.get("model", "?"),
               meta.get("length", ""))
        groups.setdefault(key, []).append(result)

    def model_rank(name):
        return MODEL_NAMES.index(name) if name in MODEL_NAMES else len(MODEL_NAMES)

    tsv = ["task\tmodel\tlength\truns\tfailed\tnode_mean\tnode_std\tgraph_mean\tgraph_std"]
    human = ["task      model            length runs failed node            graph"]
    for key in sorted(groups, key=lambda k: (k[0], model_rank(k[1]), k[2])):
        task, model, length = key
        rows = groups[key]
        ok = [r for r in rows if not r["failed"]]
        failed = len(rows) - len(ok)
        if ok:
            nodes = np.array([r["test_node"] for r in ok])
            graphs = np.array([r["test_graph"] for r in ok])
            nm, gm = float(nodes.mean()), float(graphs.mean())
            ns = float(nodes.std(ddof=1)) if nodes.size > 1 else 0.0
            gs = float(graphs.std(ddof=1)) if graphs.size > 1 else 0.0
            node_h = f"{_fmt(nm)}±{100 * ns:.1f}"
            graph_h = f"{_fmt(gm)}±{100 * gs:.1f}"
        else:
            nm = ns = gm = gs = None
            node_h = graph_h = "all failed"
        tsv.append(f"{task}\t{model}\t{length}\t{len(rows)}\t{failed}"
                   f"\t{nm}\t{ns}\t{gm}\t{gs}")
        human.append(f"{task:9s} {model:16s} {length:6s} {len(rows):4d} "
                     f"{failed:6d} {node_h:15s} {graph_h}")
    _write(os.path.join(out_dir, "report.tsv"), "\n".join(tsv) + "\n")
    _write(os.path.join(out_dir, "report.txt"), "\n".join(human) + "\n")
    print("\n".join(human))
    return groups


# ---------------------------------------------------------------------------
# argument handling

def build_parser():
    parser = argparse.ArgumentParser(
        prog="relgnn",
        description="training, diagnostics, and reporting for relational GNN experiments")
    parser.add_argument("--task", choices=TASKS)
    parser.add_argument("--models", help="comma-separated model names, or 'all'")
    parser.add_argument("--lengths", help="comma-separated sequence lengths")
    parser.add_argument("--seeds", help="comma-separated seeds")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--logs", help="log files or directories for --task report")
    parser.add_argument("--sweep", action="store_true", default=None,
                        help="recall: sweep dropout {0, 0.1, 0.25, 0.5} per cell "
                             "and report the best validation run")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        settings = parse_config_file(args.config) if args.config else {}
        for key in ("task", "models", "lengths", "seeds", "out", "threads",
                    "logs", "sweep"):
            value = getattr(args, key)
            if value is not None:
                settings[key] = value
        task = settings.get("task")
        if task not in TASKS:
            raise ConfigError(f"missing or unknown task {task!r}; choose from {TASKS}")
        out_dir = settings.get("out", "results")
        os.makedirs(out_dir, exist_ok=True)
        echo_config(out_dir, settings)
        threads = settings.get("threads", 1)

        if task == "recall":
            models = resolve_models(settings.get("models"))
            lengths = parse_int_list(settings.get("lengths", "3,5,7,10"), "lengths")
            seeds = parse_int_list(settings.get("seeds", "0"), "seeds")
            cmd_recall(models, lengths, seeds[0], out_dir, threads, settings)
        elif task == "treemax":
            models = resolve_models(settings.get("models"))
            seeds = parse_int_list(settings.get("seeds", "0,1,2,3,4"), "seeds")
            cmd_treemax(models, seeds, out_dir, threads, settings)
        elif task == "gradcheck":
            cmd_gradcheck(out_dir, seed=settings.get("seed", 0))
        elif task == "gradprofile":
            models = resolve_models(settings.get("models", "GGNN,SGGNN-RV-GAT"))
            seeds = parse_int_list(settings.get("seeds", "0,1,2,3,4,5,6,7,8,9"), "seeds")
            cmd_gradprofile(models, seeds, settings.get("num_nodes", 30),
                            out_dir, threads)
        elif task == "export":
            cmd_export(settings, out_dir)
        else:
            if "logs" not in settings:
                raise ConfigError("--task report needs --logs <files-or-dirs>")
            cmd_report(settings["logs"], out_dir)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RelgnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
