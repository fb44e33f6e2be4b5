"""The two synthetic tasks: Conditional Recall and Tree Max.

Conditional Recall: classify a character sequence by its first digit, else
its first uppercase letter, else its first character. Sequences become path
graphs with next/previous/self edges and the prediction is read at the last
node, so information must flow length-1 hops.

Tree Max: label every node of a random tree with the maximum label in its
subtree. Trees become graphs with numbered child / child-of edges plus
self-edges and every node is a readout node.

Generation is a pure function of the seed: every instance derives its own
rng from (seed, index), so datasets are reproducible byte-for-byte under
export and instances could be generated in any order.
"""

import string
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ParseError, VocabError
from .graph import RelGraph, add_self_edges

ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits
SYMBOL_ID = {ch: i for i, ch in enumerate(ALPHABET)}

# Class vocabulary: 61 symbols. "0" can never be a class under the rules we
# generate for (we never place it as the class digit), keeping the label
# space at 61 while the input alphabet stays 62.
RECALL_CLASSES = [ch for ch in ALPHABET if ch != "0"]
RECALL_CLASS_ID = {ch: i for i, ch in enumerate(RECALL_CLASSES)}

RECALL_RELATIONS = ("next", "previous", "self")
TREE_RELATIONS = ("CHILD-1", "CHILD-2", "CHILD-3",
                  "CHILD-1-OF", "CHILD-2-OF", "CHILD-3-OF", "self")

TREE_MIN_DEPTH = 5
TREE_MAX_DEPTH = 15
TREE_MAX_LABEL = 100
TREE_MAX_BRANCH = 3

# Spine nodes always branch (the sampled depth must be realized); everyone
# else draws a child count from a per-tree (p0, p2, p3). A small fraction of
# trees use a near-critical profile so the size distribution has the heavy
# right tail the task needs (a few trees above 200 nodes) while the average
# stays small enough to train on.
SPINE_CHILD_PROBS = ((2, 0.75), (3, 0.25))
BRANCH_PROFILES = (
    ((0, 0.72), (2, 0.20), (3, 0.08)),   # common: subcritical, small trees
    ((0, 0.57), (2, 0.26), (3, 0.17)),   # rare: near-critical, large trees
)
HEAVY_PROFILE_PROB = 0.10


@dataclass
class TaskInstance:
    graph: RelGraph
    targets: list          # (node id, class id), aligned with readout_nodes
    readout_nodes: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.targets) != len(self.readout_nodes):
            raise ContractError("one target per readout node required")
        for (node, _), readout in zip(self.targets, self.readout_nodes):
            if node != readout:
                raise ContractError("targets must align with readout nodes")
            if not 0 <= node < self.graph.num_nodes:
                raise ContractError(f"target node {node} out of range")

    @property
    def target_classes(self):
        return np.array([c for _, c in self.targets], dtype=np.int64)


@dataclass
class Dataset:
    kind: str
    train: list
    validation: list
    test: list
    class_symbols: list
    relations: tuple
    num_symbols: int
    seed: int
    params: dict = field(default_factory=dict)

    @property
    def num_classes(self):
        return len(self.class_symbols)

    def split(self, name):
        try:
            return {"train": self.train, "validation": self.validation,
                    "test": self.test}[name]
        except KeyError:
            raise ContractError(f"unknown split {name!r}") from None

    def all_instances(self):
        return self.train + self.validation + self.test


# ---------------------------------------------------------------------------
# Conditional Recall

def conditional_recall_label(s):
    """First digit, else first uppercase, else first character."""
    if not s:
        raise ValueError("cannot label an empty sequence")
    for ch in s:
        if ch not in SYMBOL_ID:
            raise VocabError(f"symbol {ch!r} outside the 62-character alphabet")
    for ch in s:
        if ch.isdigit():
            return ch
    for ch in s:
        if ch.isupper():
            return ch
    return s[0]


_LOWER = string.ascii_lowercase
_LETTERS = string.ascii_lowercase + string.ascii_uppercase


def _sample_recall_string(rng, length, cls):
    """A uniform-position placement of the class symbol with earlier slots
    filled only with symbols that cannot preempt it."""
    if cls.isdigit():
        pos = int(rng.integers(length))
        chars = [_LETTERS[i] for i in rng.integers(len(_LETTERS), size=length)]
        for i in range(pos + 1, length):
            chars[i] = ALPHABET[int(rng.integers(len(ALPHABET)))]
    elif cls.isupper():
        pos = int(rng.integers(length))
        chars = [_LOWER[i] for i in rng.integers(len(_LOWER), size=length)]
        for i in range(pos + 1, length):
            chars[i] = _LETTERS[int(rng.integers(len(_LETTERS)))]
    else:
        pos = 0
        chars = [_LOWER[i] for i in rng.integers(len(_LOWER), size=length)]
    chars[pos] = cls
    s = "".join(chars)
    if conditional_recall_label(s) != cls:
        raise ContractError(f"generator produced {s!r} with wrong class")
    return s


def seq_to_graph(s):
    """Path graph with next/previous/self edges; readout at the last node."""
    label_symbol = conditional_recall_label(s)
    n = len(s)
    labels = [SYMBOL_ID[ch] for ch in s]
    edges = []
    for i in range(n - 1):
        edges.append((i, i + 1, 0))   # next
        edges.append((i + 1, i, 1))   # previous
    graph = add_self_edges(RelGraph(n, labels, edges, RECALL_RELATIONS[:2]))
    target = RECALL_CLASS_ID[label_symbol]
    return TaskInstance(graph, [(n - 1, target)], [n - 1],
                        meta={"length": n, "string": s})


def gen_conditional_recall(length, per_class=20, seed=0):
    """per_class strings for each of the 61 classes, split stratified
    80/10/10 in generation order."""
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    n_train = round(0.8 * per_class)
    n_val = round(0.1 * per_class)
    if n_train + n_val >= per_class and per_class > 1:
        n_val = max(0, per_class - n_train - 1)
    splits = {"train": [], "validation": [], "test": []}
    for cls_idx, cls in enumerate(RECALL_CLASSES):
        for j in range(per_class):
            rng = np.random.default_rng([seed, cls_idx, j])
            s = _sample_recall_string(rng, length, cls)
            inst = seq_to_graph(s)
            inst.meta.update(seed=seed, index=j)
            if j < n_train:
                splits["train"].append(inst)
            elif j < n_train + n_val:
                splits["validation"].append(inst)
            else:
                splits["test"].append(inst)
    return Dataset("recall", splits["train"], splits["validation"], splits["test"],
                   list(RECALL_CLASSES), RECALL_RELATIONS, len(ALPHABET), seed,
                   params={"length": length, "per_class": per_class})


# ---------------------------------------------------------------------------
# Tree Max

@dataclass
class Tree:
    label: int
    children: list = field(default_factory=list)


def tree_depth(tree):
    depth = 0
    stack = [(tree, 0)]
    while stack:
        node, d = stack.pop()
        depth = max(depth, d)
        stack.extend((c, d + 1) for c in node.children)
    return depth


def tree_size(tree):
    count = 0
    stack = [tree]
    while stack:
        node = stack.pop()
        count += 1
        stack.extend(node.children)
    return count


def _draw(rng, table):
    """Pick from ((value, prob), ...) with one uniform draw."""
    u = rng.random()
    acc = 0.0
    for value, prob in table:
        acc += prob
        if u < acc:
            return value
    return table[-1][0]


def _grow_subtree(rng, depth_left, profile):
    node = Tree(int(rng.integers(1, TREE_MAX_LABEL + 1)))
    if depth_left > 0:
        for _ in range(_draw(rng, profile)):
            node.children.append(_grow_subtree(rng, depth_left - 1, profile))
    return node


def gen_tree(seed):
    """Random labeled tree: depth uniform in {5..15}, realized exactly by a
    guaranteed spine; branching in {0,2,3}."""
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(TREE_MIN_DEPTH, TREE_MAX_DEPTH + 1))
    profile = BRANCH_PROFILES[rng.random() < HEAVY_PROFILE_PROB]
    root = Tree(int(rng.integers(1, TREE_MAX_LABEL + 1)))
    spine = root
    for level in range(depth):
        n_children = _draw(rng, SPINE_CHILD_PROBS)
        spine_slot = int(rng.integers(n_children))
        next_spine = None
        for i in range(n_children):
            if i == spine_slot:
                child = Tree(int(rng.integers(1, TREE_MAX_LABEL + 1)))
                next_spine = child
            else:
                child = _grow_subtree(rng, depth - level - 1, profile)
            spine.children.append(child)
        spine = next_spine
    return root


def tree_max_label(tree):
    """Same-shape tree whose labels are each subtree's maximum."""
    labeled_children = [tree_max_label(c) for c in tree.children]
    best = max([tree.label] + [c.label for c in labeled_children])
    return Tree(best, labeled_children)


def tree_to_graph(tree):
    """Preorder node ids; numbered child / child-of edges plus self-edges;
    every node is a readout node targeting its subtree max."""
    labels, edges, order = [], [], []
    stack = [(tree, None, 0)]
    while stack:
        node, parent_id, child_rank = stack.pop()
        if len(node.children) > TREE_MAX_BRANCH:
            raise ContractError(
                f"node has {len(node.children)} children; the encoding "
                f"supports at most {TREE_MAX_BRANCH}")
        node_id = len(labels)
        if not 1 <= node.label <= TREE_MAX_LABEL:
            raise VocabError(f"tree label {node.label} outside 1..{TREE_MAX_LABEL}")
        labels.append(node.label - 1)
        order.append(node)
        if parent_id is not None:
            edges.append((parent_id, node_id, child_rank - 1))
            edges.append((node_id, parent_id, TREE_MAX_BRANCH + child_rank - 1))
        stack.extend((child, node_id, i + 1)
                     for i, child in reversed(list(enumerate(node.children))))
    graph = add_self_edges(RelGraph(len(labels), labels, edges, TREE_RELATIONS[:-1]))

    maxed = tree_max_label(tree)
    target_by_node = {}
    pairs = [(tree, maxed)]
    while pairs:
        orig, solved = pairs.pop()
        target_by_node[id(orig)] = solved.label - 1
        pairs.extend(zip(orig.children, solved.children))
    targets = [(i, target_by_node[id(node)]) for i, node in enumerate(order)]
    return TaskInstance(graph, targets, list(range(len(labels))),
                        meta={"depth": tree_depth(tree)})


def gen_tree_max(seed, num_examples=800):
    """num_examples trees split 50/25/25 in generation order."""
    instances = []
    for i in range(num_examples):
        inst = tree_to_graph(gen_tree([seed, i]))
        inst.meta.update(seed=seed, index=i)
        instances.append(inst)
    n_train = num_examples // 2
    n_val = num_examples // 4
    return Dataset("treemax",
                   instances[:n_train],
                   instances[n_train:n_train + n_val],
                   instances[n_train + n_val:],
                   [str(v) for v in range(1, TREE_MAX_LABEL + 1)],
                   TREE_RELATIONS, TREE_MAX_LABEL, seed,
                   params={"num_examples": num_examples})


# s-expression helpers, matching the "(1 (2 (3) (4)))" notation

def format_tree(tree):
    if not tree.children:
        return f"({tree.label})"
    return f"({tree.label} " + " ".join(format_tree(c) for c in tree.children) + ")"


def parse_tree(text):
    tokens = text.replace("(", " ( ").replace(")", " ) ").split()
    pos = 0

    def parse():
        nonlocal pos
        if pos >= len(tokens) or tokens[pos] != "(":
            raise ParseError(f"expected '(' at token {pos} of {text!r}")
        pos += 1
        if pos >= len(tokens):
            raise ParseError("unexpected end of tree text")
        node = Tree(int(tokens[pos]))
        pos += 1
        while pos < len(tokens) and tokens[pos] == "(":
            node.children.append(parse())
        if pos >= len(tokens) or tokens[pos] != ")":
            raise ParseError(f"expected ')' at token {pos} of {text!r}")
        pos += 1
        return node

    root = parse()
    if pos != len(tokens):
        raise ParseError(f"trailing tokens in {text!r}")
    return root


# ---------------------------------------------------------------------------
# metrics and hop statistics

def metrics(predictions, instance):
    """(node accuracy, graph accuracy) for one instance."""
    predictions = np.asarray(predictions)
    want = instance.target_classes
    if predictions.shape != want.shape:
        raise ContractError(
            f"{predictions.shape[0] if predictions.ndim else 0} predictions "
            f"for {want.shape[0]} readout nodes")
    correct = predictions == want
    node_acc = float(correct.mean())
    return node_acc, float(correct.all())


def hop_requirements(tree):
    """Per node (preorder), the hops needed to certify its target: distance
    to the nearest descendant (or itself) attaining the subtree maximum."""
    out = []

    def visit(node):
        idx = len(out)
        out.append(None)
        best, dist = node.label, 0
        for child in node.children:
            c_best, c_dist = visit(child)
            if c_best > best:
                best, dist = c_best, c_dist + 1
            elif c_best == best and best != node.label:
                dist = min(dist, c_dist + 1)
        out[idx] = (best, dist)
        return best, dist

    visit(tree)
    return [d for _, d in out]


def instance_to_tree(inst):
    """Rebuild the Tree from a Tree Max instance's child edges."""
    g = inst.graph
    children = {v: {} for v in range(g.num_nodes)}
    has_parent = set()
    for src, dst, name in g.edge_triples():
        if name.startswith("CHILD-") and not name.endswith("-OF"):
            rank = int(name.split("-")[1])
            children[src][rank] = dst
            has_parent.add(dst)
    roots = [v for v in range(g.num_nodes) if v not in has_parent]
    if len(roots) != 1:
        raise ContractError(f"expected one root, found {len(roots)}")

    def build(v):
        node = Tree(int(g.node_labels[v]) + 1)
        node.children = [build(children[v][rank])
                         for rank in sorted(children[v])]
        return node

    return build(roots[0])


def dataset_hop_stats(instances_or_trees, thresholds=(5, 10)):
    """Fractions of nodes requiring at least each threshold of hops."""
    total = 0
    counts = {t: 0 for t in thresholds}
    for item in instances_or_trees:
        tree = item if isinstance(item, Tree) else instance_to_tree(item)
        for d in hop_requirements(tree):
            total += 1
            for t in thresholds:
                counts[t] += d >= t
    if total == 0:
        raise ContractError("no nodes to compute hop statistics over")
    return {t: counts[t] / total for t in thresholds}


# ---------------------------------------------------------------------------
# dataset export / import

def _format_meta(meta):
    return " ".join(f"{k}={meta[k]}" for k in sorted(meta))


def export_dataset(dataset):
    lines = [f"dataset kind={dataset.kind} seed={dataset.seed} "
             + _format_meta(dataset.params),
             "classes " + " ".join(dataset.class_symbols),
             "relations " + " ".join(dataset.relations),
             f"symbols {dataset.num_symbols}"]
    for split_name in ("train", "validation", "test"):
        instances = dataset.split(split_name)
        lines.append(f"split {split_name} {len(instances)}")
        for i, inst in enumerate(instances):
            meta = {k: v for k, v in inst.meta.items() if k != "tree"}
            lines.append(f"instance {i} split={split_name} " + _format_meta(meta))
            lines.append(to_text_block(inst))
            lines.append("end")
    return "\n".join(lines) + "\n"


def to_text_block(inst):
    from .graph import to_text
    block = to_text(inst.graph).rstrip("\n").splitlines()
    block.extend(f"target {node} {cls}" for node, cls in inst.targets)
    block.append("readout " + ",".join(str(v) for v in inst.readout_nodes))
    return "\n".join(block)


def _parse_meta(parts):
    meta = {}
    for part in parts:
        if "=" not in part:
            raise ParseError(f"expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        try:
            meta[key] = int(value)
        except ValueError:
            meta[key] = value
    return meta


def import_dataset(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith("dataset "):
        raise ParseError("missing dataset header")
    header = _parse_meta(lines[0].split()[1:])
    kind = header.pop("kind")
    seed = header.pop("seed")
    if not lines[1].startswith("classes ") or not lines[2].startswith("relations "):
        raise ParseError("missing classes/relations lines")
    class_symbols = lines[1].split()[1:]
    relations = tuple(lines[2].split()[1:])
    if not lines[3].startswith("symbols "):
        raise ParseError("missing symbols line")
    num_symbols = int(lines[3].split()[1])

    splits = {"train": [], "validation": [], "test": []}
    i = 4
    current_split = None
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if line.startswith("split "):
            current_split = line.split()[1]
            if current_split not in splits:
                raise ParseError(f"unknown split {current_split!r}")
            i += 1
        elif line.startswith("instance "):
            meta = _parse_meta(line.split()[2:])
            meta.pop("split", None)
            i += 1
            block = []
            while i < len(lines) and lines[i].strip() != "end":
                block.append(lines[i])
                i += 1
            if i >= len(lines):
                raise ParseError("instance block missing 'end'")
            i += 1
            splits[current_split].append(_parse_instance(block, relations, meta))
        else:
            raise ParseError(f"unrecognized dataset line {line!r}")
    return Dataset(kind, splits["train"], splits["validation"], splits["test"],
                   class_symbols, relations, num_symbols, seed, params=header)


def _parse_instance(block, relations, meta):
    from .graph import from_text
    graph_lines, targets, readout = [], [], None
    for line in block:
        stripped = line.strip()
        if stripped.startswith("target "):
            _, node, cls = stripped.split()
            targets.append((int(node), int(cls)))
        elif stripped.startswith("readout "):
            readout = [int(v) for v in stripped.split()[1].split(",")]
        else:
            graph_lines.append(stripped)
    if readout is None:
        raise ParseError("instance block missing readout line")
    graph = from_text("\n".join(graph_lines), relations=relations)
    return TaskInstance(graph, targets, readout, meta=meta)
