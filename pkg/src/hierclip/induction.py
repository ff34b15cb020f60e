"""Unsupervised hierarchy induction from per-layer affinity traces.

Text: top-down greedy splitting at the weakest edge.  Images: per-layer break
sets chosen top-down against a threshold schedule, then connected components
of the unbroken grid.  Also bracket-F1 scoring and DOT/JSON export.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .masks import AffinityGrid

# break thresholds tuned for a 12-layer image encoder
REFERENCE_THRESHOLDS = (0.35, 0.5, 0.5, 0.6, 0.8, 0.85, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9)

Tree = Union[int, tuple]
Edge = Tuple[str, int, int]


# ---------------------------------------------------------------------------
# trees


def _leaves(tree: Tree) -> List[int]:
    if isinstance(tree, (int, np.integer)):
        return [int(tree)]
    return [leaf for child in tree for leaf in _leaves(child)]


def tree_spans(tree: Tree) -> List[Tuple[int, int]]:
    """Half-open spans of every internal node, root first."""
    out = []

    def walk(node) -> Tuple[int, int]:
        if isinstance(node, (int, np.integer)):
            return int(node), int(node) + 1
        bounds = [walk(child) for child in node]
        span = (bounds[0][0], bounds[-1][1])
        out.append(span)
        return span

    walk(tree)
    out.reverse()
    return out


def tree_to_brackets(tree: Tree) -> str:
    if isinstance(tree, (int, np.integer)):
        return str(int(tree))
    return "(" + " ".join(tree_to_brackets(c) for c in tree) + ")"


def brackets_to_tree(text: str) -> Tree:
    tokens = re.findall(r"\(|\)|\d+", text)
    pos = 0

    def parse():
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok != "(":
            return int(tok)
        children = []
        while tokens[pos] != ")":
            children.append(parse())
        pos += 1
        return tuple(children)

    tree = parse()
    if pos != len(tokens):
        raise ValueError(f"trailing tokens in bracket string {text!r}")
    return tree


@dataclass(frozen=True)
class ParseTree:
    """Binary bracketing of positions ``0..n-1`` (nested tuples, int leaves)."""

    root: Tree
    n: int

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if _leaves(self.root) != list(range(self.n)):
            raise ValueError("tree leaves must cover 0..n-1 exactly once, in order")

        def check(node):
            if isinstance(node, (int, np.integer)):
                return
            if len(node) != 2:
                raise ValueError("internal nodes must be binary")
            for child in node:
                check(child)

        check(self.root)

    def spans(self) -> List[Tuple[int, int]]:
        return tree_spans(self.root)

    def __str__(self) -> str:
        return tree_to_brackets(self.root)

    @classmethod
    def from_brackets(cls, text: str) -> "ParseTree":
        root = brackets_to_tree(text)
        return cls(root, len(_leaves(root)))


def is_valid_bracketing(tree: ParseTree) -> bool:
    spans = tree.spans()
    if len(spans) != max(0, tree.n - 1):
        return False
    for a in spans:
        if a[1] - a[0] < 2:
            return False
        for b in spans:
            # any two spans are disjoint or nested
            if a[0] < b[0] < a[1] < b[1]:
                return False
    return True


def parse_text_tree(traces: Sequence[np.ndarray], n: int) -> ParseTree:
    """Greedy top-down parse from per-layer chain affinities.

    ``traces[l]`` holds the ``n - 1`` edge affinities of layer ``l + 1``.  A span
    is split at its weakest edge (leftmost on ties) using the current layer,
    and both halves are parsed one layer lower (never below the first).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    traces = [np.asarray(t, dtype=np.float64).reshape(-1) for t in traces]
    if not traces:
        raise ValueError("need at least one layer of affinities")
    for t in traces:
        if t.size != n - 1:
            raise ValueError(f"trace of length {t.size} does not match {n} tokens")

    def build(i: int, j: int, layer: int) -> Tree:
        if j - i == 1:
            return i
        if j - i == 2:
            return (i, i + 1)
        k = i + int(np.argmin(traces[layer][i:j - 1]))
        lower = max(0, layer - 1)
        return (build(i, k + 1, lower), build(k + 1, j, lower))

    return ParseTree(build(0, n, len(traces) - 1), n)


def content_trace(trace: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Drop the edges touching the begin/end markers of a caption trace."""
    return [np.asarray(a).reshape(-1)[1:-1] for a in trace]


# ---------------------------------------------------------------------------
# bracket scoring


@dataclass
class BracketScore:
    precision: float
    recall: float
    f1: float


def _scored_spans(tree: ParseTree) -> Set[Tuple[int, int]]:
    return {s for s in tree.spans() if s[1] - s[0] >= 2 and s != (0, tree.n)}


def bracket_f1(pred: ParseTree, gold: ParseTree) -> BracketScore:
    """Unlabelled span overlap, ignoring single tokens and the whole sentence.

    When both trees have no scored spans (``n <= 2``) the score is 1.0.
    """
    if pred.n != gold.n:
        raise ValueError(f"length mismatch: {pred.n} vs {gold.n}")
    p, g = _scored_spans(pred), _scored_spans(gold)
    if not p and not g:
        return BracketScore(1.0, 1.0, 1.0)
    hit = len(p & g)
    precision = hit / len(p) if p else 0.0
    recall = hit / len(g) if g else 0.0
    f1 = 2 * precision * recall / (precision + recall) if hit else 0.0
    return BracketScore(precision, recall, f1)


def mean_sentence_f1(preds: Sequence[ParseTree], golds: Sequence[ParseTree]) -> float:
    return float(np.mean([bracket_f1(p, g).f1 for p, g in zip(preds, golds)]))


def random_tree_f1(golds: Sequence[ParseTree], layers: int, seed: int) -> float:
    """Mean F1 of parses driven by uniformly random affinities."""
    rng = np.random.default_rng(seed)
    preds = [parse_text_tree(rng.uniform(1e-6, 1.0, size=(layers, max(g.n - 1, 0))), g.n) for g in golds]
    return mean_sentence_f1(preds, golds)


# ---------------------------------------------------------------------------
# image groups


@dataclass
class ThresholdSchedule:
    thresholds: Tuple[float, ...]

    def __post_init__(self):
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.thresholds)

    @classmethod
    def for_layers(cls, layers: int) -> "ThresholdSchedule":
        """Reference 12-layer schedule resampled to ``layers`` by linear interpolation."""
        ref = np.array(REFERENCE_THRESHOLDS)
        if layers == len(ref):
            return cls(tuple(ref))
        if layers == 1:
            return cls((ref[0],))
        pos = np.linspace(0, len(ref) - 1, layers)
        return cls(tuple(np.interp(pos, np.arange(len(ref)), ref)))


@dataclass
class GroupSegmentation:
    """Per-layer labelings (index 0 is layer 1) and the break edges of each layer."""

    labels: np.ndarray                      # (L, h, w) int
    breaks: List[Set[Edge]] = field(default_factory=list)

    @property
    def layers(self) -> int:
        return self.labels.shape[0]

    def groups(self, layer: int) -> Dict[int, List[Tuple[int, int]]]:
        lab = self.labels[layer - 1]
        out: Dict[int, List[Tuple[int, int]]] = {}
        for (r, c), g in np.ndenumerate(lab):
            out.setdefault(int(g), []).append((r, c))
        return out


def _grid_edges(h: int, w: int) -> List[Edge]:
    return [("h", i, j) for i in range(h) for j in range(w - 1)] + \
           [("v", i, j) for i in range(h - 1) for j in range(w)]


def _edge_value(grid: AffinityGrid, edge: Edge) -> float:
    kind, i, j = edge
    return float((grid.horiz if kind == "h" else grid.vert)[i, j])


def _edge_nodes(edge: Edge, w: int) -> Tuple[int, int]:
    kind, i, j = edge
    u = i * w + j
    return u, (u + 1 if kind == "h" else u + w)


def grid_components(h: int, w: int, broken: Set[Edge]) -> np.ndarray:
    """Connected components of the 4-adjacency grid minus ``broken``, labelled in raster order."""
    kept = [_edge_nodes(e, w) for e in _grid_edges(h, w) if e not in broken]
    n = h * w
    if kept:
        src, dst = zip(*kept)
    else:
        src, dst = (), ()
    graph = coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n))
    _, raw = connected_components(graph, directed=False)
    relabel: Dict[int, int] = {}
    labels = np.array([relabel.setdefault(int(c), len(relabel)) for c in raw])
    return labels.reshape(h, w)


def refines(fine: np.ndarray, coarse: np.ndarray) -> bool:
    """Every group of ``fine`` lies inside a single group of ``coarse``."""
    parent: Dict[int, int] = {}
    for f, c in zip(fine.reshape(-1), coarse.reshape(-1)):
        if parent.setdefault(int(f), int(c)) != int(c):
            return False
    return True


def segment_image_groups(traces: Sequence[AffinityGrid], schedule: ThresholdSchedule) -> GroupSegmentation:
    """Top-down break-edge selection and per-layer grouping.

    An edge is broken at layer ``l`` when its affinity is below the layer's
    threshold and it was not already broken at layer ``l + 1``.  The grouping at
    layer ``l`` removes every edge broken at ``l`` or above.
    """
    if len(traces) != len(schedule):
        raise ValueError(f"{len(traces)} layers of affinities but {len(schedule)} thresholds")
    if not traces:
        raise ValueError("need at least one layer")
    grids = [t.numpy() for t in traces]
    h, w = grids[0].h, grids[0].w
    edges = _grid_edges(h, w)
    top = len(grids)
    breaks: List[Set[Edge]] = [set() for _ in range(top)]
    for l in range(top, 0, -1):
        theta = schedule.thresholds[l - 1]
        for e in edges:
            if _edge_value(grids[l - 1], e) < theta:
                if l == top or e not in breaks[l]:
                    breaks[l - 1].add(e)
    labels = np.zeros((top, h, w), dtype=np.int64)
    broken: Set[Edge] = set()
    for l in range(top, 0, -1):
        broken |= breaks[l - 1]
        labels[l - 1] = grid_components(h, w, broken)
    for l in range(1, top):
        assert refines(labels[l - 1], labels[l]), "layer partitions must nest"
    return GroupSegmentation(labels, breaks)


def is_four_connected(mask: np.ndarray) -> bool:
    cells = list(zip(*np.nonzero(mask)))
    if not cells:
        return True
    seen = {cells[0]}
    stack = [cells[0]]
    while stack:
        r, c = stack.pop()
        for rr, cc in ((r + 1, c), (r - 1, c), (r, c + 1), (r, c - 1)):
            if 0 <= rr < mask.shape[0] and 0 <= cc < mask.shape[1] and mask[rr, cc] and (rr, cc) not in seen:
                seen.add((rr, cc))
                stack.append((rr, cc))
    return len(seen) == len(cells)


def object_iou(labels: np.ndarray, gold: np.ndarray) -> float:
    """Mean over gold objects of the best IoU achieved by any predicted group."""
    scores = []
    for obj in np.unique(gold):
        if obj == 0:
            continue
        target = gold == obj
        best = 0.0
        for g in np.unique(labels[target]):
            pred = labels == g
            best = max(best, (pred & target).sum() / (pred | target).sum())
        scores.append(best)
    return float(np.mean(scores)) if scores else 1.0


# ---------------------------------------------------------------------------
# export


def _tree_dot(tree: ParseTree, words: Optional[Sequence[str]]) -> str:
    lines = ["digraph parse {", "  node [shape=box];"]

    def node_id(node) -> str:
        if isinstance(node, (int, np.integer)):
            return f"t{int(node)}"
        lo, hi = tree_spans(node)[0]
        return f"s{lo}_{hi}"

    def label(node) -> str:
        if isinstance(node, (int, np.integer)):
            return words[int(node)] if words else str(int(node))
        lo, hi = tree_spans(node)[0]
        return f"[{lo},{hi})"

    def walk(node):
        lines.append(f'  {node_id(node)} [label="{label(node)}"];')
        if isinstance(node, tuple):
            for child in node:
                walk(child)
            for child in node:
                lines.append(f"  {node_id(node)} -> {node_id(child)};")

    walk(tree.root)
    lines.append("}")
    return "\n".join(lines) + "\n"


def _segmentation_dot(seg: GroupSegmentation) -> str:
    lines = ["digraph groups {"]
    for l in range(seg.layers, 0, -1):
        lines.append(f"  subgraph cluster_layer{l} {{")
        lines.append(f'    label="layer {l}";')
        for g, cells in sorted(seg.groups(l).items()):
            lines.append(f'    L{l}_g{g} [label="{len(cells)} patches"];')
        lines.append("  }")
    for l in range(seg.layers, 1, -1):
        upper, lower = seg.labels[l - 1], seg.labels[l - 2]
        pairs = sorted({(int(u), int(d)) for u, d in zip(upper.reshape(-1), lower.reshape(-1))})
        for u, d in pairs:
            lines.append(f"  L{l}_g{u} -> L{l - 1}_g{d};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _edge_list(edges: Set[Edge]) -> list:
    return [list(e) for e in sorted(edges)]


def export_hierarchy(obj, fmt: str = "json", words: Optional[Sequence[str]] = None) -> bytes:
    """Serialise a :class:`ParseTree` or :class:`GroupSegmentation` as DOT or JSON."""
    if fmt not in ("dot", "json"):
        raise ValueError(f"unknown export format {fmt!r}; use 'dot' or 'json'")
    if isinstance(obj, ParseTree):
        if fmt == "dot":
            return _tree_dot(obj, words).encode("utf-8")
        payload = {"type": "tree", "n": obj.n, "brackets": str(obj), "spans": [list(s) for s in obj.spans()]}
        if words is not None:
            payload["words"] = list(words)
        return (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8")
    if isinstance(obj, GroupSegmentation):
        if fmt == "dot":
            return _segmentation_dot(obj).encode("utf-8")
        payload = {
            "type": "segmentation",
            "h": int(obj.labels.shape[1]),
            "w": int(obj.labels.shape[2]),
            "layers": [
                {"layer": l + 1, "labels": obj.labels[l].tolist(), "breaks": _edge_list(obj.breaks[l])}
                for l in range(obj.layers)
            ],
        }
        return (json.dumps(payload, sort_keys=True) + "\n").encode("utf-8")
    raise TypeError(f"cannot export {type(obj).__name__}")


def load_hierarchy(data: bytes):
    """Inverse of the JSON branch of :func:`export_hierarchy`."""
    payload = json.loads(data.decode("utf-8"))
    if payload["type"] == "tree":
        return ParseTree.from_brackets(payload["brackets"])
    labels = np.array([layer["labels"] for layer in payload["layers"]], dtype=np.int64)
    breaks = [{(k, int(i), int(j)) for k, i, j in layer["breaks"]} for layer in payload["layers"]]
    return GroupSegmentation(labels, breaks)
