"""
Graph data model, renormalized propagation operator, homophily, synthetic
block-model graphs, few-shot split sampling, and JSON graph files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import SparseMatrix, make_rng, spmm

logger = logging.getLogger(__name__)

UNLABELED = -1


class GraphFormatError(ValueError):
    """Raised for malformed graph files; the message names the offending field."""


@dataclass(eq=False)
class Graph:
    """
    Undirected, unweighted attributed graph.

    ``edges`` is an (m, 2) int array with ``u < v`` per row, no duplicates and
    no self-loops. ``labels`` uses ``-1`` for unlabeled nodes.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    num_classes: int = 0
    train_mask: np.ndarray = None
    val_mask: np.ndarray = None
    test_mask: np.ndarray = None
    _adj_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = self.num_nodes
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must be {n} x d, got {self.features.shape}")
        if self.labels.shape != (n,):
            raise ValueError("labels must have one entry per node")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if n and self.labels.max() >= 0 else 0
        if np.any(self.labels >= self.num_classes) or np.any(self.labels < UNLABELED):
            raise ValueError("label out of range")
        _check_edges(self.edges, n)
        for name in ("train_mask", "val_mask", "test_mask"):
            mask = getattr(self, name)
            mask = np.zeros(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
            if mask.shape != (n,):
                raise ValueError(f"{name} must have one entry per node")
            setattr(self, name, mask)
        if np.any(self.train_mask & self.val_mask) or np.any(self.train_mask & self.test_mask) \
                or np.any(self.val_mask & self.test_mask):
            raise ValueError("train/val/test masks must be disjoint")
        if np.any(self.labels[self.train_mask] == UNLABELED):
            raise ValueError("every training node needs a label")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def with_masks(self, train, val, test) -> "Graph":
        return replace(self, train_mask=train, val_mask=val, test_mask=test, _adj_cache={})

    def neighbors(self) -> list[np.ndarray]:
        """Sorted neighbor lists of the raw adjacency (no self-loops)."""
        both = np.concatenate([self.edges, self.edges[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(1, self.num_nodes))
        return np.split(both[:, 1], splits)


def _check_edges(edges: np.ndarray, n: int) -> None:
    if len(edges) == 0:
        return
    if edges.min() < 0 or edges.max() >= n:
        raise ValueError("edge endpoint out of range")
    if np.any(edges[:, 0] >= edges[:, 1]):
        raise ValueError("edges must be stored as (u, v) with u < v; self-loops are not allowed")
    keys = edges[:, 0] * n + edges[:, 1]
    if len(np.unique(keys)) != len(keys):
        raise ValueError("duplicate edge")


def canonical_edges(pairs, n: int) -> np.ndarray:
    """Orient pairs as u < v, drop self-loops and duplicates, sort."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    keep = lo != hi
    keys = np.unique(lo[keep] * n + hi[keep])
    return np.stack([keys // n, keys % n], axis=1)


def renormalized_adjacency(g: Graph) -> SparseMatrix:
    """
    Symmetric propagation operator ``D^-1/2 (A + I) D^-1/2``.

    The result is cached on the graph; ``D`` counts the added self-loop.
    """
    cached = g._adj_cache.get("P")
    if cached is not None:
        return cached
    n = g.num_nodes
    u, v = g.edges[:, 0], g.edges[:, 1]
    deg = np.ones(n) + np.bincount(u, minlength=n) + np.bincount(v, minlength=n)
    inv_sqrt = 1.0 / np.sqrt(deg)
    loops = np.arange(n)
    rows = np.concatenate([u, v, loops])
    cols = np.concatenate([v, u, loops])
    # product form keeps (i, j) and (j, i) bitwise equal
    vals = inv_sqrt[rows] * inv_sqrt[cols]
    p = SparseMatrix.from_coo(n, n, rows, cols, vals)
    g._adj_cache["P"] = p
    return p


def propagation_upper_bound(p: SparseMatrix, K: int) -> np.ndarray:
    """Norm bound ``P^K 1``: the all-ones vector propagated ``K`` times."""
    if p.rows != p.cols:
        raise ValueError("propagation matrix must be square")
    if K < 0:
        raise ValueError("K must be nonnegative")
    b = np.ones(p.rows)
    for _ in range(K):
        b = spmm(p, b)
    return b


def homophily(g: Graph) -> float:
    """Mean fraction of same-label neighbors, over nodes with at least one neighbor."""
    if np.any(g.labels == UNLABELED):
        raise ValueError("homophily needs every node labeled")
    u, v = g.edges[:, 0], g.edges[:, 1]
    n = g.num_nodes
    deg = np.bincount(u, minlength=n) + np.bincount(v, minlength=n)
    same = (g.labels[u] == g.labels[v]).astype(np.int64)
    same_count = np.bincount(u, weights=same, minlength=n) + np.bincount(v, weights=same, minlength=n)
    live = deg > 0
    if not np.any(live):
        raise ValueError("homophily is undefined when every node is isolated")
    return float(np.mean(same_count[live] / deg[live]))


@dataclass(frozen=True)
class SbmParams:
    nodes_per_class: int
    num_classes: int
    p_intra: float
    p_inter: float
    feature_dim: int
    class_mean_separation: float = 1.0
    noise_sigma: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.p_inter <= self.p_intra <= 1.0:
            raise ValueError("need 0 <= p_inter <= p_intra <= 1")
        if self.nodes_per_class < 1 or self.num_classes < 1:
            raise ValueError("need at least one class and one node per class")
        if self.feature_dim < self.num_classes:
            raise ValueError("feature_dim must be >= num_classes for orthogonal class means")


def sbm_generate(params: SbmParams, rng: np.random.Generator) -> Graph:
    """
    Sample a planted-partition graph with Gaussian class-conditional features.

    Nodes are grouped by class (class ``c`` owns the ``c``-th contiguous block).
    Class means are ``class_mean_separation * e_c``.
    """
    k, c = params.nodes_per_class, params.num_classes
    n = k * c
    labels = np.repeat(np.arange(c), k)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], params.p_intra, params.p_inter)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)
    means = np.zeros((c, params.feature_dim))
    means[np.arange(c), np.arange(c)] = params.class_mean_separation
    features = means[labels] + params.noise_sigma * rng.standard_normal((n, params.feature_dim))
    return Graph(n, edges, features, labels, num_classes=c)


@dataclass(frozen=True)
class SplitSpec:
    shots_per_class: int
    val_per_class: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.shots_per_class < 1:
            raise ValueError("shots_per_class must be >= 1")
        if self.val_per_class < 0:
            raise ValueError("val_per_class must be >= 0")


def sample_few_shot_split(g: Graph, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Draw ``shots`` training and ``val_per_class`` validation nodes per class.

    The remaining labeled nodes form the test set. Each class must keep at
    least one test node. Returns boolean (train, val, test) masks.
    """
    rng = make_rng(spec.seed)
    n = g.num_nodes
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    need = spec.shots_per_class + spec.val_per_class
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if len(members) <= need:
            raise ValueError(
                f"class {c} has {len(members)} labeled nodes; "
                f"{spec.shots_per_class} shots + {spec.val_per_class} val leaves no test node"
            )
        members = rng.permutation(members)
        train[members[: spec.shots_per_class]] = True
        val[members[spec.shots_per_class: need]] = True
        test[members[need:]] = True
    return train, val, test


# ---------------------------------------------------------------------------
# JSON graph files
# ---------------------------------------------------------------------------

def graph_to_dict(g: Graph) -> dict:
    doc = {
        "num_nodes": int(g.num_nodes),
        "num_features": int(g.num_features),
        "num_classes": int(g.num_classes),
        "edges": g.edges.tolist(),
        "features": g.features.tolist(),
        "labels": [None if y == UNLABELED else int(y) for y in g.labels],
    }
    if g.train_mask.any() or g.val_mask.any() or g.test_mask.any():
        doc["splits"] = {
            "train": np.flatnonzero(g.train_mask).tolist(),
            "val": np.flatnonzero(g.val_mask).tolist(),
            "test": np.flatnonzero(g.test_mask).tolist(),
        }
    return doc


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g)), encoding="utf-8")


def _require_int(value, where: str, lo: int | None = None, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise GraphFormatError(f"{where}: expected integer, got {value!r}")
    if (lo is not None and value < lo) or (hi is not None and value >= hi):
        raise GraphFormatError(f"{where}: value {value} out of range [{lo}, {hi})")
    return value


def graph_from_dict(doc) -> Graph:
    if not isinstance(doc, dict):
        raise GraphFormatError("top level: expected a JSON object")
    for key in ("num_nodes", "num_features", "num_classes", "edges", "features", "labels"):
        if key not in doc:
            raise GraphFormatError(f"missing required field '{key}'")
    n = _require_int(doc["num_nodes"], "num_nodes", 1)
    d = _require_int(doc["num_features"], "num_features", 1)
    c = _require_int(doc["num_classes"], "num_classes", 0)

    edges = doc["edges"]
    if not isinstance(edges, list):
        raise GraphFormatError("edges: expected a list")
    seen = set()
    for k, e in enumerate(edges):
        if not isinstance(e, list) or len(e) != 2:
            raise GraphFormatError(f"edges[{k}]: expected [u, v]")
        u = _require_int(e[0], f"edges[{k}][0]", 0, n)
        v = _require_int(e[1], f"edges[{k}][1]", 0, n)
        if u >= v:
            raise GraphFormatError(f"edges[{k}]: need u < v, got [{u}, {v}]")
        if (u, v) in seen:
            raise GraphFormatError(f"edges[{k}]: duplicate edge [{u}, {v}]")
        seen.add((u, v))

    feats = doc["features"]
    if not isinstance(feats, list) or len(feats) != n:
        raise GraphFormatError(f"features: expected {n} rows")
    for i, row in enumerate(feats):
        if not isinstance(row, list) or len(row) != d:
            raise GraphFormatError(f"features[{i}]: expected {d} numbers")
        for j, x in enumerate(row):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not np.isfinite(x):
                raise GraphFormatError(f"features[{i}][{j}]: expected a finite number, got {x!r}")

    labels = doc["labels"]
    if not isinstance(labels, list) or len(labels) != n:
        raise GraphFormatError(f"labels: expected {n} entries")
    lab = np.full(n, UNLABELED, dtype=np.int64)
    for i, y in enumerate(labels):
        if y is not None:
            lab[i] = _require_int(y, f"labels[{i}]", 0, c)

    masks = {}
    splits = doc.get("splits")
    if splits is not None:
        if not isinstance(splits, dict):
            raise GraphFormatError("splits: expected an object")
        for name in ("train", "val", "test"):
            ids = splits.get(name, [])
            if not isinstance(ids, list):
                raise GraphFormatError(f"splits.{name}: expected a list")
            mask = np.zeros(n, dtype=bool)
            for k, i in enumerate(ids):
                mask[_require_int(i, f"splits.{name}[{k}]", 0, n)] = True
            masks[name] = mask
        overlap = (masks["train"] & masks["val"]) | (masks["train"] & masks["test"]) \
            | (masks["val"] & masks["test"])
        if overlap.any():
            raise GraphFormatError(f"splits: node {int(np.flatnonzero(overlap)[0])} appears in two splits")
        bad = np.flatnonzero(masks["train"] & (lab == UNLABELED))
        if len(bad):
            raise GraphFormatError(f"splits.train: node {int(bad[0])} has no label")

    return Graph(
        n,
        np.asarray(edges, dtype=np.int64).reshape(-1, 2),
        np.asarray(feats, dtype=np.float64).reshape(n, d),
        lab,
        num_classes=c,
        train_mask=masks.get("train"),
        val_mask=masks.get("val"),
        test_mask=masks.get("test"),
    )


def load_graph(path) -> Graph:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    try:
        return graph_from_dict(doc)
    except GraphFormatError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None
