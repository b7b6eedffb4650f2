"""
Full-batch training with validation-based model selection, multi-seed
experiments, and a propagation timing benchmark.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .graph import Graph, SplitSpec, canonical_edges, load_graph, propagation_upper_bound, \
    renormalized_adjacency, sample_few_shot_split
from .losses import LossConfig, global_bias, total_loss
from .model import Hyper, ModelParams, backward, forward, init_params, predict, propagate
from .prototypes import PrototypeSet, load_prototypes, solve_prototypes
from .tensor import AdamState, SparseMatrix, adam_step, make_rng

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "epoch", "loss_total", "loss_cls", "loss_reg", "omega_size", "global_bias", "val_acc", "epoch_ms",
)


@dataclass
class TrainConfig:
    """
    Everything that determines one training run.

    ``shots`` > 0 samples a fresh few-shot split from ``split_seed`` (or from
    ``seed`` when ``split_seed`` is None); ``shots`` == 0 uses the splits stored
    in the graph file. Without ``prototypes`` a prototype set is solved for
    (num_classes, dim, proto_seed).
    """

    graph: str | None = None
    prototypes: str | None = None
    proto_seed: int = 0
    proto_iters: int = 2000
    K: int = 2
    hidden: int = 64
    dim: int = 32
    dropout: float = 0.3
    lam: float = 1.0
    tau: float = 0.8
    warmup: int = 10
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 300
    seed: int = 0
    shots: int = 0
    val_per_class: int = 30
    split_seed: int | None = None
    timing: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.shots < 0:
            raise ValueError("shots must be >= 0")
        # validate eagerly
        self.hyper
        self.loss

    @property
    def hyper(self) -> Hyper:
        return Hyper(K=self.K, hidden=self.hidden, dim=self.dim, dropout=self.dropout)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(lam=self.lam, tau=self.tau, warmup_epochs=self.warmup)

    @property
    def split(self) -> SplitSpec | None:
        if self.shots == 0:
            return None
        seed = self.seed if self.split_seed is None else self.split_seed
        return SplitSpec(self.shots, self.val_per_class, seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class MetricRow:
    epoch: int
    loss_total: float
    loss_cls: float
    loss_reg: float
    omega_size: int
    global_bias: float
    val_acc: float
    epoch_ms: float | None = None


@dataclass
class RunResult:
    seed: int
    best_epoch: int
    val_accuracy: float
    test_accuracy: float
    final_global_bias: float
    metrics: list[MetricRow] = field(default_factory=list)
    params: ModelParams | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "val_acc": self.val_accuracy,
            "test_acc": self.test_accuracy,
            "final_global_bias": self.final_global_bias,
        }


def metrics_csv(rows: list[MetricRow], run: int | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(METRIC_COLUMNS) if run is None else ["run", *METRIC_COLUMNS]
    writer.writerow(header)
    for r in rows:
        vals = [r.epoch, repr(r.loss_total), repr(r.loss_cls), repr(r.loss_reg), r.omega_size,
                repr(r.global_bias), repr(r.val_acc), "" if r.epoch_ms is None else f"{r.epoch_ms:.3f}"]
        writer.writerow(vals if run is None else [run, *vals])
    return buf.getvalue()


def evaluate(params: ModelParams, graph: Graph, protos: PrototypeSet, hyper: Hyper, mask,
             p: SparseMatrix | None = None) -> float:
    """Accuracy of nearest-prototype predictions on ``mask`` with dropout off."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("evaluation mask is empty")
    p = renormalized_adjacency(graph) if p is None else p
    cache = forward(params, graph, p, hyper, training=False)
    pred = predict(cache.ZK, protos)
    return float(np.mean(pred[mask] == graph.labels[mask]))


def resolve_inputs(cfg: TrainConfig, graph: Graph | None = None,
                   protos: PrototypeSet | None = None) -> tuple[Graph, PrototypeSet]:
    """Load or receive the graph, apply the configured split, load or solve prototypes."""
    if graph is None:
        if cfg.graph is None:
            raise ValueError("config has no graph path")
        graph = load_graph(cfg.graph)
    split = cfg.split
    if split is not None:
        graph = graph.with_masks(*sample_few_shot_split(graph, split))
    elif not graph.train_mask.any():
        raise ValueError("graph has no training split; set shots > 0 to sample one")
    if protos is None:
        if cfg.prototypes is not None:
            protos = load_prototypes(cfg.prototypes)
        else:
            protos = solve_prototypes(graph.num_classes, cfg.dim, cfg.proto_iters, rng=cfg.proto_seed)
    if protos.num_classes != graph.num_classes:
        raise ValueError(f"{protos.num_classes} prototypes for {graph.num_classes} classes")
    if protos.dim != cfg.dim:
        raise ValueError(f"prototype dim {protos.dim} != embedding dim {cfg.dim}")
    return graph, protos


def train(cfg: TrainConfig, graph: Graph | None = None, protos: PrototypeSet | None = None) -> RunResult:
    """
    Train one model and report test accuracy at the best validation epoch.

    Ties in validation accuracy keep the earlier epoch. When the graph has no
    validation nodes the final epoch is selected.
    """
    graph, protos = resolve_inputs(cfg, graph, protos)
    hyper, loss_cfg = cfg.hyper, cfg.loss
    p = renormalized_adjacency(graph)
    bound = propagation_upper_bound(p, hyper.K)

    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    params = init_params(hyper, graph.num_features, make_rng(seeds[0].generate_state(1)[0]))
    dropout_rng = make_rng(seeds[1].generate_state(1)[0])
    state = AdamState(params.flatten().size, lr=cfg.lr)
    decay = params.weight_mask() * (cfg.lr * cfg.weight_decay)
    all_labeled = bool(np.all(graph.labels >= 0))
    has_val = bool(graph.val_mask.any())

    best_val, best_epoch, best_params = -1.0, 0, params.copy()
    rows: list[MetricRow] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        cache = forward(params, graph, p, hyper, dropout_rng, training=True)
        report, grad_zk = total_loss(cache.ZK, protos, graph.labels, graph.train_mask, bound, loss_cfg, epoch)
        grads = backward(cache, params, p, grad_zk, hyper)
        flat = params.flatten()
        flat = flat - decay * flat
        flat, state = adam_step(flat, grads.flatten(), state)
        params = params.unflatten(flat)

        eval_cache = forward(params, graph, p, hyper, training=False)
        pred = predict(eval_cache.ZK, protos)
        val_acc = float(np.mean(pred[graph.val_mask] == graph.labels[graph.val_mask])) if has_val else 0.0
        bias = global_bias(eval_cache.ZK, protos, graph.labels) if all_labeled else report.global_bias
        elapsed = (time.perf_counter() - t0) * 1e3 if cfg.timing else None
        rows.append(MetricRow(epoch, report.total, report.classification_loss, report.regularization,
                              report.omega_size, bias, val_acc, elapsed))
        if val_acc > best_val or not has_val:
            best_val, best_epoch, best_params = val_acc, epoch, params.copy()

    test_mask = graph.test_mask
    test_acc = evaluate(best_params, graph, protos, hyper, test_mask, p) if test_mask.any() else float("nan")
    logger.info("seed %d: best epoch %d, val %.4f, test %.4f", cfg.seed, best_epoch, best_val, test_acc)
    return RunResult(cfg.seed, best_epoch, best_val, test_acc, rows[-1].global_bias, rows, best_params)


@dataclass
class ExperimentSummary:
    num_runs: int
    mean_test_acc: float
    std_test_acc: float
    ci95: float
    seeds: list[int]
    runs: list[RunResult]
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "num_runs": self.num_runs,
            "runs": [r.summary() for r in self.runs],
            "mean_test_acc": self.mean_test_acc,
            "std_test_acc": self.std_test_acc,
            "ci95": self.ci95,
            "config_hash": self.config_hash,
        }


def summarize(results: list[RunResult], config_hash: str = "") -> ExperimentSummary:
    """Mean test accuracy and 95% CI half-width ``1.96 * std / sqrt(runs)``."""
    accs = np.array([r.test_accuracy for r in results])
    n = len(accs)
    # shift by the first value so identical runs give an exact zero spread
    std = float(np.std(accs - accs[0], ddof=1)) if n > 1 else 0.0
    return ExperimentSummary(n, float(np.mean(accs)), std, float(1.96 * std / np.sqrt(n)),
                             [r.seed for r in results], list(results), config_hash)


def run_experiment(cfg: TrainConfig, num_runs: int, base_seed: int = 0,
                   graph: Graph | None = None, protos: PrototypeSet | None = None,
                   threads: int | None = None) -> ExperimentSummary:
    """
    Train with seeds ``base_seed .. base_seed + num_runs - 1``.

    Each run also re-draws its split from its own seed when the split is
    sampled. Results are merged in seed order regardless of scheduling;
    ``NORMPROP_THREADS`` caps concurrency.
    """
    if num_runs < 1:
        raise ValueError("num_runs must be >= 1")
    if graph is None and cfg.graph is not None:
        graph = load_graph(cfg.graph)
    if protos is None and cfg.prototypes is not None:
        protos = load_prototypes(cfg.prototypes)
    if threads is None:
        threads = int(os.environ.get("NORMPROP_THREADS", "1"))
    configs = [replace(cfg, seed=base_seed + i, split_seed=None) for i in range(num_runs)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda c: train(c, graph, protos), configs))
    else:
        results = [train(c, graph, protos) for c in configs]
    return summarize(results, cfg.hash())


# ---------------------------------------------------------------------------
# propagation benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    num_nodes: int
    num_edges: int
    K: int
    dim: int
    seconds: float


def random_graph_operator(num_nodes: int, num_edges: int, rng: np.random.Generator) -> SparseMatrix:
    """Renormalized adjacency of a uniform random simple graph with ``num_edges`` edges."""
    max_edges = num_nodes * (num_nodes - 1) // 2
    if num_edges > max_edges:
        raise ValueError(f"{num_edges} edges do not fit in a simple graph on {num_nodes} nodes")
    edges = np.empty((0, 2), dtype=np.int64)
    while len(edges) < num_edges:
        extra = rng.integers(0, num_nodes, size=(2 * (num_edges - len(edges)) + 16, 2))
        edges = canonical_edges(np.concatenate([edges, extra]), num_nodes)
    edges = edges[np.sort(rng.choice(len(edges), num_edges, replace=False))]
    g = Graph(num_nodes, edges, np.zeros((num_nodes, 1)), np.zeros(num_nodes, dtype=np.int64), num_classes=1)
    return renormalized_adjacency(g)


def _batch_seconds(p: SparseMatrix, z: np.ndarray, K: int, loops: int) -> float:
    t0 = time.perf_counter()
    for _ in range(loops):
        propagate(p, z, K)
    return (time.perf_counter() - t0) / loops


def time_propagation_many(cases, dim: int, repeats: int = 21, seed: int = 0,
                          min_batch_seconds: float = 0.02) -> list[float]:
    """
    Per-call wall time (seconds) of the K-step chain for each ``(p, K)`` case.

    Calls are batched until a batch lasts ``min_batch_seconds``. Batches are
    interleaved round-robin across cases so machine-level drift hits every
    case alike; each case reports its median batch average.
    """
    rng = make_rng(seed)
    plans = []
    for p, K in cases:
        z = rng.standard_normal((p.rows, dim))
        p.to_scipy()
        loops = 1
        while K > 0 and _batch_seconds(p, z, K, loops) * loops < min_batch_seconds and loops < 1 << 16:
            loops *= 2
        plans.append((p, z, K, loops))
    samples = [[] for _ in plans]
    for _ in range(repeats):
        for i, (p, z, K, loops) in enumerate(plans):
            if K > 0:
                samples[i].append(_batch_seconds(p, z, K, loops))
    return [float(np.median(s)) if s else 0.0 for s in samples]


def time_propagation(p: SparseMatrix, K: int, dim: int, repeats: int = 21, seed: int = 0) -> float:
    return time_propagation_many([(p, K)], dim, repeats, seed)[0]


def bench_propagation(edge_counts, K: int = 2, dim: int = 32, num_nodes: int = 10_000,
                      repeats: int = 21, seed: int = 0, Ks=None) -> list[BenchRow]:
    """
    Time the K-step propagation chain on random graphs of each edge count.

    With ``Ks`` given, every graph is also timed at each of those step counts.
    """
    edge_counts = list(edge_counts)
    Ks = [K] if Ks is None else list(Ks)
    if len(edge_counts) * len(Ks) < 2:
        raise ValueError("need at least two graph sizes")
    rng = make_rng(seed)
    ops = {m: random_graph_operator(num_nodes, m, rng) for m in edge_counts}
    cases = [(m, k) for m in edge_counts for k in Ks]
    seconds = time_propagation_many([(ops[m], k) for m, k in cases], dim, repeats, seed)
    return [BenchRow(num_nodes, m, k, dim, t) for (m, k), t in zip(cases, seconds)]


def scaling_ratios(rows: list[BenchRow]) -> dict[str, list[dict]]:
    """
    Time ratios between neighbouring sizes.

    ``edges``: consecutive edge counts at equal K. ``K``: consecutive nonzero
    step counts on the same graph.
    """
    by_edges, by_k = [], []
    for k in sorted({r.K for r in rows}):
        series = sorted((r for r in rows if r.K == k), key=lambda r: r.num_edges)
        for a, b in zip(series, series[1:]):
            if a.seconds > 0:
                by_edges.append({"K": k, "from": a.num_edges, "to": b.num_edges, "ratio": b.seconds / a.seconds})
    for m in sorted({r.num_edges for r in rows}):
        series = sorted((r for r in rows if r.num_edges == m and r.K > 0), key=lambda r: r.K)
        for a, b in zip(series, series[1:]):
            by_k.append({"edges": m, "from": a.K, "to": b.K, "ratio": b.seconds / a.seconds})
    return {"edges": by_edges, "K": by_k}
