"""
Data-independent class prototypes spread over the unit hypersphere.

The prototypes are fixed before training. They are found by projected
gradient descent on the mean, over classes, of each prototype's largest
cosine similarity to any other prototype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import make_rng, row_l2_normalize


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 2 or rows.shape[1] < 2:
            raise ValueError(f"need at least 2 prototypes of dimension >= 2, got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("prototype rows must have unit norm")
        object.__setattr__(self, "rows", rows)

    @property
    def num_classes(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "dim": self.dim, "rows": self.rows.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PrototypeSet":
        try:
            rows = np.asarray(doc["rows"], dtype=np.float64)
            c, d = int(doc["num_classes"]), int(doc["dim"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed prototype document: {exc}") from exc
        if rows.shape != (c, d):
            raise ValueError(f"prototype rows have shape {rows.shape}, header says ({c}, {d})")
        return cls(rows)


def save_prototypes(p: PrototypeSet, path) -> None:
    Path(path).write_text(json.dumps(p.to_dict()), encoding="utf-8")


def load_prototypes(path) -> PrototypeSet:
    return PrototypeSet.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _shifted_gram(rows: np.ndarray) -> np.ndarray:
    # subtracting 2 on the diagonal keeps self-similarity out of the row max
    return rows @ rows.T - 2.0 * np.eye(rows.shape[0])


def separation_loss(p: PrototypeSet | np.ndarray) -> float:
    """Mean over prototypes of the largest cosine to any other prototype."""
    rows = p.rows if isinstance(p, PrototypeSet) else np.asarray(p, dtype=np.float64)
    return float(np.mean(_shifted_gram(rows).max(axis=1)))


def min_pairwise_cosine(p: PrototypeSet) -> float:
    """Smallest cosine over distinct pairs (lower means wider separation)."""
    sims = p.rows @ p.rows.T
    iu = np.triu_indices(p.num_classes, k=1)
    return float(sims[iu].min())


def max_pairwise_cosine(p: PrototypeSet) -> float:
    """Largest cosine over distinct pairs; governs the closest pair's margin."""
    sims = p.rows @ p.rows.T
    iu = np.triu_indices(p.num_classes, k=1)
    return float(sims[iu].max())


def _loss_and_grad(rows: np.ndarray) -> tuple[float, np.ndarray]:
    c = rows.shape[0]
    gram = _shifted_gram(rows)
    nearest = gram.argmax(axis=1)  # first maximizer on ties
    loss = float(gram[np.arange(c), nearest].mean())
    grad = np.zeros_like(rows)
    # d(P_i . P_j) feeds P_j into row i and P_i into row j
    grad += rows[nearest]
    np.add.at(grad, nearest, rows)
    return loss, grad / c


def solve_prototypes(
    num_classes: int,
    dim: int,
    iters: int = 2000,
    lr: float = 0.1,
    rng: np.random.Generator | int = 0,
) -> PrototypeSet:
    """
    Spread ``num_classes`` unit vectors in ``dim`` dimensions.

    Starts from normalized Gaussian rows; every step descends the subgradient
    of :func:`separation_loss` and re-projects rows onto the sphere. The step
    size decays linearly from ``lr`` to zero, since a fixed step keeps the
    nonsmooth max objective oscillating around the optimum. Returns the
    lowest-loss iterate seen.
    """
    if num_classes < 2 or dim < 2:
        raise ValueError("need num_classes >= 2 and dim >= 2")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    rows, _ = row_l2_normalize(rng.standard_normal((num_classes, dim)))
    best_rows, best_loss = rows, np.inf
    for t in range(iters):
        loss, grad = _loss_and_grad(rows)
        if loss < best_loss:
            best_rows, best_loss = rows, loss
        step = lr * (1.0 - t / iters)
        rows, _ = row_l2_normalize(rows - step * grad)
    final_loss = separation_loss(rows)
    if final_loss < best_loss:
        best_rows = rows
    return PrototypeSet(best_rows)
