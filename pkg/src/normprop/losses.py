"""
Training signals on the propagated embeddings.

Every loss returns its value together with the gradient w.r.t. ``ZK`` so the
model's backward pass can take over from there. Node sets (train mask, the
confident set) are boolean masks over all nodes and are treated as constants
under differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import UNLABELED
from .model import cosine_to_prototypes, propagate
from .prototypes import PrototypeSet
from .tensor import NORM_EPS, SparseMatrix


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    tau: float = 0.8
    warmup_epochs: int = 10

    def __post_init__(self):
        if not 0.0 <= self.lam <= 2.0:
            raise ValueError("lambda must lie in [0, 2]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


@dataclass(frozen=True)
class LossReport:
    classification_loss: float
    regularization: float
    total: float
    omega_size: int
    global_bias: float


def _row_norms(Z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", Z, Z))


def _as_mask(nodes, n: int) -> np.ndarray:
    nodes = np.asarray(nodes)
    if nodes.dtype == bool:
        if nodes.shape != (n,):
            raise ValueError("node mask must have one entry per node")
        return nodes
    mask = np.zeros(n, dtype=bool)
    mask[nodes.astype(np.int64)] = True
    return mask


def _cosine_loss(ZK, protos: PrototypeSet, labels, mask) -> tuple[float, np.ndarray]:
    idx = np.flatnonzero(mask)
    z = ZK[idx]
    targets = protos.rows[labels[idx]]
    norms = _row_norms(z)
    live = norms > NORM_EPS
    safe = np.where(live, norms, 1.0)
    zhat = z / safe[:, None]
    cos = np.where(live, np.einsum("ij,ij->i", zhat, targets), 0.0)
    loss = float(np.mean(1.0 - cos))
    grad = np.zeros_like(ZK)
    row_grad = -(targets - cos[:, None] * zhat) / (safe[:, None] * len(idx))
    row_grad[~live] = 0.0
    grad[idx] = row_grad
    return loss, grad


def classification_loss(ZK, protos: PrototypeSet, labels, train_mask) -> tuple[float, np.ndarray]:
    """Mean of ``1 - cos(Z_i, P_{y_i})`` over the training nodes, and its gradient."""
    ZK = np.asarray(ZK, dtype=np.float64)
    labels = np.asarray(labels)
    mask = _as_mask(train_mask, ZK.shape[0])
    if not mask.any():
        raise ValueError("training mask is empty")
    if np.any(labels[mask] == UNLABELED):
        raise ValueError("training mask contains unlabeled nodes")
    return _cosine_loss(ZK, protos, labels, mask)


def confident_set(ZK, protos: PrototypeSet, tau: float, exclude=None) -> np.ndarray:
    """
    Nodes whose best prototype cosine reaches ``tau``, minus ``exclude``.

    Zero rows never qualify.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    ZK = np.asarray(ZK, dtype=np.float64)
    best = cosine_to_prototypes(ZK, protos).max(axis=1)
    omega = (best >= tau) & (_row_norms(ZK) > NORM_EPS)
    if exclude is not None:
        omega &= ~_as_mask(exclude, ZK.shape[0])
    return omega


def consistent_metric(ZK, bound) -> np.ndarray:
    """Propagated norm divided by its upper bound, per node."""
    bound = np.asarray(bound, dtype=np.float64)
    if np.any(bound <= 0.0):
        raise ValueError("norm bound must be positive")
    return _row_norms(np.asarray(ZK, dtype=np.float64)) / bound


def homophilous_regularization(ZK, bound, omega) -> tuple[float, np.ndarray]:
    """``1 - mean(zeta)`` over ``omega``; 0 with zero gradient when omega is empty."""
    ZK = np.asarray(ZK, dtype=np.float64)
    bound = np.asarray(bound, dtype=np.float64)
    mask = _as_mask(omega, ZK.shape[0])
    grad = np.zeros_like(ZK)
    count = int(mask.sum())
    if count == 0:
        return 0.0, grad
    zeta = consistent_metric(ZK[mask], bound[mask])
    z = ZK[mask]
    norms = _row_norms(z)
    live = norms > NORM_EPS
    zhat = z / np.where(live, norms, 1.0)[:, None]
    row_grad = -zhat / (bound[mask][:, None] * count)
    row_grad[~live] = 0.0
    grad[mask] = row_grad
    return float(1.0 - np.mean(zeta)), grad


def global_bias(ZK, protos: PrototypeSet, labels_all) -> float:
    """Mean ``1 - cos(Z_i, P_{y_i})`` over every node."""
    ZK = np.asarray(ZK, dtype=np.float64)
    labels_all = np.asarray(labels_all)
    if np.any(labels_all == UNLABELED):
        raise ValueError("global bias needs every node labeled")
    loss, _ = _cosine_loss(ZK, protos, labels_all, np.ones(ZK.shape[0], dtype=bool))
    return loss


def total_loss(
    ZK,
    protos: PrototypeSet,
    labels,
    train_mask,
    bound,
    cfg: LossConfig,
    epoch: int,
) -> tuple[LossReport, np.ndarray]:
    """
    Classification loss plus ``lam`` times the homophilous term.

    Before ``cfg.warmup_epochs`` only the classification loss is active and the
    confident set is not computed. ``global_bias`` in the report covers the
    labeled nodes.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    ZK = np.asarray(ZK, dtype=np.float64)
    labels = np.asarray(labels)
    lc, grad = classification_loss(ZK, protos, labels, train_mask)
    lh, omega_size = 0.0, 0
    if epoch >= cfg.warmup_epochs and cfg.lam > 0.0:
        omega = confident_set(ZK, protos, cfg.tau, exclude=train_mask)
        omega_size = int(omega.sum())
        lh, grad_h = homophilous_regularization(ZK, bound, omega)
        grad = grad + cfg.lam * grad_h
    labeled = labels != UNLABELED
    bias = _cosine_loss(ZK, protos, labels, labeled)[0] if labeled.any() else float("nan")
    report = LossReport(lc, lh, lc + cfg.lam * lh, omega_size, bias)
    return report, grad


def masked_view_check(Z0, p: SparseMatrix, K: int, omega) -> np.ndarray:
    """
    Per-node inner product between full-graph and masked-graph propagation.

    The masked view zeroes every row of ``Z0`` outside ``omega`` before
    propagating. With ``omega`` covering all nodes this is ``||Z_i^K||^2``.
    """
    Z0 = np.asarray(Z0, dtype=np.float64)
    mask = _as_mask(omega, Z0.shape[0])
    full = propagate(p, Z0, K)
    masked = propagate(p, Z0 * mask[:, None], K)
    return np.einsum("ij,ij->i", full, masked)
