"""
Encode -> L2-normalize -> propagate, with a hand-written backward pass.

The encoder is a two-layer MLP (ReLU between the layers, dropout on the
input of each linear layer while training). Its output rows are projected to
the unit sphere and then smoothed by ``K`` applications of the symmetric
propagation matrix.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .graph import Graph
from .prototypes import PrototypeSet
from .tensor import (
    NORM_EPS,
    SparseMatrix,
    dropout_mask,
    row_l2_normalize,
    row_l2_normalize_backward,
    spmm,
)


@dataclass(frozen=True)
class Hyper:
    K: int = 2
    hidden: int = 64
    dim: int = 32
    dropout: float = 0.3

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.hidden < 1:
            raise ValueError("hidden must be >= 1")
        if self.dim < 2:
            raise ValueError("embedding dim must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass(eq=False)
class ModelParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    NAMES = ("W1", "b1", "W2", "b2")

    def __post_init__(self):
        for name in self.NAMES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[0] != h or self.b2.shape != (self.W2.shape[1],):
            raise ValueError("inconsistent parameter shapes")

    def tensors(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tensors()])

    def unflatten(self, flat: np.ndarray) -> "ModelParams":
        out, pos = [], 0
        for t in self.tensors():
            out.append(np.asarray(flat[pos:pos + t.size]).reshape(t.shape).copy())
            pos += t.size
        if pos != len(flat):
            raise ValueError("flat vector does not match parameter shapes")
        return ModelParams(*out)

    def weight_mask(self) -> np.ndarray:
        """Flat indicator of weight-matrix entries (biases excluded)."""
        return np.concatenate([
            np.full(t.size, name.startswith("W")) for name, t in zip(self.NAMES, self.tensors())
        ])

    def copy(self) -> "ModelParams":
        return ModelParams(*(t.copy() for t in self.tensors()))


def init_params(hyper: Hyper, d: int, rng: np.random.Generator) -> ModelParams:
    """Kaiming-uniform (fan-in) weights, zero biases."""
    b1 = np.sqrt(6.0 / d)
    b2 = np.sqrt(6.0 / hyper.hidden)
    return ModelParams(
        W1=rng.uniform(-b1, b1, size=(d, hyper.hidden)),
        b1=np.zeros(hyper.hidden),
        W2=rng.uniform(-b2, b2, size=(hyper.hidden, hyper.dim)),
        b2=np.zeros(hyper.dim),
    )


@dataclass(eq=False)
class ForwardCache:
    x_in: np.ndarray       # input after dropout
    pre1: np.ndarray       # first affine output
    mask2: np.ndarray      # dropout mask on the hidden layer
    hidden_in: np.ndarray  # ReLU output after dropout
    H: np.ndarray
    norms: np.ndarray
    Z0: np.ndarray
    ZK: np.ndarray
    K: int


def propagate(p: SparseMatrix, z: np.ndarray, K: int) -> np.ndarray:
    for _ in range(K):
        z = spmm(p, z)
    return z


def forward(
    params: ModelParams,
    g: Graph | np.ndarray,
    p: SparseMatrix,
    hyper: Hyper,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> ForwardCache:
    x = g.features if isinstance(g, Graph) else np.asarray(g, dtype=np.float64)
    if x.shape[1] != params.W1.shape[0]:
        raise ValueError(f"feature dim {x.shape[1]} does not match W1 {params.W1.shape}")
    if params.W2.shape[1] != hyper.dim or params.W1.shape[1] != hyper.hidden:
        raise ValueError("parameters do not match hyper-parameters")
    if p.shape != (x.shape[0], x.shape[0]):
        raise ValueError("propagation matrix does not match node count")
    use_dropout = training and hyper.dropout > 0.0
    if use_dropout and rng is None:
        raise ValueError("training with dropout needs an rng")

    if use_dropout:
        x = x * dropout_mask(rng, hyper.dropout, *x.shape)
    pre1 = x @ params.W1 + params.b1
    act = np.maximum(pre1, 0.0)
    mask2 = dropout_mask(rng, hyper.dropout, *act.shape) if use_dropout else None
    hidden_in = act * mask2 if use_dropout else act
    H = hidden_in @ params.W2 + params.b2
    Z0, norms = row_l2_normalize(H)
    ZK = propagate(p, Z0, hyper.K)
    return ForwardCache(x, pre1, mask2, hidden_in, H, norms, Z0, ZK, hyper.K)


def backward(
    cache: ForwardCache,
    params: ModelParams,
    p: SparseMatrix,
    grad_ZK: np.ndarray,
    hyper: Hyper | None = None,
) -> ModelParams:
    """Gradients of a scalar loss w.r.t. all parameters, given dLoss/dZK."""
    if grad_ZK.shape != cache.ZK.shape:
        raise ValueError("grad_ZK shape does not match the cached forward pass")
    if cache.H.shape[1] != params.W2.shape[1] or cache.pre1.shape[1] != params.W1.shape[1]:
        raise ValueError("cache was produced with different parameter shapes")
    K = cache.K if hyper is None else hyper.K
    # P is symmetric, so its adjoint is itself
    g_z0 = propagate(p, np.asarray(grad_ZK, dtype=np.float64), K)
    g_h = row_l2_normalize_backward(g_z0, cache.H, cache.norms, NORM_EPS)
    dW2 = cache.hidden_in.T @ g_h
    db2 = g_h.sum(axis=0)
    g_hidden = g_h @ params.W2.T
    if cache.mask2 is not None:
        g_hidden = g_hidden * cache.mask2
    g_pre1 = g_hidden * (cache.pre1 > 0.0)
    dW1 = cache.x_in.T @ g_pre1
    db1 = g_pre1.sum(axis=0)
    return ModelParams(dW1, db1, dW2, db2)


def cosine_to_prototypes(Z: np.ndarray, protos: PrototypeSet) -> np.ndarray:
    """(n, C) cosine similarities; zero rows give all-zero similarities."""
    if Z.shape[1] != protos.dim:
        raise ValueError(f"embedding dim {Z.shape[1]} != prototype dim {protos.dim}")
    zhat, _ = row_l2_normalize(Z)
    return zhat @ protos.rows.T


def predict(ZK: np.ndarray, protos: PrototypeSet, return_flags: bool = False):
    """
    Nearest prototype by cosine similarity; ties go to the lowest class index.

    Zero rows are assigned class 0. With ``return_flags`` a boolean array
    marking those rows is returned alongside the labels.
    """
    ZK = np.asarray(ZK, dtype=np.float64)
    sims = cosine_to_prototypes(ZK, protos)
    labels = sims.argmax(axis=1)
    degenerate = np.sqrt(np.einsum("ij,ij->i", ZK, ZK)) <= NORM_EPS
    labels[degenerate] = 0
    if return_flags:
        return labels, degenerate
    return labels


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, hyper: Hyper, path) -> None:
    doc = {
        "hyper": asdict(hyper),
        "shapes": {name: list(t.shape) for name, t in zip(ModelParams.NAMES, params.tensors())},
        # repr-based float output round-trips every float64 bit-exactly
        "params": {name: t.ravel().tolist() for name, t in zip(ModelParams.NAMES, params.tensors())},
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_checkpoint(path) -> tuple[ModelParams, Hyper]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        hyper = Hyper(**doc["hyper"])
        tensors = [
            np.asarray(doc["params"][name], dtype=np.float64).reshape(doc["shapes"][name])
            for name in ModelParams.NAMES
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint ({exc})") from exc
    return ModelParams(*tensors), hyper
