"""Linear classifier head with a personalized proximal objective.

Features are precomputed H-dimensional vectors standing in for a sequence
encoder's output; the trainable state is the 2xH weight matrix plus bias.
Each node additionally keeps a personalized copy pulled toward the shared
head by a proximal penalty, and local fine-tuning runs joint mini-batch
gradient descent on both.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

N_LABELS = 2


@dataclass
class ModelParams:
    """Weights of the classification head: w is (L, H), bias is (L,)."""

    w: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.w.ndim != 2 or self.b.shape != (self.w.shape[0],):
            raise ValueError("w must be (L, H) and b must be (L,)")
        if not (np.isfinite(self.w).all() and np.isfinite(self.b).all()):
            raise ValueError("parameters must be finite")

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    @classmethod
    def zeros(cls, hidden_dim: int, n_labels: int = N_LABELS) -> "ModelParams":
        return cls(np.zeros((n_labels, hidden_dim)), np.zeros(n_labels))

    def copy(self) -> "ModelParams":
        return ModelParams(self.w.copy(), self.b.copy())

    def __add__(self, other: "ModelParams") -> "ModelParams":
        return ModelParams(self.w + other.w, self.b + other.b)

    def __sub__(self, other: "ModelParams") -> "ModelParams":
        return ModelParams(self.w - other.w, self.b - other.b)

    def __mul__(self, scalar: float) -> "ModelParams":
        return ModelParams(self.w * scalar, self.b * scalar)

    __rmul__ = __mul__

    def sq_norm(self) -> float:
        return float(np.sum(self.w * self.w) + np.sum(self.b * self.b))

    def allclose(self, other: "ModelParams", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return (np.allclose(self.w, other.w, atol=atol, rtol=rtol)
                and np.allclose(self.b, other.b, atol=atol, rtol=rtol))


@dataclass
class PersonalState:
    """Per-node personalized head plus the proximal/learning hyperparameters."""

    w_per: ModelParams
    lam: float = 0.5
    eta_local: float = 0.1

    def __post_init__(self) -> None:
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ValueError("lambda must be a finite non-negative real")
        if self.eta_local < 0:
            raise ValueError("eta_local must be non-negative")

    def copy(self) -> "PersonalState":
        return PersonalState(self.w_per.copy(), self.lam, self.eta_local)


@dataclass
class Example:
    x: np.ndarray
    y: int


class LocalDataset:
    """One node's labelled feature vectors, tagged with a topic id."""

    def __init__(self, x: np.ndarray, y: np.ndarray, topic_id: int = 0):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.int64)
        self.topic_id = topic_id
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ValueError("x must be (n, H) with matching labels")
        if not np.isfinite(self.x).all():
            raise ValueError("features must be finite")
        if self.y.size and not np.isin(self.y, (0, 1)).all():
            raise ValueError("labels must be binary")

    def __len__(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_examples(cls, examples: list[Example], topic_id: int = 0) -> "LocalDataset":
        return cls(np.stack([e.x for e in examples]),
                   np.array([e.y for e in examples]), topic_id)


def forward(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """Class probabilities for one feature vector (softmax of w @ x + b)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dim,):
        raise ValueError(f"feature dim {x.shape} does not match H={params.dim}")
    logits = params.w @ x + params.b
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def forward_batch(x: np.ndarray, params: ModelParams) -> np.ndarray:
    """(n, L) class probabilities for a batch of feature rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise ValueError("batch must be (n, H)")
    logits = x @ params.w.T + params.b
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _proximal(w_cla: ModelParams, personal: PersonalState, penalty: str) -> float:
    diff = personal.w_per - w_cla
    if penalty == "squared":
        return 0.5 * personal.lam * diff.sq_norm()
    if penalty == "norm":
        return 0.5 * personal.lam * np.sqrt(diff.sq_norm())
    raise ValueError(f"unknown penalty {penalty!r}")


def pfl_loss(data: LocalDataset, w_cla: ModelParams, personal: PersonalState,
             penalty: str = "squared") -> float:
    """Mean negative log-likelihood plus the proximal pull on w_per.

    With penalty="squared" the pull is (lambda/2) * ||w_per - w_cla||_F^2
    over all parameters; penalty="norm" uses the unsquared Frobenius norm.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    probs = forward_batch(data.x, w_cla)
    nll = -float(np.mean(np.log(probs[np.arange(len(data)), data.y])))
    return nll + _proximal(w_cla, personal, penalty)


def pfl_grad(data: LocalDataset, w_cla: ModelParams, personal: PersonalState,
             penalty: str = "squared") -> tuple[ModelParams, ModelParams]:
    """Exact analytic gradients of pfl_loss w.r.t. (w_cla, w_per)."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    n = len(data)
    probs = forward_batch(data.x, w_cla)
    dlogits = probs.copy()
    dlogits[np.arange(n), data.y] -= 1.0
    dlogits /= n
    grad_w = dlogits.T @ data.x
    grad_b = dlogits.sum(axis=0)

    diff = personal.w_per - w_cla
    if penalty == "squared":
        pull = personal.lam
    elif penalty == "norm":
        norm = np.sqrt(diff.sq_norm())
        pull = 0.5 * personal.lam / norm if norm > 0 else 0.0
    else:
        raise ValueError(f"unknown penalty {penalty!r}")
    grad_cla = ModelParams(grad_w - pull * diff.w, grad_b - pull * diff.b)
    grad_per = ModelParams(pull * diff.w, pull * diff.b)
    return grad_cla, grad_per


def local_finetune(data: LocalDataset, w_start: ModelParams, personal: PersonalState,
                   steps: int, batch: int, rng: np.random.Generator,
                   penalty: str = "squared") -> tuple[ModelParams, PersonalState]:
    """Run `steps` joint mini-batch gradient steps; returns (delta, new state).

    delta = w_start - w_final is the update a leaf uploads for aggregation;
    the personalized copy advances by the same step rule. Deterministic for
    a given generator state.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if batch < 1 or batch > len(data):
        raise ValueError("batch must be in [1, len(data)]")
    per = personal.copy()
    eta = personal.eta_local
    delta = ModelParams.zeros(w_start.dim, w_start.w.shape[0])
    for _ in range(steps):
        w = w_start - delta
        if batch == len(data):
            sub = data
        else:
            idx = np.sort(rng.choice(len(data), size=batch, replace=False))
            sub = LocalDataset(data.x[idx], data.y[idx], data.topic_id)
        g_cla, g_per = pfl_grad(sub, w, per, penalty)
        delta = delta + eta * g_cla
        per.w_per = per.w_per - eta * g_per
    return delta, per


# -- wire form ----------------------------------------------------------------

def serialize_params(params: ModelParams) -> bytes:
    """(L, H) as uint32 little-endian, then L*H weights and L biases as f64."""
    l, h = params.w.shape
    flat = np.concatenate([params.w.reshape(-1), params.b]).astype("<f8")
    return struct.pack("<II", l, h) + flat.tobytes()


def deserialize_params(blob: bytes) -> ModelParams:
    l, h = struct.unpack_from("<II", blob)
    flat = np.frombuffer(blob, dtype="<f8", offset=8)
    if flat.size != l * h + l:
        raise ValueError("parameter blob has wrong length")
    return ModelParams(flat[: l * h].reshape(l, h).copy(), flat[l * h:].copy())


def param_nbytes(hidden_dim: int, n_labels: int = N_LABELS) -> int:
    return 8 + 8 * (n_labels * hidden_dim + n_labels)
