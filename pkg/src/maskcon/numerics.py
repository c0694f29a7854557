"""Dense float64 kernels, SGD with cosine annealing, and a finite-difference oracle.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .errors import BadEpoch, NonPositiveTemperature, ShapeMismatch, ZeroNormRow

NORM_EPS = 1e-12


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", m, m))


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between the rows of ``a`` (n x d) and ``b`` (m x d)."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"inner dims differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] < 1:
        raise ShapeMismatch("vectors must have at least one coordinate")
    na = row_norms(a)
    nb = row_norms(b)
    if np.any(na < NORM_EPS) or np.any(nb < NORM_EPS):
        raise ZeroNormRow("cosine similarity of a zero-norm row")
    sims = (a / na[:, None]) @ (b / nb[:, None]).T
    return np.clip(sims, -1.0, 1.0)


def softmax_rows(m, tau: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``m / tau`` with max subtraction."""
    if not (math.isfinite(tau) and tau > 0):
        raise NonPositiveTemperature(f"temperature must be finite and > 0, got {tau}")
    m = as_matrix(m)
    if m.shape[1] == 0:
        return m.copy()
    s = (m - m.max(axis=1, keepdims=True)) / tau
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax_rows(m, tau: float = 1.0) -> np.ndarray:
    if not (math.isfinite(tau) and tau > 0):
        raise NonPositiveTemperature(f"temperature must be finite and > 0, got {tau}")
    m = as_matrix(m)
    s = (m - m.max(axis=1, keepdims=True)) / tau
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cosine_lr(epoch: int, total: int, base_lr: float) -> float:
    if not 0 <= epoch < total:
        raise BadEpoch(f"epoch {epoch} outside [0, {total})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total))


@dataclass(frozen=True)
class OptimState:
    """SGD momentum buffers plus the schedule position.

    ``no_decay`` lists parameter names exempt from weight decay.
    """

    velocity: dict[str, np.ndarray]
    base_lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    epoch: int = 0
    total_epochs: int = 1
    no_decay: frozenset[str] = field(default_factory=frozenset)

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], **kwargs) -> "OptimState":
        velocity = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        return cls(velocity=velocity, **kwargs)

    @property
    def lr(self) -> float:
        return cosine_lr(self.epoch, self.total_epochs, self.base_lr)

    def at_epoch(self, epoch: int) -> "OptimState":
        return replace(self, epoch=epoch)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: OptimState):
    """One momentum-SGD update with coupled weight decay.

    Parameters without a gradient entry are passed through untouched.
    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    lr = state.lr
    new_params = dict(params)
    new_velocity = dict(state.velocity)
    for name, g in grads.items():
        p = params[name]
        v = state.velocity[name]
        if g.shape != p.shape or v.shape != p.shape:
            raise ShapeMismatch(f"{name}: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        d = g
        if state.weight_decay and name not in state.no_decay:
            d = g + state.weight_decay * p
        v = state.momentum * v + d
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, replace(state, velocity=new_velocity)


def finite_diff_grad(loss_fn: Callable, params, h: float = 1e-5):
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``params`` may be an array or a mapping of name -> array; the result has
    the same structure. ``loss_fn`` receives the same structure.
    """
    if isinstance(params, Mapping):
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        out = {}
        for name, arr in base.items():
            g = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = g.reshape(-1)
            for idx in range(flat.size):
                old = flat[idx]
                flat[idx] = old + h
                up = loss_fn(base)
                flat[idx] = old - h
                down = loss_fn(base)
                flat[idx] = old
                gflat[idx] = (up - down) / (2 * h)
            out[name] = g
        return out

    arr = np.array(params, dtype=np.float64)
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for idx in range(flat.size):
        old = flat[idx]
        flat[idx] = old + h
        up = loss_fn(arr)
        flat[idx] = old - h
        down = loss_fn(arr)
        flat[idx] = old
        gflat[idx] = (up - down) / (2 * h)
    return g


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)`` over all entries (mappings are flattened)."""
    if isinstance(a, Mapping):
        a = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
        b = np.concatenate([np.ravel(b[k]) for k in sorted(b)])
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)
