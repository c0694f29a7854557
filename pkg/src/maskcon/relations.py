"""Target relation rows over ``[key-view self] + bank snapshot``.

Column 0 of every row is the sample's own key view. Columns ``1..fill`` line
up with the bank snapshot, oldest entry first.

When dataset ids are supplied, bank entries carrying the query's own id
(stale key views of the same sample from an earlier step) are treated like
the self slot: they get relation 1 in every kind and never compete in the
masked softmax.

Temperatures ``ZERO`` and ``INFINITY`` select the nearest-neighbour and the
uniform limits of the masked relations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bank import UNIT_TOL, BankSnapshot
from .errors import NonFiniteSimilarity, NonPositiveTemperature, NotNormalized, ShapeMismatch
from .numerics import as_matrix, row_norms

ZERO = 0.0
INFINITY = math.inf

SELF = "self"
SUP = "sup"
MASK = "mask"


@dataclass(frozen=True)
class RelationRows:
    rows: np.ndarray
    kind: str
    tau: Optional[float] = None
    # masked relations only: pre-rescale softmax over bank columns, and candidate counts
    soft: Optional[np.ndarray] = None
    n_candidates: Optional[np.ndarray] = None

    @property
    def shape(self):
        return self.rows.shape

    def normalized(self) -> np.ndarray:
        return normalize_rows(self.rows)


def normalize_rows(z) -> np.ndarray:
    z = as_matrix(z.rows if isinstance(z, RelationRows) else z)
    s = z.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("relation row with no positive mass")
    return z / s


def same_id_matrix(batch_ids, bank_ids, batch_size: int, fill: int) -> np.ndarray:
    if batch_ids is None or bank_ids is None:
        return np.zeros((batch_size, fill), dtype=bool)
    batch_ids = np.asarray(batch_ids).reshape(-1, 1)
    bank_ids = np.asarray(bank_ids).reshape(1, -1)
    return (batch_ids == bank_ids) & (batch_ids >= 0)


def _with_self_column(bank_part: np.ndarray) -> np.ndarray:
    out = np.empty((bank_part.shape[0], bank_part.shape[1] + 1))
    out[:, 0] = 1.0
    out[:, 1:] = bank_part
    return out


def relations_self(batch_size: int, fill: int, batch_ids=None, bank_ids=None) -> RelationRows:
    """Instance discrimination: only the sample itself is positive."""
    same = same_id_matrix(batch_ids, bank_ids, batch_size, fill)
    return RelationRows(_with_self_column(same.astype(np.float64)), SELF)


def relations_sup(batch_labels, bank_labels, batch_ids=None, bank_ids=None) -> RelationRows:
    """Every bank entry sharing the query's coarse label is positive (unnormalised 0/1 rows)."""
    batch_labels = np.asarray(batch_labels).reshape(-1, 1)
    bank_labels = np.asarray(bank_labels).reshape(1, -1)
    same = same_id_matrix(batch_ids, bank_ids, batch_labels.shape[0], bank_labels.shape[1])
    ind = (batch_labels == bank_labels) | same
    return RelationRows(_with_self_column(ind.astype(np.float64)), SUP)


def _check_tau(tau: float):
    if math.isnan(tau) or tau < 0:
        raise NonPositiveTemperature(f"relation temperature must be >= 0 or inf, got {tau}")


def masked_soft_relations(sims, bank_labels, batch_labels, tau: float, same_id=None) -> RelationRows:
    """Masked, max-rescaled softmax relations from precomputed key-vs-bank similarities.

    ``sims`` is ``B x fill``. Only entries whose bank label equals the query's
    label (and which are not copies of the query itself) enter the softmax.
    """
    _check_tau(tau)
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2:
        raise ShapeMismatch("similarities must be a B x fill matrix")
    b, fill = sims.shape
    if np.any(np.isnan(sims)):
        raise NonFiniteSimilarity("NaN cosine similarity in masked relations")
    batch_labels = np.asarray(batch_labels).reshape(-1, 1)
    bank_labels = np.asarray(bank_labels).reshape(1, -1)
    if batch_labels.shape[0] != b or bank_labels.shape[1] != fill:
        raise ShapeMismatch(f"labels do not match similarity shape {sims.shape}")
    if same_id is None:
        same_id = np.zeros((b, fill), dtype=bool)
    cand = (bank_labels == batch_labels) & ~same_id
    counts = cand.sum(axis=1)
    has = counts > 0

    soft = np.zeros((b, fill))
    if fill == 0:
        pass
    elif tau == INFINITY:
        soft[has] = cand[has] / counts[has, None]
    else:
        masked = np.where(cand, sims, -np.inf)
        best = np.argmax(masked, axis=1)  # first maximum on ties
        if tau == ZERO:
            rows = np.nonzero(has)[0]
            soft[rows, best[rows]] = 1.0
        else:
            top = masked[np.arange(b), best]
            top = np.where(has, top, 0.0)
            e = np.where(cand, np.exp((np.where(cand, sims, top[:, None]) - top[:, None]) / tau), 0.0)
            soft[has] = e[has] / e[has].sum(axis=1, keepdims=True)

    rescaled = np.zeros_like(soft)
    peak = soft.max(axis=1, initial=0.0)
    rescaled[has] = soft[has] / peak[has, None]
    rescaled[same_id] = 1.0
    return RelationRows(_with_self_column(rescaled), MASK, tau=tau, soft=soft, n_candidates=counts)


def relations_mask(key_projections, bank: BankSnapshot, batch_labels, tau: float, batch_ids=None) -> RelationRows:
    """MaskCon relations from unit-norm key projections against a bank snapshot."""
    key = as_matrix(key_projections)
    if key.shape[1] != bank.projections.shape[1]:
        raise ShapeMismatch(f"key dim {key.shape[1]} != bank dim {bank.projections.shape[1]}")
    if key.shape[0] and np.any(np.abs(row_norms(key) - 1.0) > UNIT_TOL):
        raise NotNormalized("key projections must be unit-norm")
    sims = key @ bank.projections.T
    same = same_id_matrix(batch_ids, bank.ids, key.shape[0], len(bank))
    return masked_soft_relations(sims, bank.labels, batch_labels, tau, same_id=same)


def adaptive_weights(rel: RelationRows) -> np.ndarray:
    """Per-row ``1 - H(z') / ln K`` for masked relations; rows with K <= 1 get weight 1."""
    if rel.kind != MASK or rel.soft is None:
        raise ValueError("adaptive weights need masked relations")
    p = rel.soft
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
    k = rel.n_candidates.astype(np.float64)
    w = np.ones(p.shape[0])
    many = k > 1
    w[many] = 1.0 - ent[many] / np.log(k[many])
    return np.clip(w, 0.0, 1.0)


def dz(z, z_ref) -> float:
    """Mean Euclidean distance between row-normalised relation matrices."""
    a = normalize_rows(z)
    b = normalize_rows(z_ref)
    if a.shape != b.shape:
        raise ShapeMismatch(f"relation shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=1))))
