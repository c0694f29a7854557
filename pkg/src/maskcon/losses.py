"""Training objectives with analytic gradients.

``ce_loss`` and ``con_loss`` operate on arrays. ``maskcon_objective`` and
``baseline_objective`` run the model forward on a batch, build the target
relations, and back-propagate to every trainable parameter involved.
Keys, bank entries and relation targets are constants (no gradient).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as mdl
from . import relations as rel
from .bank import UNIT_TOL, BankSnapshot
from .errors import BadConfig, LabelOutOfRange, NotNormalized, ShapeMismatch
from .numerics import as_matrix, log_softmax_rows, row_norms

SELFCON = "selfcon"
SUPCON = "supcon"
SUPCE = "supce"
GRAFIT = "grafit"
COINS = "coins"
MASKCON = "maskcon"
KINDS = (SELFCON, SUPCON, SUPCE, GRAFIT, COINS, MASKCON)


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = MASKCON
    w: float = 1.0
    tau: float = 0.05  # relation temperature, MaskCon only
    tau0: float = 0.1
    adaptive_w: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise BadConfig(f"unknown objective {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.w <= 1.0:
            raise BadConfig(f"w must lie in [0, 1], got {self.w}")
        if not (math.isfinite(self.tau0) and self.tau0 > 0):
            raise BadConfig(f"tau0 must be finite and > 0, got {self.tau0}")
        if math.isnan(self.tau) or self.tau < 0:
            raise BadConfig(f"tau must be >= 0 or inf, got {self.tau}")


@dataclass
class LossOutput:
    value: float
    grads_query: Optional[np.ndarray] = None  # w.r.t. query projections (or logits for CE)
    per_sample: Optional[np.ndarray] = None
    grads: dict = field(default_factory=dict)  # parameter gradients, objectives only
    grads_logits: Optional[np.ndarray] = None
    key_projections: Optional[np.ndarray] = None
    relations: Optional[rel.RelationRows] = None


def ce_loss(logits, labels) -> LossOutput:
    logits = as_matrix(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, m = logits.shape
    if labels.shape[0] != b:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {b} rows")
    if np.any(labels < 0) or np.any(labels >= m):
        raise LabelOutOfRange(f"labels must lie in [0, {m})")
    logp = log_softmax_rows(logits)
    per = -logp[np.arange(b), labels]
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return LossOutput(float(per.mean()), grad / b, per_sample=per)


def _check_unit(name, m):
    if m.shape[0] and np.any(np.abs(row_norms(m) - 1.0) > UNIT_TOL):
        raise NotNormalized(f"{name} rows must be unit-norm")


def con_loss(query_proj, key_proj, bank, z, tau0: float) -> LossOutput:
    """Soft-target contrastive cross-entropy over ``[key] + bank`` similarities.

    ``bank`` is a ``BankSnapshot`` or a ``fill x d`` array; ``z`` is a
    ``RelationRows`` or a ``B x (1 + fill)`` array, normalised per row here.
    """
    q = as_matrix(query_proj)
    k = as_matrix(key_proj)
    bank_proj = bank.projections if isinstance(bank, BankSnapshot) else as_matrix(bank)
    if bank_proj.size == 0:
        bank_proj = bank_proj.reshape(0, q.shape[1])
    zbar = rel.normalize_rows(z)
    b = q.shape[0]
    if k.shape != q.shape or bank_proj.shape[1] != q.shape[1] or zbar.shape != (b, 1 + bank_proj.shape[0]):
        raise ShapeMismatch(
            f"query {q.shape}, key {k.shape}, bank {bank_proj.shape}, relations {zbar.shape}"
        )
    for name, m in (("query", q), ("key", k), ("bank", bank_proj)):
        _check_unit(name, m)

    d = np.empty((b, 1 + bank_proj.shape[0]))
    d[:, 0] = np.einsum("ij,ij->i", q, k)
    d[:, 1:] = q @ bank_proj.T
    logq = log_softmax_rows(d, tau0)
    per = -np.sum(zbar * logq, axis=1)
    gd = (np.exp(logq) - zbar) / (tau0 * b)
    grad = gd[:, :1] * k + gd[:, 1:] @ bank_proj
    return LossOutput(float(per.mean()), grad, per_sample=per)


def _mix(a: LossOutput, b: LossOutput, w: float) -> LossOutput:
    return LossOutput(
        w * a.value + (1.0 - w) * b.value,
        w * a.grads_query + (1.0 - w) * b.grads_query,
        per_sample=w * a.per_sample + (1.0 - w) * b.per_sample,
    )


def _mix_rows(a: LossOutput, b: LossOutput, w: np.ndarray) -> LossOutput:
    per = w * a.per_sample + (1.0 - w) * b.per_sample
    grad = w[:, None] * a.grads_query + (1.0 - w)[:, None] * b.grads_query
    return LossOutput(float(per.mean()), grad, per_sample=per)


class _Forward:
    """Query/key forward pass shared by all objectives."""

    def __init__(self, batch, params: mdl.ModelParams):
        self.params = params
        self.features, self.enc_cache = mdl.encoder_forward(params, batch.query_views)
        self.key = mdl.key_project(params, batch.key_views)
        self._proj = None

    @property
    def projections(self):
        if self._proj is None:
            self._proj = mdl.project(self.params, self.features)
        return self._proj[0]

    def backward(self, grad_projections=None, grad_logits=None) -> dict:
        grads = {}
        dfeat = np.zeros_like(self.features)
        if grad_projections is not None:
            df, g = mdl.project_backward(self.params, self._proj[1], grad_projections)
            dfeat += df
            grads.update(g)
        if grad_logits is not None:
            df, g = mdl.classify_backward(self.params, self.features, grad_logits)
            dfeat += df
            grads.update(g)
        grads.update(mdl.encoder_backward(self.params, self.enc_cache, dfeat))
        return grads


def _selfcon(fw, batch, bank, cfg):
    z = rel.relations_self(fw.key.shape[0], len(bank), batch.ids, bank.ids)
    return con_loss(fw.projections, fw.key, bank, z, cfg.tau0)


def _supcon(fw, batch, bank, cfg):
    z = rel.relations_sup(batch.coarse_labels, bank.labels, batch.ids, bank.ids)
    return con_loss(fw.projections, fw.key, bank, z, cfg.tau0), z


def maskcon_objective(batch, params: mdl.ModelParams, bank: BankSnapshot, cfg: ObjectiveConfig) -> LossOutput:
    """``w * L_maskcon + (1 - w) * L_selfcon`` (per-row entropy weights when ``adaptive_w``)."""
    if cfg.kind != MASKCON:
        raise BadConfig(f"maskcon_objective called with kind={cfg.kind!r}")
    fw = _Forward(batch, params)
    z = rel.relations_mask(fw.key, bank, batch.coarse_labels, cfg.tau, batch_ids=batch.ids)
    masked = con_loss(fw.projections, fw.key, bank, z, cfg.tau0)
    selfcon = _selfcon(fw, batch, bank, cfg)
    if cfg.adaptive_w:
        out = _mix_rows(masked, selfcon, rel.adaptive_weights(z))
    else:
        out = _mix(masked, selfcon, cfg.w)
    out.grads = fw.backward(grad_projections=out.grads_query)
    out.key_projections = fw.key
    out.relations = z
    return out


def baseline_objective(batch, params: mdl.ModelParams, bank: BankSnapshot, cfg: ObjectiveConfig) -> LossOutput:
    """SelfCon, SupCon, SupCE, Grafit (SupCon + SelfCon) or CoIns (CE + SelfCon)."""
    fw = _Forward(batch, params)
    z = None
    if cfg.kind == SELFCON:
        out = _selfcon(fw, batch, bank, cfg)
        out.grads = fw.backward(grad_projections=out.grads_query)
    elif cfg.kind == SUPCON:
        out, z = _supcon(fw, batch, bank, cfg)
        out.grads = fw.backward(grad_projections=out.grads_query)
    elif cfg.kind == GRAFIT:
        sup, z = _supcon(fw, batch, bank, cfg)
        out = _mix(sup, _selfcon(fw, batch, bank, cfg), cfg.w)
        out.grads = fw.backward(grad_projections=out.grads_query)
    elif cfg.kind in (SUPCE, COINS):
        logits = mdl.classify(params, fw.features)
        ce = ce_loss(logits, batch.coarse_labels)
        if cfg.kind == SUPCE:
            out = LossOutput(ce.value, grads_logits=ce.grads_query, per_sample=ce.per_sample)
            out.grads = fw.backward(grad_logits=ce.grads_query)
        else:
            sc = _selfcon(fw, batch, bank, cfg)
            out = LossOutput(
                cfg.w * ce.value + (1.0 - cfg.w) * sc.value,
                (1.0 - cfg.w) * sc.grads_query,
                per_sample=cfg.w * ce.per_sample + (1.0 - cfg.w) * sc.per_sample,
                grads_logits=cfg.w * ce.grads_query,
            )
            out.grads = fw.backward(grad_projections=out.grads_query, grad_logits=out.grads_logits)
    else:
        raise BadConfig(f"baseline_objective does not handle kind={cfg.kind!r}")
    out.key_projections = fw.key
    out.relations = z
    return out


def objective(batch, params, bank, cfg: ObjectiveConfig) -> LossOutput:
    if cfg.kind == MASKCON:
        return maskcon_objective(batch, params, bank, cfg)
    return baseline_objective(batch, params, bank, cfg)
