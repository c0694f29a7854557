"""Retrieval recall on fine labels, embedding export, and the relation-distance diagnostic."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as mdl
from . import relations as rel
from .bank import BankSnapshot
from .data import Dataset
from .errors import TooFewPoints
from .numerics import cosine_similarity_matrix

FEATURES = "features"
PROJECTIONS = "projections"

DEFAULT_KS = (1, 2, 5, 10)


@dataclass(frozen=True)
class RecallReport:
    ks: tuple
    scores: tuple
    n_queries: int
    embedding_space: str = FEATURES

    def __getitem__(self, k):
        return self.scores[self.ks.index(k)]

    def as_dict(self):
        return dict(zip(self.ks, self.scores))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["k", "score"])
            for k, s in zip(self.ks, self.scores):
                w.writerow([k, repr(float(s))])
        return path


def recall_at_k(embeddings, fine_labels, ks: Sequence[int] = DEFAULT_KS, space: str = FEATURES) -> RecallReport:
    """Fraction of queries with a same-fine-label item among their top-K cosine neighbours.

    The query itself is excluded; equal similarities rank the lower index first.
    """
    ks = tuple(int(k) for k in ks)
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(fine_labels).reshape(-1)
    n = emb.shape[0]
    if not ks or min(ks) < 1:
        raise ValueError("ks must be positive")
    if n < max(ks) + 1:
        raise TooFewPoints(f"need at least {max(ks) + 1} points for K={max(ks)}, got {n}")
    sims = cosine_similarity_matrix(emb, emb)
    np.fill_diagonal(sims, -np.inf)
    kmax = max(ks)
    order = np.argsort(-sims, axis=1, kind="stable")[:, :kmax]
    hits = labels[order] == labels[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), kmax)
    scores = tuple(float(np.mean(first_hit < k)) for k in ks)
    return RecallReport(ks, scores, n, space)


def embed(params: mdl.ModelParams, vectors, space: str = FEATURES) -> np.ndarray:
    feats, _ = mdl.encoder_forward(params, vectors)
    if space == FEATURES:
        return feats
    if space == PROJECTIONS:
        return mdl.project(params, feats)[0]
    raise ValueError(f"unknown embedding space {space!r}")


def evaluate(params, dataset: Dataset, ks=DEFAULT_KS, space: str = FEATURES) -> RecallReport:
    return recall_at_k(embed(params, dataset.vectors, space), dataset.fine_labels, ks, space)


def export_embeddings(params, dataset: Dataset, path, space: str = FEATURES) -> Path:
    """CSV of ``id, coarse_label, fine_label, e0 .. e{d-1}`` with round-trip float formatting."""
    path = Path(path)
    if len(dataset):
        emb = embed(params, dataset.vectors, space)
        d = emb.shape[1]
    else:
        emb = np.zeros((0, params.feat_dim if space == FEATURES else params.proj_dim))
        d = emb.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", "coarse_label", "fine_label", *[f"e{j}" for j in range(d)]])
        for i in range(len(dataset)):
            w.writerow([i, int(dataset.coarse_labels[i]), int(dataset.fine_labels[i]), *map(repr, emb[i].tolist())])
    return path


def read_embeddings(path):
    """Parse an exported CSV back into ``(ids, coarse, fine, embeddings)``."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    d = len(header) - 3
    if not body:
        return (np.zeros(0, dtype=np.int64),) * 3 + (np.zeros((0, d)),)
    arr = np.array(body)
    return (
        arr[:, 0].astype(np.int64),
        arr[:, 1].astype(np.int64),
        arr[:, 2].astype(np.int64),
        arr[:, 3:].astype(np.float64),
    )


@dataclass(frozen=True)
class DzRow:
    kind: str
    tau: float | None
    value: float


def dz_report(params, dataset: Dataset, tau_grid=(0.05,), sample_size: int = 200, seed=0) -> list[DzRow]:
    """Distance of coarse-label relations to the fine-label relations on a seeded subsample.

    The subsample serves as both queries and reference set; each point is
    embedded with the key encoder and projector. The reference relations use
    fine labels with the supervised (indicator) rule.
    """
    n = len(dataset)
    sample_size = min(sample_size, n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=sample_size, replace=False))
    proj = mdl.key_project(params, dataset.vectors[idx])
    coarse = dataset.coarse_labels[idx]
    fine = dataset.fine_labels[idx]
    ids = np.arange(sample_size)
    ref = rel.relations_sup(fine, fine, ids, ids)
    rows = [DzRow("sup", None, rel.dz(rel.relations_sup(coarse, coarse, ids, ids), ref))]
    ref_bank = BankSnapshot(proj, coarse, ids)
    for tau in tau_grid:
        z = rel.relations_mask(proj, ref_bank, coarse, tau, batch_ids=ids)
        rows.append(DzRow("mask", float(tau), rel.dz(z, ref)))
    return rows
