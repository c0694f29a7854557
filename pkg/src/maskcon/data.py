"""Datasets with coarse/fine labels, two-view augmentation, and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadConfig, IncompleteCoarseMap, MalformedRecord

TRAIN = "train"
TEST = "test"

VDS_MAGIC = b"VDS1"
VDS_VERSION = 1

CIFAR_PIXELS = 3072


@dataclass(frozen=True)
class Dataset:
    """Vectors with coarse (training) and fine (evaluation-only) labels."""

    vectors: np.ndarray
    coarse_labels: np.ndarray
    fine_labels: np.ndarray
    split: str = TRAIN
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.vectors.shape[0]
        if self.coarse_labels.shape != (n,) or self.fine_labels.shape != (n,):
            raise BadConfig("label arrays must align with vectors")
        check_hierarchy(self.fine_labels, self.coarse_labels)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def input_dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def n_coarse(self) -> int:
        return int(self.meta.get("M", self.coarse_labels.max(initial=-1) + 1))

    @property
    def n_fine(self) -> int:
        return int(self.meta.get("M_fine", self.fine_labels.max(initial=-1) + 1))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.vectors[idx], self.coarse_labels[idx], self.fine_labels[idx], self.split, dict(self.meta))


def check_hierarchy(fine, coarse):
    """Reject any fine class that appears under more than one coarse class."""
    pairs = np.unique(np.stack([np.asarray(fine), np.asarray(coarse)], axis=1), axis=0)
    fine_ids, counts = np.unique(pairs[:, 0], return_counts=True)
    if np.any(counts > 1):
        raise BadConfig(f"fine classes {fine_ids[counts > 1].tolist()} map to several coarse classes")


# ---------------------------------------------------------------------------
# Synthetic hierarchy


def gen_hierarchical_gaussian(
    m_coarse=4,
    fine_per_coarse=3,
    n_per_fine=150,
    dim=100,
    coarse_sep=20.0,
    fine_sep=4.0,
    noise=1.0,
    seed=0,
    test_frac=0.2,
):
    """Gaussian clusters nested two levels deep.

    Coarse centres are isotropic Gaussians scaled so two centres sit about
    ``coarse_sep`` apart; each fine centre is offset from its coarse centre by
    a vector of length about ``fine_sep``; samples add ``N(0, noise^2 I)``.
    The split is stratified per fine class. Returns ``(train, test)``.
    """
    if not coarse_sep > fine_sep > noise > 0:
        raise BadConfig("need coarse_sep > fine_sep > noise > 0")
    if dim < 2 or m_coarse < 1 or fine_per_coarse < 1 or n_per_fine < 2:
        raise BadConfig("need dim >= 2 and at least one coarse/fine class with two samples")
    if not 0 < test_frac < 1:
        raise BadConfig("test_frac must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    coarse_centres = rng.normal(0.0, coarse_sep / np.sqrt(2 * dim), size=(m_coarse, dim))
    n_fine = m_coarse * fine_per_coarse
    fine_to_coarse = np.repeat(np.arange(m_coarse), fine_per_coarse)
    fine_centres = coarse_centres[fine_to_coarse] + rng.normal(0.0, fine_sep / np.sqrt(dim), size=(n_fine, dim))

    n_test = max(1, int(round(n_per_fine * test_frac)))
    if n_test >= n_per_fine:
        raise BadConfig("test split would leave no training samples")
    parts = {TRAIN: ([], []), TEST: ([], [])}
    for f in range(n_fine):
        x = fine_centres[f] + rng.normal(0.0, noise, size=(n_per_fine, dim))
        perm = rng.permutation(n_per_fine)
        parts[TEST][0].append(x[perm[:n_test]])
        parts[TRAIN][0].append(x[perm[n_test:]])
        parts[TEST][1].append(np.full(n_test, f))
        parts[TRAIN][1].append(np.full(n_per_fine - n_test, f))

    meta = {"M": m_coarse, "M_fine": n_fine, "source": "hierarchical_gaussian", "seed": seed}
    out = []
    for split in (TRAIN, TEST):
        vectors = np.concatenate(parts[split][0])
        fine = np.concatenate(parts[split][1]).astype(np.int64)
        out.append(Dataset(vectors, fine_to_coarse[fine].astype(np.int64), fine, split, dict(meta, N=len(fine))))
    return tuple(out)


# ---------------------------------------------------------------------------
# VDS1 container


def save_vds(ds: Dataset, path) -> Path:
    path = Path(path)
    n, dim = ds.vectors.shape
    with open(path, "wb") as f:
        f.write(VDS_MAGIC)
        f.write(struct.pack("<5I", VDS_VERSION, n, dim, ds.n_coarse, ds.n_fine))
        f.write(np.ascontiguousarray(ds.vectors, dtype="<f8").tobytes())
        f.write(ds.coarse_labels.astype("<u4").tobytes())
        f.write(ds.fine_labels.astype("<u4").tobytes())
    return path


def load_vds(path, split: str = TEST) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:4] != VDS_MAGIC:
        raise MalformedRecord(f"{path}: not a VDS1 file")
    version, n, dim, m, m_fine = struct.unpack_from("<5I", data, 4)
    if version != VDS_VERSION:
        raise MalformedRecord(f"{path}: unsupported VDS version {version}")
    expected = 24 + n * dim * 8 + 2 * n * 4
    if len(data) != expected:
        raise MalformedRecord(f"{path}: expected {expected} bytes, found {len(data)}")
    off = 24
    vectors = np.frombuffer(data, "<f8", n * dim, off).astype(np.float64).reshape(n, dim)
    off += n * dim * 8
    coarse = np.frombuffer(data, "<u4", n, off).astype(np.int64)
    fine = np.frombuffer(data, "<u4", n, off + 4 * n).astype(np.int64)
    meta = {"N": n, "M": m, "M_fine": m_fine, "source": f"vds:{Path(path).name}"}
    return Dataset(vectors, coarse, fine, split, meta)


# ---------------------------------------------------------------------------
# CIFAR binary


def read_coarse_map(path) -> dict[int, int]:
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split("\t") if "\t" in line else line.split()
        try:
            fine, coarse = (int(p) for p in parts)
        except ValueError as exc:
            raise MalformedRecord(f"{path}:{lineno}: expected 'fine_id<TAB>coarse_id'") from exc
        if mapping.get(fine, coarse) != coarse:
            raise BadConfig(f"{path}:{lineno}: fine id {fine} mapped to two coarse ids")
        mapping[fine] = coarse
    return mapping


def _label_bytes_for(size: int) -> int:
    fits1 = size % (CIFAR_PIXELS + 1) == 0
    fits2 = size % (CIFAR_PIXELS + 2) == 0
    if fits1 and not fits2:
        return 1
    if fits2 and not fits1:
        return 2
    if fits1 and fits2:
        raise MalformedRecord("record size is ambiguous; pass label_bytes explicitly")
    raise MalformedRecord(f"file size {size} is not a whole number of CIFAR records")


def load_cifar_binary(
    path,
    coarse_map_path=None,
    *,
    label_bytes: Optional[int] = None,
    split: str = TRAIN,
    stats=None,
    drop_unmapped: bool = False,
) -> Dataset:
    """Read a CIFAR-10 (1 label byte) or CIFAR-100 (coarse, fine bytes) binary file.

    Pixels are scaled to [0, 1] and standardised per channel. ``stats`` is a
    ``(mean, std)`` pair of 3-vectors; when omitted it is computed from this
    file (pass the train split's ``meta["stats"]`` when loading a test split).
    Fine and coarse ids are relabelled to contiguous ranges in sorted order;
    the original ids are kept in ``meta``.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    lb = label_bytes or _label_bytes_for(raw.size)
    rec = CIFAR_PIXELS + lb
    if raw.size == 0 or raw.size % rec:
        raise MalformedRecord(f"{path}: {raw.size} bytes is not a whole number of {rec}-byte records")
    records = raw.reshape(-1, rec)
    fine_raw = records[:, lb - 1].astype(np.int64)

    if coarse_map_path is not None:
        mapping = read_coarse_map(coarse_map_path)
        known = np.isin(fine_raw, list(mapping))
        if not known.all():
            if not drop_unmapped:
                missing = sorted(set(np.unique(fine_raw[~known]).tolist()))
                raise IncompleteCoarseMap(f"coarse map has no entry for fine ids {missing}")
            records, fine_raw = records[known], fine_raw[known]
        coarse_raw = np.array([mapping[f] for f in fine_raw.tolist()], dtype=np.int64)
    elif lb == 2:
        coarse_raw = records[:, 0].astype(np.int64)
    else:
        raise IncompleteCoarseMap("single-label CIFAR files need a coarse map")

    pixels = records[:, lb:].astype(np.float64) / 255.0
    chans = pixels.reshape(-1, 3, 1024)
    if stats is None:
        mean = chans.mean(axis=(0, 2))
        std = chans.std(axis=(0, 2))
    else:
        mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    std = np.where(std > 0, std, 1.0)
    vectors = ((chans - mean[None, :, None]) / std[None, :, None]).reshape(-1, CIFAR_PIXELS)

    fine_ids, fine = np.unique(fine_raw, return_inverse=True)
    coarse_ids, coarse = np.unique(coarse_raw, return_inverse=True)
    meta = {
        "N": len(fine),
        "M": len(coarse_ids),
        "M_fine": len(fine_ids),
        "source": f"cifar:{Path(path).name}",
        "fine_ids": fine_ids.tolist(),
        "coarse_ids": coarse_ids.tolist(),
        "stats": (mean, std),
    }
    return Dataset(vectors, coarse.astype(np.int64), fine.astype(np.int64), split, meta)


# ---------------------------------------------------------------------------
# Augmentation and batching


@dataclass(frozen=True)
class AugmentPolicy:
    """Vector-space view generation.

    Each view is ``x * s * keep + noise`` with ``s ~ U(1 - scale_jitter, 1 + scale_jitter)``,
    ``keep`` zeroing a ``mask_frac`` share of coordinates and ``noise ~ N(0, noise_sigma^2)``.
    With ``strong`` set, the query view uses magnitudes multiplied by ``strong_factor``.
    """

    noise_sigma: float = 0.0
    scale_jitter: float = 0.0
    mask_frac: float = 0.0
    strong: bool = False
    strong_factor: float = 2.0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.scale_jitter < 0 or not 0 <= self.mask_frac < 1:
            raise BadConfig("augmentation magnitudes must be >= 0 and mask_frac in [0, 1)")

    def magnitudes(self, strong: bool):
        f = self.strong_factor if strong else 1.0
        return self.noise_sigma * f, self.scale_jitter * f, min(self.mask_frac * f, 0.95)


def _view(x, mags, rng):
    sigma, jitter, frac = mags
    out = x
    if jitter:
        out = out * rng.uniform(1.0 - jitter, 1.0 + jitter, size=(*x.shape[:-1], 1))
    if frac:
        out = out * (rng.random(x.shape) >= frac)
    if sigma:
        out = out + rng.normal(0.0, sigma, size=x.shape)
    return np.array(out, dtype=np.float64, copy=True)


def augment(vector, policy: AugmentPolicy, rng):
    """Return ``(query_view, key_view)``; works on one vector or a stack of rows."""
    rng = np.random.default_rng(rng)
    x = np.asarray(vector, dtype=np.float64)
    query = _view(x, policy.magnitudes(policy.strong), rng)
    key = _view(x, policy.magnitudes(False), rng)
    return query, key


@dataclass(frozen=True)
class Batch:
    query_views: np.ndarray
    key_views: np.ndarray
    coarse_labels: np.ndarray
    fine_labels: np.ndarray
    ids: np.ndarray

    def __len__(self):
        return self.ids.shape[0]


def batches(dataset: Dataset, batch_size: int, policy: AugmentPolicy, seed) -> list[Batch]:
    """One epoch: a seeded permutation chunked into batches, last short batch kept."""
    if batch_size < 1:
        raise BadConfig("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(dataset))
    out = []
    for start in range(0, len(order), batch_size):
        ids = order[start:start + batch_size]
        q, k = augment(dataset.vectors[ids], policy, rng)
        out.append(Batch(q, k, dataset.coarse_labels[ids], dataset.fine_labels[ids], ids.astype(np.int64)))
    return out
