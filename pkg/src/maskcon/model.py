"""MLP encoder, projection head, linear classifier and the EMA key copy.

All parameters live in one ordered ``name -> array`` mapping so the optimizer,
the checkpoint writer and the finite-difference oracle can treat them alike.
Layer ``i`` of a stack ``prefix`` is stored as ``{prefix}.{i}.weight`` with
shape ``(fan_in, fan_out)`` and ``{prefix}.{i}.bias`` with shape ``(1, fan_out)``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ChecksumMismatch, ShapeMismatch, ZeroNormRow
from .numerics import NORM_EPS, as_matrix, row_norms

ENCODER = "encoder"
PROJECTOR = "projector"
CLASSIFIER = "classifier"
KEY_ENCODER = "key_encoder"
KEY_PROJECTOR = "key_projector"

CHECKPOINT_MAGIC = b"MKCN"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]

    def layers(self, prefix: str) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        i = 0
        while f"{prefix}.{i}.weight" in self.tensors:
            out.append((self.tensors[f"{prefix}.{i}.weight"], self.tensors[f"{prefix}.{i}.bias"]))
            i += 1
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        """Query-side tensors: encoder, projector and classifier."""
        return {k: v for k, v in self.tensors.items() if not k.startswith("key_")}

    def key_tensors(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("key_")}

    def replace(self, updates: dict[str, np.ndarray]) -> "ModelParams":
        tensors = dict(self.tensors)
        for k, v in updates.items():
            if k not in tensors:
                raise KeyError(k)
            tensors[k] = v
        return ModelParams(tensors)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    @property
    def input_dim(self) -> int:
        return self.tensors[f"{ENCODER}.0.weight"].shape[0]

    @property
    def feat_dim(self) -> int:
        return self.layers(ENCODER)[-1][0].shape[1]

    @property
    def proj_dim(self) -> int:
        return self.layers(PROJECTOR)[-1][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.tensors[f"{CLASSIFIER}.weight"].shape[1]

    def checksum(self, names=None) -> int:
        """CRC32 over the raw bytes of the selected tensors (all by default)."""
        crc = 0
        for k in names if names is not None else self.tensors:
            crc = zlib.crc32(np.ascontiguousarray(self.tensors[k]).tobytes(), crc)
        return crc


def _he_layers(prefix, dims, rng):
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        tensors[f"{prefix}.{i}.weight"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        tensors[f"{prefix}.{i}.bias"] = np.zeros((1, fan_out))
    return tensors


def init_params(
    input_dim: int,
    n_classes: int,
    hidden_dims: Sequence[int] = (256,),
    feat_dim: int = 128,
    proj_hidden: Sequence[int] = (512,),
    proj_dim: int = 128,
    rng=None,
) -> ModelParams:
    """He-initialised parameters; key stacks start as exact copies of the query stacks."""
    rng = np.random.default_rng(rng)
    tensors = {}
    tensors.update(_he_layers(ENCODER, [input_dim, *hidden_dims, feat_dim], rng))
    tensors.update(_he_layers(PROJECTOR, [feat_dim, *proj_hidden, proj_dim], rng))
    tensors[f"{CLASSIFIER}.weight"] = rng.normal(0.0, np.sqrt(2.0 / feat_dim), size=(feat_dim, n_classes))
    tensors[f"{CLASSIFIER}.bias"] = np.zeros((1, n_classes))
    for src, dst in ((ENCODER, KEY_ENCODER), (PROJECTOR, KEY_PROJECTOR)):
        for k in [k for k in tensors if k.startswith(src + ".")]:
            tensors[dst + k[len(src):]] = tensors[k].copy()
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# MLP stacks


@dataclass
class MLPCache:
    inputs: list  # input to each layer
    pre: list  # pre-activation of each layer


def mlp_forward(layers, x):
    x = as_matrix(x)
    if not layers:
        return x, MLPCache([], [])
    if x.shape[1] != layers[0][0].shape[0]:
        raise ShapeMismatch(f"input dim {x.shape[1]} != layer fan-in {layers[0][0].shape[0]}")
    inputs, pre = [], []
    a = x
    for i, (w, b) in enumerate(layers):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return a, MLPCache(inputs, pre)


def mlp_backward(prefix, layers, cache: MLPCache, dout):
    grads = {}
    dz = dout
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[f"{prefix}.{i}.weight"] = cache.inputs[i].T @ dz
        grads[f"{prefix}.{i}.bias"] = dz.sum(axis=0, keepdims=True)
        dx = dz @ w.T
        if i > 0:
            dz = dx * (cache.pre[i - 1] > 0)
    return dx, grads


def l2_normalize(v):
    norms = row_norms(v)
    if np.any(norms < NORM_EPS):
        raise ZeroNormRow("cannot normalise a zero-norm projection")
    return v / norms[:, None], norms


def l2_normalize_backward(u, norms, grad_u):
    """Gradient w.r.t. ``v`` given ``u = v / ||v||`` and ``dL/du``."""
    radial = np.einsum("ij,ij->i", u, grad_u)
    return (grad_u - u * radial[:, None]) / norms[:, None]


# ---------------------------------------------------------------------------
# Public forward / backward


def encoder_forward(params: ModelParams, inputs):
    return mlp_forward(params.layers(ENCODER), inputs)


def encoder_backward(params: ModelParams, cache, grad_features):
    _, grads = mlp_backward(ENCODER, params.layers(ENCODER), cache, grad_features)
    return grads


@dataclass
class ProjectCache:
    mlp: MLPCache
    projections: np.ndarray
    norms: np.ndarray


def project(params: ModelParams, features, prefix: str = PROJECTOR):
    """Projector MLP followed by row-wise L2 normalisation."""
    v, mlp_cache = mlp_forward(params.layers(prefix), features)
    u, norms = l2_normalize(v)
    return u, ProjectCache(mlp_cache, u, norms)


def project_backward(params: ModelParams, cache: ProjectCache, grad_projections):
    """Returns ``(grad_features, param_grads)``."""
    dv = l2_normalize_backward(cache.projections, cache.norms, grad_projections)
    return mlp_backward(PROJECTOR, params.layers(PROJECTOR), cache.mlp, dv)


def classify(params: ModelParams, features):
    w = params.tensors[f"{CLASSIFIER}.weight"]
    b = params.tensors[f"{CLASSIFIER}.bias"]
    features = as_matrix(features)
    if features.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"feature dim {features.shape[1]} != classifier fan-in {w.shape[0]}")
    return features @ w + b


def classify_backward(params: ModelParams, features, grad_logits):
    w = params.tensors[f"{CLASSIFIER}.weight"]
    grads = {
        f"{CLASSIFIER}.weight": features.T @ grad_logits,
        f"{CLASSIFIER}.bias": grad_logits.sum(axis=0, keepdims=True),
    }
    return grad_logits @ w.T, grads


def key_project(params: ModelParams, inputs):
    """Unit-norm projections from the EMA key encoder and projector (no cache kept)."""
    feats, _ = mlp_forward(params.layers(KEY_ENCODER), inputs)
    u, _ = project(params, feats, prefix=KEY_PROJECTOR)
    return u


def key_features(params: ModelParams, inputs):
    feats, _ = mlp_forward(params.layers(KEY_ENCODER), inputs)
    return feats


def momentum_update(params: ModelParams, m: float) -> ModelParams:
    """EMA step ``key <- m * key + (1 - m) * query`` for encoder and projector."""
    updates = {}
    for k, key in params.key_tensors().items():
        q = params.tensors[k[len("key_"):]]
        if q.shape != key.shape:
            raise ShapeMismatch(f"{k}: key {key.shape} vs query {q.shape}")
        updates[k] = m * key + (1.0 - m) * q
    return params.replace(updates)


# ---------------------------------------------------------------------------
# Checkpoints


def checkpoint_bytes(params: ModelParams) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params.tensors))]
    for name, arr in params.tensors.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(params: ModelParams, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(params))
    return path


def parse_checkpoint(data: bytes) -> ModelParams:
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise ChecksumMismatch("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("checkpoint CRC32 does not match its contents")
    version, count = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise ChecksumMismatch(f"unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = body[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", body, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(body):
                raise ChecksumMismatch(f"tensor {name} runs past end of file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size // 8, offset=off).astype(np.float64).reshape(shape)
            off += size
    except struct.error as exc:
        raise ChecksumMismatch(f"truncated checkpoint: {exc}") from exc
    if off != len(body):
        raise ChecksumMismatch("trailing bytes after last tensor")
    return ModelParams(tensors)


def load_checkpoint(path) -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes())
