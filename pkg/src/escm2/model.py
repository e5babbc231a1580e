"""Shared-embedding multi-task network with CTR, CVR and imputation towers.

All three towers read the same mean-pooled embedding of a row's categorical
features. The CTR and CVR towers end in a sigmoid; the imputation tower ends
in a softplus because it regresses a (non-negative, unbounded) cross-entropy
value.

Parameters live in one contiguous float64 buffer so the optimizer can update
them with a handful of vectorized operations; each named :class:`Tensor` is a
view into that buffer.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

TOWERS = ("ctr", "cvr", "imp")


@dataclass
class ModelConfig:
    num_feature_categories: int
    embed_dim: int = 5
    tower_widths: Tuple[int, ...] = (32, 16)
    activation: str = "relu"

    def __post_init__(self):
        self.tower_widths = tuple(int(w) for w in self.tower_widths)
        if self.num_feature_categories < 1:
            raise ValueError("num_feature_categories must be >= 1")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if any(w < 1 for w in self.tower_widths):
            raise ValueError("tower widths must be >= 1")
        if self.activation not in ("relu", "sigmoid", "identity"):
            raise ValueError(f"unsupported hidden activation {self.activation!r}")


@dataclass
class Predictions:
    """Per-row outputs of one forward pass.

    ``ctcvr`` is computed as the exact product ``ctr * cvr``.
    """

    ctr: Tensor
    cvr: Tensor
    ctcvr: Tensor
    imputed_error: Optional[Tensor] = None


def _layer_shapes(config: ModelConfig) -> List[Tuple[int, int]]:
    dims = (config.embed_dim,) + config.tower_widths + (1,)
    return list(zip(dims[:-1], dims[1:]))


def parameter_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Ordered ``(name, shape)`` list; the imputation tower comes last."""
    layout = [("embedding", (config.num_feature_categories, config.embed_dim))]
    for tower in TOWERS:
        for i, (fan_in, fan_out) in enumerate(_layer_shapes(config)):
            layout.append((f"{tower}.{i}.weight", (fan_in, fan_out)))
            layout.append((f"{tower}.{i}.bias", (fan_out,)))
    return layout


@dataclass
class ModelParams:
    config: ModelConfig
    flat: np.ndarray
    tensors: Dict[str, Tensor] = field(default_factory=dict)
    spans: Dict[str, Tuple[int, int]] = field(default_factory=dict)

    @classmethod
    def from_flat(cls, config: ModelConfig, flat: np.ndarray) -> "ModelParams":
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        tensors, spans = {}, {}
        offset = 0
        for name, shape in parameter_layout(config):
            n = int(np.prod(shape))
            view = flat[offset:offset + n].reshape(shape)
            tensors[name] = Tensor(view, requires_grad=True, name=name)
            spans[name] = (offset, offset + n)
            offset += n
        if offset != flat.size:
            raise ValueError(f"flat buffer has {flat.size} entries, layout needs {offset}")
        return cls(config=config, flat=flat, tensors=tensors, spans=spans)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def tower(self, tower: str) -> List[str]:
        return [n for n in self.tensors if n.startswith(tower + ".")]

    def copy(self) -> "ModelParams":
        return ModelParams.from_flat(self.config, self.flat.copy())

    @property
    def size(self) -> int:
        return self.flat.size


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights and embeddings, zero biases."""
    rng = np.random.default_rng(seed)
    layout = parameter_layout(config)
    flat = np.zeros(sum(int(np.prod(s)) for _, s in layout))
    params = ModelParams.from_flat(config, flat)
    for name, shape in layout:
        if name.endswith(".bias"):
            continue
        fan_in, fan_out = shape
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params[name].value[...] = rng.uniform(-s, s, size=shape)
    return params


def _tower(params: Dict[str, Tensor], tower: str, x: Tensor, n_layers: int,
           activation: str, head: str) -> Tensor:
    h = x
    for i in range(n_layers):
        act = head if i == n_layers - 1 else activation
        h = dc.dense(h, params[f"{tower}.{i}.weight"], params[f"{tower}.{i}.bias"], act)
    return dc.reshape(h, (h.shape[0],))


def forward(params: ModelParams, feature_ids, imputation: bool = True,
            track: bool = True) -> Predictions:
    """Run all towers on a ``(batch, k)`` array of feature ids.

    With ``track=False`` no graph is recorded (inference only).
    """
    ids = np.asarray(feature_ids)
    if ids.ndim == 1:
        ids = ids.reshape(1, -1)
    if ids.shape[1] == 0:
        raise dc.ContractError("empty feature list")
    tensors = params.tensors if track else {k: Tensor(t.value) for k, t in params.tensors.items()}
    cfg = params.config
    n_layers = len(cfg.tower_widths) + 1
    x = dc.embedding_mean(tensors["embedding"], ids)
    ctr = _tower(tensors, "ctr", x, n_layers, cfg.activation, "sigmoid")
    cvr = _tower(tensors, "cvr", x, n_layers, cfg.activation, "sigmoid")
    imp = _tower(tensors, "imp", x, n_layers, cfg.activation, "softplus") if imputation else None
    return Predictions(ctr=ctr, cvr=cvr, ctcvr=ctr * cvr, imputed_error=imp)


def predict(params: ModelParams, feature_ids, batch_size: int = 65536) -> Dict[str, np.ndarray]:
    """Numpy predictions ``{ctr, cvr, ctcvr, imputed_error}`` without graph bookkeeping."""
    ids = np.asarray(feature_ids)
    parts = {"ctr": [], "cvr": [], "ctcvr": [], "imputed_error": []}
    for start in range(0, max(len(ids), 1), batch_size):
        chunk = ids[start:start + batch_size]
        if len(chunk) == 0:
            break
        p = forward(params, chunk, imputation=True, track=False)
        parts["ctr"].append(p.ctr.value)
        parts["cvr"].append(p.cvr.value)
        parts["ctcvr"].append(p.ctcvr.value)
        parts["imputed_error"].append(p.imputed_error.value)
    return {k: (np.concatenate(v) if v else np.zeros(0)) for k, v in parts.items()}


def save_checkpoint(params: ModelParams, path, extra: Optional[dict] = None) -> None:
    """Write ``{config, tensors: {name: {shape, values}}}`` as JSON.

    Python's float repr round-trips, so a reload is bit-exact.
    """
    doc = {
        "config": asdict(params.config),
        "tensors": {
            name: {"shape": list(t.shape), "values": t.value.reshape(-1).tolist()}
            for name, t in params.tensors.items()
        },
    }
    if extra:
        doc["extra"] = extra
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> ModelParams:
    doc = json.loads(Path(path).read_text())
    cfg = doc["config"]
    config = ModelConfig(**{**cfg, "tower_widths": tuple(cfg["tower_widths"])})
    layout = parameter_layout(config)
    chunks = []
    for name, shape in layout:
        entry = doc["tensors"].get(name)
        if entry is None:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        if tuple(entry["shape"]) != tuple(shape):
            raise ValueError(f"tensor {name!r} has shape {entry['shape']}, expected {list(shape)}")
        chunks.append(np.asarray(entry["values"], dtype=np.float64))
    return ModelParams.from_flat(config, np.concatenate(chunks))
