"""Shared forgery detector: a four-layer bottleneck MLP with a linear two-class head."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LAYER_ORDER = ("W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4", "Wh", "bh")


class ConfigError(ValueError):
    """Invalid configuration value."""


def layer_dims(input_dim: int) -> list[int]:
    if input_dim < 8 or input_dim % 4:
        raise ConfigError(f"input dim must be a multiple of 4 and >= 8, got {input_dim}")
    d = input_dim
    return [d, d // 2, d // 4, d // 2, d]


@dataclass
class DetectorParams:
    input_dim: int
    weights: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None

    def copy(self) -> "DetectorParams":
        ema = None if self.ema is None else {k: v.copy() for k, v in self.ema.items()}
        return DetectorParams(self.input_dim, {k: v.copy() for k, v in self.weights.items()}, ema)

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: self.weights[k].shape for k in LAYER_ORDER}

    def view(self, use_ema: bool = False) -> dict[str, np.ndarray]:
        if use_ema:
            if self.ema is None:
                raise ValueError("no EMA shadow on these parameters")
            return self.ema
        return self.weights


@dataclass
class ForwardResult:
    logits: Tensor
    forensic_features: Tensor
    hidden_activations: list[Tensor] = field(default_factory=list)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_detector(input_dim: int, seed) -> DetectorParams:
    """Glorot-uniform weights, zero biases; bit-identical for equal ``(input_dim, seed)``."""
    dims = layer_dims(input_dim)
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    for i in range(4):
        weights[f"W{i + 1}"] = glorot_uniform(rng, dims[i], dims[i + 1])
        weights[f"b{i + 1}"] = np.zeros((1, dims[i + 1]))
    weights["Wh"] = glorot_uniform(rng, input_dim, 2)
    weights["bh"] = np.zeros((1, 2))
    return DetectorParams(input_dim, weights)


def forward_tensors(w: dict[str, Tensor], x: Tensor) -> ForwardResult:
    """Forward pass over already-lifted parameter tensors (taped or not)."""
    hidden = []
    h = x
    for i in range(1, 5):
        h = nx.relu(nx.affine(h, w[f"W{i}"], w[f"b{i}"]))
        hidden.append(h)
    logits = nx.affine(h, w["Wh"], w["bh"])
    return ForwardResult(logits, h, hidden)


def detector_forward(params: DetectorParams, batch, use_ema: bool = False) -> ForwardResult:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.shape[1] != params.input_dim:
        raise ValueError(f"batch has {x.shape[1]} columns, detector expects {params.input_dim}")
    src = params.view(use_ema)
    w = {k: Tensor._wrap(np.array(v)) for k, v in src.items() if k in LAYER_ORDER}
    return forward_tensors(w, x)


def probabilities(logits: np.ndarray) -> np.ndarray:
    """P(class 1) from two-column logits, computed stably."""
    d = logits[:, 1] - logits[:, 0]
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_scores(params: DetectorParams, batch, use_ema: bool = False) -> np.ndarray:
    """P(fake) per row.  ERM++ runs pass ``use_ema=True`` to score with the shadow."""
    return probabilities(detector_forward(params, batch, use_ema).logits.data)


def ema_update(params: DetectorParams, decay: float) -> DetectorParams:
    """shadow <- decay * shadow + (1 - decay) * live; the first call copies the live weights."""
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1), got {decay}")
    if params.ema is None:
        params.ema = {k: v.copy() for k, v in params.weights.items()}
        return params
    for k, v in params.weights.items():
        params.ema[k] = decay * params.ema[k] + (1.0 - decay) * v
    return params


def save_checkpoint(params: DetectorParams, path) -> None:
    """JSON header line followed by a little-endian float64 stream.

    Arrays appear in ``LAYER_ORDER``; the EMA shadow, when present, follows in
    the same order.
    """
    header = {
        "dims": layer_dims(params.input_dim),
        "layer_order": list(LAYER_ORDER),
        "shapes": {k: list(params.weights[k].shape) for k in LAYER_ORDER},
        "has_ema": params.ema is not None,
    }
    blocks = [params.weights]
    if params.ema is not None:
        blocks.append(params.ema)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for block in blocks:
            for k in LAYER_ORDER:
                fh.write(np.ascontiguousarray(block[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> DetectorParams:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    order = header["layer_order"]
    shapes = {k: tuple(v) for k, v in header["shapes"].items()}
    body = memoryview(raw)[nl + 1:]
    offset = 0

    def read_block():
        nonlocal offset
        out = {}
        for k in order:
            n = shapes[k][0] * shapes[k][1]
            out[k] = np.frombuffer(body[offset:offset + 8 * n], dtype="<f8").astype(np.float64).reshape(shapes[k])
            offset += 8 * n
        return out

    weights = read_block()
    ema = read_block() if header["has_ema"] else None
    if offset != len(body):
        raise ValueError(f"{path}: {len(body) - offset} trailing bytes after parameter stream")
    return DetectorParams(header["dims"][0], weights, ema)

