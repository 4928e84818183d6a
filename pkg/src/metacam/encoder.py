"""Small MLP embedding model producing unit-norm features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Layout, ParamVector, Tensor


class DegenerateFeatureError(ValueError):
    """Raised when a feature vector is all zeros before normalization."""


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 32
    hidden_dims: tuple[int, ...] = (64,)
    feature_dim: int = 32
    nonlinearity: str = "tanh"
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all encoder dimensions must be >= 1, got {dims}")
        if self.nonlinearity not in dc.NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.feature_dim)


def param_layout(cfg: EncoderConfig) -> Layout:
    shapes = []
    dims = cfg.dims
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        shapes.append((f"layer{i}.weight", (fan_out, fan_in)))
        shapes.append((f"layer{i}.bias", (fan_out,)))
    return Layout.from_shapes(shapes)


def init_params(cfg: EncoderConfig, seed: int) -> ParamVector:
    """Gaussian weights with variance 1/fan_in, zero biases."""
    rng = np.random.default_rng(seed)
    layout = param_layout(cfg)
    values = np.zeros(layout.size)
    for seg in layout.segments:
        if seg.name.endswith(".weight"):
            fan_in = seg.shape[1]
            values[seg.start : seg.stop] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=seg.stop - seg.start)
    return ParamVector(values, layout)


def forward(blocks: dict[str, Tensor], X, cfg: EncoderConfig) -> Tensor:
    """Differentiable batch encoding: rows of ``X`` to rows of features."""
    act = dc.NONLINEARITIES[cfg.nonlinearity]
    h = dc.as_tensor(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if h.shape[1] != cfg.input_dim:
        raise ValueError(f"expected inputs with {cfg.input_dim} columns, got {h.shape[1]}")
    n_layers = len(cfg.dims) - 1
    for i in range(n_layers):
        h = dc.matmul(h, blocks[f"layer{i}.weight"].T) + blocks[f"layer{i}.bias"]
        if i < n_layers - 1:
            h = act(h)
    if cfg.normalize:
        sq = dc.tsum(h * h, axis=1, keepdims=True)
        if np.any(sq.value == 0.0):
            raise DegenerateFeatureError("zero feature vector cannot be normalized")
        h = h / dc.sqrt(sq)
    return h


def encode_batch(theta: ParamVector, X, cfg: EncoderConfig) -> np.ndarray:
    with dc.no_grad():
        blocks = theta.layout.unpack(Tensor(theta.values))
        return forward(blocks, X, cfg).value


def encode(theta: ParamVector, x, cfg: EncoderConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("encode takes a single input vector; use encode_batch for matrices")
    return encode_batch(theta, x[None, :], cfg)[0]
