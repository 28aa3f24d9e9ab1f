"""Keypoint encoder and alternating self/cross attention layers.

Every function here is written against the autodiff primitives, so the same
code runs as a plain numpy forward pass or records onto an active tape when
the parameters are tape tensors.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DimensionMismatch, NonPositiveTemperature


@dataclass(frozen=True)
class EncoderConfig:
    descriptor_dim: int = 32
    layers: int = 4
    hidden: tuple = (32, 64, 32)
    delta: float = 0.1
    dustbin_init: float = 1.0
    heads: int = 1  # reserved; only single-head attention is implemented

    def __post_init__(self):
        if self.layers < 0:
            raise ValueError("layer count must be non-negative")
        if self.heads != 1:
            raise NotImplementedError("multi-head attention is not implemented")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass
class EncoderWeights:
    """Named parameter arrays of one matching network plus its config."""
    config: EncoderConfig
    params: dict = field(default_factory=dict)

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(self.config, {k: v.copy() for k, v in self.params.items()})

    def without_position(self) -> "EncoderWeights":
        """Ablated copy whose position encoder contributes nothing."""
        w = self.copy()
        for name in w.params:
            if name.startswith("kenc."):
                w.params[name] = np.zeros_like(w.params[name])
        return w

    @property
    def dustbin(self) -> float:
        return float(self.params["z"][0])

    def tensors(self) -> dict:
        return {k: ad.Tensor(v) for k, v in self.params.items()}


def _encoder_sizes(cfg: EncoderConfig):
    return [3, *cfg.hidden, cfg.descriptor_dim]


def init_weights(config: EncoderConfig = EncoderConfig(), seed: int = 0) -> EncoderWeights:
    rng = np.random.default_rng(seed)
    D = config.descriptor_dim
    p = {}
    sizes = _encoder_sizes(config)
    for k, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = k == len(sizes) - 2
        std = 0.1 / np.sqrt(fi) if last else np.sqrt(2.0 / fi)
        p[f"kenc.{k}.W"] = rng.normal(0.0, std, (fi, fo))
        p[f"kenc.{k}.b"] = np.zeros(fo)
    for layer in range(config.layers):
        pre = f"gnn.{layer}"
        for name in ("q", "k", "v"):
            p[f"{pre}.{name}.W"] = rng.normal(0.0, 1.0 / np.sqrt(D), (D, D))
            p[f"{pre}.{name}.b"] = np.zeros(D)
        p[f"{pre}.mlp.0.W"] = rng.normal(0.0, np.sqrt(2.0 / (2 * D)), (2 * D, 2 * D))
        p[f"{pre}.mlp.0.b"] = np.zeros(2 * D)
        p[f"{pre}.mlp.1.W"] = rng.normal(0.0, 0.1 / np.sqrt(2 * D), (2 * D, D))
        p[f"{pre}.mlp.1.b"] = np.zeros(D)
    p["proj.W"] = np.eye(D) + rng.normal(0.0, 0.01, (D, D))
    p["proj.b"] = np.zeros(D)
    p["E"] = np.eye(D) + rng.normal(0.0, 0.01, (D, D))
    p["z"] = np.array([config.dustbin_init])
    return EncoderWeights(config, p)


def normalize_positions(positions, width: int, height: int) -> np.ndarray:
    """Map pixel (u, v) into [-1, 1]; confidence passes through."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 3).copy()
    pos[:, 0] = 2.0 * pos[:, 0] / width - 1.0
    pos[:, 1] = 2.0 * pos[:, 1] / height - 1.0
    return pos


def _linear(x, p, name):
    return ad.add(ad.matmul(x, p[f"{name}.W"]), p[f"{name}.b"])


def _as_params(w):
    return w.tensors() if isinstance(w, EncoderWeights) else w


def encode(positions, descriptors, w, width: int, height: int, use_position: bool = True):
    """Descriptor plus an MLP embedding of the normalized (u, v, c)."""
    p = _as_params(w)
    desc = ad.as_tensor(descriptors)
    D = p["proj.W"].shape[0]
    if desc.data.ndim != 2 or desc.shape[1] != D:
        raise DimensionMismatch(f"descriptor shape {desc.shape} does not match dimension {D}")
    if not use_position:
        return desc
    x = ad.Tensor(normalize_positions(positions, width, height))
    if x.shape[0] != desc.shape[0]:
        raise DimensionMismatch("positions and descriptors differ in length")
    n_layers = sum(1 for k in p if k.startswith("kenc.") and k.endswith(".W"))
    for k in range(n_layers):
        x = _linear(x, p, f"kenc.{k}")
        if k < n_layers - 1:
            x = ad.relu(x)
    return ad.add(desc, x)


def _message(x, src, p, pre, D):
    if x.shape[0] == 0:
        return ad.Tensor(np.zeros((0, D)))
    if src.shape[0] == 0:
        return ad.Tensor(np.zeros((x.shape[0], D)))
    q = _linear(x, p, f"{pre}.q")
    k = _linear(src, p, f"{pre}.k")
    v = _linear(src, p, f"{pre}.v")
    att = ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(D)))
    return ad.matmul(att, v)


def _update(x, msg, p, pre):
    if x.shape[0] == 0:
        return x
    h = ad.relu(_linear(ad.concat([x, msg], axis=1), p, f"{pre}.mlp.0"))
    return ad.add(x, _linear(h, p, f"{pre}.mlp.1"))


def attention_weights(x, src, w, layer: int):
    """Softmax attention matrix of one layer (diagnostics and tests)."""
    p = _as_params(w)
    D = p["proj.W"].shape[0]
    pre = f"gnn.{layer}"
    q = _linear(ad.as_tensor(x), p, f"{pre}.q")
    k = _linear(ad.as_tensor(src), p, f"{pre}.k")
    return ad.softmax_rows(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(D))).data


def attend(y_a, y_b, w, layers=None):
    """Alternating self (even index) and cross (odd index) attention layers."""
    p = _as_params(w)
    x_a, x_b = ad.as_tensor(y_a), ad.as_tensor(y_b)
    D = p["proj.W"].shape[0]
    if x_a.shape[1] != D or x_b.shape[1] != D:
        raise DimensionMismatch(f"encoded sets {x_a.shape}, {x_b.shape} do not match dimension {D}")
    available = sum(1 for k in p if k.startswith("gnn.") and k.endswith(".q.W"))
    layers = available if layers is None else layers
    if layers > available:
        raise ValueError(f"requested {layers} layers, weights hold {available}")
    for layer in range(layers):
        pre = f"gnn.{layer}"
        cross = layer % 2 == 1
        m_a = _message(x_a, x_b if cross else x_a, p, pre, D)
        m_b = _message(x_b, x_a if cross else x_b, p, pre, D)
        x_a, x_b = _update(x_a, m_a, p, pre), _update(x_b, m_b, p, pre)
    return x_a, x_b


def matching_descriptors(x, w):
    p = _as_params(w)
    x = ad.as_tensor(x)
    W = p["proj.W"]
    if x.shape[1] != W.shape[1]:
        raise DimensionMismatch(f"features of width {x.shape[1]} vs projection {W.shape}")
    return ad.add(ad.matmul(x, ad.transpose(W)), p["proj.b"])


def describe(pos_a, desc_a, pos_b, desc_b, w, size, use_position=True):
    """Full encoder for an image pair: returns matching descriptors (H_A, H_B)."""
    width, height = size
    y_a = encode(pos_a, desc_a, w, width, height, use_position)
    y_b = encode(pos_b, desc_b, w, width, height, use_position)
    x_a, x_b = attend(y_a, y_b, w)
    return matching_descriptors(x_a, w), matching_descriptors(x_b, w)


def log_score_matrix(h_a, h_b, w, delta: float):
    """Dustbin-augmented log scores ``h_a^T E h_b / delta`` as a tape tensor."""
    p = _as_params(w)
    if not delta > 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {delta}")
    logits = ad.scale(ad.matmul(ad.matmul(h_a, p["E"]), ad.transpose(h_b)), 1.0 / delta)
    M, N = logits.shape
    z = ad.reshape(p["z"], (1, 1))
    col = ad.matmul(ad.Tensor(np.ones((M, 1))), z)
    row = ad.matmul(z, ad.Tensor(np.ones((1, N + 1))))
    return ad.concat([ad.concat([logits, col], axis=1), row], axis=0)

