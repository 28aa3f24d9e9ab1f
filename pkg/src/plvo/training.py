"""Supervised training of a matching network on synthetic frame pairs."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .core_types import CameraRig, FrameFeatures, default_camera
from .encoder_gnn import EncoderConfig, EncoderWeights, describe, init_weights, log_score_matrix
from .ot_matcher import MatchLabels, default_marginals, nll_loss_tape, sinkhorn_tape
from .synthetic_world import (DegradationProfile, WorldConfig, ground_truth_matches,
                              repetitive_world_config, sample_pair, world_from_config)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    world_pool: int = 16


@dataclass
class TrainResult:
    weights: EncoderWeights
    losses: list


def _features(frame: FrameFeatures, kind: str):
    if kind == "point":
        return frame.ppoint_positions, frame.ppoint_descriptors
    return frame.lpoint_positions, frame.lpoint_descriptors


def pair_loss(params: dict, config: EncoderConfig, fa: FrameFeatures, fb: FrameFeatures,
              labels: MatchLabels, kind: str, sinkhorn_iters: int = 100, sinkhorn_tol: float = 1e-6,
              normalize: bool = True, use_position: bool = True):
    """Mean negative log-likelihood of one labelled pair, recorded on the active tape."""
    pos_a, desc_a = _features(fa, kind)
    pos_b, desc_b = _features(fb, kind)
    h_a, h_b = describe(pos_a, desc_a, pos_b, desc_b, params, (fa.width, fa.height), use_position)
    scores = log_score_matrix(h_a, h_b, params, config.delta)
    a, b = default_marginals(len(pos_a), len(pos_b))
    log_P, _ = sinkhorn_tape(scores, a, b, sinkhorn_iters, sinkhorn_tol)
    return nll_loss_tape(log_P, labels, normalize=normalize)


def evaluate_loss(weights: EncoderWeights, pairs, kind: str, sinkhorn_iters: int = 100,
                  sinkhorn_tol: float = 1e-6) -> float:
    """Average per-pair loss over ``(frame_a, frame_b, labels)`` triples without recording."""
    params = weights.tensors()
    total = 0.0
    for fa, fb, labels in pairs:
        total += pair_loss(params, weights.config, fa, fb, labels, kind,
                           sinkhorn_iters, sinkhorn_tol).item()
    return total / max(len(pairs), 1)


class PairSampler:
    """Endless stream of labelled frame pairs from a pool of seeded worlds."""

    def __init__(self, world_configs: Union[WorldConfig, Sequence[WorldConfig]],
                 profiles: Union[DegradationProfile, Sequence[DegradationProfile]],
                 seed: int = 0, pool: int = 16, camera: Optional[CameraRig] = None):
        if isinstance(world_configs, WorldConfig):
            world_configs = [world_configs]
        if isinstance(profiles, DegradationProfile):
            profiles = [profiles]
        self.rng = np.random.default_rng(seed)
        self.camera = camera or default_camera()
        self.profiles = list(profiles)
        self.worlds = [world_from_config(world_configs[k % len(world_configs)], int(s))
                       for k, s in enumerate(self.rng.integers(0, 2**31, pool))]

    def next(self, kind: str):
        while True:
            world = self.worlds[self.rng.integers(len(self.worlds))]
            profile = self.profiles[self.rng.integers(len(self.profiles))]
            fa, fb, _, _ = sample_pair(self.rng, world, self.camera, profile)
            labels = ground_truth_matches(fa, fb).for_kind(kind)
            n_a = len(fa.ppoints if kind == "point" else fa.lpoints)
            n_b = len(fb.ppoints if kind == "point" else fb.lpoints)
            if n_a and n_b:
                return fa, fb, labels


class SequencePairSampler:
    """Random consecutive pairs from a labelled frame sequence (e.g. a synth run)."""

    def __init__(self, frames: Sequence[FrameFeatures], seed: int = 0):
        if len(frames) < 2:
            raise ValueError("need at least two frames to form a pair")
        self.frames = list(frames)
        self.rng = np.random.default_rng(seed)

    def next(self, kind: str):
        for _ in range(100 * len(self.frames)):
            k = int(self.rng.integers(len(self.frames) - 1))
            fa, fb = self.frames[k], self.frames[k + 1]
            if len(fa.keypoints(kind)) and len(fb.keypoints(kind)):
                return fa, fb, ground_truth_matches(fa, fb).for_kind(kind)
        raise ValueError(f"no consecutive pair has {kind} features in both frames")


def line_training_worlds() -> list:
    """World mix used for the L-point network: repeated motifs plus line-dense scenes.

    The dense scenes give many L-points per pair, which mostly helps recall
    under the heavier nighttime noise.
    """
    return [repetitive_world_config(), WorldConfig(n_points=40, n_lines=40)]


def train_matcher(world_config, profile, steps: int, config: TrainConfig = TrainConfig(),
                  kind: str = "point", seed: int = 0,
                  weights: Optional[EncoderWeights] = None,
                  encoder_config: EncoderConfig = EncoderConfig(),
                  use_position: bool = True, callback=None, sampler=None) -> TrainResult:
    """Train one matching network with Adam on freshly rendered synthetic pairs.

    ``world_config`` and ``profile`` may be single values or sequences to mix.
    A ready ``sampler`` (anything with ``next(kind)``) replaces the synthetic
    stream. Returns the final weights and the per-step loss log.
    """
    if kind not in ("point", "line"):
        raise ValueError(f"kind must be 'point' or 'line', not {kind!r}")
    if weights is None:
        weights = init_weights(encoder_config, seed)
    if steps <= 0:
        return TrainResult(weights, [])
    if sampler is None:
        sampler = PairSampler(world_config, profile, seed + 1, config.world_pool)
    params = {k: v.copy() for k, v in weights.params.items()}
    state = ad.AdamState()
    losses = []
    for step in range(steps):
        fa, fb, labels = sampler.next(kind)
        tensors = {k: ad.Tensor(v) for k, v in params.items()}
        with ad.Tape() as tape:
            loss = pair_loss(tensors, weights.config, fa, fb, labels, kind,
                             config.sinkhorn_iters, config.sinkhorn_tol,
                             use_position=use_position)
        names = list(tensors)
        grads = ad.backward(tape, loss, [tensors[n] for n in names])
        params, state = ad.adam_step(params, dict(zip(names, grads)), state,
                                     config.lr, config.beta1, config.beta2, config.eps)
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1])
        if step % 100 == 0:
            log.debug("%s step %d loss %.4f", kind, step, losses[-1])
    return TrainResult(EncoderWeights(weights.config, params), losses)
