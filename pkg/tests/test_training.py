import numpy as np
import pytest

from plvo import autodiff as ad
from plvo.core_types import default_camera
from plvo.encoder_gnn import EncoderConfig, init_weights
from plvo.synthetic_world import (WorldConfig, generate_world, get_profile, ground_truth_matches,
                                  make_trajectory, noise_free_profile, render_frame)
from plvo.training import (PairSampler, SequencePairSampler, TrainConfig, evaluate_loss,
                           line_training_worlds, pair_loss, train_matcher)

SMALL = EncoderConfig(layers=2, hidden=(16,))
TINY_WORLD = WorldConfig(n_points=40, n_lines=4)


def test_zero_steps_returns_initial_weights():
    res = train_matcher(TINY_WORLD, get_profile("daytime"), 0, encoder_config=SMALL, seed=3)
    assert res.losses == []
    assert np.array_equal(res.weights.params["E"], init_weights(SMALL, 3).params["E"])


def test_rejects_unknown_kind():
    with pytest.raises(ValueError):
        train_matcher(TINY_WORLD, get_profile("daytime"), 1, kind="edge")


def test_training_is_deterministic():
    a = train_matcher(TINY_WORLD, get_profile("daytime"), 3, encoder_config=SMALL, seed=1)
    b = train_matcher(TINY_WORLD, get_profile("daytime"), 3, encoder_config=SMALL, seed=1)
    assert a.losses == b.losses
    assert all(np.array_equal(a.weights.params[k], b.weights.params[k]) for k in a.weights.params)


def test_training_reduces_held_out_loss():
    cfg = TrainConfig(lr=3e-3)
    held = PairSampler(TINY_WORLD, get_profile("daytime"), seed=99, pool=4)
    pairs = [held.next("point") for _ in range(5)]
    start = init_weights(SMALL, 0)
    res = train_matcher(TINY_WORLD, get_profile("daytime"), 40, cfg, encoder_config=SMALL, seed=0)
    assert evaluate_loss(res.weights, pairs, "point") < evaluate_loss(start, pairs, "point")


def test_line_kind_trains_on_lpoints():
    res = train_matcher(line_training_worlds(), get_profile("fog"), 2, kind="line",
                        encoder_config=SMALL, seed=2)
    assert len(res.losses) == 2 and all(np.isfinite(res.losses))


def test_callback_sees_every_step():
    seen = []
    train_matcher(TINY_WORLD, get_profile("daytime"), 3, encoder_config=SMALL,
                  callback=lambda step, loss: seen.append(step))
    assert seen == [0, 1, 2]


def test_sequence_sampler_uses_consecutive_frames():
    cam = default_camera()
    w = generate_world(0, 100, 10)
    frames = [render_frame(w, p, cam, noise_free_profile(), k, k)
              for k, p in enumerate(make_trajectory("straight", 4))]
    s = SequencePairSampler(frames, seed=0)
    for _ in range(5):
        fa, fb, labels = s.next("point")
        assert fb.frame_id == fa.frame_id + 1
        assert labels == ground_truth_matches(fa, fb).points
    with pytest.raises(ValueError):
        SequencePairSampler(frames[:1])


def test_pair_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    cfg = EncoderConfig(descriptor_dim=4, layers=2, hidden=(5,))
    w = init_weights(cfg, 0)
    for k in w.params:
        w.params[k] = w.params[k] + 0.3 * rng.normal(size=w.params[k].shape)
    sampler = PairSampler(WorldConfig(n_points=3, n_lines=0, descriptor_dim=4,
                                      bounds_lo=(-2, -1, 8), bounds_hi=(2, 1, 10)),
                          noise_free_profile(), seed=1, pool=1)
    fa, fb, labels = sampler.next("point")
    while not (labels.unmatched_a or labels.unmatched_b):  # keep the dustbin in play
        fa, fb, labels = sampler.next("point")
    names = sorted(w.params)

    def loss_value(params):
        return pair_loss({k: ad.Tensor(v) for k, v in params.items()}, cfg, fa, fb, labels,
                         "point", 30, 0.0).item()

    tensors = {k: ad.Tensor(v) for k, v in w.params.items()}
    with ad.Tape() as tape:
        loss = pair_loss(tensors, cfg, fa, fb, labels, "point", 30, 0.0)
    grads = dict(zip(names, ad.backward(tape, loss, [tensors[n] for n in names])))
    h = 1e-6
    for name in ("E", "z", "proj.W", "gnn.1.q.W", "kenc.0.W"):
        g = grads[name]
        num = np.zeros_like(g)
        for idx in np.ndindex(g.shape):
            p = {k: v.copy() for k, v in w.params.items()}
            m = {k: v.copy() for k, v in w.params.items()}
            p[name][idx] += h
            m[name][idx] -= h
            num[idx] = (loss_value(p) - loss_value(m)) / (2 * h)
        assert np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12) < 1e-3, name
