import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plvo import autodiff as ad
from plvo.encoder_gnn import (EncoderConfig, attend, attention_weights, describe, encode, init_weights,
                              log_score_matrix, matching_descriptors, normalize_positions)
from plvo.errors import DimensionMismatch, NonPositiveTemperature

SIZE = (640, 480)
SMALL = EncoderConfig(descriptor_dim=8, layers=2, hidden=(6, 5))


def random_weights(cfg=SMALL, seed=0, scale=0.5):
    """Weights with every parameter nonzero, so no term vanishes by construction."""
    w = init_weights(cfg, seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in w.params.items():
        w.params[k] = v + scale * rng.normal(size=v.shape)
    return w


def random_keypoints(rng, n, D):
    pos = np.column_stack([rng.uniform(0, 640, n), rng.uniform(0, 480, n), rng.uniform(0, 1, n)])
    desc = rng.normal(size=(n, D))
    return pos, desc / np.linalg.norm(desc, axis=1, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


def softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def encode_oracle(pos, desc, p, n_layers):
    x = normalize_positions(pos, *SIZE)
    for k in range(n_layers):
        x = x @ p[f"kenc.{k}.W"] + p[f"kenc.{k}.b"]
        if k < n_layers - 1:
            x = relu(x)
    return desc + x


def layer_oracle(x, src, p, pre):
    D = x.shape[1]
    q = x @ p[f"{pre}.q.W"] + p[f"{pre}.q.b"]
    k = src @ p[f"{pre}.k.W"] + p[f"{pre}.k.b"]
    v = src @ p[f"{pre}.v.W"] + p[f"{pre}.v.b"]
    msg = softmax(q @ k.T / np.sqrt(D)) @ v
    h = relu(np.hstack([x, msg]) @ p[f"{pre}.mlp.0.W"] + p[f"{pre}.mlp.0.b"])
    return x + h @ p[f"{pre}.mlp.1.W"] + p[f"{pre}.mlp.1.b"]


def test_zero_mlp_returns_descriptor():
    w = random_weights()
    for k in w.params:
        if k.startswith("kenc."):
            w.params[k][:] = 0.0
    rng = np.random.default_rng(1)
    pos, desc = random_keypoints(rng, 5, 8)
    assert np.array_equal(encode(pos, desc, w, *SIZE).data, desc)


def test_position_changes_rows():
    w = init_weights()
    d = np.ones((2, 32)) / np.sqrt(32)
    pos = np.array([[10.0, 20.0, 0.9], [300.0, 200.0, 0.9]])
    Y = encode(pos, d, w, *SIZE).data
    assert not np.allclose(Y[0], Y[1])


def test_encode_matches_recomputation():
    w = random_weights(seed=3)
    pos, desc = random_keypoints(np.random.default_rng(2), 7, 8)
    expected = encode_oracle(pos, desc, w.params, 3)
    assert np.max(np.abs(encode(pos, desc, w, *SIZE).data - expected)) < 1e-12


def test_encode_ablation_and_errors():
    w = random_weights()
    pos, desc = random_keypoints(np.random.default_rng(4), 3, 8)
    assert np.array_equal(encode(pos, desc, w, *SIZE, use_position=False).data, desc)
    ablated = w.without_position()
    assert np.array_equal(encode(pos, desc, ablated, *SIZE).data, desc)
    with pytest.raises(DimensionMismatch):
        encode(pos, desc[:, :5], w, *SIZE)
    with pytest.raises(DimensionMismatch):
        encode(pos[:2], desc, w, *SIZE)


def test_normalize_positions_corners():
    out = normalize_positions([[0, 0, 0.3], [640, 480, 1.0]], *SIZE)
    assert np.allclose(out, [[-1, -1, 0.3], [1, 1, 1.0]])


def test_single_keypoint_self_attention_is_one():
    w = random_weights()
    x = np.random.default_rng(5).normal(size=(1, 8))
    assert attention_weights(x, x, w, 0)[0, 0] == 1.0


def test_attend_matches_unrolled_layers():
    w = random_weights(seed=6)
    rng = np.random.default_rng(7)
    ya, yb = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    p = w.params
    a1 = layer_oracle(ya, ya, p, "gnn.0")
    b1 = layer_oracle(yb, yb, p, "gnn.0")
    a2 = layer_oracle(a1, b1, p, "gnn.1")
    b2 = layer_oracle(b1, a1, p, "gnn.1")
    xa, xb = attend(ya, yb, w)
    assert np.max(np.abs(xa.data - a2)) < 1e-12
    assert np.max(np.abs(xb.data - b2)) < 1e-12


def test_attend_errors_and_empty_sets():
    w = random_weights()
    with pytest.raises(DimensionMismatch):
        attend(np.ones((2, 8)), np.ones((2, 5)), w)
    with pytest.raises(ValueError):
        attend(np.ones((2, 8)), np.ones((2, 8)), w, layers=3)
    ya = np.random.default_rng(8).normal(size=(3, 8))
    xa, xb = attend(ya, np.zeros((0, 8)), w)
    assert xa.shape == (3, 8) and xb.shape == (0, 8)
    assert np.isfinite(xa.data).all()


def test_layers_zero_is_identity():
    w = random_weights()
    y = np.random.default_rng(9).normal(size=(4, 8))
    xa, xb = attend(y, y[:2], w, layers=0)
    assert np.array_equal(xa.data, y) and np.array_equal(xb.data, y[:2])


def test_matching_descriptor_cases():
    w = random_weights()
    X = np.random.default_rng(10).normal(size=(4, 8))
    w.params["proj.W"] = np.eye(8)
    w.params["proj.b"] = np.zeros(8)
    assert np.array_equal(matching_descriptors(X, w).data, X)
    w.params["proj.W"] = np.zeros((8, 8))
    w.params["proj.b"] = np.arange(8.0)
    assert np.array_equal(matching_descriptors(X, w).data, np.tile(np.arange(8.0), (4, 1)))
    w2 = random_weights(seed=11)
    expected = np.array([w2.params["proj.W"] @ x + w2.params["proj.b"] for x in X])
    assert np.max(np.abs(matching_descriptors(X, w2).data - expected)) < 1e-12
    with pytest.raises(DimensionMismatch):
        matching_descriptors(np.ones((2, 3)), w2)


def test_zero_mlp_zero_layers_is_pure_descriptor_matching():
    cfg = EncoderConfig(descriptor_dim=8, layers=0, hidden=(6,))
    w = random_weights(cfg, seed=12)
    for k in w.params:
        if k.startswith("kenc."):
            w.params[k][:] = 0.0
    pos, desc = random_keypoints(np.random.default_rng(13), 4, 8)
    ha, _ = describe(pos, desc, pos[:2], desc[:2], w, SIZE)
    expected = desc @ w.params["proj.W"].T + w.params["proj.b"]
    assert np.max(np.abs(ha.data - expected)) < 1e-12


@given(st.integers(0, 2**31), st.integers(1, 8), st.integers(1, 8))
@settings(max_examples=30, deadline=None)
def test_permutation_equivariance(seed, na, nb):
    rng = np.random.default_rng(seed)
    w = random_weights(seed=seed % 7)
    pa, da = random_keypoints(rng, na, 8)
    pb, db = random_keypoints(rng, nb, 8)
    ia, ib = rng.permutation(na), rng.permutation(nb)
    ha, hb = describe(pa, da, pb, db, w, SIZE)
    ha2, hb2 = describe(pa[ia], da[ia], pb[ib], db[ib], w, SIZE)
    assert np.max(np.abs(ha2.data - ha.data[ia])) < 1e-12
    assert np.max(np.abs(hb2.data - hb.data[ib])) < 1e-12


def test_outputs_finite_for_large_inputs():
    w = random_weights(scale=3.0)
    rng = np.random.default_rng(14)
    pos, desc = random_keypoints(rng, 6, 8)
    ha, hb = describe(pos, 1e3 * desc, pos, -1e3 * desc, w, SIZE)
    assert np.isfinite(ha.data).all() and np.isfinite(hb.data).all()


def test_log_score_matrix_layout():
    w = random_weights()
    rng = np.random.default_rng(15)
    ha, hb = rng.normal(size=(3, 8)), rng.normal(size=(2, 8))
    S = log_score_matrix(ha, hb, w, 0.5).data
    assert S.shape == (4, 3)
    assert np.allclose(S[:3, :2], ha @ w.params["E"] @ hb.T / 0.5)
    assert np.all(S[3, :] == w.dustbin) and np.all(S[:, 2] == w.dustbin)
    with pytest.raises(NonPositiveTemperature):
        log_score_matrix(ha, hb, w, 0.0)


def test_default_architecture_and_independent_init():
    w = init_weights()
    assert w.config.descriptor_dim == 32 and w.config.layers == 4
    assert w.config.hidden == (32, 64, 32)
    assert all(np.isfinite(v).all() for v in w.params.values())
    other = init_weights(seed=1)
    assert not np.array_equal(w.params["gnn.0.q.W"], other.params["gnn.0.q.W"])
    with pytest.raises(NotImplementedError):
        EncoderConfig(heads=4)


def test_forward_records_on_tape():
    w = random_weights()
    pos, desc = random_keypoints(np.random.default_rng(16), 3, 8)
    params = w.tensors()
    with ad.Tape() as tape:
        ha, hb = describe(pos, desc, pos, desc, params, SIZE)
        loss = ad.sum_(ha)
    grads = ad.backward(tape, loss, [params["proj.b"]])
    assert np.allclose(grads[0], 3.0)
