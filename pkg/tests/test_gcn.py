import numpy as np
import pytest

from semiprune import gcn
from semiprune.errors import DataError, ShapeError, UsageError
from semiprune.mask_param import LatentLayer
from semiprune.tensor_core import finite_diff_grad


def naive_logits(att, conv, dense, u, heads, filters):
    """Per-head loop over explicit A^k U^T W^k products."""
    n = u.shape[1]
    h = np.zeros((n, filters))
    for k in range(heads):
        a_k = att[:, k * n:(k + 1) * n]
        w_k = conv[:, k * filters:(k + 1) * filters]
        h += a_k @ u.T @ w_k
    h = np.maximum(h, 0.0)
    return h.reshape(-1) @ dense


def tiny_model(seed, n=4, s=6, heads=2, filters=3, classes=2, **kw):
    rng = np.random.default_rng(seed)
    adj = gcn.skeleton_adjacency(n, [(i, i + 1) for i in range(n - 1)])
    return gcn.init_model(adj, s, heads, filters, classes, rng, **kw), rng


def test_chunking_constant_trajectory():
    p = np.array([[0.3, -1.0, 2.0]])
    g = gcn.temporal_chunking(np.tile(p, (8, 1, 1)), 4)
    np.testing.assert_array_equal(g.signal[:, 0], np.tile(p[0], 4))


def test_chunking_pairs():
    frames = np.random.default_rng(0).normal(size=(8, 3, 3))
    g = gcn.temporal_chunking(frames, 4)
    want = np.concatenate([frames[2 * c:2 * c + 2].mean(axis=0) for c in range(4)], axis=1).T
    np.testing.assert_array_equal(g.signal, want)
    assert g.signal.shape == (12, 3)


def test_chunking_uneven_sizes():
    assert list(np.diff(gcn.chunk_bounds(6, 4), axis=1).ravel()) == [2, 2, 1, 1]
    frames = np.arange(6 * 3, dtype=float).reshape(6, 1, 3)
    g = gcn.temporal_chunking(frames, 4)
    assert g.signal[:3, 0].tolist() == frames[0:2, 0].mean(axis=0).tolist()
    assert g.signal[9:, 0].tolist() == frames[5, 0].tolist()


def test_chunking_short_sequence_and_errors():
    g = gcn.temporal_chunking(np.ones((2, 2, 3)), 4)
    assert g.signal.shape == (12, 2)
    with pytest.raises(DataError):
        gcn.temporal_chunking(np.ones((0, 2, 3)), 4)
    with pytest.raises(DataError):
        gcn.temporal_chunking(np.ones((3, 2, 3)), 0)
    with pytest.raises(DataError):
        gcn.SkeletonSequence(np.full((3, 2, 3), np.nan))


@pytest.mark.parametrize("frames,chunks", [(8, 4), (12, 3), (10, 5)])
def test_chunking_duplicate_frames(frames, chunks):
    seq = np.random.default_rng(frames).normal(size=(frames, 5, 3))
    a = gcn.temporal_chunking(seq, chunks).signal
    b = gcn.temporal_chunking(np.repeat(seq, 2, axis=0), chunks).signal
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_adjacency():
    np.testing.assert_array_equal(gcn.skeleton_adjacency(3, []), np.eye(3))
    chain = gcn.skeleton_adjacency(3, [(0, 1), (1, 2)])
    np.testing.assert_array_equal(chain, [[1, 1, 0], [1, 1, 1], [0, 1, 1]])
    with pytest.raises(DataError):
        gcn.skeleton_adjacency(3, [(0, 3)])


@pytest.mark.parametrize("n,bones", [(15, gcn.SBU_BONES), (21, gcn.FPHA_BONES)])
def test_bundled_skeletons(n, bones):
    a = gcn.skeleton_adjacency(n, bones)
    degree = np.zeros(n)
    for i, j in bones:
        degree[i] += 1
        degree[j] += 1
    np.testing.assert_array_equal(a, a.T)
    np.testing.assert_array_equal(a.sum(axis=1), degree + 1)
    assert len(bones) == n - 1  # a tree


def test_forward_matches_naive_oracle():
    for seed in range(5):
        model, rng = tiny_model(seed)
        u = rng.normal(size=(6, 4))
        logits, _ = gcn.gcn_forward(model, gcn.TrajectoryGraph(u, np.eye(4)))
        w = {k: model.effective(k)[0] for k in gcn.LAYERS}
        want = naive_logits(w["attention"], w["conv"], w["dense"], u, 2, 3)
        np.testing.assert_allclose(logits[0], want, rtol=0, atol=1e-10)


def test_forward_batch_matches_single():
    model, rng = tiny_model(1)
    x = rng.normal(size=(5, 4, 6))
    batch, _ = gcn.gcn_forward(model, x)
    for i in range(5):
        np.testing.assert_allclose(batch[i], gcn.gcn_forward(model, x[i])[0][0], rtol=0, atol=1e-13)


def test_zero_weights_give_zero_logits():
    model, rng = tiny_model(2, prunable=())
    for layer in model.layers.values():
        layer.latent[:] = 0.0
    logits, cache = gcn.gcn_forward(model, rng.normal(size=(3, 4, 6)))
    assert not logits.any()
    grads = gcn.gcn_backward(model, cache, np.zeros_like(logits))
    assert not any(g.any() for g in grads.values())


def test_single_node_linear_map():
    rng = np.random.default_rng(3)
    model = gcn.init_model(np.eye(1), 6, 1, 3, 2, rng, prunable=())
    model.layers["attention"].latent[:] = 1.0
    u = rng.normal(size=(6, 1))
    logits, _ = gcn.gcn_forward(model, u.T)
    want = np.maximum(u.T @ model.layers["conv"].latent, 0) @ model.layers["dense"].latent
    np.testing.assert_allclose(logits, want, rtol=1e-14)


def test_shape_mismatch():
    model, _ = tiny_model(0)
    with pytest.raises(ShapeError):
        gcn.gcn_forward(model, np.zeros((1, 4, 5)))


def test_stale_cache():
    model, rng = tiny_model(0)
    logits, cache = gcn.gcn_forward(model, rng.normal(size=(2, 4, 6)))
    model.touch()
    with pytest.raises(UsageError):
        gcn.gcn_backward(model, cache, np.ones_like(logits))


@pytest.mark.parametrize("seed", range(10))
def test_gradients_finite_difference(seed):
    model, rng = tiny_model(seed, n=5, s=6, heads=2, filters=4, classes=3)
    x = rng.normal(size=(2, 5, 6))
    logits, cache = gcn.gcn_forward(model, x)
    grads = gcn.gcn_backward(model, cache, np.ones_like(logits))
    for name in gcn.LAYERS:
        latent = model.layers[name].latent

        def f(v, name=name):
            saved = model.layers[name].latent
            model.layers[name].latent = v
            out = gcn.gcn_forward(model, x)[0].sum()
            model.layers[name].latent = saved
            return out

        num = finite_diff_grad(f, latent.copy(), eps=1e-6)
        err = np.linalg.norm(grads[name] - num) / max(np.linalg.norm(num), 1e-12)
        assert err < 1e-4, (name, err)


def test_saturated_masks_match_unwrapped_twin():
    model, rng = tiny_model(4)
    model.set_sigma(100.0)
    for layer in model.layers.values():
        # keep every latent far from zero so each mask saturates at 1
        layer.latent[:] = np.where(layer.latent >= 0, 1.0, -1.0) * (2.0 + np.abs(layer.latent))
    twin = model.copy()
    twin.prunable = ()
    for m in model.masks().values():
        assert (m == 1.0).all()
    x = rng.normal(size=(3, 4, 6))
    la, ca = gcn.gcn_forward(model, x)
    lb, cb = gcn.gcn_forward(twin, x)
    np.testing.assert_allclose(la, lb, rtol=0, atol=1e-9)
    ga = gcn.gcn_backward(model, ca, np.ones_like(la))
    gb = gcn.gcn_backward(twin, cb, np.ones_like(lb))
    for name in gcn.LAYERS:
        np.testing.assert_allclose(ga[name], gb[name], rtol=1e-5, atol=1e-12)


def test_forward_deterministic():
    a, rng = tiny_model(7)
    b, _ = tiny_model(7)
    x = rng.normal(size=(4, 4, 6))
    assert gcn.gcn_forward(a, x)[0].tobytes() == gcn.gcn_forward(b, x)[0].tobytes()


def test_frozen_layer_uses_mask():
    model, rng = tiny_model(5)
    mask = (rng.uniform(size=model.layers["conv"].latent.shape) > 0.5).astype(float)
    model.layers["conv"].frozen_mask = mask
    w, stack = model.effective("conv")
    assert stack is None
    np.testing.assert_array_equal(w, model.layers["conv"].latent * mask)


def test_default_schemes_blocks():
    s = gcn.default_schemes(4, 6, 2, 3, 5, chunks=2)
    assert s["attention"].block_ids().max() + 1 == 2
    assert s["conv"].block_ids().max() + 1 == 2 * 2
    assert s["dense"].block_ids().max() + 1 == 4 * 5
    assert gcn.default_schemes(4, 6, 2, 3, 5, mode="structured")["conv"].heads == ("b",)


def test_accuracy_counts():
    model, rng = tiny_model(6)
    x = rng.normal(size=(6, 4, 6))
    pred = gcn.predict(model, x)
    assert gcn.accuracy(model, x, pred) == 1.0
    assert gcn.accuracy(model, x, 1 - pred) == 0.0


def test_model_layer_shape_check():
    model, _ = tiny_model(0)
    layers = dict(model.layers)
    layers["conv"] = LatentLayer(np.zeros((5, 6)), gcn.default_schemes(4, 5, 2, 3, 2)["conv"])
    with pytest.raises(ShapeError):
        gcn.GcnModel(4, 6, 2, 3, 2, layers)
