import numpy as np
import pytest

from semiprune import compaction as cp, gcn, trainer as tr
from semiprune.errors import DomainError, ParameterError, StructureError
from semiprune.mask_param import GroupScheme


def block_mask():
    m = np.zeros((4, 4))
    m[:2, :2] = 1
    return m


def test_analyze_examples():
    s = cp.analyze(np.zeros((4, 4)))
    assert (s.zero_rows, s.zero_cols, s.survivors) == (4, 4, 0)
    s = cp.analyze(np.eye(4))
    assert (s.zero_rows, s.zero_cols, s.survivors) == (0, 0, 4)
    scheme = GroupScheme.contiguous((4, 4), 2, 2)
    s = cp.analyze(block_mask(), scheme)
    assert (s.zero_rows, s.zero_cols, s.live_blocks, s.zero_blocks) == (2, 2, 1, 3)
    assert s.structured_survivors == 4 and s.unstructured_survivors == 0


def test_analyze_rejects_non_binary():
    with pytest.raises(DomainError):
        cp.analyze(np.full((2, 2), 0.5))


def test_plan_dense_is_identity():
    p = cp.plan_tensor(np.ones((3, 5)))
    assert p.core_shape == (3, 5) and p.remainder_size == 0
    np.testing.assert_array_equal(p.row_perm, np.arange(3))
    np.testing.assert_array_equal(p.col_perm, np.arange(5))


def test_plan_structured_core():
    m = np.zeros((4, 4))
    m[np.ix_([0, 2], [1, 3])] = 1
    p = cp.plan_tensor(m)
    assert p.core_shape == (2, 2) and p.remainder_size == 0
    assert set(p.row_perm[:2]) == {0, 2} and set(p.col_perm[:2]) == {1, 3}


def test_plan_core_plus_straggler():
    m = block_mask()
    m[3, 3] = 1
    p = cp.plan_tensor(m)
    assert p.core_shape == (2, 2) and p.remainder_size == 1
    assert (p.rem_rows[0], p.rem_cols[0]) == (3, 3)
    assert p.live_rows == 3 and p.live_cols == 3


def random_mask(rng, shape, density):
    return (rng.uniform(size=shape) < density).astype(float)


@pytest.mark.parametrize("seed", range(8))
def test_plan_round_trip_and_conservation(seed):
    rng = np.random.default_rng(seed)
    m = random_mask(rng, (7, 9), rng.uniform(0.1, 0.9))
    m[:3, :4] = 1  # a dense corner so the core is not trivial
    w = rng.normal(size=m.shape)
    p = cp.plan_tensor(m, w)
    for perm in (p.row_perm, p.col_perm):
        assert sorted(perm.tolist()) == list(range(len(perm)))
    np.testing.assert_array_equal(p.unpack(), w * m)
    core_survivors = int(m[np.ix_(p.row_perm[:p.core_rows], p.col_perm[:p.core_cols])].sum())
    assert core_survivors + p.remainder_size == int(m.sum())
    inv = np.argsort(p.row_perm)
    np.testing.assert_array_equal((w * m)[p.row_perm][inv], w * m)


def finalized_model(seed, n=5, s=6, heads=2, filters=3, classes=4, density=0.3, structured=False):
    rng = np.random.default_rng(seed)
    model = gcn.init_model(np.eye(n), s, heads, filters, classes, rng)
    for name, layer in model.layers.items():
        shape = layer.latent.shape
        if structured:
            rows = rng.uniform(size=shape[0]) < np.sqrt(density)
            cols = rng.uniform(size=shape[1]) < np.sqrt(density)
            mask = (rows[:, None] & cols[None, :]).astype(float)
        else:
            mask = random_mask(rng, shape, density)
        layer.frozen_mask = mask
    return model, rng


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("structured", [False, True])
def test_compact_forward_equivalence(seed, structured):
    model, rng = finalized_model(seed, density=0.5 if structured else 0.4, structured=structured)
    plan = cp.plan_compaction(model)
    x = rng.normal(size=(100, 5, 6))
    want = gcn.gcn_forward(model, x)[0]
    got = cp.compact_forward(plan, model, x)
    assert np.abs(got - want).max() <= 1e-9


def test_identity_plan_bit_equal():
    model, rng = finalized_model(0, density=1.0)
    plan = cp.plan_compaction(model)
    assert plan.identity
    x = rng.normal(size=(4, 5, 6))
    assert cp.compact_forward(plan, model, x).tobytes() == gcn.gcn_forward(model, x)[0].tobytes()
    dense, compact = plan.flops()
    assert dense == compact


def test_flops_core_ratio():
    n, s, k, c, q = 6, 6, 2, 4, 3
    rng = np.random.default_rng(0)
    model = gcn.init_model(np.eye(n), s, k, c, q, rng)
    for layer in model.layers.values():
        layer.frozen_mask = np.ones_like(layer.latent)
    # drop the second head entirely: its attention block and its conv filters
    model.layers["attention"].frozen_mask[:, n:] = 0
    model.layers["conv"].frozen_mask[:, c:] = 0
    plan = cp.plan_compaction(model)
    dense, compact = plan.flops()
    want = 2.0 * (n * s * c + n * n * c + n * c * q)
    assert compact == want
    assert abs(compact / dense - want / (2.0 * (n * s * k * c + n * n * k * c + n * c * q))) < 1e-12


def test_flops_monotone_in_core_size():
    model, _ = finalized_model(3, density=1.0)
    big = cp.plan_compaction(model).flops()[1]
    model.layers["dense"].frozen_mask[:, -1] = 0
    small = cp.plan_compaction(model).flops()[1]
    assert small < big


def test_liveness_removes_dead_head():
    n, k, c = 3, 2, 2
    masks = {
        "attention": np.hstack([np.ones((n, n)), np.zeros((n, n))]),
        "conv": np.ones((6, k * c)),
        "dense": np.ones((n * c, 2)),
    }
    live = cp.propagate_liveness(masks, k, c)
    assert not live["conv"][:, c:].any() and live["conv"][:, :c].all()
    assert live["dense"].all()


def test_liveness_chain_error():
    with pytest.raises(StructureError):
        cp.propagate_liveness({"attention": np.ones((3, 3)), "conv": np.ones((6, 4)), "dense": np.ones((6, 2))}, 2, 2)


def test_unfinalized_model_rejected():
    model = gcn.init_model(np.eye(3), 6, 1, 2, 2, np.random.default_rng(0))
    with pytest.raises(StructureError):
        cp.plan_compaction(model)


def test_digest_mismatch():
    model, rng = finalized_model(1)
    plan = cp.plan_compaction(model)
    model.layers["conv"].frozen_mask = np.ones_like(model.layers["conv"].latent)
    with pytest.raises(StructureError):
        cp.compact_forward(plan, model, rng.normal(size=(1, 5, 6)))


def test_bench_contract():
    model, rng = finalized_model(2)
    plan = cp.plan_compaction(model)
    x = rng.normal(size=(8, 5, 6))
    with pytest.raises(ParameterError):
        cp.bench(plan, model, x, repeats=4)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = cp.bench(plan, model, x, repeats=5, warmup=1)
    assert res.dense_time > 0 and res.compact_time > 0
    assert res.speedup == pytest.approx(res.dense_time / res.compact_time)
    import json
    assert set(json.loads(res.to_json())) == {"dense_ms", "compact_ms", "speedup", "flops_dense", "flops_compact"}


def test_pgm_export(tmp_path):
    p = cp.export_mask_image(np.ones((2, 2)), tmp_path / "a.pgm")
    assert (cp.read_pgm(p) == 255).all()
    assert (tmp_path / "a.pgm").read_text().startswith("P2\n2 2\n255\n")
    img = cp.read_pgm(cp.export_mask_image(np.eye(3), tmp_path / "b.pgm"))
    np.testing.assert_array_equal(img, 255 * np.eye(3))
    scheme = GroupScheme.contiguous((4, 4), 2, 2)
    img = cp.read_pgm(cp.export_mask_image(block_mask(), tmp_path / "c.pgm", scheme))
    assert img.shape == (5, 5) and (img[2] == 128).all() and (img[:, 2] == 128).all()
    with pytest.raises(DomainError):
        cp.export_mask_image(np.full((2, 2), 2.0), tmp_path / "d.pgm")


def test_pgm_trained_mask_dimensions(tmp_path):
    model = gcn.init_model(np.eye(4), 6, 2, 3, 2, np.random.default_rng(0))
    soft = model.masks()["attention"]
    img = cp.read_pgm(cp.export_mask_image(soft, tmp_path / "m.pgm"))
    assert img.shape == soft.shape


def test_plan_to_dict_serializable():
    import json
    model, _ = finalized_model(4)
    d = cp.plan_compaction(model).to_dict()
    assert json.loads(json.dumps(d)) == d


def test_fully_pruned_model_gives_zero_logits():
    model, rng = finalized_model(5, density=0.0)
    plan = cp.plan_compaction(model)
    x = rng.normal(size=(3, 5, 6))
    np.testing.assert_array_equal(cp.compact_forward(plan, model, x), np.zeros((3, 4)))
    assert plan.flops()[1] == 0
