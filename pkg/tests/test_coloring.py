import numpy as np
import pytest

from ccem.picnn import init_params
from ccem.energy import ComposedEnergy
from ccem.solvers import SolverConfig
from ccem.tasks import coloring as gc

# ---------------------------------------------------------------------------
# conflict counting oracles


def triangle(chi=3):
    return gc.GraphInstance(3, [[0, 1], [1, 2], [0, 2]], chi)


def test_count_conflicts_known_cases():
    assert gc.count_conflicts(triangle(), [0, 1, 2]) == 0
    assert gc.count_conflicts(triangle(), [0, 0, 1]) == 1
    k4 = gc.GraphInstance(4, [[a, b] for a in range(4) for b in range(a + 1, 4)], 4)
    assert gc.count_conflicts(k4, [0, 0, 0, 0]) == 6
    with pytest.raises(ValueError):
        gc.count_conflicts(triangle(), [0, 1, 3])


def test_count_conflicts_invariant_under_color_relabeling():
    rng = np.random.default_rng(0)
    g = gc.generate("erdos-renyi", 4)
    for _ in range(20):
        colors = rng.integers(0, g.chi, size=g.v)
        perm = rng.permutation(g.chi)
        assert gc.count_conflicts(g, colors) == gc.count_conflicts(g, perm[colors])


def test_random_coloring_expectation_monte_carlo():
    n = 10
    kn = gc.GraphInstance(n, [[a, b] for a in range(n) for b in range(a + 1, n)], n)
    want = gc.expected_random_conflicts(kn)
    assert want == pytest.approx((n - 1) / 2)
    rng = np.random.default_rng(1)
    draws = rng.integers(0, n, size=(20000, n))
    got = np.mean(
        [gc.count_conflicts(kn, c) for c in draws]
    )
    assert got == pytest.approx(want, abs=0.06)


# ---------------------------------------------------------------------------
# instance validation and generators


def test_instance_validation():
    with pytest.raises(ValueError):
        gc.GraphInstance(3, [[0, 0]], 3)  # self loop
    with pytest.raises(ValueError):
        gc.GraphInstance(3, [[0, 1], [1, 0]], 3)  # duplicate
    with pytest.raises(ValueError):
        gc.GraphInstance(3, [[0, 3]], 3)  # out of range
    with pytest.raises(ValueError):
        gc.GraphInstance(3, [[0, 1]], 1)  # chi too small
    g = gc.GraphInstance(3, [[2, 1], [1, 0]], 3)
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_generator_boxes():
    for seed in range(4):
        g = gc.generate("erdos-renyi", seed)
        assert 20 <= g.v <= 39 and 29 <= g.num_edges <= 76
        assert g.chi in (3, 4) and g.degrees().min() >= 1

        g = gc.generate("holme-kim", seed)
        assert 22 <= g.v <= 34 and 56 <= g.num_edges <= 92 and g.chi == 4

        g = gc.generate("regular-expander", seed)
        assert 21 <= g.v <= 40 and g.chi == 4
        assert (g.degrees() == 6).all()
        adj = np.zeros((g.v, g.v))
        adj[g.edges[:, 0], g.edges[:, 1]] = adj[g.edges[:, 1], g.edges[:, 0]] = 1
        lam = np.linalg.eigvalsh(adj)
        assert lam[-1] == pytest.approx(6.0)
        assert np.abs(lam[:-1]).max() <= 2 * np.sqrt(5) + 0.5

        g = gc.generate("complete", seed)
        assert 8 <= g.v <= 12 and g.chi == g.v
        assert g.num_edges == g.v * (g.v - 1) // 2


def test_generator_paley():
    for seed in range(3):
        g = gc.generate("paley", seed)
        assert g.v in (29, 37)
        assert 6 <= g.chi <= 10
        assert (g.degrees() == (g.v - 1) // 2).all()
    # the classic small case: 13 nodes, every degree 6
    e13 = gc._paley_edges(13)
    assert len(e13) == 13 * 6 // 2
    assert (np.bincount(e13.ravel(), minlength=13) == 6).all()


def test_generator_determinism_and_unknown():
    a = gc.generate("holme-kim", 9)
    b = gc.generate("holme-kim", 9)
    assert a.v == b.v and a.chi == b.chi and np.array_equal(a.edges, b.edges)
    with pytest.raises(ValueError):
        gc.generate("small-world", 0)


def test_complete_k8_has_28_edges():
    seen = set()
    for seed in range(40):
        g = gc.generate("complete", seed)
        seen.add(g.v)
        if g.v == 8:
            assert g.num_edges == 28 and g.chi == 8
    assert 8 in seen and 12 in seen


# ---------------------------------------------------------------------------
# factors and I/O


def test_factors_layout_and_energy_coverage():
    g = triangle()
    fs = gc.factors(g)
    assert len(fs) == 3
    assert list(fs[0].scope) == [0, 1, 2, 3, 4, 5]
    assert list(fs[1].scope) == [0, 1, 2, 6, 7, 8]
    for f in fs:
        assert f.context.shape == (gc.CTX_DIM,)
        assert f.context[1 : 1 + 6].sum() == 6
        assert f.context[7:25].sum() == 0
        assert f.context[-1] == pytest.approx(3 / gc.CHI_MAX)
    params = init_params(gc.CTX_DIM, gc.SCOPE_DIM, width=8, seed=0)
    comp = ComposedEnergy(params, fs, g.v * g.chi)
    assert comp.num_factors == 3
    feas = gc.feasible(g)
    assert feas.dim == 9 and len(feas.blocks) == 3


def test_text_io_round_trip(tmp_path):
    g = gc.generate("erdos-renyi", 2)
    p = tmp_path / "g.txt"
    gc.write_graph(g, p)
    h = gc.read_graph(p)
    assert h.v == g.v and h.chi == g.chi and np.array_equal(h.edges, g.edges)
    first = gc.to_text(g).splitlines()[0]
    assert first == f"{g.v} {g.num_edges} {g.chi}"
    with pytest.raises(ValueError):
        gc.from_text("3 2 3\n0 1\n")  # promises 2 edges, gives 1


# ---------------------------------------------------------------------------
# phase-1 sampler


def test_sampler_pairs():
    rng = np.random.default_rng(4)
    for _ in range(300):
        ctx, pos, negs = gc.sample_one(rng, 10)
        chi = int(round(ctx[-1] * gc.CHI_MAX))
        assert 3 <= chi <= gc.CHI_MAX
        assert ctx[1 : 1 + 2 * chi].sum() == 2 * chi
        c1, c2 = int(pos[:chi].argmax()), int(pos[chi : 2 * chi].argmax())
        assert pos.sum() == 2.0 and c1 != c2
        assert pos[2 * chi :].sum() == 0
        for t, v in enumerate(negs):
            # every family lives on the two endpoint simplices with zero padding
            np.testing.assert_allclose([v[:chi].sum(), v[chi : 2 * chi].sum()], 1.0)
            assert v[2 * chi :].sum() == 0 and (v >= 0).all()
            a, b = int(v[:chi].argmax()), int(v[chi : 2 * chi].argmax())
            if t < 4:
                assert v.sum() == 2.0 and a == b
            elif t < 7:
                assert v.sum() == 2.0 and a != b
            else:
                assert ((v > 0) & (v < 1)).any()
    a = gc.sample_batch(np.random.default_rng(8), 16, 10)
    b = gc.sample_batch(np.random.default_rng(8), 16, 10)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_sampler_mined_slot_stays_on_the_product_simplex():
    params = init_params(gc.CTX_DIM, gc.SCOPE_DIM, layers=3, width=16, seed=2)
    ctx, pos, negs = gc.sample_batch(np.random.default_rng(9), 12, params=params)
    plain = gc.sample_batch(np.random.default_rng(9), 12)[2]
    np.testing.assert_array_equal(negs[:, :9], plain[:, :9])
    for b in range(12):
        chi = int(round(ctx[b, -1] * gc.CHI_MAX))
        v = negs[b, 9]
        np.testing.assert_allclose([v[:chi].sum(), v[chi : 2 * chi].sum()], 1.0)
        assert (v >= -1e-12).all() and v[2 * chi :].sum() == 0


# ---------------------------------------------------------------------------
# end-to-end smoke


def test_solve_and_evaluate_smoke():
    params = init_params(gc.CTX_DIM, gc.SCOPE_DIM, width=8, seed=1)
    cfg = SolverConfig(steps=6, num_starts=2)
    colors, res = gc.solve_instance(params, triangle(), cfg)
    assert colors.shape == (3,) and colors.max() < 3
    m = gc.evaluate(params, "complete", instances=2, cfg=cfg, seed0=3)
    assert m.instances == 2
    assert m.conflicts.min() >= 0
    s = m.summary()
    assert s["distribution"] == "complete"
    assert 0 <= s["frac_zero"] <= 1
