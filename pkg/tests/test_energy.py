"""Factor composition: packing validation, sum-of-factors oracle, gradients
through the scatter, convexity of the total."""

import numpy as np
import pytest

import ccem.autodiff as ad
from ccem.autodiff import Tensor, Tape, backward, finite_difference_check
from ccem.energy import ComposedEnergy, FactorSpec
from ccem.picnn import factor_energy, init_params

CTX, SCOPE = 5, 4
DIM = 9


def make_params(seed=0):
    return init_params(CTX, SCOPE, layers=3, width=16, seed=seed)


def make_factors(rng, k=6, dim=DIM):
    factors = []
    for i in range(k):
        size = int(rng.integers(2, SCOPE + 1))
        scope = rng.choice(dim, size=size, replace=False)
        factors.append(
            FactorSpec(scope=scope, context=rng.normal(size=CTX), weight=1.0)
        )
    # guarantee coverage with one sweep over any missed variables
    seen = set()
    for f in factors:
        seen.update(f.scope.tolist())
    missing = [v for v in range(dim) if v not in seen]
    for v in missing:
        factors.append(FactorSpec(scope=[v, (v + 1) % dim], context=rng.normal(size=CTX)))
    return factors


def padded_rows(y, factors):
    rows = np.zeros((len(factors), SCOPE))
    for i, f in enumerate(factors):
        rows[i, : f.scope.size] = y[f.scope]
    return rows


def test_total_is_weighted_sum_of_factor_energies():
    rng = np.random.default_rng(1)
    p = make_params(2)
    factors = make_factors(rng)
    for f in factors:
        f.weight = float(rng.uniform(0.5, 2.0))
    comp = ComposedEnergy(p, factors, DIM)
    y = rng.uniform(size=(3, DIM))
    got = comp.total_energy(y)
    for b in range(3):
        rows = padded_rows(y[b], factors)
        fs = factor_energy(p, np.stack([f.context for f in factors]), rows)
        want = sum(f.weight * fs[i] for i, f in enumerate(factors))
        assert abs(got[b] - want) < 1e-10


def test_total_grad_matches_tape_and_fd():
    rng = np.random.default_rng(3)
    p = make_params(4)
    factors = make_factors(rng)
    comp = ComposedEnergy(p, factors, DIM)
    y = rng.uniform(size=(2, DIM))

    with Tape() as tape:
        ty = Tensor(y, requires_grad=True)
        total = ad.tsum(comp.evaluator().energy(ty))
        g_tape = backward(total, tape)[ty]
    g_analytic = comp.total_grad(y)
    assert np.max(np.abs(g_tape - g_analytic)) < 1e-12

    def f(x):
        return ad.tsum(comp.evaluator().energy(ad.reshape(x, (2, DIM))))

    rep = finite_difference_check(f, y.ravel(), h=1e-5)
    assert rep.max_rel_error < 1e-5


def test_energy_and_grad_heads_are_consistent():
    rng = np.random.default_rng(5)
    p = make_params(6)
    comp = ComposedEnergy(p, make_factors(rng), DIM)
    ev = comp.evaluator()
    y = Tensor(rng.uniform(size=(4, DIM)))
    e1 = ev.energy(y)
    e2, g = ev.energy_and_grad(y)
    np.testing.assert_array_equal(e1.data, e2.data)
    assert g.shape == (4, DIM)


def test_doubling_one_weight_adds_that_factor():
    rng = np.random.default_rng(7)
    p = make_params(8)
    factors = make_factors(rng)
    y = rng.uniform(size=(1, DIM))
    base = ComposedEnergy(p, factors, DIM).total_energy(y)[0]
    factors[2].weight = 2.0
    bumped = ComposedEnergy(p, factors, DIM).total_energy(y)[0]
    rows = padded_rows(y[0], factors)
    f2 = factor_energy(p, factors[2].context[None, :], rows[2:3])[0]
    assert abs((bumped - base) - f2) < 1e-10


def test_total_energy_convex_in_y():
    rng = np.random.default_rng(9)
    p = make_params(10)
    comp = ComposedEnergy(p, make_factors(rng), DIM)
    for _ in range(100):
        y1 = rng.uniform(-0.5, 1.5, size=(2, DIM))
        y2 = rng.uniform(-0.5, 1.5, size=(2, DIM))
        lam = rng.uniform()
        mid = comp.total_energy(lam * y1 + (1 - lam) * y2)
        bound = lam * comp.total_energy(y1) + (1 - lam) * comp.total_energy(y2)
        assert np.all(mid <= bound + 1e-9)


def test_taped_evaluator_reaches_parameters():
    rng = np.random.default_rng(11)
    p = make_params(12)
    comp = ComposedEnergy(p, make_factors(rng), DIM)
    y = rng.uniform(size=(2, DIM))
    with Tape() as tape:
        ev = comp.evaluator()
        e, g = ev.energy_and_grad(Tensor(y))
        loss = ad.add(ad.tsum(e), ad.tsum(ad.square(g)))
        gm = backward(loss, tape)
    hit = [k for k, t in ev.tv.items() if gm.get(t) is not None and np.any(gm[t] != 0)]
    for key in ["Wy0", "Wzhat1", "Wut0", "s_hat", "a_u"]:
        assert key in hit


def test_evaluator_batch_cache_consistency_across_sizes():
    rng = np.random.default_rng(13)
    p = make_params(14)
    comp = ComposedEnergy(p, make_factors(rng), DIM)
    ev = comp.evaluator()
    y = rng.uniform(size=(3, DIM))
    big = ev.energy(Tensor(y)).data
    for b in range(3):
        one = ev.energy(Tensor(y[b : b + 1])).data
        assert np.allclose(big[b], one[0], rtol=1e-12)


def test_build_errors():
    rng = np.random.default_rng(15)
    p = make_params(16)
    ctx = rng.normal(size=CTX)
    good = [FactorSpec(scope=[0, 1, 2, 3], context=ctx), FactorSpec(scope=[4, 0], context=ctx)]
    with pytest.raises(ValueError, match="no scope"):
        ComposedEnergy(p, good, 6)
    with pytest.raises(ValueError, match="out of range"):
        ComposedEnergy(p, [FactorSpec(scope=[0, 5], context=ctx)], 5)
    with pytest.raises(ValueError, match="scope size"):
        ComposedEnergy(p, [FactorSpec(scope=[0, 1, 2, 3, 4], context=ctx)], 5)
    with pytest.raises(ValueError, match="repeats"):
        ComposedEnergy(p, [FactorSpec(scope=[0, 0], context=ctx)], 1)
    with pytest.raises(ValueError, match="context size"):
        ComposedEnergy(p, [FactorSpec(scope=[0], context=np.zeros(2))], 1)
    with pytest.raises(ValueError, match="negative weight"):
        ComposedEnergy(p, [FactorSpec(scope=[0], context=ctx, weight=-1.0)], 1)
    with pytest.raises(ValueError, match="at least one"):
        ComposedEnergy(p, [], 1)
