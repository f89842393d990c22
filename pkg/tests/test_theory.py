import json

import numpy as np
import pytest

from ccem.sets import Box, Simplex
from ccem.theory import (
    CertificateToy,
    OneDimLandscape,
    QuadraticSpec,
    certificate_margin_check,
    find_spurious_minimum,
    first_order_certificate,
    rate_check,
    theory_report,
)


def cubic_root_oracle(alpha):
    # E'(y) = 4y^3 + (2 alpha - 4) y - 2 alpha; companion-matrix roots
    roots = np.roots([4.0, 0.0, 2.0 * alpha - 4.0, -2.0 * alpha])
    real = roots[np.abs(roots.imag) < 1e-12].real
    left = real[real < -0.5]
    assert left.size == 1
    return float(left[0])


def test_left_well_matches_polynomial_roots():
    for alpha in (0.05, 0.1, 0.2, 0.35, 0.45):
        r = find_spurious_minimum(alpha)
        assert r.y_bar == pytest.approx(cubic_root_oracle(alpha), abs=1e-9)


def test_energy_at_one_is_zero_for_every_alpha():
    for alpha in np.linspace(0.0, 0.5, 11):
        assert OneDimLandscape(alpha).energy(1.0) == 0.0


def test_spurious_minimum_traps_gradient_descent():
    for alpha in (0.05, 0.1, 0.2):
        r = find_spurious_minimum(alpha)
        assert r.spurious and r.basin_ok
        assert r.energy > 0.0 and r.curvature > 0.0
        assert -1.0 < r.y_bar < -0.85


def test_alpha_zero_is_degenerate_not_spurious():
    r = find_spurious_minimum(0.0)
    assert r.y_bar == pytest.approx(-1.0, abs=1e-9)
    assert r.energy == pytest.approx(0.0, abs=1e-12)
    assert not r.spurious
    assert r.basin_ok


def test_alpha_outside_regime_rejected():
    with pytest.raises(ValueError):
        find_spurious_minimum(-0.1)
    with pytest.raises(ValueError):
        find_spurious_minimum(0.8)
    # at exactly 0.5 the well merges with the inflection; no strict minimum
    with pytest.raises(ValueError):
        find_spurious_minimum(0.5)


def test_certificate_toy_margin_by_enumeration():
    toy = CertificateToy()
    assert int(toy.valid_mask.sum()) == 2
    G = toy.composed()
    assert G[toy.valid_mask].max() == 0.0
    # no invalid corner can dodge two violated certificates
    assert toy.margin == 2.0


def test_certificate_margin_check_cases():
    toy = CertificateToy()
    wsum = sum(toy.weights)
    assert certificate_margin_check(toy, 0.0).ok
    small = certificate_margin_check(toy, 0.4 * toy.margin / wsum)
    assert small.ok and small.threshold < small.margin
    broken = certificate_margin_check(toy, 2.0 * toy.margin / wsum)
    assert not broken.ok and broken.threshold > broken.margin


def test_first_order_certificate_at_optimum():
    c = np.full(5, 0.4)
    box = Box(5)
    r = first_order_certificate(
        lambda p: np.sum((p - c) ** 2, axis=1), lambda y: 2.0 * (y - c), c, box
    )
    assert r["max_violation"] <= 1e-12
    assert r["gap_bounded_by_violation"]


def test_first_order_certificate_flags_non_optimum():
    c = np.full(5, 0.4)
    box = Box(5)
    y_bad = np.full(5, 0.9)
    r = first_order_certificate(
        lambda p: np.sum((p - c) ** 2, axis=1), lambda y: 2.0 * (y - c), y_bad, box
    )
    assert r["max_violation"] > 0.1
    assert r["optimality_gap"] > 0.0


def test_rate_bounds_isotropic_one_step():
    # A = L I: the first unconstrained step lands exactly on y*
    spec = QuadraticSpec(dim=6, mu=3.0, lip=3.0, seed=1)
    a, evals = spec.build()
    assert np.allclose(evals, 3.0)
    y_star = np.full(6, 0.5)
    y0 = np.array([0.1, 0.9, 0.3, 0.6, 0.2, 0.8])
    y1 = y0 - (a @ (y0 - y_star)) / spec.lip
    assert np.allclose(y1, y_star, atol=1e-12)
    r = rate_check(spec, Box(6), y_star, y0, T=50)
    assert r["ok"]


def test_rate_bounds_hold_on_random_quadratics():
    rng = np.random.default_rng(0)
    for s in range(100):
        spec = QuadraticSpec(
            dim=10,
            mu=float(rng.uniform(0.1, 1.0)),
            lip=float(rng.uniform(2.0, 8.0)),
            seed=s,
        )
        y_star = rng.uniform(0.3, 0.7, 10)
        y0 = rng.uniform(0.0, 1.0, 10)
        r = rate_check(spec, Box(10), y_star, y0, T=1000)
        assert r["ok"], (s, r)
        assert r["worst_sublinear_slack"] >= -1e-9
        assert r["worst_linear_slack"] >= -1e-9


def test_rate_bounds_with_flat_direction():
    spec = QuadraticSpec(dim=8, mu=0.0, lip=5.0, seed=3)
    rng = np.random.default_rng(4)
    y_star = rng.uniform(0.3, 0.7, 8)
    r = rate_check(spec, Box(8), y_star, rng.uniform(0.0, 1.0, 8), T=500)
    assert r["sublinear_ok"] and r["ok"]
    assert r["worst_linear_slack"] is None


def test_rate_bounds_on_simplex():
    spec = QuadraticSpec(dim=5, mu=0.4, lip=3.0, seed=9)
    y_star = np.full(5, 0.2)
    rng = np.random.default_rng(5)
    y0 = Simplex(5).sample(rng, 1)[0]
    r = rate_check(spec, Simplex(5), y_star, y0, T=300)
    assert r["ok"]


def test_theory_report_serializes_and_passes():
    r = theory_report(quad_seeds=5, T=100)
    assert r["ok"]
    parsed = json.loads(json.dumps(r))
    assert set(parsed["checks"]) == {
        "spurious_minimum",
        "certificate_margin",
        "rate_bounds",
        "first_order_certificate",
    }
