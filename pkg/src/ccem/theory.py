"""Executable checks for the structural claims behind the method.

Four small labs:
  * a one-dimensional nonconvex landscape whose perturbed double well traps
    gradient descent in a strictly suboptimal basin,
  * a tiny certificate toy where a margin condition decides whether bounded
    factor perturbations can move minimizers off the valid set,
  * first-order optimality certificates for convex energies over a feasible
    set (inner products against feasible directions),
  * projected-gradient rate bounds on random quadratics, asserted as exact
    inequalities.

Everything here is closed-form or brute-force verifiable; no training.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np


# ---------------------------------------------------------------------------
# spurious minimum in one dimension


@dataclass
class OneDimLandscape:
    """E_alpha(y) = (y^2 - 1)^2 + alpha (y - 1)^2 on [-2, 2].

    At alpha = 0 both wells are global minima; any alpha > 0 keeps the well
    near -1 a strict local minimum with positive energy while y = 1 stays
    exactly at zero.
    """

    alpha: float = 0.1
    lo: float = -2.0
    hi: float = 2.0

    def energy(self, y):
        return (y * y - 1.0) ** 2 + self.alpha * (y - 1.0) ** 2

    def grad(self, y):
        return 4.0 * y * (y * y - 1.0) + 2.0 * self.alpha * (y - 1.0)

    def curvature(self, y):
        return 12.0 * y * y - 4.0 + 2.0 * self.alpha


@dataclass
class SpuriousMinimum:
    y_bar: float
    energy: float
    curvature: float
    spurious: bool  # strict local min with energy above the global one
    basin_ok: bool  # all grid starts near y_bar converged back to it
    alpha: float


def find_spurious_minimum(alpha, grid=50, eta=0.01, tol=1e-6):
    """Locate the left well of E_alpha and verify it traps gradient descent.

    Bisection on E' over [-1.5, -0.5] (E' is negative at the left end and
    positive at the right end for alpha <= 0.5, so the bracket holds exactly
    one root). Then gradient descent from a grid of starts around the root
    must converge back to it. alpha = 0 is the degenerate boundary case where
    the left well is also global; it is reported with spurious=False.
    """
    if alpha < 0.0 or alpha > 0.5:
        raise ValueError(f"alpha={alpha} outside the perturbation regime [0, 0.5]")
    land = OneDimLandscape(alpha)
    a, b = -1.5, -0.5
    fa, fb = land.grad(a), land.grad(b)
    if not (fa < 0.0 < fb):
        raise ValueError(f"no bracketed root of E' in [{a}, {b}] for alpha={alpha}")
    while b - a > 1e-12:
        m = 0.5 * (a + b)
        if land.grad(m) < 0.0:
            a = m
        else:
            b = m
    y_bar = 0.5 * (a + b)
    curv = land.curvature(y_bar)
    e_bar = land.energy(y_bar)
    # descend from a grid of nearby starts; all must fall back into the well
    starts = np.linspace(y_bar - 0.2, y_bar + 0.2, grid)
    y = starts.copy()
    for _ in range(200_000):
        step = eta * land.grad(y)
        y = np.clip(y - step, land.lo, land.hi)
        if np.max(np.abs(step)) < 1e-13:
            break
    basin_ok = bool(np.max(np.abs(y - y_bar)) < tol)
    spurious = bool(curv > 0.0 and e_bar > land.energy(1.0) + 1e-9)
    return SpuriousMinimum(
        y_bar=float(y_bar),
        energy=float(e_bar),
        curvature=float(curv),
        spurious=spurious,
        basin_ok=basin_ok,
        alpha=float(alpha),
    )


# ---------------------------------------------------------------------------
# certificate margin toy


@dataclass
class CertificateToy:
    """Two one-hot variables of two choices each, tied like a 2x2 assignment.

    The candidate set is all of {0,1}^4 read as (a1, a2, b1, b2); the valid
    set keeps each variable one-hot and the two choices distinct, i.e. the
    two 2x2 permutation matrices. Certificates are squared sum-to-one
    penalties over the two variable blocks and the two shared choices.
    """

    weights: tuple = (1.0, 1.0, 1.0, 1.0)

    points: np.ndarray = field(init=False)
    valid_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.points = np.array(list(itertools.product((0.0, 1.0), repeat=4)))
        self.valid_mask = np.array([self._is_valid(p) for p in self.points])

    @staticmethod
    def _is_valid(p):
        a1, a2, b1, b2 = p
        return a1 + a2 == 1 and b1 + b2 == 1 and a1 + b1 == 1 and a2 + b2 == 1

    @staticmethod
    def factor_matrix(points):
        """(num_points, 4) matrix of certificate values g_k at each point."""
        a1, a2, b1, b2 = points.T
        return np.stack(
            [
                (a1 + a2 - 1.0) ** 2,
                (b1 + b2 - 1.0) ** 2,
                (a1 + b1 - 1.0) ** 2,
                (a2 + b2 - 1.0) ** 2,
            ],
            axis=1,
        )

    def composed(self, g=None):
        g = self.factor_matrix(self.points) if g is None else g
        return g @ np.asarray(self.weights)

    @property
    def margin(self):
        G = self.composed()
        return float(G[~self.valid_mask].min() - G[self.valid_mask].min())


@dataclass
class MarginCheckResult:
    ok: bool
    margin: float
    epsilon: float
    weight_sum: float
    threshold: float  # 2 eps sum(w), compared against the margin
    minimizers_valid: bool


def certificate_margin_check(toy, epsilon, adversarial=True):
    """Perturb each certificate by at most epsilon and inspect the minimizers.

    The adversarial perturbation lowers every factor on the worst invalid
    point and raises it on the valid set, the exact worst case of the
    2 eps sum(w) < margin condition. Returns whether all minimizers of the
    perturbed composed energy remain valid, together with both sides of the
    inequality.
    """
    g = toy.factor_matrix(toy.points)
    w = np.asarray(toy.weights)
    G = toy.composed(g)
    invalid = ~toy.valid_mask
    if adversarial and epsilon > 0.0:
        target = np.argmin(np.where(invalid, G, np.inf))
        pert = np.zeros_like(g)
        pert[target, :] = -epsilon
        pert[toy.valid_mask, :] = epsilon
        g = g + pert
    G_pert = g @ w
    minimizers = np.flatnonzero(G_pert <= G_pert.min() + 1e-12)
    minimizers_valid = bool(toy.valid_mask[minimizers].all())
    threshold = 2.0 * epsilon * float(w.sum())
    return MarginCheckResult(
        ok=minimizers_valid,
        margin=toy.margin,
        epsilon=float(epsilon),
        weight_sum=float(w.sum()),
        threshold=threshold,
        minimizers_valid=minimizers_valid,
    )


# ---------------------------------------------------------------------------
# first-order certificates


def first_order_certificate(energy_fn, grad_fn, y_star, feasible, samples=512, seed=0, vertices=None):
    """Check <grad E(y*), y - y*> >= -eps over sampled feasible points.

    energy_fn maps (R, d) arrays to (R,) energies, grad_fn maps (d,) to (d,).
    Returns the measured eps (max violation of nonnegativity), the optimality
    gap E(y*) - min sampled E, and whether the gap is bounded by eps, which is
    the convexity consequence the certificate is for.
    """
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    pts = feasible.sample(rng, samples)
    if vertices is not None and len(vertices):
        pts = np.concatenate([pts, np.asarray(vertices, dtype=np.float64)], axis=0)
    g = np.asarray(grad_fn(y_star), dtype=np.float64).reshape(-1)
    inner = (pts - y_star[None, :]) @ g
    eps = float(max(0.0, -inner.min()))
    e_star = float(energy_fn(y_star[None, :])[0])
    e_min = float(energy_fn(pts).min())
    gap = e_star - e_min
    return {
        "max_violation": eps,
        "energy_at_y_star": e_star,
        "min_sampled_energy": e_min,
        "optimality_gap": gap,
        "gap_bounded_by_violation": bool(gap <= eps + 1e-9),
        "num_points": int(pts.shape[0]),
    }


# ---------------------------------------------------------------------------
# projected-gradient rate bounds


@dataclass
class QuadraticSpec:
    """0.5 (y - y*)^T A (y - y*) with A PSD of known extreme eigenvalues."""

    dim: int = 10
    mu: float = 0.5
    lip: float = 4.0
    seed: int = 0

    def build(self):
        rng = np.random.default_rng(self.seed)
        q, _ = np.linalg.qr(rng.standard_normal((self.dim, self.dim)))
        if self.dim >= 2:
            evals = rng.uniform(self.mu, self.lip, self.dim)
            evals[0], evals[-1] = self.mu, self.lip
        else:
            evals = np.array([self.lip])
        a = (q * evals) @ q.T
        return 0.5 * (a + a.T), evals


def rate_check(spec, feasible, y_star, y0, T=1000, slack=1e-9):
    """Run projected GD at step 1/L and assert both rate bounds at every t.

    Sublinear: E(y_t) - E(y*) <= L ||y0 - y*||^2 / (2 t) for all t <= T.
    Linear (mu > 0): ||y_t - y*||^2 <= (1 - mu/L)^t ||y0 - y*||^2.
    Returns the worst slack of each bound; negative slack means violation.
    """
    a, _ = spec.build()
    y_star = np.asarray(y_star, dtype=np.float64)
    y = np.asarray(y0, dtype=np.float64).copy()
    r0 = float(np.sum((y - y_star) ** 2))
    lip, mu = spec.lip, spec.mu
    worst_sub = np.inf
    worst_lin = np.inf
    for t in range(1, T + 1):
        grad = a @ (y - y_star)
        y = feasible.project_np((y - grad / lip)[None, :])[0]
        gap = 0.5 * float((y - y_star) @ a @ (y - y_star))
        bound_sub = lip * r0 / (2.0 * t)
        worst_sub = min(worst_sub, bound_sub - gap)
        if mu > 0.0:
            dist = float(np.sum((y - y_star) ** 2))
            bound_lin = (1.0 - mu / lip) ** t * r0
            worst_lin = min(worst_lin, bound_lin - dist)
    ok_sub = bool(worst_sub >= -slack)
    ok_lin = bool(mu == 0.0 or worst_lin >= -slack)
    return {
        "ok": ok_sub and ok_lin,
        "sublinear_ok": ok_sub,
        "linear_ok": ok_lin,
        "worst_sublinear_slack": float(worst_sub),
        "worst_linear_slack": float(worst_lin) if mu > 0.0 else None,
    }


# ---------------------------------------------------------------------------
# report


def theory_report(quad_seeds=100, quad_dim=10, T=1000):
    """Run every lab and return a JSON-ready report dict."""
    from .sets import Box

    report = {"checks": {}}

    spurious = {}
    for alpha in (0.05, 0.1, 0.2):
        r = find_spurious_minimum(alpha)
        spurious[str(alpha)] = {
            "y_bar": r.y_bar,
            "energy": r.energy,
            "curvature": r.curvature,
            "spurious": r.spurious,
            "basin_ok": r.basin_ok,
        }
    report["checks"]["spurious_minimum"] = {
        "ok": all(v["spurious"] and v["basin_ok"] for v in spurious.values()),
        "alphas": spurious,
    }

    toy = CertificateToy()
    wsum = sum(toy.weights)
    ok_zero = certificate_margin_check(toy, 0.0)
    ok_small = certificate_margin_check(toy, 0.4 * toy.margin / wsum)
    broken = certificate_margin_check(toy, 2.0 * toy.margin / wsum)
    report["checks"]["certificate_margin"] = {
        "ok": ok_zero.ok and ok_small.ok and not broken.ok,
        "margin": toy.margin,
        "eps_zero_valid": ok_zero.ok,
        "eps_small_valid": ok_small.ok,
        "eps_large_valid": broken.ok,
    }

    rng = np.random.default_rng(0)
    worst_sub, worst_lin, all_ok = np.inf, np.inf, True
    for s in range(quad_seeds):
        spec = QuadraticSpec(dim=quad_dim, mu=float(rng.uniform(0.1, 1.0)), lip=float(rng.uniform(2.0, 8.0)), seed=s)
        box = Box(quad_dim)
        y_star = rng.uniform(0.3, 0.7, quad_dim)
        y0 = rng.uniform(0.0, 1.0, quad_dim)
        r = rate_check(spec, box, y_star, y0, T=T)
        all_ok = all_ok and r["ok"]
        worst_sub = min(worst_sub, r["worst_sublinear_slack"])
        worst_lin = min(worst_lin, r["worst_linear_slack"])
    report["checks"]["rate_bounds"] = {
        "ok": bool(all_ok),
        "seeds": quad_seeds,
        "worst_sublinear_slack": float(worst_sub),
        "worst_linear_slack": float(worst_lin),
    }

    ok_first = []
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        c = rng.uniform(0.2, 0.8, 6)
        box = Box(6)

        def efn(pts, c=c):
            return np.sum((pts - c) ** 2, axis=1)

        def gfn(y, c=c):
            return 2.0 * (y - c)

        r = first_order_certificate(efn, gfn, c, box, samples=256, seed=seed)
        ok_first.append(r["max_violation"] <= 1e-9 and r["gap_bounded_by_violation"])
    report["checks"]["first_order_certificate"] = {"ok": all(ok_first)}

    report["ok"] = all(c["ok"] for c in report["checks"].values())
    return report
