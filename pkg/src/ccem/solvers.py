"""Projected first-order minimization of composed energies.

Each start draws its own random stream keyed by (seed, start index): first the
warm start, then the per-trajectory tiebreak noise. Streams never depend on
how many starts run together, so start i is the same start in every run that
shares the seed, and restricting attention to the first k candidates of a run
is the same experiment as a k-start run.

All iterate math goes through the op layer. Run it under an active tape (one
start at a time) and the whole unrolled solve becomes differentiable in the
energy parameters; run it without a tape and the same code is the fast path.

pem_solve is the population variant: the same per-particle streams and update
ops, plus a resampling step between rounds driven by a separate stream. With
one particle and zero exploration noise nothing extra executes, so its result
is bit-identical to solve's.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RESAMPLE_STREAM = 0x72736D70  # tags the resampling stream apart from starts


@dataclass
class SolverConfig:
    steps: int = 140
    eta0: float = 0.05
    eta_end: float = 0.005
    method: str = "adam"  # adam | gd
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tiebreak_noise: float = 1e-4
    num_starts: int = 8
    seed: int = 0
    start_offset: int = 0
    record_trajectory: bool = False
    record_iterates: bool = False


def step_sizes(cfg):
    """Cosine schedule from eta0 down to eta_end over cfg.steps steps."""
    if cfg.steps <= 1:
        return np.full(max(cfg.steps, 0), cfg.eta0)
    t = np.arange(cfg.steps)
    return cfg.eta_end + 0.5 * (cfg.eta0 - cfg.eta_end) * (1.0 + np.cos(np.pi * t / (cfg.steps - 1)))


def start_stream(seed, index):
    """The random stream owned by one start/particle."""
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def sample_warm_starts(feasible, cfg, n=None):
    """Feasible warm starts, one per stream: uniform box noise projected in."""
    n = cfg.num_starts if n is None else n
    raw = np.stack(
        [
            start_stream(cfg.seed, cfg.start_offset + i).uniform(0.0, 1.0, size=feasible.dim)
            for i in range(n)
        ]
    )
    return feasible.project_np(raw)


@dataclass
class Candidate:
    start_id: int
    y: np.ndarray
    energy: float
    failed: bool = False


@dataclass
class SolveResult:
    y: np.ndarray
    energy: float
    start_id: int
    candidates: list
    y0: np.ndarray
    trajectory: np.ndarray = None  # (num_starts, steps+1, 2): energy, residual
    iterates: np.ndarray = None  # (num_starts, steps+1, dim) when recorded
    y_tensor: Tensor = None  # final iterate on tape, single-start taped runs

    @property
    def energies(self):
        return np.array([c.energy for c in self.candidates])

    def best_of_prefix(self, k):
        """Best energy among the first k candidates, as if only they ran."""
        sub = [c for c in self.candidates[:k] if not c.failed]
        return min(c.energy for c in sub) if sub else np.inf


def _draw_starts_and_noise(feasible, cfg, runs):
    y0s, xis = [], []
    for run_seed in runs:
        for i in range(cfg.num_starts):
            rng = start_stream(run_seed, cfg.start_offset + i)
            y0s.append(feasible.project_np(rng.uniform(0.0, 1.0, size=(1, feasible.dim)))[0])
            xis.append(rng.uniform(-1.0, 1.0, size=feasible.dim) * cfg.tiebreak_noise)
    return np.stack(y0s), np.stack(xis)


def _minimize(ev, feasible, cfg, y0, xi):
    """Shared inner loop: projected updates on a (R, dim) batch of iterates.

    Returns the final iterate tensor, per-row failure flags, and optionally
    the recorded (energy, residual) trajectory. Rows whose energy or gradient
    goes non-finite freeze at their last good value and are marked failed.
    """
    taped = ad.active_tape() is not None
    rows = y0.shape[0]
    etas = step_sizes(cfg)
    y = Tensor(y0.copy())
    noise = Tensor(xi) if np.any(xi != 0) else None
    adam = cfg.method == "adam"
    if cfg.method not in ("adam", "gd"):
        raise ValueError(f"unknown method {cfg.method!r}")
    m = v = None
    failed = np.zeros(rows, dtype=bool)
    traj = np.zeros((rows, cfg.steps + 1, 2)) if cfg.record_trajectory else None
    iters = [y0.copy()] if cfg.record_iterates else None

    for t, eta in enumerate(etas):
        e, g = ev.energy_and_grad(y)
        if not taped:
            bad = ~np.isfinite(e.data)
            bad |= ~np.isfinite(g.data).all(axis=1)
            if bad.any():
                failed |= bad
                g.data[failed] = 0.0
        if traj is not None:
            traj[:, t, 0] = e.data
            traj[:, t, 1] = feasible.residual(y.data)
        if noise is not None:
            g = ad.add(g, noise)
        if adam:
            if m is None:
                m = ad.mul(g, 1.0 - cfg.beta1)
                v = ad.mul(ad.square(g), 1.0 - cfg.beta2)
            else:
                m = ad.add(ad.mul(m, cfg.beta1), ad.mul(g, 1.0 - cfg.beta1))
                v = ad.add(ad.mul(v, cfg.beta2), ad.mul(ad.square(g), 1.0 - cfg.beta2))
            mhat = ad.mul(m, 1.0 / (1.0 - cfg.beta1 ** (t + 1)))
            vhat = ad.mul(v, 1.0 / (1.0 - cfg.beta2 ** (t + 1)))
            step = ad.div(mhat, ad.add(ad.sqrt(vhat), cfg.eps))
        else:
            step = g
        y_next = feasible.project(ad.sub(y, ad.mul(step, eta)))
        if not taped and failed.any():
            y_next.data[failed] = y.data[failed]
        y = y_next
        if iters is not None:
            iters.append(y.data.copy())

    e_fin = ev.energy(y)
    if not taped:
        bad = ~np.isfinite(e_fin.data)
        if bad.any():
            failed |= bad
    if traj is not None:
        traj[:, cfg.steps, 0] = e_fin.data
        traj[:, cfg.steps, 1] = feasible.residual(y.data)
    iters = np.stack(iters).transpose(1, 0, 2) if iters is not None else None
    return y, e_fin, failed, traj, iters


def batch_solve(ev, feasible, cfg, run_seeds):
    """Solve several runs in one batch; each run gets cfg.num_starts starts.

    Runs share the evaluator (same instance/parameters) but own their seeds.
    Returns one SolveResult per run seed.
    """
    s = cfg.num_starts
    y0, xi = _draw_starts_and_noise(feasible, cfg, run_seeds)
    if ad.active_tape() is not None:
        y, e_fin, failed, traj, iters = _minimize(ev, feasible, cfg, y0, xi)
    else:
        with ad.finite_checks_disabled():
            y, e_fin, failed, traj, iters = _minimize(ev, feasible, cfg, y0, xi)

    results = []
    for r in range(len(run_seeds)):
        sl = slice(r * s, (r + 1) * s)
        cands = [
            Candidate(
                start_id=i,
                y=y.data[r * s + i].copy(),
                energy=float(e_fin.data[r * s + i]) if not failed[r * s + i] else np.inf,
                failed=bool(failed[r * s + i]),
            )
            for i in range(s)
        ]
        best = int(np.argmin([c.energy for c in cands]))
        results.append(
            SolveResult(
                y=cands[best].y,
                energy=cands[best].energy,
                start_id=best,
                candidates=cands,
                y0=y0[sl].copy(),
                trajectory=None if traj is None else traj[sl],
                iterates=None if iters is None else iters[sl],
                y_tensor=y if (len(run_seeds) == 1 and s == 1) else None,
            )
        )
    return results


def solve(ev, feasible, cfg):
    """Multi-start projected descent; best candidate wins, ties to the
    earliest start."""
    return batch_solve(ev, feasible, cfg, [cfg.seed])[0]


def pem_solve(ev, feasible, cfg, particles=8, rounds=4, explore=0.02):
    """Population variant: rounds of descent with multinomial resampling.

    Particles reuse the solver's per-start streams; between rounds, particles
    are resampled in proportion to softmax(-energy) and jittered with
    exploration noise drawn from a dedicated stream, then descent continues
    with the optimizer state carried along the selected particles.
    """
    cfg = replace(cfg, num_starts=particles)
    y0, xi = _draw_starts_and_noise(feasible, cfg, [cfg.seed])
    ancestry = np.arange(particles)
    resample_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, RESAMPLE_STREAM)))

    bounds = np.linspace(0, cfg.steps, rounds + 1).astype(int)
    etas = step_sizes(cfg)
    y = y0
    m = np.zeros_like(y0)
    v = np.zeros_like(y0)
    failed = np.zeros(particles, dtype=bool)

    with ad.finite_checks_disabled():
        for r in range(rounds):
            for t in range(bounds[r], bounds[r + 1]):
                ty = Tensor(y)
                e, g = ev.energy_and_grad(ty)
                gg = g.data
                bad = ~np.isfinite(e.data) | ~np.isfinite(gg).all(axis=1)
                if bad.any():
                    failed |= bad
                    gg[failed] = 0.0
                gg = gg + xi if np.any(xi != 0) else gg
                if cfg.method == "adam":
                    m = cfg.beta1 * m + (1.0 - cfg.beta1) * gg
                    v = cfg.beta2 * v + (1.0 - cfg.beta2) * (gg * gg)
                    mhat = m * (1.0 / (1.0 - cfg.beta1 ** (t + 1)))
                    vhat = v * (1.0 / (1.0 - cfg.beta2 ** (t + 1)))
                    step = mhat / (np.sqrt(vhat) + cfg.eps)
                else:
                    step = gg
                y_next = feasible.project_np(y - step * etas[t])
                y_next[failed] = y[failed]
                y = y_next
            if r < rounds - 1:
                e_now = ev.energy(Tensor(y)).data
                a = np.where(failed, np.inf, e_now)
                shifted = -(a - a.min())
                wts = np.exp(shifted)
                wts /= wts.sum()
                sel = resample_rng.choice(particles, size=particles, p=wts)
                y = y[sel].copy()
                m, v = m[sel].copy(), v[sel].copy()
                failed = failed[sel].copy()
                ancestry = ancestry[sel]
                if explore != 0.0:
                    y = feasible.project_np(
                        y + explore * resample_rng.normal(size=y.shape)
                    )
        e_fin = ev.energy(Tensor(y)).data

    cands = []
    for i in range(particles):
        cands.append(
            Candidate(
                start_id=int(ancestry[i]),
                y=y[i].copy(),
                energy=float(e_fin[i]) if not failed[i] else np.inf,
                failed=bool(failed[i]),
            )
        )
    best = int(np.argmin([c.energy for c in cands]))
    return SolveResult(
        y=cands[best].y,
        energy=cands[best].energy,
        start_id=cands[best].start_id,
        candidates=cands,
        y0=y0,
    )


def resample_weights(energies):
    """softmax(-E): the probability each particle survives resampling."""
    e = np.asarray(energies, dtype=np.float64)
    shifted = -(e - e.min())
    w = np.exp(shifted)
    return w / w.sum()


def write_trajectory_csv(path, result):
    """One row per (start, step): energy and feasibility residual."""
    if result.trajectory is None:
        raise ValueError("solve was run without record_trajectory")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["start_id", "step", "energy", "feasibility_residual"])
        for i, tr in enumerate(result.trajectory):
            for t in range(tr.shape[0]):
                wr.writerow([i, t, repr(float(tr[t, 0])), repr(float(tr[t, 1]))])
