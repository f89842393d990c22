"""Convex feasible sets with Euclidean projections, their VJPs, and decoders.

Every set projects batches: project() maps a (B, dim) tensor to a (B, dim)
tensor and records a tape node when grads are needed. Exact projections
(simplex, relaxed simplex, box) differentiate through the active set / face
identified by the forward pass; the Birkhoff projection is an alternating
row/column simplex sweep whose backward replays the recorded sweep sequence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels


def _simplex_vjp_rows(g, active):
    """VJP of the simplex projection through its fixed active face."""
    act = active.astype(np.float64)
    cnt = act.sum(axis=1, keepdims=True)
    s = (g * act).sum(axis=1, keepdims=True)
    return (g - s / cnt) * act


class FeasibleSet:
    """Base class; subclasses define dim, projection, residual, vertices."""

    dim = 0

    def project(self, y):
        raise NotImplementedError

    def project_np(self, y):
        """Projection of a raw (B, dim) array, never taped."""
        return self.project(ad.Tensor(np.asarray(y, dtype=np.float64))).data

    def residual(self, y):
        """Per-sample feasibility violation of a (B, dim) array."""
        raise NotImplementedError

    def sample(self, rng, n):
        """n i.i.d. feasible points: uniform box noise projected onto the set."""
        return self.project_np(rng.uniform(0.0, 1.0, size=(n, self.dim)))

    def sample_vertices(self, rng, n):
        raise NotImplementedError


@dataclass
class Simplex(FeasibleSet):
    d: int

    @property
    def dim(self):
        return self.d

    def project(self, y):
        y = ad.as_tensor(y)
        out, active = kernels.project_simplex_rows(y.data)

        def vjp(g):
            return (_simplex_vjp_rows(g, active),)

        return ad.custom_op("project_simplex", out, (y,), vjp)

    def residual(self, y):
        neg = np.maximum(-y, 0.0).max(axis=1)
        return np.maximum(np.abs(y.sum(axis=1) - 1.0), neg)

    def sample_vertices(self, rng, n):
        out = np.zeros((n, self.d))
        out[np.arange(n), rng.integers(0, self.d, size=n)] = 1.0
        return out


@dataclass
class RelaxedSimplex(FeasibleSet):
    """{y in [0,1]^d : sum(y) <= 1}."""

    d: int

    @property
    def dim(self):
        return self.d

    def project(self, y):
        y = ad.as_tensor(y)
        out, active, branch = kernels.project_relaxed_simplex_rows(y.data)

        def vjp(g):
            act = active.astype(np.float64)
            res = g * act
            if branch.any():
                res[branch] = _simplex_vjp_rows(g[branch], active[branch])
            return (res,)

        return ad.custom_op("project_relaxed_simplex", out, (y,), vjp)

    def residual(self, y):
        neg = np.maximum(-y, 0.0).max(axis=1)
        over = np.maximum(y - 1.0, 0.0).max(axis=1)
        ssum = np.maximum(y.sum(axis=1) - 1.0, 0.0)
        return np.maximum(np.maximum(neg, over), ssum)

    def sample_vertices(self, rng, n):
        # vertices are the zero vector and the unit vectors
        out = np.zeros((n, self.d))
        which = rng.integers(-1, self.d, size=n)
        rows = np.nonzero(which >= 0)[0]
        out[rows, which[rows]] = 1.0
        return out


@dataclass
class Box(FeasibleSet):
    d: int
    lo: float = 0.0
    hi: float = 1.0

    @property
    def dim(self):
        return self.d

    def project(self, y):
        return ad.clamp(ad.as_tensor(y), self.lo, self.hi)

    def residual(self, y):
        below = np.maximum(self.lo - y, 0.0).max(axis=1)
        above = np.maximum(y - self.hi, 0.0).max(axis=1)
        return np.maximum(below, above)

    def sample(self, rng, n):
        u = rng.uniform(0.0, 1.0, size=(n, self.d))
        return self.lo + (self.hi - self.lo) * u

    def sample_vertices(self, rng, n):
        bits = rng.integers(0, 2, size=(n, self.d)).astype(np.float64)
        return self.lo + (self.hi - self.lo) * bits


def _birkhoff_residual(x):
    row = np.abs(x.sum(axis=2) - 1.0).max(axis=1)
    col = np.abs(x.sum(axis=1) - 1.0).max(axis=1)
    return np.maximum(row, col)


@dataclass
class Birkhoff(FeasibleSet):
    """Doubly stochastic N x N matrices, flattened row-major to dimension N^2.

    Projection is the alternating row/column simplex sweep with a sweep budget
    and tolerance; non-convergence is reported through the residual, never an
    exception. Each sample stops sweeping as soon as its own residual passes
    the tolerance, so batches behave identically to one-at-a-time calls.
    """

    n: int
    sweeps: int = 50
    tol: float = 1e-3

    @property
    def dim(self):
        return self.n * self.n

    def project(self, y):
        y = ad.as_tensor(y)
        want_masks = ad.active_tape() is not None and y.requires_grad
        bsz = y.data.shape[0]
        nn = self.n
        x = y.data.reshape(bsz, nn, nn).copy()
        masks = []
        act = np.arange(bsz)
        for _ in range(self.sweeps):
            done = _birkhoff_residual(x[act]) < self.tol
            act = act[~done]
            if act.size == 0:
                break
            sub = x[act]
            rows, ra = kernels.project_simplex_rows(
                np.ascontiguousarray(sub.reshape(-1, nn))
            )
            sub = rows.reshape(-1, nn, nn)
            cols, ca = kernels.project_simplex_rows(
                np.ascontiguousarray(sub.transpose(0, 2, 1).reshape(-1, nn))
            )
            sub = cols.reshape(-1, nn, nn).transpose(0, 2, 1)
            x[act] = sub
            if want_masks:
                masks.append((act.copy(), ra.reshape(-1, nn, nn), ca.reshape(-1, nn, nn)))

        self.last_residual = _birkhoff_residual(x)
        out = x.reshape(bsz, nn * nn)

        def vjp(g):
            gr = g.reshape(bsz, nn, nn).copy()
            for idx, ra, ca in reversed(masks):
                sub = gr[idx]
                gcols = _simplex_vjp_rows(
                    np.ascontiguousarray(sub.transpose(0, 2, 1).reshape(-1, nn)),
                    ca.reshape(-1, nn),
                )
                sub = gcols.reshape(-1, nn, nn).transpose(0, 2, 1)
                grows = _simplex_vjp_rows(
                    np.ascontiguousarray(sub.reshape(-1, nn)), ra.reshape(-1, nn)
                )
                gr[idx] = grows.reshape(-1, nn, nn)
            return (gr.reshape(bsz, nn * nn),)

        return ad.custom_op("project_birkhoff", out, (y,), vjp)

    def residual(self, y):
        bsz = y.shape[0]
        return _birkhoff_residual(y.reshape(bsz, self.n, self.n))

    def sample_vertices(self, rng, n):
        out = np.zeros((n, self.n * self.n))
        for i in range(n):
            perm = rng.permutation(self.n)
            m = np.zeros((self.n, self.n))
            m[np.arange(self.n), perm] = 1.0
            out[i] = m.ravel()
        return out


@dataclass
class Product(FeasibleSet):
    """Cartesian product of blocks over disjoint contiguous index ranges."""

    blocks: list  # list of (FeasibleSet, offset)

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("product needs at least one block")
        # keep blocks in offset order so concat reproduces the flat layout
        self.blocks = sorted(self.blocks, key=lambda t: t[1])
        pos = 0
        for blk, off in self.blocks:
            if off != pos:
                raise ValueError("product blocks must be disjoint and cover all indices")
            pos = off + blk.dim
        self._dim = pos
        first = self.blocks[0][0]
        self._uniform_simplex = all(
            isinstance(blk, Simplex) and blk.d == first.d for blk, _ in self.blocks
        ) and isinstance(first, Simplex)

    @property
    def dim(self):
        return self._dim

    def project(self, y):
        y = ad.as_tensor(y)
        if self._uniform_simplex:
            d = self.blocks[0][0].d
            bsz = y.data.shape[0]
            flat = ad.reshape(y, (bsz * len(self.blocks), d))
            proj = self.blocks[0][0].project(flat)
            return ad.reshape(proj, (bsz, self._dim))
        parts = []
        for blk, off in self.blocks:
            parts.append(blk.project(ad.narrow(y, 1, off, blk.dim)))
        return ad.concat(parts, axis=1)

    def residual(self, y):
        res = np.zeros(y.shape[0])
        for blk, off in self.blocks:
            res = np.maximum(res, blk.residual(y[:, off : off + blk.dim]))
        return res

    def sample_vertices(self, rng, n):
        return np.concatenate(
            [blk.sample_vertices(rng, n) for blk, _ in self.blocks], axis=1
        )


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def decode(y, feasible, task_kind):
    """Map a relaxed point to a discrete assignment.

    nqueens: per-row argmax column of the N x N heatmap.
    coloring: per-node argmax color over the node's simplex block.
    sat3: threshold at 0.5 to get the anti-assignment, then negate all bits.
    Ties break to the lowest index.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if task_kind == "nqueens":
        n = feasible.n
        return y.reshape(n, n).argmax(axis=1)
    if task_kind == "coloring":
        return np.array(
            [
                y[off : off + blk.dim].argmax()
                for blk, off in sorted(feasible.blocks, key=lambda t: t[1])
            ],
            dtype=np.int64,
        )
    if task_kind == "sat3":
        anti = y > 0.5
        return (~anti).astype(np.int64)
    raise ValueError(f"unknown task kind {task_kind!r}")
