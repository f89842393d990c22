"""Composition of factor energies over shared variables.

A problem instance is a list of factors, each with a scope (indices into the
flat decision vector), a context vector, and a nonnegative weight. The total
energy is the weighted sum of factor energies; since every factor is convex
in its scope slice and scopes are gathers (linear maps), the total is convex
in the full vector.

Scopes are padded to the net's scope width with a mask; padded slots read as
zero and the mask is part of the context, so the net can tell real slots from
padding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import picnn
from .autodiff import Tensor


@dataclass
class FactorSpec:
    scope: np.ndarray
    context: np.ndarray
    weight: float = 1.0
    kind: str = ""

    def __post_init__(self):
        self.scope = np.asarray(self.scope, dtype=np.int64).ravel()
        self.context = np.asarray(self.context, dtype=np.float64).ravel()


class ComposedEnergy:
    """Packed factor collection bound to one parameter set."""

    def __init__(self, params, factors, dim):
        if not factors:
            raise ValueError("need at least one factor")
        dmax = params.scope_dim
        cdim = params.ctx_dim
        covered = np.zeros(dim, dtype=bool)
        k = len(factors)
        idx = np.zeros((k, dmax), dtype=np.int64)
        mask = np.zeros((k, dmax))
        ctx = np.zeros((k, cdim))
        w = np.zeros(k)
        for i, f in enumerate(factors):
            s = f.scope
            if s.size == 0 or s.size > dmax:
                raise ValueError(f"factor {i}: scope size {s.size} not in 1..{dmax}")
            if s.min() < 0 or s.max() >= dim:
                raise ValueError(f"factor {i}: scope index out of range for dim {dim}")
            if np.unique(s).size != s.size:
                raise ValueError(f"factor {i}: scope repeats a variable")
            if f.context.size != cdim:
                raise ValueError(
                    f"factor {i}: context size {f.context.size} != net's {cdim}"
                )
            if f.weight < 0:
                raise ValueError(f"factor {i}: negative weight breaks convexity")
            idx[i, : s.size] = s
            mask[i, : s.size] = 1.0
            ctx[i] = f.context
            w[i] = f.weight
            covered[s] = True
        if not covered.all():
            missing = np.nonzero(~covered)[0]
            raise ValueError(f"variables {missing.tolist()} appear in no scope")

        self.params = params
        self.factors = list(factors)
        self.dim = dim
        self.idx = idx
        self.mask = mask
        self.contexts = ctx
        self.weights = w

    @property
    def num_factors(self):
        return len(self.factors)

    def evaluator(self):
        """Fresh evaluator bound to the current parameter values.

        Build it under an active tape to make energies differentiable in the
        parameters; the context path runs once here and is reused for every
        iterate afterwards.
        """
        return Evaluator(self)

    def total_energy(self, y):
        return self.evaluator().energy(ad.as_tensor(np.asarray(y, dtype=np.float64))).data

    def total_grad(self, y):
        _, g = self.evaluator().energy_and_grad(
            ad.as_tensor(np.asarray(y, dtype=np.float64))
        )
        return g.data


class Evaluator:
    """Per-solve cache: context path outputs plus scope packing tensors."""

    def __init__(self, comp):
        self.comp = comp
        self.tv = comp.params.tensor_view()
        self.ctx = picnn.context_path(self.tv, comp.contexts, comp.params.activation)
        self._w = comp.weights
        self._wt = {}  # per-batch tiled weights

    def _tiled_w(self, bsz):
        got = self._wt.get(bsz)
        if got is None:
            got = Tensor(np.tile(self._w, bsz))
            self._wt[bsz] = got
        return got

    def _rows(self, y):
        return ad.gather_scopes(y, self.comp.idx, self.comp.mask)

    def _combine(self, f_rows, bsz):
        per_board = ad.reshape(ad.mul(f_rows, self._tiled_w(bsz)), (bsz, self.comp.num_factors))
        return ad.tsum(per_board, axis=1)

    def energy(self, y):
        """Total energies of a (B, dim) batch, as a (B,) tensor."""
        bsz = y.shape[0]
        f = picnn.factor_values(self.tv, self.ctx.tiled(bsz), self._rows(y))
        return self._combine(f, bsz)

    def energy_and_grad(self, y):
        """Energies and their y-gradients for a (B, dim) batch.

        The gradient comes out of the factor nets' own first-order graph and
        is scattered back through the scope packing, so it is itself taped.
        """
        bsz = y.shape[0]
        f, g_rows = picnn.factor_values_and_grad(self.tv, self.ctx.tiled(bsz), self._rows(y))
        wcol = ad.reshape(self._tiled_w(bsz), (bsz * self.comp.num_factors, 1))
        grad = ad.scatter_rows(ad.mul(g_rows, wcol), self.comp.idx, self.comp.mask, self.comp.dim)
        return self._combine(f, bsz), grad

    def factor_energies(self, y):
        """Unweighted per-factor energies, (B, K), for reporting."""
        bsz = y.shape[0]
        f = picnn.factor_values(self.tv, self.ctx.tiled(bsz), self._rows(y))
        return ad.reshape(f, (bsz, self.comp.num_factors))
