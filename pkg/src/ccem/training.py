"""Two-stage trainer for the factor net.

Phase 1 shapes each factor alone: InfoNCE over one positive and J structured
negatives sharing the factor's context, plus a small energy-magnitude
regularizer on the positive. Phase 2 refines the composed energy through the
solver itself: run S warm starts without a tape, rerun the winner under a
tape, and descend a regression + energy-margin + hard-negative loss through
the unrolled trajectory.
"""

import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from ccem import autodiff as ad
from ccem import kernels, picnn, solvers
from ccem.autodiff import Tensor
from ccem.energy import ComposedEnergy


@dataclass
class Phase1Config:
    epochs: int = 1000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    negatives: int = 0  # 0 means the task's default
    lambda_e: float = 0.01
    batch: int = 64
    seed: int = 0
    layers: int = 3
    width: int = 128
    activation: str = "softplus"
    log_path: str = ""

    def __post_init__(self):
        if self.negatives < 0:
            raise ValueError("negatives must be >= 0")
        if self.lambda_e < 0:
            raise ValueError("lambda_e must be >= 0")


@dataclass
class Phase2Config:
    epochs: int = 300
    unroll_steps: int = 140
    train_starts: int = 4
    eval_starts: int = 64
    hard_negatives: int = 12
    alpha: float = 1.0
    beta: float = 0.25
    gamma: float = 0.25
    rho: float = 0.1
    rho_h: float = 0.1
    lr: float = 1e-3
    weight_decay: float = 1e-4
    # training-time unroll anneals its steps higher than the eval solver so
    # the endpoint stays responsive to landscape changes; the identity
    # preconditioner keeps that endpoint sensitive to the gradient field's
    # scale, which the regression term needs (adam normalizes it away)
    eta0: float = 0.1
    eta_end: float = 0.02
    method: str = "gd"
    clip_norm: float = 10.0
    seed: int = 0
    log_path: str = ""

    def __post_init__(self):
        if self.hard_negatives < 0:
            raise ValueError("hard_negatives must be >= 0")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be >= 0")
        if min(self.rho, self.rho_h) < 0:
            raise ValueError("margins must be >= 0")


# ---------------------------------------------------------------------------
# losses


def nce_loss(tv, ctx, positive, negatives, lambda_e=0.0):
    """Contrastive loss over one positive and J negatives per context row.

    positive is (B, D), negatives (B, J, D); every sample's negatives share
    its context. Log-sum-exp is shifted by a detached per-sample max, which
    leaves value and gradient exact.
    """
    positive = np.asarray(positive, dtype=np.float64)
    negatives = np.asarray(negatives, dtype=np.float64)
    bsz, j = negatives.shape[0], negatives.shape[1]
    if j == 0:
        raise ValueError("need at least one negative")
    f_pos = picnn.factor_values(tv, ctx, Tensor(positive))  # (B,)
    # j-major flattening matches the context tiling of repeated row blocks
    flat = negatives.transpose(1, 0, 2).reshape(j * bsz, -1)
    f_neg = ad.reshape(
        picnn.factor_values(tv, ctx.tiled(j), Tensor(flat)), (j, bsz)
    )
    z_pos = ad.neg(f_pos)
    z_neg = ad.neg(f_neg)
    shift = np.maximum(z_pos.data, z_neg.data.max(axis=0))  # constant, (B,)
    s_pos = ad.texp(ad.sub(z_pos, Tensor(shift)))
    s_neg = ad.tsum(ad.texp(ad.sub(z_neg, Tensor(np.broadcast_to(shift, (j, bsz)).copy()))), axis=0)
    lse = ad.add(ad.tlog(ad.add(s_pos, s_neg)), Tensor(shift))
    loss = ad.mean(ad.sub(lse, z_pos))
    if lambda_e:
        loss = ad.add(loss, ad.mul(ad.mean(f_pos), lambda_e))
    return loss


def board_loss(ev, x_hat, x_star, hard_pool, cfg):
    """Regression + energy margin + hard-negative margin, all through ev.

    x_hat is the taped (1, d) solver output; x_star and the pool rows are
    plain arrays treated as constants. Returns (scalar tensor, term floats).
    """
    xs = Tensor(np.asarray(x_star, dtype=np.float64).reshape(1, -1))
    reg = ad.tsum(ad.square(ad.sub(x_hat, xs)))
    e_hat = ev.energy(x_hat)
    e_star = ev.energy(xs)
    margin = ad.tsum(ad.softplus(ad.add(ad.sub(e_star, e_hat), cfg.rho)))
    pool = None if hard_pool is None else np.asarray(hard_pool, dtype=np.float64)
    if pool is not None and pool.size and cfg.gamma > 0:
        e_pool = ev.energy(Tensor(pool))
        e_star_rows = ad.tile_rows(e_star, len(pool))
        hard = ad.mean(ad.softplus(ad.add(ad.sub(e_star_rows, e_pool), cfg.rho_h)))
    else:
        if cfg.gamma > 0:
            warnings.warn("hard pool is empty; the hard-negative term is zero")
        hard = Tensor(np.zeros(()))
    loss = ad.add(
        ad.add(ad.mul(reg, cfg.alpha), ad.mul(margin, cfg.beta)),
        ad.mul(hard, cfg.gamma),
    )
    terms = {
        "regression": float(reg.data),
        "margin": float(margin.data),
        "hard": float(hard.data),
    }
    return loss, terms


def sample_negatives(task, rng, batch=1, j=0):
    """Task-dispatched negative proposals; returns the (B, J, D) block."""
    _, _, negs = task.sample_batch(rng, batch, j or task.NEGATIVES)
    return negs


# ---------------------------------------------------------------------------
# optimizer plumbing


class AdamWState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays.items()}
        self.t = 0

    def step(self, params, grads, lr, wd):
        self.t += 1
        for k in sorted(params.arrays):
            g = grads.get(k)
            if g is None:
                continue
            # 1-d views keep scalar parameters (0-d arrays) kernel-friendly
            kernels.adamw_update(
                params.arrays[k].reshape(-1),
                np.asarray(g, dtype=np.float64).reshape(-1),
                self.m[k].reshape(-1), self.v[k].reshape(-1),
                lr, 0.9, 0.999, 1e-8, wd, self.t,
            )


def clip_global_norm(grads, max_norm):
    """Scale the whole gradient dict so its global norm is at most max_norm."""
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            if g is not None:
                g *= scale
    return total


def _log_line(path, record):
    if path:
        with open(path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


# ---------------------------------------------------------------------------
# phase 1


@dataclass
class Phase1Result:
    params: picnn.PicnnParams
    losses: np.ndarray
    smoke_ok: bool
    initial: float
    final: float


def phase1_train(params, task, cfg):
    """Per-factor contrastive pretraining; mutates params in place.

    One epoch is one AdamW step on a fresh batch of factor samples. The
    smoke flag compares ten-epoch head/tail means; tasks whose negative
    families include in-hull points (queens mixtures) floor above zero by
    convexity, so the flag is diagnostic, not an error.
    """
    rng = np.random.default_rng(cfg.seed)
    j = cfg.negatives or task.NEGATIVES
    state = AdamWState(params)
    losses = np.zeros(cfg.epochs)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        ctx_rows, pos, negs = task.sample_batch(rng, cfg.batch, j, params=params)
        tape = ad.Tape()
        detail = ""
        try:
            with tape:
                tv = params.tensor_view()
                ctx = picnn.context_path(tv, Tensor(ctx_rows), params.activation)
                loss = nce_loss(tv, ctx, pos, negs, cfg.lambda_e)
            if not np.isfinite(loss.data):
                detail = f"loss={float(loss.data)!r}"
        except ad.NonFiniteError as err:
            detail = repr(err)
        if detail:
            raise RuntimeError(
                f"phase 1 diverged at epoch {epoch}: {detail}, "
                f"recent losses {losses[max(0, epoch - 5) : epoch].tolist()}"
            )
        grads = ad.backward(loss, tape)
        gdict = {k: grads.get(t) for k, t in tv.items()}
        state.step(params, gdict, cfg.lr, cfg.weight_decay)
        losses[epoch] = float(loss.data)
        _log_line(cfg.log_path, {
            "epoch": epoch, "phase": 1, "loss": losses[epoch],
            "wall_clock": time.perf_counter() - t0,
        })
    head = int(min(10, cfg.epochs))
    initial = float(losses[:head].mean())
    final = float(losses[-head:].mean())
    return Phase1Result(
        params=params, losses=losses,
        smoke_ok=final < 0.3 * initial, initial=initial, final=final,
    )


# ---------------------------------------------------------------------------
# phase 2


@dataclass
class Phase2Instance:
    factors: list
    dim: int
    feasible: object
    x_star: np.ndarray
    name: str = ""


def queens_phase2_dataset(n=8):
    """The single-board refinement set: one n x n instance, one solution."""
    from ccem.tasks import nqueens as nq

    return [
        Phase2Instance(
            factors=nq.instance(n),
            dim=n * n,
            feasible=nq.feasible(n),
            x_star=nq.board_from_cols(nq.canonical_solution(n), n),
            name=f"queens-{n}",
        )
    ]


@dataclass
class Phase2Result:
    params: picnn.PicnnParams
    losses: np.ndarray
    terms: list = field(default_factory=list)
    winners: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)


def _solver_cfg(cfg, seed, start, record):
    return solvers.SolverConfig(
        steps=cfg.unroll_steps, eta0=cfg.eta0, eta_end=cfg.eta_end,
        method=cfg.method, num_starts=1, seed=seed, start_offset=start,
        record_iterates=record,
    )


def _hard_pool(cands, winner, x_star, h, rng):
    """Last h winner iterates, every warm start, one start/target mixture."""
    rows = [cands[winner].iterates[0][-h:]] if h > 0 else []
    rows.append(np.stack([c.y0[0] for c in cands]))
    lam = rng.uniform(0.2, 0.8)
    rows.append((lam * cands[winner].y0[0] + (1 - lam) * x_star)[None, :])
    return np.concatenate(rows, axis=0)


def phase2_train(params, dataset, cfg):
    """Refine through the unrolled solver; mutates params in place.

    Per instance and epoch: S sequential no-tape rollouts score the warm
    starts, the winner is rerun under a tape with identical shapes and must
    reproduce its energy bit for bit, and board_loss descends through that
    trajectory with clipped AdamW.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamWState(params)
    losses = np.zeros(cfg.epochs)
    result = Phase2Result(params=params, losses=losses)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        epoch_losses = []
        epoch_terms = []
        for inst_id, inst in enumerate(dataset):
            run_seed = cfg.seed + 7919 * epoch + 104729 * inst_id
            comp = ComposedEnergy(params, inst.factors, inst.dim)
            ev = comp.evaluator()
            cands = []
            for i in range(cfg.train_starts):
                scfg = _solver_cfg(cfg, run_seed, i, record=True)
                cands.append(solvers.solve(ev, inst.feasible, scfg))
            energies = [c.energy for c in cands]
            winner = int(np.argmin(energies))
            if not np.isfinite(energies[winner]):
                raise RuntimeError(
                    f"phase 2 diverged at epoch {epoch}: every start failed"
                )
            tape = ad.Tape()
            with tape:
                comp_t = ComposedEnergy(params, inst.factors, inst.dim)
                ev_t = comp_t.evaluator()
                res_t = solvers.solve(
                    ev_t, inst.feasible, _solver_cfg(cfg, run_seed, winner, record=False)
                )
                if res_t.energy != energies[winner]:
                    raise AssertionError(
                        "taped rerun must reproduce the winning rollout: "
                        f"{res_t.energy!r} vs {energies[winner]!r}"
                    )
                pool = _hard_pool(cands, winner, inst.x_star, cfg.hard_negatives, rng)
                loss, terms = board_loss(ev_t, res_t.y_tensor, inst.x_star, pool, cfg)
            if not np.isfinite(loss.data):
                raise RuntimeError(
                    f"phase 2 diverged at epoch {epoch}: loss={loss.data!r}"
                )
            grads = ad.backward(loss, tape)
            gdict = {k: grads.get(t) for k, t in ev_t.tv.items()}
            gnorm = clip_global_norm(gdict, cfg.clip_norm)
            state.step(params, gdict, cfg.lr, cfg.weight_decay)
            epoch_losses.append(float(loss.data))
            epoch_terms.append(terms)
            result.winners.append(winner)
            result.grad_norms.append(gnorm)
        losses[epoch] = float(np.mean(epoch_losses))
        mean_terms = {
            k: float(np.mean([t[k] for t in epoch_terms])) for k in epoch_terms[0]
        }
        result.terms.append(mean_terms)
        _log_line(cfg.log_path, {
            "epoch": epoch, "phase": 2, "loss": losses[epoch],
            "terms": mean_terms, "wall_clock": time.perf_counter() - t0,
        })
    return result
