import json

import numpy as np
import pytest

from ccem import autodiff as ad
from ccem import picnn, solvers, training
from ccem.autodiff import Tensor
from ccem.energy import ComposedEnergy, FactorSpec
from ccem.sets import Simplex
from ccem.tasks import nqueens as nq
from ccem.tasks import sat3
from ccem.training import (
    Phase1Config,
    Phase2Config,
    Phase2Instance,
    board_loss,
    clip_global_norm,
    nce_loss,
    phase1_train,
    phase2_train,
    queens_phase2_dataset,
)

# ---------------------------------------------------------------------------
# nce_loss closed-form oracles (energy function stubbed to constants)


class _FlatCtx:
    def tiled(self, reps):
        return self


def run_nce_with_stub(monkeypatch, f_pos_val, f_neg_val, bsz, j, lambda_e=0.0):
    def fake_factor_values(tv, ctx, y):
        rows = y.data.shape[0]
        val = f_pos_val if rows == bsz else f_neg_val
        return Tensor(np.full(rows, float(val)))

    monkeypatch.setattr(training.picnn, "factor_values", fake_factor_values)
    tape = ad.Tape()
    with tape:
        loss = nce_loss(
            tv={}, ctx=_FlatCtx(),
            positive=np.zeros((bsz, 2)), negatives=np.zeros((bsz, j, 2)),
            lambda_e=lambda_e,
        )
    return float(loss.data)


def test_nce_uniform_logits_is_ln4(monkeypatch):
    got = run_nce_with_stub(monkeypatch, 0.0, 0.0, bsz=5, j=3)
    assert got == pytest.approx(np.log(4.0), abs=1e-12)


def test_nce_dominant_positive_below_1e6(monkeypatch):
    got = run_nce_with_stub(monkeypatch, -10.0, 10.0, bsz=4, j=3)
    assert 0 <= got < 1e-6


def test_nce_lambda_term(monkeypatch):
    base = run_nce_with_stub(monkeypatch, 2.0, 2.0, bsz=3, j=4)
    reg = run_nce_with_stub(monkeypatch, 2.0, 2.0, bsz=3, j=4, lambda_e=0.01)
    assert reg - base == pytest.approx(0.01 * 2.0, abs=1e-12)


def test_nce_rejects_zero_negatives():
    params = picnn.init_params(3, 2, width=4, seed=0)
    tape = ad.Tape()
    with tape:
        tv = params.tensor_view()
        ctx = picnn.context_path(tv, Tensor(np.ones((2, 3))), "softplus")
        with pytest.raises(ValueError):
            nce_loss(tv, ctx, np.zeros((2, 2)), np.zeros((2, 0, 2)))


def nce_scalar_of_params(params, ctx_rows, pos, negs, lambda_e=0.01):
    tape = ad.Tape()
    with tape:
        tv = params.tensor_view()
        ctx = picnn.context_path(tv, Tensor(ctx_rows), params.activation)
        loss = nce_loss(tv, ctx, pos, negs, lambda_e)
    return loss, tape, tv


def test_nce_gradient_matches_finite_differences():
    params = picnn.init_params(nq.CTX_DIM, nq.SCOPE_DIM, width=6, seed=3)
    rng = np.random.default_rng(0)
    ctx_rows, pos, negs = nq.sample_batch(rng, 4, 3)
    loss, tape, tv = nce_scalar_of_params(params, ctx_rows, pos, negs)
    grads = ad.backward(loss, tape)

    names = sorted(params.arrays)
    dirs = {k: rng.standard_normal(params.arrays[k].shape) for k in names}
    analytic = sum(
        float((grads.get(tv[k]) * dirs[k]).sum())
        for k in names
        if grads.get(tv[k]) is not None
    )
    h = 1e-6
    vals = []
    for sgn in (+1.0, -1.0):
        shifted = picnn.PicnnParams(
            dict(params.meta), {k: params.arrays[k] + sgn * h * dirs[k] for k in names}
        )
        l2, _, _ = nce_scalar_of_params(shifted, ctx_rows, pos, negs)
        vals.append(float(l2.data))
    fd = (vals[0] - vals[1]) / (2 * h)
    assert abs(analytic - fd) / (abs(fd) + 1e-12) < 1e-4


def test_sample_negatives_dispatch():
    negs = training.sample_negatives(sat3, np.random.default_rng(0), batch=3)
    assert negs.shape == (3, 7, 3)


# ---------------------------------------------------------------------------
# phase 1


def test_phase1_sat_learns_and_smokes():
    params = picnn.init_params(sat3.CTX_DIM, sat3.SCOPE_DIM, width=16, seed=0)
    cfg = Phase1Config(epochs=220, batch=24, seed=1, lr=3e-3)
    out = phase1_train(params, sat3, cfg)
    assert out.losses.shape == (220,)
    assert out.final < 0.3 * out.initial
    assert out.smoke_ok


def test_phase1_determinism_and_logging(tmp_path):
    log = tmp_path / "log.jsonl"
    runs = []
    for _ in range(2):
        params = picnn.init_params(sat3.CTX_DIM, sat3.SCOPE_DIM, width=8, seed=2)
        cfg = Phase1Config(epochs=5, batch=8, seed=3, log_path=str(log))
        out = phase1_train(params, sat3, cfg)
        runs.append({k: v.copy() for k, v in params.arrays.items()})
        assert out.losses.shape == (5,)
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])
    records = [json.loads(ln) for ln in log.read_text().splitlines()]
    assert len(records) == 10
    assert records[0]["phase"] == 1 and "wall_clock" in records[0]


def test_phase1_lr_zero_keeps_params():
    params = picnn.init_params(sat3.CTX_DIM, sat3.SCOPE_DIM, width=8, seed=4)
    before = {k: v.copy() for k, v in params.arrays.items()}
    phase1_train(params, sat3, Phase1Config(epochs=3, batch=8, seed=0, lr=0.0))
    for k, v in params.arrays.items():
        assert np.array_equal(v, before[k])


def test_phase1_nan_aborts_with_diagnostics(monkeypatch):
    params = picnn.init_params(sat3.CTX_DIM, sat3.SCOPE_DIM, width=8, seed=5)

    def poisoned(tv, ctx, y):
        return Tensor(np.full(y.data.shape[0], np.nan))

    monkeypatch.setattr(training.picnn, "factor_values", poisoned)
    with pytest.raises(RuntimeError, match="diverged at epoch 0"):
        phase1_train(params, sat3, Phase1Config(epochs=3, batch=4, seed=0))


class _ToyTask:
    """d=2 single-context factor with a configurable negative."""

    CTX_DIM = 2
    SCOPE_DIM = 2
    NEGATIVES = 1
    ACTIVATION = "softplus"

    def __init__(self, negative):
        self.negative = np.asarray(negative, dtype=np.float64)

    def sample_batch(self, rng, batch, j):
        ctx = np.tile([1.0, 0.5], (batch, 1))
        pos = np.zeros((batch, 2))
        pos[np.arange(batch), rng.integers(0, 2, size=batch)] = 1.0
        negs = np.tile(self.negative, (batch, j, 1))
        return ctx, pos, negs


def _toy_energies(params, points):
    tv = params.tensor_view()
    ctx = picnn.context_path(tv, Tensor(np.array([[1.0, 0.5]])), "softplus")
    out = [
        float(picnn.factor_values(tv, ctx, Tensor(np.array([p]))).data[0])
        for p in points
    ]
    return out


def test_phase1_toy_separates_out_of_hull_negative():
    task = _ToyTask([1.0, 1.0])
    params = picnn.init_params(2, 2, width=16, seed=0)
    phase1_train(params, task, Phase1Config(epochs=300, batch=16, seed=0, lr=3e-3))
    e1, e2, eneg = _toy_energies(params, [[1, 0], [0, 1], [1, 1]])
    assert eneg - max(e1, e2) > 0.5


def test_phase1_toy_midpoint_negative_stays_convex():
    # an in-hull negative cannot rise above both positives: the optimum is flat
    task = _ToyTask([0.5, 0.5])
    params = picnn.init_params(2, 2, width=16, seed=0)
    phase1_train(params, task, Phase1Config(epochs=300, batch=16, seed=0, lr=3e-3))
    e1, e2, emid = _toy_energies(params, [[1, 0], [0, 1], [0.5, 0.5]])
    assert emid <= (e1 + e2) / 2 + 1e-9


# ---------------------------------------------------------------------------
# board_loss oracles


def tiny_instance(n=4, width=8, seed=0):
    params = picnn.init_params(nq.CTX_DIM, nq.SCOPE_DIM, width=width, seed=seed)
    inst = queens_phase2_dataset(n)[0]
    return params, inst


def test_board_loss_zero_when_perfect():
    params, inst = tiny_instance()
    cfg = Phase2Config(alpha=1.0, beta=0.0, gamma=0.0)
    tape = ad.Tape()
    with tape:
        ev = ComposedEnergy(params, inst.factors, inst.dim).evaluator()
        x_hat = Tensor(inst.x_star.reshape(1, -1))
        loss, terms = board_loss(ev, x_hat, inst.x_star, None, cfg)
    assert float(loss.data) == 0.0
    assert terms["regression"] == 0.0


def test_board_loss_margin_plug_in():
    params, inst = tiny_instance()
    cfg = Phase2Config(alpha=0.0, beta=0.25, gamma=0.0, rho=0.1)
    tape = ad.Tape()
    with tape:
        ev = ComposedEnergy(params, inst.factors, inst.dim).evaluator()
        x_hat = Tensor(inst.x_star.reshape(1, -1))  # E(x_hat) == E(x_star)
        loss, _ = board_loss(ev, x_hat, inst.x_star, None, cfg)
    want = 0.25 * float(np.log1p(np.exp(0.1)))
    assert float(loss.data) == pytest.approx(want, rel=1e-12)


def test_board_loss_empty_pool_warns_and_nonnegative():
    params, inst = tiny_instance()
    cfg = Phase2Config()
    rng = np.random.default_rng(0)
    tape = ad.Tape()
    with tape:
        ev = ComposedEnergy(params, inst.factors, inst.dim).evaluator()
        x_hat = Tensor(rng.uniform(0, 1, size=(1, inst.dim)))
        with pytest.warns(UserWarning, match="hard pool is empty"):
            loss, terms = board_loss(ev, x_hat, inst.x_star, np.zeros((0, inst.dim)), cfg)
    assert float(loss.data) >= 0.0
    assert terms["hard"] == 0.0
    assert all(v >= 0 for v in terms.values())


def test_board_loss_hard_term_uses_pool_mean():
    params, inst = tiny_instance()
    cfg = Phase2Config(alpha=0.0, beta=0.0, gamma=1.0, rho_h=0.2)
    rng = np.random.default_rng(1)
    pool = nq.feasible(4).sample(rng, 3)
    tape = ad.Tape()
    with tape:
        ev = ComposedEnergy(params, inst.factors, inst.dim).evaluator()
        x_hat = Tensor(inst.x_star.reshape(1, -1))
        loss, _ = board_loss(ev, x_hat, inst.x_star, pool, cfg)
        e_star = float(ev.energy(Tensor(inst.x_star.reshape(1, -1))).data[0])
        e_pool = ev.energy(Tensor(pool)).data
    want = np.mean(np.log1p(np.exp(e_star - e_pool + 0.2)))
    assert float(loss.data) == pytest.approx(float(want), rel=1e-10)


def phase2_style_loss(params, inst, cfg, run_seed=0):
    scfg = solvers.SolverConfig(
        steps=cfg.unroll_steps, eta0=cfg.eta0, eta_end=cfg.eta_end,
        method=cfg.method, num_starts=1, seed=run_seed, start_offset=0,
    )
    tape = ad.Tape()
    with tape:
        ev = ComposedEnergy(params, inst.factors, inst.dim).evaluator()
        res = solvers.solve(ev, inst.feasible, scfg)
        pool = np.stack([inst.x_star * 0.5 + 0.25, res.y0[0]])
        loss, _ = board_loss(ev, res.y_tensor, inst.x_star, pool, cfg)
    return loss, tape, ev


@pytest.mark.parametrize("method", ["gd", "adam"])
def test_board_loss_gradient_through_unrolled_solve(method):
    params, inst = tiny_instance(n=4, width=6, seed=1)
    cfg = Phase2Config(unroll_steps=5, method=method)
    loss, tape, ev = phase2_style_loss(params, inst, cfg)
    grads = ad.backward(loss, tape)
    rng = np.random.default_rng(2)
    names = sorted(params.arrays)
    dirs = {k: rng.standard_normal(params.arrays[k].shape) for k in names}
    analytic = sum(
        float((grads.get(ev.tv[k]) * dirs[k]).sum())
        for k in names
        if grads.get(ev.tv[k]) is not None
    )
    h = 1e-6
    vals = []
    for sgn in (+1.0, -1.0):
        shifted = picnn.PicnnParams(
            dict(params.meta), {k: params.arrays[k] + sgn * h * dirs[k] for k in names}
        )
        l2, _, _ = phase2_style_loss(shifted, inst, cfg)
        vals.append(float(l2.data))
    fd = (vals[0] - vals[1]) / (2 * h)
    assert abs(analytic - fd) / (abs(fd) + 1e-12) < 1e-3


# ---------------------------------------------------------------------------
# phase 2 training loop


def test_clip_global_norm():
    g = {"a": np.full(4, 3.0), "b": np.full(9, 2.0), "c": None}
    total = clip_global_norm(g, 1.0)
    assert total == pytest.approx(np.sqrt(36 + 36))
    new_total = np.sqrt(sum((x * x).sum() for x in (g["a"], g["b"])))
    assert new_total == pytest.approx(1.0)
    g2 = {"a": np.ones(2)}
    clip_global_norm(g2, 10.0)
    assert np.array_equal(g2["a"], np.ones(2))


def test_phase2_smoke_loss_decreases(tmp_path):
    # starts from a short factor-pretraining run, as refinement assumes, and
    # uses a hot lr so five refinement steps outrun warm-start draw noise
    params = picnn.init_params(nq.CTX_DIM, nq.SCOPE_DIM, layers=3, width=12, seed=0)
    phase1_train(params, nq, Phase1Config(epochs=60, batch=32, width=12, seed=0))
    dataset = queens_phase2_dataset(8)
    log = tmp_path / "p2.jsonl"
    cfg = Phase2Config(
        epochs=5, unroll_steps=20, train_starts=2, hard_negatives=4,
        seed=0, lr=1e-2, log_path=str(log),
    )
    out = phase2_train(params, dataset, cfg)
    assert out.losses.shape == (5,)
    assert out.losses[-1] < out.losses[0]
    assert len(out.winners) == 5 and all(0 <= w < 2 for w in out.winners)
    recs = [json.loads(ln) for ln in log.read_text().splitlines()]
    assert len(recs) == 5
    assert set(recs[0]["terms"]) == {"regression", "margin", "hard"}


def test_phase2_determinism():
    runs = []
    for _ in range(2):
        params, _ = tiny_instance(n=4, width=8, seed=3)
        cfg = Phase2Config(epochs=2, unroll_steps=6, train_starts=2, seed=7)
        phase2_train(params, queens_phase2_dataset(4), cfg)
        runs.append({k: v.copy() for k, v in params.arrays.items()})
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k])


def test_phase2_winner_is_best_of_starts():
    params, _ = tiny_instance(n=4, width=8, seed=5)
    cfg = Phase2Config(epochs=3, unroll_steps=6, train_starts=3, seed=1)
    out = phase2_train(params, queens_phase2_dataset(4), cfg)
    # the taped-rerun equality assert inside phase2_train is the real check;
    # reaching here means every epoch reproduced its winner bit for bit
    assert len(out.winners) == 3


def test_hard_pool_composition():
    params, inst = tiny_instance(n=4, width=8, seed=6)
    ev = ComposedEnergy(params, inst.factors, inst.dim).evaluator()
    scfg = solvers.SolverConfig(steps=4, num_starts=1, record_iterates=True)
    cands = [
        solvers.solve(ev, inst.feasible, solvers.SolverConfig(
            steps=4, num_starts=1, seed=0, start_offset=i, record_iterates=True))
        for i in range(3)
    ]
    rng = np.random.default_rng(0)
    pool = training._hard_pool(cands, 1, inst.x_star, 2, rng)
    assert pool.shape == (2 + 3 + 1, inst.dim)
    assert np.array_equal(pool[0], cands[1].iterates[0][-2])
    assert np.array_equal(pool[1], cands[1].iterates[0][-1])
    assert np.array_equal(pool[2], cands[0].y0[0])
    mix = pool[-1]
    lam = np.random.default_rng(0).uniform(0.2, 0.8)
    assert np.allclose(mix, lam * cands[1].y0[0] + (1 - lam) * inst.x_star)


def test_phase2_instance_fields():
    inst = queens_phase2_dataset(8)[0]
    assert inst.dim == 64
    assert len(inst.factors) == 46
    assert inst.x_star.shape == (64,)
    assert nq.conflicts(np.argmax(inst.x_star.reshape(8, 8), axis=1)).total == 0
