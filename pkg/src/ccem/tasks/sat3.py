"""3-SAT over the unit box, one factor per clause.

A clause factor sees its three variables' relaxed bits and the clause's
polarity pattern through the context. Training drives the factor's minimum
onto the single falsifying corner of the cube; minimizing the composed
energy therefore searches for a point that falsifies as many clauses as
possible, and the decoder negates the thresholded bits to recover the
satisfying assignment.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy import stats

from ccem import picnn, solvers
from ccem.energy import ComposedEnergy, FactorSpec
from ccem.sets import Box, decode

SCOPE_DIM = 3
# polarity pattern one-hot + slot mask + kind flag
CTX_DIM = 8 + SCOPE_DIM + 1

NAME = "sat3"
NEGATIVES = 10  # 7 satisfying corners, 2 in-cube mixtures, 1 mined minimizer
# relu factors localize the single falsifying corner more sharply than
# softplus ones; clause energies live on [0,1]^3 so the kink costs nothing
ACTIVATION = "relu"

CLAUSE_RATIO = 4.258
_MAX_TRIES = 500


@dataclass
class CnfFormula:
    n: int
    clauses: np.ndarray  # (m, 3) signed 1-based literals, sorted by variable

    def __post_init__(self):
        c = np.asarray(self.clauses, dtype=np.int64).reshape(-1, 3)
        if c.size:
            if (c == 0).any() or np.abs(c).max() > self.n:
                raise ValueError("literals must be nonzero with |lit| <= n")
            order = np.argsort(np.abs(c), axis=1)
            c = np.take_along_axis(c, order, axis=1)
            if (np.abs(c[:, 0]) == np.abs(c[:, 1])).any() or (
                np.abs(c[:, 1]) == np.abs(c[:, 2])
            ).any():
                raise ValueError("clause variables must be distinct")
        self.clauses = c

    @property
    def m(self):
        return len(self.clauses)


def falsifying_pattern(clause):
    """The one corner of the cube that makes every literal false."""
    clause = np.asarray(clause, dtype=np.int64)
    return (clause < 0).astype(np.float64)


def clause_context(clause):
    bits = falsifying_pattern(clause).astype(np.int64)
    ctx = np.zeros(CTX_DIM)
    ctx[int(bits @ (1 << np.arange(3)))] = 1.0
    ctx[8 : 8 + SCOPE_DIM] = 1.0
    ctx[-1] = 1.0
    return ctx


def factors(f):
    return [
        FactorSpec(np.abs(cl) - 1, clause_context(cl), weight=1.0, kind="clause")
        for cl in f.clauses
    ]


def feasible(f):
    return Box(f.n)


def count_satisfied(f, assign):
    assign = np.asarray(assign, dtype=np.int64)
    if assign.shape != (f.n,) or not np.isin(assign, (0, 1)).all():
        raise ValueError("assignment must be n bits")
    vals = assign[np.abs(f.clauses) - 1]
    lit_true = np.where(f.clauses > 0, vals == 1, vals == 0)
    return int(lit_true.any(axis=1).sum())


# ---------------------------------------------------------------------------
# generators


def _random_clause(rng, n, signs=None):
    vars_ = np.sort(rng.choice(n, size=3, replace=False)) + 1
    if signs is None:
        signs = np.where(rng.integers(0, 2, size=3) == 1, 1, -1)
    return vars_ * signs


def generate(n, seed, m=None, ratio=CLAUSE_RATIO):
    """Uniform random formula with m distinct clauses covering every variable."""
    m = int(round(ratio * n)) if m is None else int(m)
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_TRIES):
        seen = set()
        rows = []
        while len(rows) < m:
            cl = _random_clause(rng, n)
            key = tuple(cl.tolist())
            if key not in seen:
                seen.add(key)
                rows.append(cl)
        f = CnfFormula(n, np.array(rows))
        if np.bincount(np.abs(f.clauses).ravel() - 1, minlength=n).min() > 0:
            return f
    raise ValueError("could not cover every variable; raise m or lower n")


def generate_planted(n, seed, m=None, ratio=CLAUSE_RATIO):
    """Random formula plus a hidden assignment satisfying every clause."""
    m = int(round(ratio * n)) if m is None else int(m)
    rng = np.random.default_rng(seed)
    hidden = rng.integers(0, 2, size=n)
    for _ in range(_MAX_TRIES):
        seen = set()
        rows = []
        while len(rows) < m:
            cl = _random_clause(rng, n)
            key = tuple(cl.tolist())
            if key in seen:
                continue
            vals = hidden[np.abs(cl) - 1]
            if not np.where(cl > 0, vals == 1, vals == 0).any():
                continue  # clause would break the plant; redraw
            seen.add(key)
            rows.append(cl)
        f = CnfFormula(n, np.array(rows))
        if np.bincount(np.abs(f.clauses).ravel() - 1, minlength=n).min() > 0:
            return f, hidden
    raise ValueError("could not cover every variable; raise m or lower n")


# ---------------------------------------------------------------------------
# DIMACS I/O


def to_dimacs(f):
    lines = [f"p cnf {f.n} {f.m}"]
    lines += [" ".join(str(int(x)) for x in cl) + " 0" for cl in f.clauses]
    return "\n".join(lines) + "\n"


def from_dimacs(text):
    header = None
    lits = []
    for ln in text.splitlines():
        ln = ln.strip()
        if not ln or ln.startswith("c"):
            continue
        if ln.startswith("p"):
            tag, kind, n, m = ln.split()
            if kind != "cnf":
                raise ValueError(f"not a cnf file: {ln!r}")
            header = (int(n), int(m))
            continue
        lits.extend(int(t) for t in ln.split())
    if header is None:
        raise ValueError("missing 'p cnf' header")
    n, m = header
    clauses = []
    cur = []
    for lit in lits:
        if lit == 0:
            clauses.append(cur)
            cur = []
        else:
            cur.append(lit)
    if cur:
        raise ValueError("last clause is not zero-terminated")
    if len(clauses) != m or any(len(c) != 3 for c in clauses):
        raise ValueError("clause count or width does not match the header")
    return CnfFormula(n, np.array(clauses, dtype=np.int64))


def write_dimacs(f, path):
    with open(path, "w") as fh:
        fh.write(to_dimacs(f))


def read_dimacs(path):
    with open(path) as fh:
        return from_dimacs(fh.read())


# ---------------------------------------------------------------------------
# phase-1 sampling: the falsifying corner in, the 7 satisfying corners out,
# plus in-cube mixtures so the basin is strict at the corner instead of a
# flat plateau reaching the cube's center


_CORNERS = np.array([[(i >> b) & 1 for b in range(3)] for i in range(8)], dtype=np.float64)


def sample_one(rng, j=NEGATIVES):
    bits = rng.integers(0, 2, size=3)
    idx = int(bits @ (1 << np.arange(3)))
    ctx = np.zeros(CTX_DIM)
    ctx[idx] = 1.0
    ctx[8 : 8 + SCOPE_DIM] = 1.0
    ctx[-1] = 1.0
    others = [k for k in range(8) if k != idx]
    if j >= 7:
        negs = [_CORNERS[k].copy() for k in others]
        for _ in range(j - 7):
            lam = rng.uniform(0.2, 0.8)
            negs.append(lam * _CORNERS[idx] + (1.0 - lam) * rng.uniform(0.0, 1.0, size=3))
    else:
        negs = [_CORNERS[others[int(t)]].copy() for t in rng.integers(0, 7, size=j)]
    return ctx, _CORNERS[idx].copy(), np.stack(negs)


def sample_batch(rng, batch, j=NEGATIVES, params=None):
    ctx = np.zeros((batch, CTX_DIM))
    pos = np.zeros((batch, SCOPE_DIM))
    negs = np.zeros((batch, j, SCOPE_DIM))
    for b in range(batch):
        ctx[b], pos[b], negs[b] = sample_one(rng, j)
    if params is not None and j >= 8:
        # the fixed families stop producing gradient once they separate, and
        # from then on nothing stops a dip from opening elsewhere in the cube;
        # mining the current minimizer as the last negative keeps a restoring
        # force on the whole box for as long as training runs
        starts = rng.uniform(0.0, 1.0, size=(batch, SCOPE_DIM))
        negs[:, j - 1] = picnn.factor_argmin(
            params, ctx, starts, lambda y: np.clip(y, 0.0, 1.0)
        )
    return ctx, pos, negs


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SatMetrics:
    fracs: np.ndarray
    seeds: np.ndarray
    planted: bool

    @property
    def formulas(self):
        return len(self.fracs)

    @property
    def mean(self):
        return float(self.fracs.mean())

    @property
    def sd(self):
        return float(self.fracs.std())

    def p_value_vs(self, baseline=0.875):
        """One-sided t-test that the mean satisfied fraction beats baseline."""
        res = stats.ttest_1samp(self.fracs, baseline, alternative="greater")
        return float(res.pvalue)

    def summary(self):
        return {
            "formulas": self.formulas,
            "planted": self.planted,
            "mean_frac_satisfied": self.mean,
            "sd_frac_satisfied": self.sd,
            "p_value_vs_0.875": self.p_value_vs(),
        }


def solve_formula(params, f, cfg):
    comp = ComposedEnergy(params, factors(f), f.n)
    feas = feasible(f)
    res = solvers.solve(comp.evaluator(), feas, cfg)
    return decode(res.y, feas, NAME), res


def evaluate(params, n=20, formulas=100, cfg=None, seed0=0, planted=False, m=None):
    cfg = cfg or solvers.SolverConfig()
    fracs = np.zeros(formulas)
    seeds = np.arange(seed0, seed0 + formulas)
    for i, s in enumerate(seeds):
        if planted:
            f, _ = generate_planted(n, int(s), m=m)
        else:
            f = generate(n, int(s), m=m)
        assign, _ = solve_formula(params, f, replace(cfg, seed=int(s)))
        fracs[i] = count_satisfied(f, assign) / f.m
    return SatMetrics(fracs=fracs, seeds=seeds, planted=planted)
