"""Graph coloring with one edge factor per edge over per-node color blocks.

Each node owns a simplex over its chi colors; an edge factor sees the
concatenation of both endpoint blocks and should be low when the two
argmax colors differ. Contexts carry only the block layout and the color
budget, never color identities, so the energy is invariant to relabeling
colors by construction.
"""

from dataclasses import dataclass, replace

import networkx as nx
import numpy as np

from ccem import kernels, picnn, solvers
from ccem.energy import ComposedEnergy, FactorSpec
from ccem.sets import Product, Simplex, decode

CHI_MAX = 12
SCOPE_DIM = 2 * CHI_MAX
# kind flag + slot mask + normalized color budget
CTX_DIM = 1 + SCOPE_DIM + 1

NAME = "coloring"
NEGATIVES = 10  # 4 same pairs, 3 other valid pairs, 2 mixtures, 1 mined minimizer
ACTIVATION = "softplus"

DISTRIBUTIONS = ("erdos-renyi", "holme-kim", "regular-expander", "paley", "complete")
_MAX_TRIES = 500


@dataclass
class GraphInstance:
    v: int
    edges: np.ndarray  # (E, 2) with a < b
    chi: int

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        e = np.sort(e, axis=1)
        if e.size and (e[:, 0] == e[:, 1]).any():
            raise ValueError("self-loops are not allowed")
        if len({(a, b) for a, b in e.tolist()}) != len(e):
            raise ValueError("duplicate edges")
        if e.size and (e.min() < 0 or e.max() >= self.v):
            raise ValueError("edge endpoint out of range")
        if not 2 <= self.chi <= CHI_MAX:
            raise ValueError(f"need 2 <= chi <= {CHI_MAX}")
        self.edges = e[np.lexsort((e[:, 1], e[:, 0]))]

    @property
    def num_edges(self):
        return len(self.edges)

    def degrees(self):
        return np.bincount(self.edges.ravel(), minlength=self.v)


def edge_context(chi):
    ctx = np.zeros(CTX_DIM)
    ctx[0] = 1.0
    ctx[1 : 1 + 2 * chi] = 1.0
    ctx[-1] = chi / CHI_MAX
    return ctx


def factors(g):
    ctx = edge_context(g.chi)
    out = []
    for a, b in g.edges:
        scope = np.concatenate(
            [np.arange(a * g.chi, (a + 1) * g.chi), np.arange(b * g.chi, (b + 1) * g.chi)]
        )
        out.append(FactorSpec(scope, ctx, weight=1.0, kind="edge"))
    return out


def feasible(g):
    return Product([(Simplex(g.chi), i * g.chi) for i in range(g.v)])


def count_conflicts(g, colors):
    colors = np.asarray(colors, dtype=np.int64)
    if colors.shape != (g.v,) or colors.min() < 0 or colors.max() >= g.chi:
        raise ValueError("coloring must give each node a color below chi")
    return int((colors[g.edges[:, 0]] == colors[g.edges[:, 1]]).sum())


def expected_random_conflicts(g):
    """Mean conflicts of a uniform random coloring: one in chi per edge."""
    return g.num_edges / g.chi


# ---------------------------------------------------------------------------
# generators: resample until the instance lands in the family's target box


def _edges_of(graph):
    return np.array(sorted(tuple(sorted(e)) for e in graph.edges()), dtype=np.int64)


def _paley_edges(q):
    residues = {(x * x) % q for x in range(1, q)}
    return np.array(
        [(a, b) for a in range(q) for b in range(a + 1, q) if (b - a) % q in residues],
        dtype=np.int64,
    )


def generate(distribution, seed):
    """One accepted instance; raises if the family keeps missing its box."""
    rng = np.random.default_rng(seed)
    for _ in range(_MAX_TRIES):
        nxseed = int(rng.integers(2**31))
        if distribution == "erdos-renyi":
            v = int(rng.integers(20, 40))
            g = nx.gnp_random_graph(v, 0.12, seed=nxseed)
            edges = _edges_of(g)
            if not 29 <= len(edges) <= 76:
                continue
            if np.bincount(edges.ravel(), minlength=v).min() == 0:
                continue  # every node must sit in some factor scope
            return GraphInstance(v, edges, chi=int(rng.integers(3, 5)))
        if distribution == "holme-kim":
            v = int(rng.integers(22, 35))
            g = nx.powerlaw_cluster_graph(v, 3, 0.26, seed=nxseed)
            edges = _edges_of(g)
            if not 56 <= len(edges) <= 92:
                continue
            return GraphInstance(v, edges, chi=4)
        if distribution == "regular-expander":
            v = int(rng.integers(21, 41))
            g = nx.random_regular_graph(6, v, seed=nxseed)
            lam = np.linalg.eigvalsh(nx.to_numpy_array(g))
            # keep only graphs whose nontrivial spectrum is Ramanujan-ish
            if np.abs(lam[:-1]).max() > 2.0 * np.sqrt(5.0) + 0.5:
                continue
            return GraphInstance(v, _edges_of(g), chi=4)
        if distribution == "paley":
            q = int(rng.choice([29, 37]))
            return GraphInstance(q, _paley_edges(q), chi=int(rng.integers(6, 11)))
        if distribution == "complete":
            v = int(rng.integers(8, 13))
            return GraphInstance(v, _edges_of(nx.complete_graph(v)), chi=v)
        raise ValueError(f"unknown distribution {distribution!r}")
    raise ValueError(f"could not hit the acceptance box for {distribution!r}")


# ---------------------------------------------------------------------------
# graph text I/O: first line "V E chi", then one "a b" line per edge


def to_text(g):
    lines = [f"{g.v} {g.num_edges} {g.chi}"]
    lines += [f"{a} {b}" for a, b in g.edges]
    return "\n".join(lines) + "\n"


def from_text(text):
    rows = [ln for ln in (s.strip() for s in text.splitlines()) if ln and not ln.startswith("#")]
    v, e, chi = map(int, rows[0].split())
    if len(rows) - 1 != e:
        raise ValueError(f"header promises {e} edges, got {len(rows) - 1}")
    edges = np.array([[int(t) for t in r.split()] for r in rows[1:]], dtype=np.int64)
    edges = edges.reshape(e, 2)
    return GraphInstance(v, edges, chi)


def write_graph(g, path):
    with open(path, "w") as fh:
        fh.write(to_text(g))


def read_graph(path):
    with open(path) as fh:
        return from_text(fh.read())


# ---------------------------------------------------------------------------
# phase-1 sampling: different-color pairs in; same-color pairs out, plus
# softer negative families. Other valid pairs appear as negatives so the
# softmax levels all of them to one height (each is positive and negative
# equally often), in-hull mixtures press interior dips up to that level, and
# one mined negative (the factor's own current minimizer, found by a short
# projected descent) chases any dip the fixed families miss. Net shape: a
# flat floor on the hull of valid pairs with conflicts above it, which is
# what lets the tie-break field pick out a clean pair at solve time.


def _pair(chi, c1, c2):
    v = np.zeros(SCOPE_DIM)
    v[c1] = 1.0
    v[chi + c2] = 1.0
    return v


def _soft_pair(rng, chi):
    v = np.zeros(SCOPE_DIM)
    a = rng.uniform(0.0, 1.0, size=chi)
    b = rng.uniform(0.0, 1.0, size=chi)
    v[:chi] = a / a.sum()
    v[chi : 2 * chi] = b / b.sum()
    return v


def _diff_pair(rng, chi):
    c1 = int(rng.integers(0, chi))
    c2 = int((c1 + 1 + rng.integers(0, chi - 1)) % chi)
    return _pair(chi, c1, c2)


def sample_one(rng, j):
    chi = int(rng.integers(3, CHI_MAX + 1))
    pos = _diff_pair(rng, chi)
    negs = np.zeros((j, SCOPE_DIM))
    for t in range(j):
        fam = t % 10
        if fam < 4:
            c = int(rng.integers(0, chi))
            negs[t] = _pair(chi, c, c)
        elif fam < 7:
            negs[t] = _diff_pair(rng, chi)
        else:
            lam = rng.uniform(0.2, 0.8)
            negs[t] = lam * pos + (1.0 - lam) * _soft_pair(rng, chi)
    return edge_context(chi), pos, negs


def _block_simplex_project(chis):
    """Row-wise projector onto the two endpoint simplices, padding zeroed."""

    def project(y):
        out = np.zeros_like(y)
        for chi in np.unique(chis):
            rows = np.where(chis == chi)[0]
            blocks = y[rows, : 2 * chi].reshape(2 * len(rows), chi)
            proj, _ = kernels.project_simplex_rows(blocks)
            out[rows[:, None], np.arange(2 * chi)] = proj.reshape(len(rows), 2 * chi)
        return out

    return project


def sample_batch(rng, batch, j=NEGATIVES, params=None):
    ctx = np.zeros((batch, CTX_DIM))
    pos = np.zeros((batch, SCOPE_DIM))
    negs = np.zeros((batch, j, SCOPE_DIM))
    for b in range(batch):
        ctx[b], pos[b], negs[b] = sample_one(rng, j)
    if params is not None and j >= 8:
        # same trick as the sat sampler: the current continuous minimizer is
        # the hardest negative whenever the floor is not yet flat, and once it
        # is, it coincides with a valid pair and the term goes quiet on its own
        chis = np.rint(ctx[:, -1] * CHI_MAX).astype(np.int64)
        project = _block_simplex_project(chis)
        starts = project(rng.uniform(0.0, 1.0, size=(batch, SCOPE_DIM)))
        negs[:, j - 1] = picnn.factor_argmin(params, ctx, starts, project)
    return ctx, pos, negs


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class ColoringMetrics:
    distribution: str
    conflicts: np.ndarray
    seeds: np.ndarray

    @property
    def instances(self):
        return len(self.conflicts)

    @property
    def mean(self):
        return float(self.conflicts.mean())

    @property
    def sd(self):
        return float(self.conflicts.std())

    @property
    def frac_zero(self):
        return float((self.conflicts == 0).mean())

    def summary(self):
        return {
            "distribution": self.distribution,
            "instances": self.instances,
            "mean_conflicts": self.mean,
            "sd_conflicts": self.sd,
            "frac_zero": self.frac_zero,
        }


def solve_instance(params, g, cfg):
    comp = ComposedEnergy(params, factors(g), g.v * g.chi)
    feas = feasible(g)
    res = solvers.solve(comp.evaluator(), feas, cfg)
    return decode(res.y, feas, NAME), res


def evaluate(params, distribution, instances=100, cfg=None, seed0=0):
    cfg = cfg or solvers.SolverConfig()
    counts = np.zeros(instances, dtype=np.int64)
    seeds = np.arange(seed0, seed0 + instances)
    for i, s in enumerate(seeds):
        g = generate(distribution, int(s))
        run_cfg = replace(cfg, seed=int(s))
        colors, _ = solve_instance(params, g, run_cfg)
        counts[i] = count_conflicts(g, colors)
    return ColoringMetrics(distribution=distribution, conflicts=counts, seeds=seeds)
