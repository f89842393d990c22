"""Task front-ends: each module turns a combinatorial problem into factors.

A task module exposes CTX_DIM / SCOPE_DIM, an instance builder returning
FactorSpec lists plus a feasible set, a phase-1 sampler (positives and
structured negatives sharing the positive's context), a decoder-side
correctness check, and an evaluate() that runs the solver over fresh
instances and aggregates metrics.
"""

from ccem.tasks import coloring, nqueens, sat3

_REGISTRY = {
    "nqueens": nqueens,
    "coloring": coloring,
    "sat3": sat3,
}


def get_task(name):
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}, have {sorted(_REGISTRY)}") from None


def task_names():
    return sorted(_REGISTRY)
