"""Command-line entry point.

Subcommands cover the full workflow: phase-1 and phase-2 training, task
evaluation, the two ablations, the theory checks, instance generation, and a
one-off projection utility. Every run writes a report bundle (metrics.json
embedding the exact merged config, a seed manifest, CSVs) under --out, which
defaults to $CCEM_OUTPUT_ROOT/<command>-<task>.
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from . import picnn, solvers, theory
from .energy import ComposedEnergy
from .tasks import get_task, task_names
from .training import phase1_train, phase2_train, queens_phase2_dataset


def _collect_overrides(args, keys):
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _base_config(args, keys):
    file_cfg = cfgmod.load_config(args.config) if args.config else {}
    return cfgmod.merge(file_cfg, _collect_overrides(args, keys))


def _out_dir(args, command, cfg):
    out = cfg.get("out") or args.out
    if out:
        return out
    task = cfg.get("task", "all")
    return os.path.join(cfgmod.output_root(), f"{command}-{task}")


def _load_checkpoint(cfg):
    path = cfg.get("checkpoint")
    if not path:
        raise cfgmod.ConfigError("checkpoint required: pass --checkpoint or set it in the config")
    if not os.path.exists(path):
        raise cfgmod.ConfigError(f"checkpoint not found: {path}")
    return picnn.PicnnParams.load(path)


# ---------------------------------------------------------------------------
# subcommands


_P1_KEYS = (
    "task seed out epochs lr weight_decay negatives lambda_e batch width layers "
    "activation checkpoint checkpoint_out"
).split()


def cmd_train_phase1(args):
    cfg = _base_config(args, _P1_KEYS)
    task = get_task(cfg.get("task", "nqueens"))
    cfg.setdefault("activation", task.ACTIVATION)
    p1 = cfgmod.phase1_config(cfg)
    out = _out_dir(args, "phase1", cfg)
    os.makedirs(out, exist_ok=True)
    if cfg.get("checkpoint"):
        params = _load_checkpoint(cfg)
    else:
        params = picnn.init_params(
            task.CTX_DIM, task.SCOPE_DIM, layers=p1.layers, width=p1.width, seed=p1.seed, activation=p1.activation
        )
    t0 = time.time()
    res = phase1_train(params, task, p1)
    ckpt = cfg.get("checkpoint_out") or os.path.join(out, "phase1.npz")
    res.params.save(ckpt)
    metrics = {
        "phase": "phase1",
        "task": task.NAME,
        "initial_loss": res.initial,
        "final_loss": res.final,
        "smoke_ok": res.smoke_ok,
        "epochs": p1.epochs,
        "checkpoint": ckpt,
    }
    seeds = {"master_seed": p1.seed, "streams": "per-epoch batch stream = default_rng((seed, epoch))"}
    path = cfgmod.write_report(
        out, cfg, metrics, seeds,
        {"loss": (("epoch", "loss"), list(enumerate(res.losses)))},
        timing={"wall_clock_s": time.time() - t0},
    )
    print(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"report: {path}")


_P2_KEYS = (
    "task seed out checkpoint checkpoint_out phase2_epochs phase2_lr unroll_steps train_starts "
    "hard_negatives alpha beta gamma rho rho_h clip_norm eta0 eta_end weight_decay n"
).split()


def cmd_train_phase2(args):
    cfg = _base_config(args, _P2_KEYS)
    task_name = cfg.get("task", "nqueens")
    if task_name != "nqueens":
        raise cfgmod.ConfigError(
            "phase-2 refinement needs ground-truth solutions; only nqueens ships a dataset"
        )
    params = _load_checkpoint(cfg)
    p2 = cfgmod.phase2_config(cfg)
    out = _out_dir(args, "phase2", cfg)
    os.makedirs(out, exist_ok=True)
    dataset = queens_phase2_dataset(cfg.get("n", 8))
    t0 = time.time()
    res = phase2_train(params, dataset, p2)
    ckpt = cfg.get("checkpoint_out") or os.path.join(out, "phase2.npz")
    res.params.save(ckpt)
    metrics = {
        "phase": "phase2",
        "task": task_name,
        "initial_loss": res.losses[0],
        "final_loss": float(np.mean(res.losses[-10:])),
        "epochs": p2.epochs,
        "checkpoint": ckpt,
    }
    rows = [
        (e, loss, t["regression"], t["margin"], t["hard"], g)
        for e, (loss, t, g) in enumerate(zip(res.losses, res.terms, res.grad_norms))
    ]
    seeds = {
        "master_seed": p2.seed,
        "streams": "per-epoch run seed = seed + 7919*epoch + 104729*instance",
    }
    path = cfgmod.write_report(
        out,
        cfg,
        metrics,
        seeds,
        {"loss": (("epoch", "loss", "regression", "margin", "hard", "grad_norm"), rows)},
        timing={"wall_clock_s": time.time() - t0},
    )
    print(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"report: {path}")


_EVAL_KEYS = (
    "task seed out checkpoint n boards starts steps eta0 eta_end method instances formulas "
    "distribution planted clauses"
).split()


def cmd_eval(args):
    cfg = _base_config(args, _EVAL_KEYS)
    task_name = cfg.get("task", "nqueens")
    params = _load_checkpoint(cfg)
    scfg = cfgmod.solver_config(cfg)
    out = _out_dir(args, "eval", cfg)
    seed0 = cfg.get("seed", 0)
    t0 = time.time()
    if task_name == "nqueens":
        task = get_task("nqueens")
        ev = task.evaluate(
            params, n=cfg.get("n", 8), boards=cfg.get("boards", 100), cfg=scfg, seed0=seed0
        )
        metrics = ev.summary()
        rows = [
            (r.seed, r.correct, r.conflict.row, r.conflict.col, r.conflict.diag, r.queens_placed, r.energy)
            for r in ev.results
        ]
        csvs = {"boards": (("seed", "correct", "row", "col", "diag", "placed", "energy"), rows)}
    elif task_name == "coloring":
        task = get_task("coloring")
        ev = task.evaluate(
            params, cfg.get("distribution", "er"), instances=cfg.get("instances", 100), cfg=scfg, seed0=seed0
        )
        metrics = ev.summary()
        rows = list(zip(ev.seeds.tolist(), ev.conflicts.tolist()))
        csvs = {"instances": (("seed", "conflicts"), rows)}
    else:
        task = get_task("sat3")
        ev = task.evaluate(
            params,
            n=cfg.get("n", 20),
            formulas=cfg.get("formulas", 100),
            cfg=scfg,
            seed0=seed0,
            planted=cfg.get("planted", False),
            m=cfg.get("clauses"),
        )
        metrics = ev.summary()
        rows = list(zip(ev.seeds.tolist(), ev.fracs.tolist()))
        csvs = {"formulas": (("seed", "satisfied_fraction"), rows)}
    seeds = {"master_seed": seed0, "streams": "instance i uses seed0+i; start j uses SeedSequence((seed, j))"}
    path = cfgmod.write_report(out, cfg, metrics, seeds, csvs, timing={"wall_clock_s": time.time() - t0})
    print(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"report: {path}")


_ABLATE_KEYS = "task seed out checkpoint n boards steps grid losses phase2_epochs".split()

# rows of the refinement-loss grid: (alpha, beta, gamma) on/off combinations
LOSS_GRID = (
    (1.0, 0.0, 0.0),
    (0.0, 0.25, 0.25),
    (1.0, 0.25, 0.0),
    (1.0, 0.0, 0.25),
    (1.0, 0.25, 0.25),
)


def cmd_ablate(args):
    cfg = _base_config(args, _ABLATE_KEYS)
    if cfg.get("task", "nqueens") != "nqueens":
        raise cfgmod.ConfigError("ablations are defined for nqueens")
    params = _load_checkpoint(cfg)
    task = get_task("nqueens")
    out = _out_dir(args, "ablate", cfg)
    seed0 = cfg.get("seed", 0)
    n = cfg.get("n", 8)
    boards = cfg.get("boards", 100)
    if cfg.get("losses"):
        from dataclasses import replace

        from .training import Phase2Config

        base = cfgmod.phase2_config(cfg)
        rows = []
        for alpha, beta, gamma in LOSS_GRID:
            t0 = time.time()
            p2 = replace(base, alpha=alpha, beta=beta, gamma=gamma, seed=seed0)
            res = phase2_train(params.copy(), queens_phase2_dataset(n), p2)
            scfg = solvers.SolverConfig(num_starts=p2.eval_starts, steps=cfg.get("steps", 140))
            ev = task.evaluate(res.params, n=n, boards=boards, cfg=scfg, seed0=seed0)
            rows.append((alpha, beta, gamma, ev.num_correct, boards, time.time() - t0))
        metrics = {
            "grid": "losses",
            "rows": [
                {"alpha": a, "beta": b, "gamma": g, "correct": c, "boards": m}
                for a, b, g, c, m, _ in rows
            ],
        }
        csvs = {
            "loss_grid": (("alpha", "beta", "gamma", "correct", "boards", "wall_clock_s"), rows)
        }
    else:
        spec = cfg.get("grid", "starts=1,2,4,8,16,32,64")
        key, _, values = spec.partition("=")
        if key.strip() != "starts" or not values:
            raise cfgmod.ConfigError(f"unsupported grid {spec!r}; expected starts=1,2,...")
        grid = [int(v) for v in values.split(",")]
        prefix = tuple(sorted(set(grid)))
        scfg = solvers.SolverConfig(num_starts=max(grid), steps=cfg.get("steps", 140))
        ev = task.evaluate(params, n=n, boards=boards, cfg=scfg, prefix_sizes=prefix, seed0=seed0)
        counts = ev.prefix_counts()
        rows = [(s, counts[s], boards, ev.unique_solutions) for s in prefix]
        metrics = {
            "grid": "starts",
            "rows": [
                {"starts": s, "correct": c, "boards": m, "unique_solutions": u}
                for s, c, m, u in rows
            ],
        }
        csvs = {"starts_grid": (("starts", "correct", "boards", "unique_solutions"), rows)}
    seeds = {"master_seed": seed0, "streams": "shared start set across grid rows"}
    path = cfgmod.write_report(out, cfg, metrics, seeds, csvs)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"report: {path}")


def cmd_theory_check(args):
    cfg = _base_config(args, ["seed", "out"])
    out = _out_dir(args, "theory", cfg)
    report = theory.theory_report()
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "theory-report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for name, check in sorted(report["checks"].items()):
        print(f"{'ok ' if check['ok'] else 'FAIL'} {name}")
    print(f"report: {path}")
    if not report["ok"]:
        raise RuntimeError("theory checks failed")


_GEN_KEYS = "task seed out distribution count n clauses planted".split()


def cmd_gen(args):
    cfg = _base_config(args, _GEN_KEYS)
    task_name = cfg.get("task")
    if task_name not in ("coloring", "sat3"):
        raise cfgmod.ConfigError("gen writes instance files for coloring and sat3 only")
    out = _out_dir(args, "gen", cfg)
    os.makedirs(out, exist_ok=True)
    seed0 = cfg.get("seed", 0)
    count = cfg.get("count", 10)
    written = []
    if task_name == "coloring":
        task = get_task("coloring")
        dist = cfg.get("distribution", "er")
        for i in range(count):
            g = task.generate(dist, seed0 + i)
            path = os.path.join(out, f"{dist}-{seed0 + i}.graph")
            task.write_graph(g, path)
            written.append(path)
    else:
        task = get_task("sat3")
        n = cfg.get("n", 20)
        for i in range(count):
            if cfg.get("planted"):
                f, _ = task.generate_planted(n, seed0 + i, m=cfg.get("clauses"))
            else:
                f = task.generate(n, seed0 + i, m=cfg.get("clauses"))
            path = os.path.join(out, f"sat3-n{n}-{seed0 + i}.cnf")
            task.write_dimacs(f, path)
            written.append(path)
    print(json.dumps({"written": written}, indent=2))


def cmd_project(args):
    from . import sets

    point = np.array([float(v) for v in args.point.split(",")])
    name = args.set
    if name == "box":
        feas = sets.Box(point.size)
    elif name == "simplex":
        feas = sets.Simplex(point.size)
    elif name == "relaxed-simplex":
        feas = sets.RelaxedSimplex(point.size)
    elif name == "birkhoff":
        n = int(round(point.size ** 0.5))
        if n * n != point.size:
            raise cfgmod.ConfigError(f"birkhoff needs a square length, got {point.size}")
        feas = sets.Birkhoff(n)
    else:
        raise cfgmod.ConfigError(f"unknown set {name!r}")
    proj = feas.project_np(point[None, :])[0]
    print(json.dumps({"set": name, "projected": proj.tolist(), "residual": float(feas.residual(proj[None, :])[0])}))


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="ccem", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override it")
        sp.add_argument("--out", help="output directory for the report bundle")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--task", choices=task_names())

    sp = sub.add_parser("train-phase1", help="factor-level contrastive pretraining")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--weight-decay", dest="weight_decay", type=float)
    sp.add_argument("--negatives", type=int)
    sp.add_argument("--lambda-e", dest="lambda_e", type=float)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--width", type=int)
    sp.add_argument("--layers", type=int)
    sp.add_argument("--activation", choices=["softplus", "relu"])
    sp.add_argument("--checkpoint", help="resume from an existing checkpoint")
    sp.add_argument("--checkpoint-out", dest="checkpoint_out")
    sp.set_defaults(fn=cmd_train_phase1)

    sp = sub.add_parser("train-phase2", help="refinement through the unrolled solver")
    common(sp)
    sp.add_argument("--checkpoint", help="phase-1 checkpoint to refine")
    sp.add_argument("--checkpoint-out", dest="checkpoint_out")
    sp.add_argument("--phase2-epochs", dest="phase2_epochs", type=int)
    sp.add_argument("--phase2-lr", dest="phase2_lr", type=float)
    sp.add_argument("--unroll-steps", dest="unroll_steps", type=int)
    sp.add_argument("--train-starts", dest="train_starts", type=int)
    sp.add_argument("--hard-negatives", dest="hard_negatives", type=int)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--gamma", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--rho-h", dest="rho_h", type=float)
    sp.add_argument("--clip-norm", dest="clip_norm", type=float)
    sp.add_argument("--n", type=int)
    sp.set_defaults(fn=cmd_train_phase2)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--n", type=int, help="board size (nqueens) or variables (sat3)")
    sp.add_argument("--boards", type=int)
    sp.add_argument("--starts", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--method", choices=["adam", "gd"])
    sp.add_argument("--instances", type=int)
    sp.add_argument("--formulas", type=int)
    sp.add_argument("--distribution", choices=["er", "hk", "regular", "paley", "complete"])
    sp.add_argument("--planted", action="store_const", const=True)
    sp.add_argument("--clauses", type=int)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="starts sweep or refinement-loss grid")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--n", type=int)
    sp.add_argument("--boards", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--grid", help="starts=1,2,4,...")
    sp.add_argument("--losses", action="store_const", const=True, help="run the loss-term grid")
    sp.add_argument("--phase2-epochs", dest="phase2_epochs", type=int)
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("theory-check", help="run the theory labs and write a report")
    common(sp)
    sp.set_defaults(fn=cmd_theory_check)

    sp = sub.add_parser("gen", help="write instance files (coloring graphs, DIMACS)")
    common(sp)
    sp.add_argument("--distribution", choices=["er", "hk", "regular", "paley", "complete"])
    sp.add_argument("--count", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--clauses", type=int)
    sp.add_argument("--planted", action="store_const", const=True)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("project", help="project a point onto a feasible set")
    sp.add_argument("--set", required=True, choices=["box", "simplex", "relaxed-simplex", "birkhoff"])
    sp.add_argument("--point", required=True, help="comma-separated coordinates")
    sp.set_defaults(fn=cmd_project)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.fn(args)
    except cfgmod.ConfigError as e:
        json.dump({"error": {"type": "config", "message": str(e)}}, sys.stderr)
        sys.stderr.write("\n")
        return 2
    except Exception as e:  # noqa: BLE001 - the CLI boundary reports, not raises
        json.dump({"error": {"type": type(e).__name__, "message": str(e)}}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
