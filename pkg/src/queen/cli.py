"""Command-line front end.

Every subcommand is a thin wrapper over the library: configs are JSON
files matching ExperimentConfig, QUEEN_SEED in the environment beats
every seed argument, and anything written to disk goes through the
persist or report modules so files stay interchangeable with the API.

    queen gen-data --out data/
    queen train --out state.qst
    queen analyze --state state.qst
    queen serve --state state.qst --queries data/aux.qds --save-state state.qst
    queen attack --kind direct --out results/
    queen evaluate --out results/
    queen plan --epsilon 0.05 --delta 0.05
    queen ablate --parameter t --values 0.1,0.2,0.3
    queen quartile --per-class 50
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import certify, persist, report
from .attacks import ATTACK_KINDS, AttackConfig, QueryLog, evaluate_piracy, run_attack
from .data import Dataset
from .pipeline import (
    QUARTILES,
    ExperimentConfig,
    ablation_sweep,
    build_world,
    default_benchmark,
    experiment_from_dict,
    experiment_to_dict,
    master_seed,
    quartile_experiment,
    run_experiment,
)
from .stats import ks_forget_quality


def load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        with open(args.config) as fh:
            config = experiment_from_dict(json.load(fh))
    else:
        config = default_benchmark()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config


def _add_common(parser, config=True):
    if config:
        parser.add_argument("--config", help="experiment config JSON")
    parser.add_argument("--seed", type=int, help="master seed (QUEEN_SEED wins)")


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    config = load_config(args)
    from .data import generate_dataset
    from .util import derive_seed

    seed = master_seed(config)
    splits = generate_dataset(replace(config.dataset, seed=derive_seed(seed, "data")))
    os.makedirs(args.out, exist_ok=True)
    for name in ("train", "test", "aux"):
        ds = getattr(splits, name)
        path = os.path.join(args.out, f"{name}.qds")
        persist.save_dataset(path, ds)
        print(f"{name}\t{len(ds.X)}\t{path}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args)
    world = build_world(config)
    server = world.new_server()
    state = persist.PersistedState.from_server(server)
    persist.save_state(args.out, state)
    test = world.splits.test
    print(f"seed\t{world.seed}")
    print(f"protectee_accuracy\t{world.protectee.accuracy(test.X, test.y):.6g}")
    print(f"registry_radius\t{server.registry.radius:.6g}")
    print(f"state\t{args.out}")
    return 0


def cmd_analyze(args) -> int:
    if args.state:
        state = persist.load_state(args.state)
        profiles = state.registry.profiles
        radius = state.registry.radius
        threshold = state.config.threshold
    else:
        config = load_config(args)
        world = build_world(config)
        server = world.new_server()
        profiles = world.profiles
        radius = server.registry.radius
        threshold = config.defense.threshold
    print("class\tcenter_x\tcenter_y\tregion_radius")
    for label in sorted(profiles):
        p = profiles[label]
        print(f"{label}\t{p.center[0]:.6g}\t{p.center[1]:.6g}\t{p.radius:.6g}")
    d_bar = float(np.mean([p.radius for p in profiles.values()]))
    print(f"mean_region_radius\t{d_bar:.6g}")
    print(f"registry_radius\t{radius:.6g}")
    print(f"threshold\t{threshold:.6g}")
    return 0


def _read_queries(source: str) -> np.ndarray:
    """Queries from a dataset file, a text file, or '-' for stdin."""
    if source == "-":
        rows = [line.split() for line in sys.stdin if line.strip()]
        return np.array([[float(v) for v in row] for row in rows])
    with open(source, "rb") as fh:
        head = fh.read(10)
    if head.startswith(b"queen-data"):
        return persist.load_dataset(source).X
    rows = []
    with open(source) as fh:
        for line in fh:
            if line.strip():
                rows.append([float(v) for v in line.split()])
    return np.array(rows)


def cmd_serve(args) -> int:
    state = persist.load_state(args.state)
    server = state.to_server()
    X = _read_queries(args.queries)
    if X.ndim != 2 or X.shape[1] != server.network.spec.input_dim:
        raise SystemExit(
            f"queries must be rows of dim {server.network.spec.input_dim}"
        )

    sink = open(args.out, "w") if args.out else sys.stdout
    logbook = QueryLog()
    try:
        for x in X:
            answer = server(x)
            logbook.record(x, answer, server.last_condition)
            sink.write("\t".join(f"{v:.12g}" for v in answer) + "\n")
    finally:
        if args.out:
            sink.close()

    counts = {c.value: n for c, n in server.condition_counts.items()}
    print(f"served\t{len(X)}\tconditions\t{json.dumps(counts)}", file=sys.stderr)
    if args.log:
        persist.save_query_log(args.log, logbook)
        print(f"query_log\t{args.log}.qlog", file=sys.stderr)
    if args.save_state:
        persist.save_state(args.save_state, persist.PersistedState.from_server(server))
        print(f"state\t{args.save_state}", file=sys.stderr)
    return 0


def _pick_attack(config: ExperimentConfig, args) -> AttackConfig:
    for cfg in config.attacks:
        if cfg.kind == args.kind:
            break
    else:
        cfg = AttackConfig(
            kind=args.kind,
            budget=2000,
            piracy_spec=config.protectee_spec(),
        )
    if args.budget:
        cfg = replace(cfg, budget=args.budget)
    return cfg


def cmd_attack(args) -> int:
    from .util import derive_seed

    config = load_config(args)
    seed = master_seed(config)
    cfg = _pick_attack(config, args)
    cfg = replace(cfg, seed=derive_seed(seed, "attack", cfg.kind))

    world = build_world(config, seed=seed)
    server = world.new_server()
    pirate, logbook = run_attack(server, world.splits.aux, cfg)
    acc_d, agr_d = evaluate_piracy(pirate, world.protectee, world.splits.test)

    pirate_u, _ = run_attack(world.honest_oracle(), world.splits.aux, cfg)
    acc_u, agr_u = evaluate_piracy(pirate_u, world.protectee, world.splits.test)
    ks = ks_forget_quality(
        pirate.predict(world.splits.test.X),
        pirate_u.predict(world.splits.test.X),
    )

    print(f"kind\t{cfg.kind}")
    print(f"budget\t{cfg.budget}")
    print(f"defended_accuracy\t{acc_d:.6g}\tagreement\t{agr_d:.6g}")
    print(f"undefended_accuracy\t{acc_u:.6g}\tagreement\t{agr_u:.6g}")
    print(f"ks_statistic\t{ks.statistic:.6g}\tp_value\t{ks.p_value:.6g}")
    counts = {c.value: n for c, n in server.condition_counts.items()}
    print(f"conditions\t{json.dumps(counts)}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        stem = os.path.join(args.out, f"attack_{cfg.kind}")
        persist.save_query_log(stem, logbook)
        print(f"query_log\t{stem}.qlog")
    return 0


def cmd_evaluate(args) -> int:
    config = load_config(args)
    result = run_experiment(config)
    text = report.render_run(result)
    sys.stdout.write(text)
    if args.out:
        paths = report.write_run(result, args.out, figures=not args.no_figures)
        for path in paths:
            print(f"wrote\t{path}")
    return 0


def cmd_plan(args) -> int:
    d_bar = args.dbar
    if d_bar is None and args.state:
        state = persist.load_state(args.state)
        d_bar = float(np.mean([p.radius for p in state.registry.profiles.values()]))
    if d_bar is None:
        d_bar = 1.0
    result = certify.plan(args.epsilon, args.delta, args.threshold, d_bar)
    print(f"epsilon\t{result.epsilon:.6g}")
    print(f"delta\t{result.delta:.6g}")
    print(f"threshold\t{result.t:.6g}")
    print(f"d_bar\t{result.d_bar:.6g}")
    print(f"max_honest_queries\t{result.eta_hat:.6g}")
    print(f"min_radius\t{result.r_min:.8g}")
    print(f"honest_estimate_at_min_radius\t{result.eta_at_r_min:.6g}")
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args)
    values = [float(v) for v in args.values.split(",") if v]
    points = ablation_sweep(config, args.parameter, values, n_seeds=args.n_seeds)
    sys.stdout.write(report.render_ablation(points))
    if args.out:
        for path in report.write_ablation(points, args.out):
            print(f"wrote\t{path}")
    return 0


def cmd_quartile(args) -> int:
    config = load_config(args)
    world = build_world(config)
    names = QUARTILES if args.quartile == "all" else (args.quartile,)
    accuracies = {}
    for name in names:
        accuracies[name] = quartile_experiment(
            world, name,
            per_class=args.per_class,
            epochs=args.epochs,
            seed=world.seed,
        )
    sys.stdout.write(report.render_quartiles(accuracies))
    if args.out:
        for path in report.write_quartiles(accuracies, args.out):
            print(f"wrote\t{path}")
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="queen",
        description="train, serve and attack a defended classifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/test/aux dataset files")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the full stack, save a state file")
    _add_common(p)
    p.add_argument("--out", required=True, help="state file path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze", help="per-class sensitive-region table")
    _add_common(p)
    p.add_argument("--state", help="read profiles from a state file")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("serve", help="answer a query stream through the defense")
    p.add_argument("--state", required=True, help="state file from `train`")
    p.add_argument("--queries", required=True,
                   help="dataset file, text file of rows, or - for stdin")
    p.add_argument("--out", help="answer file (default stdout)")
    p.add_argument("--log", help="query log stem (writes .qlog + .manifest)")
    p.add_argument("--save-state", help="write the advanced session back")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("attack", help="run one extraction attack")
    _add_common(p)
    p.add_argument("--kind", choices=ATTACK_KINDS, default="direct")
    p.add_argument("--budget", type=int, help="query budget override")
    p.add_argument("--out", help="directory for the query log")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="full benchmark run with report files")
    _add_common(p)
    p.add_argument("--out", help="report directory")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plan", help="deployment planner table")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--dbar", type=float,
                   help="mean region radius (default 1.0, or from --state)")
    p.add_argument("--state", help="derive d_bar from a state file")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("ablate", help="threshold or radius sweep")
    _add_common(p)
    p.add_argument("--parameter", choices=("t", "r"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--n-seeds", type=int, default=5)
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("quartile", help="train on one distance quartile per class")
    _add_common(p)
    p.add_argument("--quartile", default="all",
                   choices=QUARTILES + ("all",))
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_quartile)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        # downstream pipe (head, less) closed early; silence the
        # shutdown flush instead of tracebacking
        devnull = os.open(os.devnull, os.O_WRONLY)
        os.dup2(devnull, sys.stdout.fileno())
        return 0


if __name__ == "__main__":
    sys.exit(main())
