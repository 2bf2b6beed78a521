"""Command-line entry point.

Subcommands cover the full workflow::

    gridtopo generate   --out chronics/ --count 1000 --seed 17 --regime contingencies
    gridtopo train      --data chronics/ --agent ppo_substation --seeds 0,1,2 ...
    gridtopo evaluate   --data chronics/ --agent greedy --split test --out report
    gridtopo plot       --runs out/agent_a out/agent_b --out curves.svg
    gridtopo catalog dump
    gridtopo agent describe --kind ppo_hierarchical
    gridtopo checkpoint inspect path/to/best.npz

Exit codes: 0 success, 1 usage error, 2 runtime failure.  The environment
variable ``GRIDTOPO_DATA_DIR`` supplies the default base directory for
generated data and run outputs.  Every command echoes its effective
configuration into its output directory so runs can be reproduced from
(config, master seed) alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; the contract is 1
        raise UsageError(message)


def _data_root() -> Path:
    return Path(os.environ.get("GRIDTOPO_DATA_DIR", "."))


def _load_spec(path: str | None):
    from .grid import load_grid_spec, load_ieee14
    return load_grid_spec(path) if path else load_ieee14()


def _echo_config(out_dir: Path, args: argparse.Namespace, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {k: v for k, v in vars(args).items() if k != "func"}
    payload["command"] = command
    (out_dir / "config.json").write_text(json.dumps(payload, indent=1,
                                                    sort_keys=True, default=str))


@dataclass
class ExperimentConfig:
    """Declarative experiment description (JSON file, overridden by flags)."""

    regime: str = "no_contingencies"
    agent: str = "greedy"
    seeds: list[int] = field(default_factory=lambda: [0])
    budget: int = 200_000
    data: str | None = None
    out: str | None = None
    gate_threshold: float = 0.95
    horizon: int | None = None
    overrides: dict = field(default_factory=dict)
    workers: int = 0  # 0 -> all cores


def _apply_config_file(args):
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        for key, value in raw.items():
            if getattr(args, key, None) in (None, [], {}):
                setattr(args, key, value)
    return args


def _parse_seeds(text) -> list[int]:
    if isinstance(text, list):
        return [int(s) for s in text]
    return [int(s) for s in str(text).split(",") if s != ""]


def _parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _workers(requested: int) -> int:
    return requested if requested and requested > 0 else (os.cpu_count() or 1)


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .actions import enumerate_catalog
    from .agents import build_agent
    from .engine import EpisodeConfig, run_episode
    from .scenarios import (attach_outages, generate_scenario, make_split,
                            save_scenario)

    spec = _load_spec(args.grid)
    out = Path(args.out or (_data_root() / "chronics"))
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, args, "generate")
    catalog = enumerate_catalog(spec)
    steps = args.steps or spec.episode_steps
    engine_config = EpisodeConfig(horizon=steps)

    scenarios = []
    for sid in range(args.count):
        sc = generate_scenario(spec, sid, args.seed, steps)
        if args.regime == "contingencies":
            sc = attach_outages(sc, spec, args.seed)
        save_scenario(out, sc)
        scenarios.append(sc)
    print(f"wrote {len(scenarios)} scenarios under {out}")

    greedy = build_agent("greedy", spec, catalog,
                         gate_threshold=args.gate_threshold)

    def difficulty(sc):
        rec = run_episode(sc, greedy, spec, catalog, engine_config)
        return sum(1 for s in rec.steps if s.changed_topology)

    n_workers = _workers(args.workers)
    if n_workers > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(n_workers) as pool:
            diffs = pool.map(difficulty, scenarios)
    else:
        diffs = [difficulty(sc) for sc in scenarios]
    difficulties = {sc.id: d for sc, d in zip(scenarios, diffs)}
    manifest = make_split(scenarios, difficulties, n_buckets=args.buckets)
    (out / "split.json").write_text(manifest.to_json())
    print(f"split: {len(manifest.train)} train / {len(manifest.val)} val / "
          f"{len(manifest.test)} test ({args.buckets} buckets)")
    return 0


def _load_split(data_dir: Path, which: str):
    from .scenarios import SplitManifest, load_scenario
    manifest = SplitManifest.from_json((data_dir / "split.json").read_text())
    ids = {"train": manifest.train, "val": manifest.val, "test": manifest.test,
           "all": manifest.train + manifest.val + manifest.test}[which]
    return [load_scenario(data_dir, sid) for sid in ids], manifest


def _train_seed_task(kwargs):
    from .training import train_seed
    return train_seed(**kwargs)


def cmd_train(args) -> int:
    from .actions import enumerate_catalog
    from .engine import EpisodeConfig
    from .training import train_seed

    if args.agent == "greedy":
        raise UsageError("the greedy expert is rule-based and not trainable")
    spec = _load_spec(args.grid)
    catalog = enumerate_catalog(spec)
    data_dir = Path(args.data or (_data_root() / "chronics"))
    train_set, _ = _load_split(data_dir, "train")
    val_set, _ = _load_split(data_dir, "val")
    if args.limit_train:
        train_set = train_set[: args.limit_train]
    if args.limit_val:
        val_set = val_set[: args.limit_val]
    out = Path(args.out or (_data_root() / "runs" / args.agent))
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, args, "train")
    horizon = args.horizon or spec.episode_steps
    engine_config = EpisodeConfig(horizon=horizon)
    seeds = _parse_seeds(args.seeds)
    overrides = _parse_overrides(args.set)

    def seed_kwargs(seed):
        return dict(kind=args.agent, spec=spec, catalog=catalog,
                    scenarios_train=train_set, scenarios_val=val_set,
                    budget=args.budget, seed=seed,
                    out_dir=out / f"seed_{seed}", engine_config=engine_config,
                    regime=args.regime, gate_threshold=args.gate_threshold,
                    overrides=overrides, val_every=args.val_every,
                    val_max=args.val_max,
                    sac_update_every=args.sac_update_every)

    n_workers = min(_workers(args.workers), len(seeds))
    if n_workers > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(n_workers) as pool:
            results = pool.map(_train_seed_task,
                               [seed_kwargs(s) for s in seeds])
    else:
        results = [train_seed(**seed_kwargs(s)) for s in seeds]
    summary = {str(r.seed): {"best_val_length": r.best_val_length,
                             "checkpoint": r.best_checkpoint,
                             "interactions": r.interactions,
                             "failed": r.failed, "failure": r.failure}
               for r in results}
    (out / "summary.json").write_text(json.dumps(summary, indent=1,
                                                 sort_keys=True))
    ok = [r for r in results if not r.failed]
    for r in results:
        tag = "FAILED" if r.failed else "ok"
        print(f"seed {r.seed}: {tag}  best validation length "
              f"{r.best_val_length:.1f}  ({r.interactions} interactions)")
    if ok:
        best = max(ok, key=lambda r: r.best_val_length)
        (out / "best_seed.json").write_text(json.dumps(
            {"seed": best.seed, "checkpoint": best.best_checkpoint,
             "best_val_length": best.best_val_length}))
        print(f"best seed {best.seed} -> {best.best_checkpoint}")
    return 0 if ok else 2


def cmd_evaluate(args) -> int:
    from .actions import enumerate_catalog
    from .agents import build_agent
    from .engine import EpisodeConfig
    from .metrics import evaluate

    spec = _load_spec(args.grid)
    catalog = enumerate_catalog(spec)
    data_dir = Path(args.data or (_data_root() / "chronics"))
    scenarios, _ = _load_split(data_dir, args.split)
    if args.limit:
        scenarios = scenarios[: args.limit]
    if args.checkpoint and not Path(args.checkpoint).exists():
        raise FileNotFoundError(f"checkpoint {args.checkpoint} does not exist")
    agent = build_agent(args.agent, spec, catalog,
                        gate_threshold=args.gate_threshold,
                        eval_seed=args.eval_seed, checkpoint=args.checkpoint)
    horizon = args.horizon or spec.episode_steps
    report = evaluate(agent, scenarios, spec, catalog,
                      EpisodeConfig(horizon=horizon),
                      record_dir=args.records, workers=_workers(args.workers))
    out = Path(args.out or (_data_root() / f"report_{args.agent}"))
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(str(out) + ".json").write_text(report.to_json())
    Path(str(out) + ".txt").write_text(report.to_table() + "\n")
    print(report.to_table())
    print(f"\nwrote {out}.json and {out}.txt")
    return 0


def _read_streams(run_dir: Path):
    streams = []
    for path in sorted(run_dir.glob("seed_*/metrics.jsonl")):
        rows = [json.loads(line) for line in open(path)]
        rows = [r for r in rows if "episode_return_mean" in r]
        if rows:
            streams.append((path.parent.name, rows))
    if not streams:
        raise FileNotFoundError(f"no metrics streams under {run_dir}")
    return streams


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4.5))
    metric = args.metric
    for run in args.runs:
        run_dir = Path(run)
        streams = _read_streams(run_dir)
        label = run_dir.name
        if args.per_seed:
            for seed_name, rows in streams:
                x = [r["env_interactions"] for r in rows]
                y = [r[metric] for r in rows]
                ax.plot(x, y, alpha=0.7, label=f"{label}/{seed_name}")
        else:
            grid = None
            curves = []
            for _, rows in streams:
                x = np.array([r["env_interactions"] for r in rows], float)
                y = np.array([r[metric] for r in rows], float)
                if grid is None:
                    grid = np.linspace(x.min(), x.max(), 200)
                curves.append(np.interp(grid, x, y))
            curves = np.stack(curves)
            mean = curves.mean(axis=0)
            stderr = (curves.std(axis=0) / np.sqrt(curves.shape[0])
                      if curves.shape[0] > 1 else np.zeros_like(mean))
            line, = ax.plot(grid, mean, label=label)
            ax.fill_between(grid, mean - stderr, mean + stderr,
                            color=line.get_color(), alpha=0.25, linewidth=0)
    ax.set_xlabel("environment interactions")
    ax.set_ylabel(metric.replace("_", " "))
    ax.legend(fontsize=8)
    fig.tight_layout()
    out = args.out or "training_curves.svg"
    fig.savefig(out)
    print(f"wrote {out}")
    return 0


def cmd_catalog(args) -> int:
    from .actions import catalog_as_dicts, enumerate_catalog

    if args.verb != "dump":
        raise UsageError(f"unknown catalog verb {args.verb!r}")
    spec = _load_spec(args.grid)
    catalog = enumerate_catalog(spec)
    payload = {
        "total": len(catalog),
        "controllable_substations": catalog.controllable_substations,
        "per_substation": {str(s): [r.start, r.stop]
                           for s, r in catalog.per_substation.items()},
        "actions": catalog_as_dicts(catalog),
    }
    text = json.dumps(payload, indent=1)
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_agent(args) -> int:
    from .actions import enumerate_catalog
    from .agents import build_agent

    if args.verb != "describe":
        raise UsageError(f"unknown agent verb {args.verb!r}")
    spec = _load_spec(args.grid)
    catalog = enumerate_catalog(spec)
    agent = build_agent(args.kind, spec, catalog,
                        gate_threshold=args.gate_threshold,
                        checkpoint=args.checkpoint)
    print(agent.describe())
    return 0


def cmd_checkpoint(args) -> int:
    from .nets import describe_checkpoint

    if args.verb != "inspect":
        raise UsageError(f"unknown checkpoint verb {args.verb!r}")
    print(describe_checkpoint(args.path))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="gridtopo",
                description="two-busbar grid topology control workbench")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--grid", default=None,
                        help="grid spec file (default: bundled 14-substation case)")
        sp.add_argument("--gate-threshold", type=float, default=0.95)

    g = sub.add_parser("generate", help="write synthetic chronics and the split")
    common(g)
    g.add_argument("--out", default=None)
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--regime", choices=["no_contingencies", "contingencies"],
                   default="no_contingencies")
    g.add_argument("--steps", type=int, default=None,
                   help="steps per scenario (default: full 8064)")
    g.add_argument("--buckets", type=int, default=10)
    g.add_argument("--workers", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train an agent across seeds")
    common(t)
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--data", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--agent", required=True)
    t.add_argument("--regime", choices=["no_contingencies", "contingencies"],
                   default="no_contingencies")
    t.add_argument("--seeds", default="0")
    t.add_argument("--budget", type=int, default=200_000,
                   help="gate-fired decisions per seed")
    t.add_argument("--horizon", type=int, default=None)
    t.add_argument("--val-every", type=int, default=20)
    t.add_argument("--val-max", type=int, default=10)
    t.add_argument("--sac-update-every", type=int, default=1)
    t.add_argument("--limit-train", type=int, default=0)
    t.add_argument("--limit-val", type=int, default=0)
    t.add_argument("--workers", type=int, default=0)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="hyperparameter override, e.g. --set lr=5e-5")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="run an agent over a scenario split")
    common(e)
    e.add_argument("--data", default=None)
    e.add_argument("--agent", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--split", choices=["train", "val", "test", "all"],
                   default="test")
    e.add_argument("--limit", type=int, default=0)
    e.add_argument("--horizon", type=int, default=None)
    e.add_argument("--eval-seed", type=int, default=0)
    e.add_argument("--records", default=None,
                   help="directory for per-episode JSONL traces")
    e.add_argument("--out", default=None)
    e.add_argument("--workers", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    pl = sub.add_parser("plot", help="render training curves to SVG")
    pl.add_argument("--runs", nargs="+", required=True,
                    help="run directories containing seed_*/metrics.jsonl")
    pl.add_argument("--out", default=None)
    pl.add_argument("--metric", default="episode_return_mean")
    pl.add_argument("--per-seed", action="store_true",
                    help="overlay individual seeds instead of the mean band")
    pl.set_defaults(func=cmd_plot)

    c = sub.add_parser("catalog", help="action catalog inspection")
    c.add_argument("verb", choices=["dump"])
    common(c)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_catalog)

    a = sub.add_parser("agent", help="agent architecture inspection")
    a.add_argument("verb", choices=["describe"])
    common(a)
    a.add_argument("--kind", required=True)
    a.add_argument("--checkpoint", default=None)
    a.set_defaults(func=cmd_agent)

    ck = sub.add_parser("checkpoint", help="checkpoint inspection")
    ck.add_argument("verb", choices=["inspect"])
    ck.add_argument("path")
    ck.set_defaults(func=cmd_checkpoint)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "config"):
            args = _apply_config_file(args)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure contract
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
