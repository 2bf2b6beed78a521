"""Episode-record statistics and scenario-set evaluation reports.

The report mirrors the summary-table rows used throughout the experiments:
episode length, per-step reward normalized to the full horizon, topology
activity (change counts, unique canonical topologies, per-step topological
depth), action-sequence structure, and the per-substation action
distribution.  A sequence is a run of two or more consecutive steps whose
actions changed the topology; its identity is the ordered list of
(substation, configuration) pairs, and its repeatability is how often that
exact run recurs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import (EpisodeConfig, EpisodeRecord, StepRecord, run_episode,
                     topo_depth_of)
from .grid import GridSpec, TopologyState


def topo_depth(state: TopologyState, spec: GridSpec) -> int:
    """Substations away from the fused default, mirror patterns excluded."""
    return topo_depth_of(state.busbar, spec)


@dataclass(frozen=True)
class ActionSequence:
    start_step: int
    identity: tuple  # ((substation, config_bits), ...)

    @property
    def length(self) -> int:
        return len(self.identity)


def extract_sequences(record: EpisodeRecord) -> list[ActionSequence]:
    """Maximal runs of >=2 consecutive topology-changing steps."""
    out = []
    run: list[tuple[int, int]] = []
    run_start = 0
    for t, step in enumerate(record.steps):
        if step.changed_topology:
            if not run:
                run_start = t
            run.append((step.substation, step.config_bits))
        else:
            if len(run) >= 2:
                out.append(ActionSequence(run_start, tuple(run)))
            run = []
    if len(run) >= 2:
        out.append(ActionSequence(run_start, tuple(run)))
    return out


@dataclass
class EvalReport:
    n_scenarios: int
    horizon: int
    mean_episode_length: float
    mean_normalized_reward: float
    topo_change_count: int
    unsolved_scenarios: int
    unique_topologies: int
    mean_topo_depth: float
    std_topo_depth: float
    n_unique_sequences: int
    mean_sequence_length: float | None
    std_sequence_length: float | None
    mean_sequence_repeatability: float | None
    std_sequence_repeatability: float | None
    substation_distribution: dict[int, float] = field(default_factory=dict)
    episode_lengths: list[int] = field(default_factory=list)
    done_reasons: dict[str, int] = field(default_factory=dict)

    ROWS = (
        ("Mean episode length", "mean_episode_length"),
        ("Mean normalized reward", "mean_normalized_reward"),
        ("# of topo changes", "topo_change_count"),
        ("# unsolved scenarios", "unsolved_scenarios"),
        ("# of unique topologies", "unique_topologies"),
        ("Mean topo depth", "mean_topo_depth"),
        ("St. dev. of topo depth", "std_topo_depth"),
        ("# unique sequences", "n_unique_sequences"),
        ("Mean sequence length", "mean_sequence_length"),
        ("St. dev. of sequence length", "std_sequence_length"),
        ("Mean sequence repeatability", "mean_sequence_repeatability"),
        ("St. dev. of sequence repeatability", "std_sequence_repeatability"),
    )

    def to_json(self) -> str:
        raw = dict(self.__dict__)
        raw["substation_distribution"] = {
            str(k): v for k, v in self.substation_distribution.items()}
        return json.dumps(raw, indent=1, sort_keys=True)

    def to_table(self) -> str:
        width = max(len(name) for name, _ in self.ROWS)
        lines = [f"{'row':<{width}}  value"]
        for name, attr in self.ROWS:
            v = getattr(self, attr)
            if v is None:
                text = "null"
            elif isinstance(v, float):
                text = f"{v:.2f}"
            else:
                text = str(v)
            lines.append(f"{name:<{width}}  {text}")
        return "\n".join(lines)


def summarize_records(records: list[EpisodeRecord], horizon: int) -> EvalReport:
    """Aggregate the full report from per-episode traces."""
    lengths = [r.length for r in records]
    norm_rewards = [r.total_reward / r.length * horizon for r in records]
    topo_changes = sum(
        1 for r in records for s in r.steps if s.changed_topology)

    topo_keys = set()
    depths = []
    for r in records:
        topo_keys.add(r.initial_topo_key)
        for s in r.steps:
            if s.topo_key is not None:
                topo_keys.add(s.topo_key)
            depths.append(s.topo_depth)

    sequences = [seq for r in records for seq in extract_sequences(r)]
    seq_counts: dict[tuple, int] = {}
    for seq in sequences:
        seq_counts[seq.identity] = seq_counts.get(seq.identity, 0) + 1
    if sequences:
        lens = np.array([s.length for s in sequences], float)
        reps = np.array(list(seq_counts.values()), float)
        seq_stats = (float(lens.mean()), float(lens.std()),
                     float(reps.mean()), float(reps.std()))
    else:
        seq_stats = (None, None, None, None)

    sub_counts: dict[int, int] = {}
    for r in records:
        for s in r.steps:
            if s.changed_topology and s.substation >= 0:
                sub_counts[s.substation] = sub_counts.get(s.substation, 0) + 1
    total_changes = sum(sub_counts.values())
    sub_dist = {sub: c / total_changes for sub, c in sorted(sub_counts.items())} \
        if total_changes else {}

    reasons: dict[str, int] = {}
    for r in records:
        reasons[r.done_reason] = reasons.get(r.done_reason, 0) + 1

    return EvalReport(
        n_scenarios=len(records),
        horizon=horizon,
        mean_episode_length=float(np.mean(lengths)),
        mean_normalized_reward=float(np.mean(norm_rewards)),
        topo_change_count=topo_changes,
        unsolved_scenarios=sum(1 for ln in lengths if ln < horizon),
        unique_topologies=len(topo_keys),
        mean_topo_depth=float(np.mean(depths)),
        std_topo_depth=float(np.std(depths)),
        n_unique_sequences=len(seq_counts),
        mean_sequence_length=seq_stats[0],
        std_sequence_length=seq_stats[1],
        mean_sequence_repeatability=seq_stats[2],
        std_sequence_repeatability=seq_stats[3],
        substation_distribution=sub_dist,
        episode_lengths=lengths,
        done_reasons=reasons,
    )


def evaluate(agent, scenarios, spec: GridSpec, catalog,
             config: EpisodeConfig = EpisodeConfig(),
             record_dir: str | Path | None = None,
             workers: int = 1) -> EvalReport:
    """Roll the agent over a scenario set and aggregate the report.

    Deterministic for rule-based agents and for stochastic policies with a
    fixed evaluation seed (the per-episode RNG is keyed on the scenario id).
    """
    if workers > 1:
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        with ctx.Pool(workers) as pool:
            records = pool.starmap(
                _episode_worker,
                [(sc, agent, spec, catalog, config) for sc in scenarios])
    else:
        records = [run_episode(sc, agent, spec, catalog, config)
                   for sc in scenarios]
    if record_dir is not None:
        for rec in records:
            write_record(Path(record_dir) / f"episode_{rec.scenario_id}.jsonl",
                         rec)
    return summarize_records(records, config.horizon)


def _episode_worker(scenario, agent, spec, catalog, config):
    return run_episode(scenario, agent, spec, catalog, config)


# ---------------------------------------------------------------------------
# episode record serialization: one JSON step per line


def write_record(path: str | Path, record: EpisodeRecord):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps({"scenario_id": record.scenario_id,
                             "initial_topo": record.initial_topo_key.hex()})
                 + "\n")
        for s in record.steps:
            row = {"a": s.action_index, "sub": s.substation,
                   "chg": int(s.changed_topology), "r": round(s.reward, 9),
                   "rho": round(s.max_rho, 6), "depth": s.topo_depth,
                   "done": s.done_reason, "bits": s.config_bits}
            if s.topo_key is not None:
                row["topo"] = s.topo_key.hex()
            if s.trip_events:
                row["trips"] = [[li, kind] for li, kind in s.trip_events]
            fh.write(json.dumps(row) + "\n")


def read_record(path: str | Path) -> EpisodeRecord:
    with open(path) as fh:
        header = json.loads(fh.readline())
        steps = []
        for line in fh:
            row = json.loads(line)
            steps.append(StepRecord(
                action_index=row["a"], substation=row["sub"],
                changed_topology=bool(row["chg"]), reward=row["r"],
                max_rho=row["rho"], topo_depth=row["depth"],
                done_reason=row["done"], config_bits=row["bits"],
                topo_key=bytes.fromhex(row["topo"]) if "topo" in row else None,
                trip_events=[(li, kind) for li, kind in row.get("trips", [])]))
    return EpisodeRecord(header["scenario_id"], steps,
                         bytes.fromhex(header["initial_topo"]))
