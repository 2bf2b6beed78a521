"""Synthetic chronics: load/generation time series, outage schedules, splits.

Each scenario is 8064 five-minute steps (28 days).  Loads follow a daily
sinusoid with weekly modulation and AR(1) noise around their base level;
solar follows a clear-sky bell with cloud noise and is zero at night; wind is
bounded AR(1) noise; the nuclear unit holds a per-scenario constant; the two
thermal units absorb the residual so that total generation equals total load
at every step exactly.  When the residual would exceed thermal capacity the
loads of that step are scaled down to fit (and renewables are curtailed when
the residual would go negative), preserving exact balance.

All randomness derives from ``SeedSequence([master_seed, scenario_id])`` so
scenarios are independent, reproducible streams.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import GridSpec

STEPS_PER_DAY = 288
OUTAGE_DURATION = 48  # 4 hours
OUTAGES_PER_DAY = 2
# substation pairs whose connecting line may suffer a forced outage
ELIGIBLE_OUTAGE_PAIRS = ((3, 4), (3, 6), (3, 8), (6, 8), (11, 12))
# per-scenario demand scale draw: spreads difficulty across the scenario set
DEMAND_SCALE_RANGE = (0.80, 1.00)


@dataclass(frozen=True)
class OutageEvent:
    step: int
    line: int
    duration_steps: int = OUTAGE_DURATION


@dataclass
class Scenario:
    id: int
    load_mw: np.ndarray  # (steps, n_load)
    gen_mw: np.ndarray   # (steps, n_gen)
    outages: list[OutageEvent] | None = None

    @property
    def steps(self) -> int:
        return self.load_mw.shape[0]


@dataclass
class SplitManifest:
    train: list[int]
    val: list[int]
    test: list[int]
    bucket_of: dict[int, int]
    difficulty: dict[int, int]

    def to_json(self) -> str:
        return json.dumps({
            "train": self.train, "val": self.val, "test": self.test,
            "bucket_of": {str(k): v for k, v in self.bucket_of.items()},
            "difficulty": {str(k): v for k, v in self.difficulty.items()},
        }, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SplitManifest":
        raw = json.loads(text)
        return SplitManifest(
            raw["train"], raw["val"], raw["test"],
            {int(k): v for k, v in raw["bucket_of"].items()},
            {int(k): v for k, v in raw["difficulty"].items()},
        )


def _scenario_rng(master_seed: int, scenario_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, scenario_id]))


def _ar1(rng, steps, rho, sigma):
    eps = rng.normal(0.0, sigma, steps)
    out = np.empty(steps)
    acc = 0.0
    for t in range(steps):
        acc = rho * acc + eps[t]
        out[t] = acc
    return out


def generate_scenario(spec: GridSpec, scenario_id: int, seed: int,
                      steps: int | None = None) -> Scenario:
    steps = steps or spec.episode_steps
    rng = _scenario_rng(seed, scenario_id)
    t = np.arange(steps)
    day_phase = 2.0 * np.pi * (t % STEPS_PER_DAY) / STEPS_PER_DAY
    week_phase = 2.0 * np.pi * t / (7 * STEPS_PER_DAY)

    # demand: per-scenario scale spreads difficulty across scenarios
    scale = rng.uniform(*DEMAND_SCALE_RANGE)
    loads = np.empty((steps, spec.n_load))
    for j, load in enumerate(spec.loads):
        amp_d = rng.uniform(0.12, 0.22)
        amp_w = rng.uniform(0.02, 0.06)
        phase_j = rng.normal(0.0, 0.12)
        # trough around 04:00, peak in the evening
        daily = 1.0 + amp_d * np.sin(day_phase - 2.1 + phase_j)
        weekly = 1.0 + amp_w * np.sin(week_phase + rng.uniform(0, 2 * np.pi))
        noise = 1.0 + _ar1(rng, steps, 0.98, 0.006)
        loads[:, j] = np.maximum(load.base_mw * scale * daily * weekly * noise, 0.0)

    gens = np.zeros((steps, spec.n_gen))
    thermal_ids = [g.id for g in spec.generators if g.kind == "thermal"]
    for g in spec.generators:
        if g.kind == "solar":
            s = t % STEPS_PER_DAY
            up = (s >= 84) & (s <= 228)  # 07:00 .. 19:00
            bell = np.where(up, np.sin(np.pi * (s - 84) / 144.0), 0.0)
            cloud = np.clip(0.75 + _ar1(rng, steps, 0.97, 0.02), 0.2, 1.0)
            gens[:, g.id] = g.max_mw * bell * cloud
        elif g.kind == "wind":
            level = rng.uniform(0.25, 0.55)
            w = np.clip(level + _ar1(rng, steps, 0.995, 0.01), 0.02, 0.95)
            gens[:, g.id] = g.max_mw * w
        elif g.kind == "nuclear":
            gens[:, g.id] = g.max_mw * rng.uniform(0.60, 0.85)

    # thermals balance the residual exactly; loads yield if capacity binds
    fixed = gens.sum(axis=1)
    total_load = loads.sum(axis=1)
    cap = sum(spec.generators[i].max_mw for i in thermal_ids)
    over = total_load > fixed + cap
    if over.any():
        loads[over] *= ((fixed[over] + cap) / total_load[over])[:, None]
        total_load = loads.sum(axis=1)
    residual = total_load - fixed
    neg = residual < 0.0
    if neg.any():
        # curtail wind/solar proportionally so thermals stay at zero
        for g in spec.generators:
            if g.kind in ("wind", "solar"):
                gens[neg, g.id] *= (total_load[neg] / fixed[neg])
        fixed = gens.sum(axis=1)
        residual = np.maximum(total_load - fixed, 0.0)
    if thermal_ids:
        lead = thermal_ids[0]
        lead_max = spec.generators[lead].max_mw
        share = _ar1(rng, steps, 0.999, 0.002) + 0.45
        if len(thermal_ids) > 1:
            # followers move with the share signal but must leave the lead
            # unit inside its rating, since the lead absorbs the remainder
            follower = thermal_ids[1]
            want = residual * np.clip(share, 0.2, 0.7)
            floor = np.maximum(residual - lead_max, 0.0)
            gens[:, follower] = np.clip(want, floor,
                                        spec.generators[follower].max_mw)
            gens[:, lead] = residual - gens[:, follower]
        else:
            gens[:, lead] = residual
    return Scenario(scenario_id, loads, gens)


def generate_scenarios(spec: GridSpec, count: int, seed: int,
                       steps: int | None = None) -> list[Scenario]:
    return [generate_scenario(spec, i, seed, steps) for i in range(count)]


def eligible_outage_lines(spec: GridSpec) -> list[int]:
    pairs = {frozenset(p) for p in ELIGIBLE_OUTAGE_PAIRS}
    out = [ln.id for ln in spec.lines
           if frozenset((ln.from_sub, ln.to_sub)) in pairs]
    if not out:
        raise ValueError("grid has no outage-eligible lines")
    return out


def attach_outages(scenario: Scenario, spec: GridSpec, seed: int) -> Scenario:
    """Schedule 2 non-overlapping 48-step outages per day on eligible lines.

    Start times are uniform within the day; a draw conflicting with an
    existing event window (or running past the horizon) is re-sampled.
    """
    # stream keyed apart from the chronics draw of the same (seed, id)
    rng = np.random.default_rng(np.random.SeedSequence([seed, scenario.id, 1]))
    lines = eligible_outage_lines(spec)
    steps = scenario.steps
    days = steps // STEPS_PER_DAY
    events: list[OutageEvent] = []
    taken: list[tuple[int, int]] = []
    for day in range(days):
        for _ in range(OUTAGES_PER_DAY):
            for _attempt in range(1000):
                start = day * STEPS_PER_DAY + int(rng.integers(0, STEPS_PER_DAY))
                end = start + OUTAGE_DURATION
                if end > steps:
                    continue
                if all(end <= s or e <= start for s, e in taken):
                    taken.append((start, end))
                    events.append(OutageEvent(start, int(rng.choice(lines))))
                    break
            else:
                raise RuntimeError("could not place a non-overlapping outage")
    events.sort(key=lambda ev: ev.step)
    return Scenario(scenario.id, scenario.load_mw, scenario.gen_mw, events)


def slice_scenario(scenario: Scenario, start: int) -> Scenario:
    """View of a scenario beginning at ``start`` (outages re-anchored;
    events already underway or straddling the cut are dropped)."""
    if not 0 <= start < scenario.steps:
        raise ValueError(f"start {start} outside scenario of {scenario.steps} steps")
    outages = None
    if scenario.outages is not None:
        outages = [OutageEvent(ev.step - start, ev.line, ev.duration_steps)
                   for ev in scenario.outages if ev.step >= start]
    return Scenario(scenario.id, scenario.load_mw[start:],
                    scenario.gen_mw[start:], outages)


def make_split(scenarios: list[Scenario], difficulties: dict[int, int],
               n_buckets: int = 10,
               ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)) -> SplitManifest:
    """Difficulty-stratified split.

    Scenarios are sorted by difficulty (expert action count) and cut into
    ``n_buckets`` equal buckets; each bucket is shuffled with a fixed internal
    seed and dealt 70-10-20 by position, so every difficulty level is
    represented in all three sets and the split is a pure function of the
    scenario set and its difficulty scores.
    """
    ids = sorted((s.id for s in scenarios), key=lambda i: (difficulties[i], i))
    n = len(ids)
    if n % n_buckets:
        raise ValueError(f"{n} scenarios do not divide into {n_buckets} buckets")
    bucket_size = n // n_buckets
    n_train = round(ratios[0] * bucket_size)
    n_val = round(ratios[1] * bucket_size)
    train, val, test = [], [], []
    bucket_of = {}
    for b in range(n_buckets):
        bucket = ids[b * bucket_size: (b + 1) * bucket_size]
        for sid in bucket:
            bucket_of[sid] = b
        order = np.random.default_rng(1000003 + b).permutation(bucket_size)
        shuffled = [bucket[k] for k in order]
        train.extend(shuffled[:n_train])
        val.extend(shuffled[n_train: n_train + n_val])
        test.extend(shuffled[n_train + n_val:])
    return SplitManifest(sorted(train), sorted(val), sorted(test),
                         bucket_of, dict(difficulties))


# ---------------------------------------------------------------------------
# disk layout: <root>/<id>/{loads.csv,gens.csv,outages.csv}, <root>/split.json


def save_scenario(root: str | Path, scenario: Scenario) -> Path:
    d = Path(root) / str(scenario.id)
    d.mkdir(parents=True, exist_ok=True)
    np.savetxt(d / "loads.csv", scenario.load_mw, fmt="%.6f", delimiter=",")
    np.savetxt(d / "gens.csv", scenario.gen_mw, fmt="%.6f", delimiter=",")
    if scenario.outages is not None:
        rows = np.array([[ev.step, ev.line, ev.duration_steps]
                         for ev in scenario.outages], np.int64).reshape(-1, 3)
        np.savetxt(d / "outages.csv", rows, fmt="%d", delimiter=",")
    return d


def load_scenario(root: str | Path, scenario_id: int) -> Scenario:
    d = Path(root) / str(scenario_id)
    if not d.is_dir():
        raise FileNotFoundError(f"scenario directory {d} does not exist")
    loads = np.loadtxt(d / "loads.csv", delimiter=",", ndmin=2)
    gens = np.loadtxt(d / "gens.csv", delimiter=",", ndmin=2)
    outages = None
    opath = d / "outages.csv"
    if opath.exists():
        outages = []
        if opath.stat().st_size:
            rows = np.loadtxt(opath, delimiter=",", dtype=np.int64, ndmin=2)
            outages = [OutageEvent(int(r[0]), int(r[1]), int(r[2])) for r in rows]
    return Scenario(scenario_id, loads, gens, outages)
