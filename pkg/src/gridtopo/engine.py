"""Environment step loop: action, flow solve, protection rules, reward.

One step runs in a fixed, documented order:

1. decrement timers; lines whose recovery and outage timers both reach zero
   return to service (unless disconnected for good);
2. scheduled outages starting at this step disconnect their line;
3. the action is applied (setting the substation cooldown);
4. DC solve;
5. soft constraints on the solved loadings: rho >= 1.5 trips the line with a
   10-step recovery timer; trips cascade within the step (re-solve, at most
   one pass per line).  On the settled flow, 1.0 <= rho < 1.5 increments the
   line's overload counter and rho < 1.0 resets it; a counter exceeding the
   2-step grace disconnects the line for the rest of the episode (which
   re-enters the trip cascade);
6. hard constraints on the final components: lost demand, a cut-off
   generator, a split into multiple element-bearing components, or a failed
   solve end the episode;
7. reward from per-line margins (zero when no valid solve exists);
8. observation assembly.

Action legality is checked against the pre-step state (the state the acting
agent observed), so a substation reconfigured at step t is rejected at
t+1..t+3 and becomes available again at t+4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .actions import ActionCatalog, PrimitiveAction, legal_actions
from .grid import (GridSpec, InjectionFrame, Observation, TopologyState,
                   apply_substation_config, build_observation)
from .powerflow import FlowSolution


class IllegalActionError(RuntimeError):
    """An agent emitted an action that was masked out (caller bug)."""

    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass(frozen=True)
class EpisodeConfig:
    trip_threshold: float = 1.5
    overload_grace_steps: int = 2
    trip_recovery_steps: int = 10
    cooldown_steps: int = 3
    horizon: int = 8064


@dataclass
class StepResult:
    observation: Observation
    reward: float
    done: bool
    done_reason: str  # none|demand_lost|generator_disconnected|island|diverged|horizon
    info: dict


@dataclass
class StepRecord:
    """Compact per-step trace used by the metrics module."""

    action_index: int
    substation: int  # -1 for do-nothing
    changed_topology: bool
    reward: float
    max_rho: float
    topo_depth: int
    done_reason: str
    config_bits: int = 0
    topo_key: bytes | None = None  # canonical busbar pattern, when it changed
    trip_events: list = field(default_factory=list)


@dataclass
class EpisodeRecord:
    scenario_id: int
    steps: list[StepRecord]
    initial_topo_key: bytes

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def total_reward(self) -> float:
        return float(sum(s.reward for s in self.steps))

    @property
    def done_reason(self) -> str:
        return self.steps[-1].done_reason if self.steps else "none"


def compute_reward(flow: FlowSolution, spec: GridSpec) -> float:
    """Mean squared-margin reward over all lines, bounded to [0, 1].

    A line carrying F with limit L has margin (L - F)/L, floored at 0 past
    the limit; out-of-service lines count as zero margin.  Each line
    contributes 1 - (1 - margin)^2.
    """
    del spec  # margins only need the per-line ratios already in the solution
    return float(kernels.margin_reward(np.asarray(flow.rho, float),
                                       np.asarray(flow.in_service, np.bool_)))


def canonical_topo_key(busbar: np.ndarray, spec: GridSpec) -> bytes:
    """Busbar pattern normalized per substation so mirrored patterns match.

    A substation whose first canonical element sits on busbar 2 has all its
    assignments flipped; the result is byte-packed for use as a set key.
    """
    arr = spec.arrays
    out = busbar.astype(np.int8).copy()
    for s in range(arr.n_sub):
        slots = arr.sub_slots[arr.sub_ptr[s]: arr.sub_ptr[s + 1]]
        if out[slots[0]] == 2:
            out[slots] = 3 - out[slots]
    return out.tobytes()


def topo_depth_of(busbar: np.ndarray, spec: GridSpec) -> int:
    """Number of substations away from the fused default, mirror-invariant."""
    arr = spec.arrays
    depth = 0
    for s in range(arr.n_sub):
        slots = arr.sub_slots[arr.sub_ptr[s]: arr.sub_ptr[s + 1]]
        bars = busbar[slots]
        if np.any(bars != bars[0]):
            depth += 1
    return depth


class EpisodeEngine:
    """Owns one episode's topology state and carries it through steps.

    Engines are cheap to construct and are not shared between rollouts; the
    greedy agents call :meth:`simulate_action_scores` on their own engine
    instance for one-step lookahead.
    """

    def __init__(self, spec: GridSpec, catalog: ActionCatalog,
                 config: EpisodeConfig = EpisodeConfig()):
        self.spec = spec
        self.catalog = catalog
        self.config = config
        self.state = TopologyState(spec)
        self.t = 0
        self.scenario = None
        self._gen_p = np.zeros(spec.n_gen)
        self._load_p = np.zeros(spec.n_load)
        self._outage_starts: dict[int, list[int]] = {}

    # ------------------------------------------------------------------
    def reset(self, scenario) -> Observation:
        """Start an episode: default topology, step-0 injections solved."""
        self.state = TopologyState(self.spec)
        self.t = 0
        self.scenario = scenario
        self._end = min(self.config.horizon, scenario.load_mw.shape[0])
        self._outage_starts = {}
        for ev in getattr(scenario, "outages", None) or []:
            self._outage_starts.setdefault(ev.step, []).append(
                (ev.line, ev.duration_steps))
        self._load_injections(0)
        flow, *_ = self._solve()
        return build_observation(self.spec, self.state, flow, self._frame())

    def _load_injections(self, t: int):
        self._gen_p[:] = self.scenario.gen_mw[t]
        self._load_p[:] = self.scenario.load_mw[t]

    def _frame(self) -> InjectionFrame:
        return InjectionFrame(self._gen_p, self._load_p)

    def _solve(self):
        arr = self.spec.arrays
        flow_mw, labels, n_comp, chg, chl, conv = kernels.grid_status(
            self.state.busbar, self.state.line_on, self._gen_p, self._load_p,
            arr.n_sub, arr.gen_sub, arr.load_sub, arr.line_from, arr.line_to,
            arr.line_b,
        )
        rho = kernels.rho_of(flow_mw, arr.line_limit, self.state.line_on)
        flow = FlowSolution(flow_mw, rho, self.state.line_on.copy(), [],
                            bool(conv))
        return flow, n_comp, chg, chl

    def _cascade_trips(self, solved, trip_events):
        """Re-solve until no in-service line sits at or past the trip level."""
        flow, n_comp, chg, chl = solved
        for _ in range(self.spec.n_line):
            if not flow.converged:
                break
            hot = self.state.line_on & (flow.rho >= self.config.trip_threshold)
            if not hot.any():
                break
            for li in np.flatnonzero(hot):
                self.state.line_on[li] = False
                self.state.trip_timer[li] = self.config.trip_recovery_steps
                trip_events.append((int(li), "overload_trip"))
            flow, n_comp, chg, chl = self._solve()
        return flow, n_comp, chg, chl

    # ------------------------------------------------------------------
    def legal_mask(self) -> np.ndarray:
        return legal_actions(self.catalog, self.state)

    def simulate_action_scores(self, candidate_indices) -> np.ndarray:
        """Max post-action loading per candidate, holding injections at their
        current values (persistence forecast); fatal outcomes score +inf."""
        arr = self.spec.arrays
        return kernels.score_actions(
            self.state.busbar, self.state.line_on, self._gen_p, self._load_p,
            arr.n_sub, arr.gen_sub, arr.load_sub, arr.line_from, arr.line_to,
            arr.line_b, arr.line_limit,
            self.catalog.act_sub, self.catalog.act_bits,
            arr.sub_ptr, arr.sub_slots,
            np.asarray(candidate_indices, np.int64),
        )

    # ------------------------------------------------------------------
    def step(self, action: PrimitiveAction | int) -> StepResult:
        """Advance one step; see the module docstring for phase order."""
        if isinstance(action, (int, np.integer)):
            action = self.catalog.actions[int(action)]
        state = self.state
        cfg = self.config
        trip_events: list[tuple[int, str]] = []

        if action.kind == "reconfigure" and state.cooldown[action.substation] > 0:
            raise IllegalActionError(
                self.t, f"substation {action.substation} is on cooldown")

        # (1) timers tick; eligible lines reconnect
        recon = kernels.tick_timers(state.cooldown, state.trip_timer,
                                    state.outage_timer, state.line_on,
                                    state.permanent_out)
        if recon.any():
            trip_events.extend((int(li), "reconnect") for li in np.flatnonzero(recon))

        # (2) scheduled outages
        for li, duration in self._outage_starts.get(self.t, ()):
            state.line_on[li] = False
            state.outage_timer[li] = duration
            trip_events.append((li, "outage"))

        # (3) the action
        changed = False
        if action.kind == "reconfigure":
            before = state.busbar.copy()
            apply_substation_config(state, self.spec, action.substation,
                                    action.config, cfg.cooldown_steps)
            changed = bool(np.any(before != state.busbar))

        # (4)+(5) solve, cascade instant trips, settle overload counters once
        flow, n_comp, chg, chl = self._cascade_trips(self._solve(), trip_events)
        if flow.converged:
            over = state.line_on & (flow.rho >= 1.0)
            state.overload_steps[over] += 1
            state.overload_steps[state.line_on & (flow.rho < 1.0)] = 0
            expired = over & (state.overload_steps > cfg.overload_grace_steps)
            if expired.any():
                for li in np.flatnonzero(expired):
                    state.line_on[li] = False
                    state.permanent_out[li] = True
                    trip_events.append((int(li), "permanent"))
                flow, n_comp, chg, chl = self._cascade_trips(
                    self._solve(), trip_events)

        # (6) hard constraints
        done_reason = "none"
        if not flow.converged:
            done_reason = "diverged"
        else:
            bearing = 0
            demand_lost = gen_cut = False
            for comp in range(n_comp):
                g, ld = bool(chg[comp]), bool(chl[comp])
                if ld and not g:
                    demand_lost = True
                if g and not ld:
                    gen_cut = True
                if g or ld:
                    bearing += 1
            if demand_lost:
                done_reason = "demand_lost"
            elif gen_cut:
                done_reason = "generator_disconnected"
            elif bearing >= 2:
                done_reason = "island"

        # (7) reward
        reward = compute_reward(flow, self.spec) if flow.converged else 0.0

        done = done_reason != "none"
        if not done and self.t + 1 >= self._end:
            done = True
            done_reason = "horizon"

        # (8) observation
        obs = build_observation(self.spec, state, flow, self._frame())
        self.t += 1
        if not done:
            self._load_injections(self.t)
        info = {"trip_events": trip_events, "changed_topology": changed,
                "t": self.t - 1, "max_rho": float(flow.rho.max())}
        return StepResult(obs, reward, done, done_reason, info)


def run_episode(scenario, agent, spec: GridSpec, catalog: ActionCatalog,
                config: EpisodeConfig = EpisodeConfig(),
                on_step: Callable | None = None) -> EpisodeRecord:
    """Roll one scenario to the horizon or to a game over.

    The agent's ``act(observation, engine)`` returns a catalog index; the
    engine argument exposes the legal mask and the one-step simulation that
    rule-based agents need.
    """
    engine = EpisodeEngine(spec, catalog, config)
    obs = engine.reset(scenario)
    if hasattr(agent, "begin_episode"):
        agent.begin_episode(scenario.id)
    steps: list[StepRecord] = []
    initial_key = canonical_topo_key(engine.state.busbar, spec)
    depth = 0
    while True:
        idx = int(agent.act(obs, engine))
        if not engine.legal_mask()[idx]:
            raise IllegalActionError(engine.t, f"action {idx} is masked")
        act = engine.catalog.actions[idx]
        res = engine.step(idx)
        rec = StepRecord(
            action_index=idx,
            substation=-1 if act.substation is None else act.substation,
            changed_topology=res.info["changed_topology"],
            reward=res.reward,
            max_rho=res.info["max_rho"],
            topo_depth=0,
            done_reason=res.done_reason if res.done else "none",
            config_bits=act.bits,
        )
        if res.info["changed_topology"]:
            rec.topo_key = canonical_topo_key(engine.state.busbar, spec)
            depth = topo_depth_of(engine.state.busbar, spec)
        rec.topo_depth = depth
        rec.trip_events = res.info["trip_events"]
        steps.append(rec)
        if on_step is not None:
            on_step(res)
        if res.done:
            break
        obs = res.observation
    return EpisodeRecord(scenario.id, steps, initial_key)
