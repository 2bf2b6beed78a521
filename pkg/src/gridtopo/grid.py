"""Static grid description, mutable topology state, and observation assembly.

The grid-spec file format is line oriented with four sections::

    SUBSTATIONS
    <id> <voltage_kv>
    LINES
    <id> <from_sub> <to_sub> <reactance_pu> <thermal_limit_amps>
    LOADS
    <id> <sub> <base_mw>
    GENERATORS
    <id> <sub> <kind> <max_mw>

Blank lines and ``#`` comments are ignored.  Thermal limits are converted to
MW equivalents once at load time using the lower endpoint voltage,
``limit_mw = sqrt(3) * kV * A / 1000``; all downstream loading ratios are
computed in MW space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

COOLDOWN_STEPS = 3  # 15 minutes at 5-minute steps


class GridFormatError(ValueError):
    """Raised when a grid-spec file cannot be parsed."""


class GridValidationError(ValueError):
    """Raised when a parsed grid-spec violates a structural invariant."""


class CooldownActiveError(RuntimeError):
    """Raised when reconfiguring a substation whose cooldown has not elapsed."""


class ConfigLengthError(ValueError):
    """Raised when a configuration pattern does not match the element count."""


@dataclass(frozen=True)
class Line:
    id: int
    from_sub: int
    to_sub: int
    reactance_pu: float
    thermal_limit_amps: float
    limit_mw: float


@dataclass(frozen=True)
class Load:
    id: int
    sub: int
    base_mw: float


@dataclass(frozen=True)
class Generator:
    id: int
    sub: int
    kind: str  # thermal | nuclear | wind | solar
    max_mw: float


@dataclass(frozen=True)
class ElementRef:
    """One connectable element of a substation.

    ``kind`` is ``line_or`` / ``line_ex`` / ``load`` / ``gen``; ``index`` is
    the id within that kind; ``slot`` is the global position in the busbar
    assignment vector (generators, then loads, then line origin ends, then
    line extremity ends).
    """

    kind: str
    index: int
    slot: int


@dataclass(frozen=True)
class Substation:
    id: int
    voltage_kv: float
    # canonical order: line ends sorted by line id, then loads, then
    # generators -- this fixes the bit positions of configuration patterns
    elements: tuple[ElementRef, ...]


@dataclass(frozen=True)
class GridSpec:
    substations: tuple[Substation, ...]
    lines: tuple[Line, ...]
    loads: tuple[Load, ...]
    generators: tuple[Generator, ...]
    step_minutes: int = 5
    episode_steps: int = 8064
    arrays: "GridArrays" = field(default=None, compare=False, repr=False)

    @property
    def n_sub(self) -> int:
        return len(self.substations)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_elements(self) -> int:
        return self.n_gen + self.n_load + 2 * self.n_line

    def observation_length(self) -> int:
        return 2 * self.n_elements + 2 * self.n_line


class GridArrays:
    """Flat numpy views of a GridSpec for the kernels.

    ``sub_slots[sub_ptr[s]:sub_ptr[s+1]]`` lists substation ``s``'s element
    slots in canonical order, matching configuration bit positions.
    """

    def __init__(self, spec: GridSpec):
        self.n_sub = spec.n_sub
        self.line_from = np.array([ln.from_sub for ln in spec.lines], np.int64)
        self.line_to = np.array([ln.to_sub for ln in spec.lines], np.int64)
        self.line_b = np.array([1.0 / ln.reactance_pu for ln in spec.lines])
        self.line_limit = np.array([ln.limit_mw for ln in spec.lines])
        self.gen_sub = np.array([g.sub for g in spec.generators], np.int64)
        self.load_sub = np.array([ld.sub for ld in spec.loads], np.int64)
        ptr = [0]
        slots = []
        for sub in spec.substations:
            slots.extend(e.slot for e in sub.elements)
            ptr.append(len(slots))
        self.sub_ptr = np.array(ptr, np.int64)
        self.sub_slots = np.array(slots, np.int64)
        self.slot_sub = np.empty(spec.n_elements, np.int64)
        for sub in spec.substations:
            for e in sub.elements:
                self.slot_sub[e.slot] = sub.id


@dataclass
class InjectionFrame:
    """MW set points for one time step."""

    gen_mw: np.ndarray
    load_mw: np.ndarray


class TopologyState:
    """Mutable wiring state: busbar assignments, line status, timers.

    Default construction matches the reference topology: every element on
    busbar 1, all lines in service, all timers zero.
    """

    __slots__ = ("busbar", "line_on", "overload_steps", "trip_timer",
                 "outage_timer", "permanent_out", "cooldown")

    def __init__(self, spec: GridSpec):
        self.busbar = np.ones(spec.n_elements, np.int64)
        self.line_on = np.ones(spec.n_line, np.bool_)
        self.overload_steps = np.zeros(spec.n_line, np.int64)
        self.trip_timer = np.zeros(spec.n_line, np.int64)
        self.outage_timer = np.zeros(spec.n_line, np.int64)
        self.permanent_out = np.zeros(spec.n_line, np.bool_)
        self.cooldown = np.zeros(spec.n_sub, np.int64)

    def copy(self) -> "TopologyState":
        out = object.__new__(TopologyState)
        for name in TopologyState.__slots__:
            setattr(out, name, getattr(self, name).copy())
        return out


def element_slot(spec: GridSpec, kind: str, index: int) -> int:
    """Global busbar-vector slot of an element."""
    if kind == "gen":
        return index
    if kind == "load":
        return spec.n_gen + index
    if kind == "line_or":
        return spec.n_gen + spec.n_load + index
    if kind == "line_ex":
        return spec.n_gen + spec.n_load + spec.n_line + index
    raise ValueError(f"unknown element kind {kind!r}")


def _build_substations(n_sub, subs_raw, lines, loads, gens) -> tuple[Substation, ...]:
    per_sub: dict[int, list[ElementRef]] = {s: [] for s in range(n_sub)}
    n_gen, n_load, n_line = len(gens), len(loads), len(lines)
    or_base = n_gen + n_load
    ex_base = n_gen + n_load + n_line
    for ln in lines:
        per_sub[ln.from_sub].append(ElementRef("line_or", ln.id, or_base + ln.id))
        per_sub[ln.to_sub].append(ElementRef("line_ex", ln.id, ex_base + ln.id))
    for ld in loads:
        per_sub[ld.sub].append(ElementRef("load", ld.id, n_gen + ld.id))
    for g in gens:
        per_sub[g.sub].append(ElementRef("gen", g.id, g.id))

    def order(e: ElementRef):
        if e.kind in ("line_or", "line_ex"):
            return (0, e.index)
        if e.kind == "load":
            return (1, e.index)
        return (2, e.index)

    out = []
    for sid, v_kv in subs_raw:
        elems = tuple(sorted(per_sub[sid], key=order))
        out.append(Substation(sid, v_kv, elems))
    return tuple(out)


def load_grid_spec(path: str | Path) -> GridSpec:
    """Parse and validate a grid-spec file."""
    path = Path(path)
    sections: dict[str, list[list[str]]] = {
        "SUBSTATIONS": [], "LINES": [], "LOADS": [], "GENERATORS": []}
    current = None
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if text in sections:
            current = text
            continue
        if current is None:
            raise GridFormatError(f"{path}:{lineno}: data before any section header")
        sections[current].append(text.split())

    def parse_rows(name, n_fields):
        rows = []
        for fields in sections[name]:
            if len(fields) != n_fields:
                raise GridFormatError(
                    f"{path}: {name} row needs {n_fields} fields, got {fields}")
            rows.append(fields)
        return rows

    subs_raw = [(int(r[0]), float(r[1])) for r in parse_rows("SUBSTATIONS", 2)]
    n_sub = len(subs_raw)
    if n_sub == 0:
        raise GridValidationError("grid has no substations")
    if sorted(s for s, _ in subs_raw) != list(range(n_sub)):
        raise GridValidationError("substation ids must be 0..n-1 without gaps")
    v_of = dict(subs_raw)

    lines = []
    for r in parse_rows("LINES", 5):
        lid, f, t = int(r[0]), int(r[1]), int(r[2])
        x, amps = float(r[3]), float(r[4])
        if not (0 <= f < n_sub and 0 <= t < n_sub):
            raise GridValidationError(
                f"line {lid} references substation out of range 0..{n_sub - 1}")
        if f == t:
            raise GridValidationError(f"line {lid} connects a substation to itself")
        if x <= 0:
            raise GridValidationError(f"line {lid} has non-positive reactance")
        if amps <= 0:
            raise GridValidationError(f"line {lid} has non-positive thermal limit")
        kv = min(v_of[f], v_of[t])
        limit_mw = math.sqrt(3.0) * kv * amps / 1000.0
        lines.append(Line(lid, f, t, x, amps, limit_mw))
    if [ln.id for ln in lines] != list(range(len(lines))):
        raise GridValidationError("line ids must be 0..n-1 in order")

    loads = []
    for r in parse_rows("LOADS", 3):
        lid, s, base = int(r[0]), int(r[1]), float(r[2])
        if not 0 <= s < n_sub:
            raise GridValidationError(
                f"load {lid} references substation out of range 0..{n_sub - 1}")
        loads.append(Load(lid, s, base))
    if [ld.id for ld in loads] != list(range(len(loads))):
        raise GridValidationError("load ids must be 0..n-1 in order")

    gens = []
    for r in parse_rows("GENERATORS", 4):
        gid, s, kind, mx = int(r[0]), int(r[1]), r[2], float(r[3])
        if not 0 <= s < n_sub:
            raise GridValidationError(
                f"generator {gid} references substation out of range 0..{n_sub - 1}")
        if kind not in ("thermal", "nuclear", "wind", "solar"):
            raise GridValidationError(f"generator {gid} has unknown kind {kind!r}")
        gens.append(Generator(gid, s, kind, mx))
    if [g.id for g in gens] != list(range(len(gens))):
        raise GridValidationError("generator ids must be 0..n-1 in order")

    substations = _build_substations(n_sub, subs_raw, lines, loads, gens)
    spec = GridSpec(substations, tuple(lines), tuple(loads), tuple(gens))
    object.__setattr__(spec, "arrays", GridArrays(spec))
    return spec


def bundled_ieee14_path() -> Path:
    return Path(resources.files("gridtopo").joinpath("data/ieee14.grid"))


def load_ieee14() -> GridSpec:
    return load_grid_spec(bundled_ieee14_path())


def apply_substation_config(state: TopologyState, spec: GridSpec, sub: int,
                            config, cooldown_steps: int = COOLDOWN_STEPS) -> TopologyState:
    """Reassign one substation's elements to busbars, in place.

    ``config`` is a sequence of busbar numbers (1 or 2), one per element in
    the substation's canonical order.  Only this substation is touched;
    its cooldown is set.  Returns ``state`` for chaining.
    """
    elems = spec.substations[sub].elements
    if state.cooldown[sub] > 0:
        raise CooldownActiveError(
            f"substation {sub} on cooldown for {state.cooldown[sub]} more steps")
    cfg = np.asarray(config, np.int64)
    if cfg.shape != (len(elems),):
        raise ConfigLengthError(
            f"substation {sub} has {len(elems)} elements, pattern has {cfg.size}")
    if not np.all((cfg == 1) | (cfg == 2)):
        raise ConfigLengthError("configuration entries must be busbar 1 or 2")
    for e, b in zip(elems, cfg):
        state.busbar[e.slot] = b
    state.cooldown[sub] = cooldown_steps
    return state


@dataclass
class Observation:
    """Feature vector of one grid snapshot, in fixed segment order:
    active power, line loading, busbar codes, overflow step counts."""

    vector: np.ndarray
    n_gen: int
    n_load: int
    n_line: int

    @property
    def active_power(self) -> np.ndarray:
        return self.vector[: self._ne]

    @property
    def rho(self) -> np.ndarray:
        return self.vector[self._ne: self._ne + self.n_line]

    @property
    def topo_config(self) -> np.ndarray:
        return self.vector[self._ne + self.n_line: 2 * self._ne + self.n_line]

    @property
    def overflow_steps(self) -> np.ndarray:
        return self.vector[2 * self._ne + self.n_line:]

    @property
    def _ne(self) -> int:
        return self.n_gen + self.n_load + 2 * self.n_line

    def max_rho(self) -> float:
        return float(self.rho.max()) if self.n_line else 0.0


def build_observation(spec: GridSpec, state: TopologyState, flow,
                      injections: InjectionFrame) -> Observation:
    """Assemble the observation for a solved state.

    ``flow`` must expose per-line ``line_flow_mw`` and ``rho`` arrays from the
    solve of exactly this (state, injections) pair.  Values are physical
    units; no normalization happens here.  Busbar codes of out-of-service line
    ends are 0 and their rho is 0.
    """
    n_gen, n_load, n_line = spec.n_gen, spec.n_load, spec.n_line
    flow_mw = np.asarray(flow.line_flow_mw, float)
    rho = np.asarray(flow.rho, float)
    if flow_mw.shape != (n_line,) or rho.shape != (n_line,):
        raise ValueError(
            f"flow arrays have shape {flow_mw.shape}, spec has {n_line} lines")
    if injections.gen_mw.shape != (n_gen,) or injections.load_mw.shape != (n_load,):
        raise ValueError("injection frame does not match spec dimensions")

    ne = spec.n_elements
    vec = np.empty(2 * ne + 2 * n_line)
    active = vec[:ne]
    active[:n_gen] = injections.gen_mw
    active[n_gen: n_gen + n_load] = injections.load_mw
    active[n_gen + n_load: n_gen + n_load + n_line] = flow_mw
    active[n_gen + n_load + n_line:] = -flow_mw

    vec[ne: ne + n_line] = rho

    topo = vec[ne + n_line: 2 * ne + n_line]
    topo[:] = state.busbar
    off = ~state.line_on
    topo[n_gen + n_load: n_gen + n_load + n_line][off] = 0
    topo[n_gen + n_load + n_line:][off] = 0

    vec[2 * ne + n_line:] = state.overload_steps
    return Observation(vec, n_gen, n_load, n_line)
