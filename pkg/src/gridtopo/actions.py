"""Enumeration, filtering and indexing of substation configuration actions.

A configuration assigns each element of one substation to busbar 1 or 2.
Mirrored assignments are electrically identical, so patterns are enumerated
with the first element pinned to busbar 1 (2^(n-1) per substation instead of
2^n).  Static filters then drop patterns that are dead on arrival:

* a busbar holding injections (loads/generators) but no line end would island
  those injections the moment the pattern is applied;
* a busbar holding exactly one line end and nothing else turns that line into
  a dangling stub that can carry no power.

Substations left with a single surviving pattern (necessarily the fused
all-on-one-busbar pattern) offer no real choice and are dropped from the
controllable set.  Index 0 of every catalog is the explicit do-nothing
action.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, TopologyState


@dataclass(frozen=True)
class FilterRules:
    """Static pattern filters applied at enumeration time."""

    forbid_injection_only_busbar: bool = True
    forbid_dangling_line_end: bool = True


@dataclass(frozen=True)
class PrimitiveAction:
    kind: str  # "do_nothing" | "reconfigure"
    substation: int | None = None
    config: tuple[int, ...] | None = None  # busbar per element, canonical order

    @property
    def bits(self) -> int:
        # bit i set -> element i on busbar 2; bit 0 always clear (canonical)
        if self.config is None:
            return 0
        out = 0
        for i, b in enumerate(self.config):
            if b == 2:
                out |= 1 << i
        return out


@dataclass
class ActionCatalog:
    actions: list[PrimitiveAction]
    per_substation: dict[int, range]
    controllable_substations: list[int]
    # kernel-ready tables: substation per action (-1 = do-nothing), packed bits
    act_sub: np.ndarray = field(repr=False, default=None)
    act_bits: np.ndarray = field(repr=False, default=None)

    def __len__(self) -> int:
        return len(self.actions)


def _pattern_ok(pattern: tuple[int, ...], kinds: list[str], rules: FilterRules) -> bool:
    for bar in (1, 2):
        n_line = sum(1 for p, k in zip(pattern, kinds) if p == bar and k.startswith("line"))
        n_inj = sum(1 for p, k in zip(pattern, kinds) if p == bar and not k.startswith("line"))
        if rules.forbid_injection_only_busbar and n_line == 0 and n_inj >= 1:
            return False
        if rules.forbid_dangling_line_end and n_line == 1 and n_inj == 0:
            return False
    return True


def substation_patterns(spec: GridSpec, sub: int,
                        rules: FilterRules = FilterRules()) -> list[tuple[int, ...]]:
    """Surviving canonical patterns of one substation, in ascending bit order."""
    elems = spec.substations[sub].elements
    kinds = [e.kind for e in elems]
    n = len(elems)
    out = []
    for bits in range(1 << max(n - 1, 0)):
        pattern = (1,) + tuple(1 + ((bits >> i) & 1) for i in range(n - 1))
        if _pattern_ok(pattern, kinds, rules):
            out.append(pattern)
    return out


def enumerate_catalog(spec: GridSpec,
                      rules: FilterRules = FilterRules()) -> ActionCatalog:
    """Build the primitive action catalog for a grid.

    Deterministic: substations ascending, patterns in ascending bit order, so
    index 0 (do-nothing) and all ranges are stable across rebuilds.
    """
    actions: list[PrimitiveAction] = [PrimitiveAction("do_nothing")]
    per_sub: dict[int, range] = {}
    controllable: list[int] = []
    for sub in range(spec.n_sub):
        patterns = substation_patterns(spec, sub, rules)
        if len(patterns) <= 1:
            continue  # no real choice at this substation
        start = len(actions)
        actions.extend(PrimitiveAction("reconfigure", sub, p) for p in patterns)
        per_sub[sub] = range(start, len(actions))
        controllable.append(sub)
    cat = ActionCatalog(actions, per_sub, controllable)
    cat.act_sub = np.array(
        [-1 if a.substation is None else a.substation for a in actions], np.int64)
    cat.act_bits = np.array([a.bits for a in actions], np.int64)
    return cat


def mask_for_substation(catalog: ActionCatalog, sub: int) -> np.ndarray:
    """Boolean mask selecting exactly one substation's actions (no do-nothing)."""
    if sub not in catalog.per_substation:
        raise KeyError(f"substation {sub} is not controllable")
    mask = np.zeros(len(catalog), np.bool_)
    rng = catalog.per_substation[sub]
    mask[rng.start: rng.stop] = True
    return mask


def legal_actions(catalog: ActionCatalog, state: TopologyState) -> np.ndarray:
    """Do-nothing is always legal; a reconfiguration is legal iff its
    substation's cooldown has expired."""
    mask = np.ones(len(catalog), np.bool_)
    for sub, rng in catalog.per_substation.items():
        if state.cooldown[sub] > 0:
            mask[rng.start: rng.stop] = False
    return mask


def catalog_as_dicts(catalog: ActionCatalog) -> list[dict]:
    """JSON-friendly dump of every action, for inspection and golden tests."""
    out = []
    for idx, act in enumerate(catalog.actions):
        row = {"index": idx, "kind": act.kind}
        if act.kind == "reconfigure":
            row["substation"] = act.substation
            row["config"] = list(act.config)
        out.append(row)
    return out
