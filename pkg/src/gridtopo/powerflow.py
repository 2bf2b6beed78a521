"""DC power flow over the electrical graph induced by busbar assignments.

The susceptance of a line is the reciprocal of its per-unit reactance; power
injections are in MW, so flows come out in MW directly.  Each connected
component containing a generator is solved against its own slack node (the
node holding the lowest generator id), which absorbs the component's net
imbalance.  Components without a generator carry zero flow and are only
flagged.  A singular reduced system is reported as ``converged=False`` rather
than raised: the episode engine decides what a failed solve means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .grid import GridSpec, InjectionFrame, TopologyState


@dataclass(frozen=True)
class Island:
    nodes: tuple[tuple[int, int], ...]  # (substation, busbar) pairs
    has_generator: bool
    has_load: bool


@dataclass
class ElectricalGraph:
    """Occupied (substation, busbar) nodes plus kernel-ready slot arrays.

    Node slot ``2*s + (busbar-1)`` hosts substation ``s``'s busbar; only
    occupied slots appear in ``nodes``.  The underscore fields are the raw
    per-slot arrays consumed by the solver kernels.
    """

    nodes: list[tuple[int, int]]
    n_sub: int
    line_b: np.ndarray
    line_limit: np.ndarray
    occ: np.ndarray
    injection: np.ndarray
    has_gen: np.ndarray
    has_load: np.ndarray
    slack_rank: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray

    def node_injections(self) -> dict[tuple[int, int], float]:
        return {(int(s) // 2, int(s) % 2 + 1): float(self.injection[s])
                for s in np.flatnonzero(self.occ)}


@dataclass
class FlowSolution:
    line_flow_mw: np.ndarray
    rho: np.ndarray  # |flow| / MW limit; 0 for out-of-service lines
    in_service: np.ndarray
    islands: list[Island]
    converged: bool


def derive_graph(spec: GridSpec, state: TopologyState,
                 injections: InjectionFrame) -> ElectricalGraph:
    """Build the node graph for the current wiring.

    An element on busbar b contributes its injection to node (sub, b); ends of
    out-of-service lines occupy nothing.  Empty busbars yield no node.
    """
    arr = spec.arrays
    occ, inj, has_gen, has_load, slack_rank, edge_u, edge_v = kernels.build_nodes(
        state.busbar, state.line_on,
        np.asarray(injections.gen_mw, float), np.asarray(injections.load_mw, float),
        arr.n_sub, arr.gen_sub, arr.load_sub, arr.line_from, arr.line_to,
    )
    nodes = [(int(s) // 2, int(s) % 2 + 1) for s in np.flatnonzero(occ)]
    return ElectricalGraph(nodes, arr.n_sub, arr.line_b, arr.line_limit,
                           occ, inj, has_gen, has_load, slack_rank, edge_u, edge_v)


def _islands_from_labels(graph: ElectricalGraph, labels, n_comp) -> list[Island]:
    groups: list[list[tuple[int, int]]] = [[] for _ in range(n_comp)]
    gen_flags = [False] * n_comp
    load_flags = [False] * n_comp
    for slot in np.flatnonzero(graph.occ):
        lab = int(labels[slot])
        groups[lab].append((int(slot) // 2, int(slot) % 2 + 1))
        if graph.has_gen[slot]:
            gen_flags[lab] = True
        if graph.has_load[slot]:
            load_flags[lab] = True
    return [Island(tuple(g), gen_flags[i], load_flags[i])
            for i, g in enumerate(groups)]


def detect_islands(graph: ElectricalGraph) -> list[Island]:
    """Partition nodes into connected components over in-service lines."""
    labels, n_comp = kernels.connected_components(
        graph.occ, graph.edge_u, graph.edge_v)
    return _islands_from_labels(graph, labels, n_comp)


def solve_dc(graph: ElectricalGraph) -> FlowSolution:
    """Solve the DC equations over every component of the graph."""
    if not graph.nodes:
        raise ValueError("cannot solve an empty graph")
    labels, n_comp, theta, flow, converged = kernels.solve_components(
        graph.occ, graph.injection, graph.slack_rank,
        graph.edge_u, graph.edge_v, graph.line_b,
    )
    in_service = graph.edge_u >= 0
    rho = np.abs(flow) / graph.line_limit
    rho[~in_service] = 0.0
    return FlowSolution(flow, rho, in_service,
                        _islands_from_labels(graph, labels, n_comp),
                        bool(converged))
