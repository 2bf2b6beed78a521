"""Hot numeric kernels: node-graph assembly, DC solve, greedy action scoring.

Every kernel is written once as plain numpy code and compiled with numba's
``@njit`` when available.  Setting the environment variable ``GRIDTOPO_NO_JIT``
to a truthy value (or running without numba installed) selects the pure-numpy
interpreter path; both paths execute the identical source, so results are
bit-for-bit equal.  See ``benchmarks/bench_kernels.py`` for a comparison.

Node indexing convention used throughout: substation ``s`` contributes two
node slots ``2*s`` (busbar 1) and ``2*s + 1`` (busbar 2).  A slot is occupied
when at least one element is assigned to it; unoccupied slots carry component
label -1.

Element slot layout (shared with :mod:`gridtopo.grid`): generators first,
then loads, then line origin ends, then line extremity ends.
"""

from __future__ import annotations

import os

import numpy as np

NO_GEN = np.int64(1 << 40)  # slack rank sentinel: no generator on the node
SCORE_INF = np.inf

_flag = os.environ.get("GRIDTOPO_NO_JIT", "").strip().lower()
_want_jit = _flag not in ("1", "true", "yes", "on")

if _want_jit:
    try:
        from numba import njit as _njit

        USING_JIT = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USING_JIT = False
else:
    USING_JIT = False


def _compile(fn):
    if USING_JIT:
        return _njit(cache=True, fastmath=False)(fn)
    return fn


@_compile
def gauss_solve(a, b):
    """Solve ``a @ x = b`` via partial-pivot elimination on a scratch copy.

    Returns ``(x, ok)``; ``ok`` is False when the system is singular.  Hand
    rolled so the singular case is a flag instead of an exception (numba
    cannot catch LinAlgError in nopython mode) and so both execution paths
    share one algorithm.
    """
    n = a.shape[0]
    aug = np.empty((n, n + 1))
    aug[:, :n] = a
    aug[:, n] = b
    for col in range(n):
        piv = col
        best = abs(aug[col, col])
        for r in range(col + 1, n):
            v = abs(aug[r, col])
            if v > best:
                best = v
                piv = r
        if best < 1e-10:
            return np.zeros(n), False
        if piv != col:
            for c in range(col, n + 1):
                tmp = aug[col, c]
                aug[col, c] = aug[piv, c]
                aug[piv, c] = tmp
        inv = 1.0 / aug[col, col]
        for r in range(col + 1, n):
            f = aug[r, col] * inv
            if f != 0.0:
                for c in range(col, n + 1):
                    aug[r, c] -= f * aug[col, c]
    x = np.zeros(n)
    for r in range(n - 1, -1, -1):
        s = aug[r, n]
        for c in range(r + 1, n):
            s -= aug[r, c] * x[c]
        x[r] = s / aug[r, r]
    return x, True


@_compile
def build_nodes(busbar, line_on, gen_p, load_p, n_sub, gen_sub, load_sub,
                line_from, line_to):
    """Map the wiring state onto node slots.

    Returns per-slot occupancy, net MW injection, generator/load presence,
    slack rank (lowest generator id on the slot, NO_GEN otherwise) and the
    per-line endpoint slots (-1 for out-of-service lines).  Ends of
    out-of-service lines do not occupy a slot; loads and generators always do.
    """
    n_gen = gen_sub.shape[0]
    n_load = load_sub.shape[0]
    n_line = line_from.shape[0]
    n_slots = 2 * n_sub

    occ = np.zeros(n_slots, np.bool_)
    inj = np.zeros(n_slots)
    has_gen = np.zeros(n_slots, np.bool_)
    has_load = np.zeros(n_slots, np.bool_)
    slack_rank = np.full(n_slots, NO_GEN)

    for g in range(n_gen):
        nid = 2 * gen_sub[g] + busbar[g] - 1
        occ[nid] = True
        inj[nid] += gen_p[g]
        has_gen[nid] = True
        if g < slack_rank[nid]:
            slack_rank[nid] = g
    for ld in range(n_load):
        nid = 2 * load_sub[ld] + busbar[n_gen + ld] - 1
        occ[nid] = True
        inj[nid] -= load_p[ld]
        has_load[nid] = True

    edge_u = np.full(n_line, -1)
    edge_v = np.full(n_line, -1)
    or_base = n_gen + n_load
    ex_base = n_gen + n_load + n_line
    for li in range(n_line):
        if not line_on[li]:
            continue
        u = 2 * line_from[li] + busbar[or_base + li] - 1
        v = 2 * line_to[li] + busbar[ex_base + li] - 1
        occ[u] = True
        occ[v] = True
        edge_u[li] = u
        edge_v[li] = v
    return occ, inj, has_gen, has_load, slack_rank, edge_u, edge_v


@_compile
def connected_components(occ, edge_u, edge_v):
    """Label occupied node slots by connected component (-1 if unoccupied)."""
    n_slots = occ.shape[0]
    n_line = edge_u.shape[0]

    # adjacency in CSR form
    deg = np.zeros(n_slots, np.int64)
    for li in range(n_line):
        if edge_u[li] >= 0:
            deg[edge_u[li]] += 1
            deg[edge_v[li]] += 1
    ptr = np.zeros(n_slots + 1, np.int64)
    for i in range(n_slots):
        ptr[i + 1] = ptr[i] + deg[i]
    adj = np.empty(ptr[n_slots], np.int64)
    fill = ptr[:n_slots].copy()
    for li in range(n_line):
        u = edge_u[li]
        if u >= 0:
            v = edge_v[li]
            adj[fill[u]] = v
            fill[u] += 1
            adj[fill[v]] = u
            fill[v] += 1

    labels = np.full(n_slots, -1)
    stack = np.empty(n_slots, np.int64)
    n_comp = 0
    for start in range(n_slots):
        if not occ[start] or labels[start] >= 0:
            continue
        labels[start] = n_comp
        stack[0] = start
        top = 1
        while top > 0:
            top -= 1
            node = stack[top]
            for k in range(ptr[node], ptr[node + 1]):
                nb = adj[k]
                if labels[nb] < 0:
                    labels[nb] = n_comp
                    stack[top] = nb
                    top += 1
        n_comp += 1
    return labels, n_comp


@_compile
def solve_components(occ, inj, slack_rank, edge_u, edge_v, line_b):
    """DC solve per connected component.

    For each component holding a generator the node with the lowest generator
    id is the slack; its row is dropped from the susceptance system and it
    absorbs the component imbalance.  Components without a generator keep
    zero angles (zero flow).  Returns ``(labels, n_comp, theta, flow,
    converged)``; ``converged`` is False when any generator-bearing
    component's reduced system is singular.
    """
    n_slots = occ.shape[0]
    n_line = edge_u.shape[0]
    labels, n_comp = connected_components(occ, edge_u, edge_v)
    theta = np.zeros(n_slots)
    converged = True

    comp_nodes = np.empty(n_slots, np.int64)
    pos = np.empty(n_slots, np.int64)
    for comp in range(n_comp):
        size = 0
        slack_local = -1
        best_rank = NO_GEN
        for nid in range(n_slots):
            if labels[nid] == comp:
                comp_nodes[size] = nid
                if slack_rank[nid] < best_rank:
                    best_rank = slack_rank[nid]
                    slack_local = size
                size += 1
        if slack_local < 0:
            continue  # no generator: flows stay zero, caller flags the island
        if size == 1:
            continue

        # reduced susceptance system over the non-slack nodes; reduced index
        # of local node k is k when k < slack_local else k - 1
        for k in range(size):
            pos[comp_nodes[k]] = k
        red = size - 1
        bmat = np.zeros((red, red))
        rhs = np.zeros(red)
        for li in range(n_line):
            u = edge_u[li]
            if u < 0 or labels[u] != comp:
                continue
            v = edge_v[li]
            b = line_b[li]
            ku = pos[u]
            kv = pos[v]
            if ku != slack_local and kv != slack_local:
                iu = ku if ku < slack_local else ku - 1
                iv = kv if kv < slack_local else kv - 1
                bmat[iu, iu] += b
                bmat[iv, iv] += b
                bmat[iu, iv] -= b
                bmat[iv, iu] -= b
            elif ku != slack_local:
                iu = ku if ku < slack_local else ku - 1
                bmat[iu, iu] += b
            elif kv != slack_local:
                iv = kv if kv < slack_local else kv - 1
                bmat[iv, iv] += b
        for k in range(size):
            if k == slack_local:
                continue
            rk = k if k < slack_local else k - 1
            rhs[rk] = inj[comp_nodes[k]]

        x, ok = gauss_solve(bmat, rhs)
        if not ok:
            converged = False
            continue
        for k in range(size):
            if k != slack_local:
                rk = k if k < slack_local else k - 1
                theta[comp_nodes[k]] = x[rk]

    flow = np.zeros(n_line)
    for li in range(n_line):
        u = edge_u[li]
        if u >= 0:
            flow[li] = line_b[li] * (theta[u] - theta[edge_v[li]])
    return labels, n_comp, theta, flow, converged


@_compile
def grid_status(busbar, line_on, gen_p, load_p, n_sub, gen_sub, load_sub,
                line_from, line_to, line_b):
    """Full state evaluation: assemble nodes, solve, classify components.

    Returns ``(flow, labels, n_comp, comp_has_gen, comp_has_load, converged)``
    with component flag arrays sized ``2*n_sub`` (entries past ``n_comp``
    unused).
    """
    occ, inj, has_gen, has_load, slack_rank, edge_u, edge_v = build_nodes(
        busbar, line_on, gen_p, load_p, n_sub, gen_sub, load_sub, line_from, line_to
    )
    labels, n_comp, theta, flow, converged = solve_components(
        occ, inj, slack_rank, edge_u, edge_v, line_b
    )
    n_slots = 2 * n_sub
    comp_has_gen = np.zeros(n_slots, np.bool_)
    comp_has_load = np.zeros(n_slots, np.bool_)
    for nid in range(n_slots):
        lab = labels[nid]
        if lab >= 0:
            if has_gen[nid]:
                comp_has_gen[lab] = True
            if has_load[nid]:
                comp_has_load[lab] = True
    return flow, labels, n_comp, comp_has_gen, comp_has_load, converged


@_compile
def state_is_fatal(n_comp, comp_has_gen, comp_has_load, converged):
    """Hard-constraint test shared by the engine and greedy simulation."""
    if not converged:
        return True
    bearing = 0
    for comp in range(n_comp):
        g = comp_has_gen[comp]
        ld = comp_has_load[comp]
        if ld and not g:
            return True  # demand lost
        if g and not ld:
            return True  # generator cut off
        if g or ld:
            bearing += 1
    return bearing >= 2


@_compile
def tick_timers(cooldown, trip_timer, outage_timer, line_on, permanent_out):
    """Decrement all timers in place; reconnect lines whose trip and outage
    timers both reached zero (permanent disconnections stay out).  Returns
    the per-line reconnect mask."""
    for s in range(cooldown.shape[0]):
        if cooldown[s] > 0:
            cooldown[s] -= 1
    n_line = trip_timer.shape[0]
    recon = np.zeros(n_line, np.bool_)
    for li in range(n_line):
        if trip_timer[li] > 0:
            trip_timer[li] -= 1
        if outage_timer[li] > 0:
            outage_timer[li] -= 1
        if (not line_on[li] and not permanent_out[li]
                and trip_timer[li] == 0 and outage_timer[li] == 0):
            line_on[li] = True
            recon[li] = True
    return recon


@_compile
def rho_of(flow, line_limit, line_on):
    n = flow.shape[0]
    rho = np.zeros(n)
    for li in range(n):
        if line_on[li]:
            rho[li] = abs(flow[li]) / line_limit[li]
    return rho


@_compile
def margin_reward(rho, line_on):
    """Mean squared-margin reward over all lines (zero margin when out)."""
    n = rho.shape[0]
    total = 0.0
    for li in range(n):
        m = 0.0
        if line_on[li]:
            m = 1.0 - rho[li]
            if m < 0.0:
                m = 0.0
        total += 1.0 - (1.0 - m) ** 2
    return total / n


@_compile
def score_actions(busbar, line_on, gen_p, load_p, n_sub, gen_sub, load_sub,
                  line_from, line_to, line_b, line_limit,
                  act_sub, act_bits, sub_ptr, sub_slots, cand_idx):
    """One-step lookahead scores (resulting max line loading) per candidate.

    ``cand_idx`` selects rows of the action table.  Each candidate is applied
    to a scratch copy of the busbar assignment, the grid is re-solved with the
    given injections held fixed, and the candidate scores max rho over
    in-service lines; any hard-constraint violation or non-convergence scores
    +inf.  Row value -1 in ``act_sub`` denotes do-nothing.
    """
    n_cand = cand_idx.shape[0]
    scores = np.empty(n_cand)
    work = busbar.copy()
    n_line = line_from.shape[0]
    for c in range(n_cand):
        a = cand_idx[c]
        sub = act_sub[a]
        if sub >= 0:
            bits = act_bits[a]
            lo = sub_ptr[sub]
            hi = sub_ptr[sub + 1]
            for k in range(lo, hi):
                work[sub_slots[k]] = 1 + ((bits >> (k - lo)) & 1)
        flow, labels, n_comp, chg, chl, conv = grid_status(
            work, line_on, gen_p, load_p, n_sub,
            gen_sub, load_sub, line_from, line_to, line_b,
        )
        if state_is_fatal(n_comp, chg, chl, conv):
            scores[c] = SCORE_INF
        else:
            worst = 0.0
            for li in range(n_line):
                if line_on[li]:
                    r = abs(flow[li]) / line_limit[li]
                    if r > worst:
                        worst = r
            scores[c] = worst
        if sub >= 0:
            lo = sub_ptr[sub]
            hi = sub_ptr[sub + 1]
            for k in range(lo, hi):
                work[sub_slots[k]] = busbar[sub_slots[k]]
    return scores
