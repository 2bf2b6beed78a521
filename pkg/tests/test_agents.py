import numpy as np
import pytest

from gridtopo.agents import (AGENT_KINDS, HierarchicalPolicyAgent,
                             OptionsGate, SubstationPolicyAgent, build_agent,
                             greedy_expert_act, substation_greedy_act)
from gridtopo.engine import EpisodeConfig, EpisodeEngine
from gridtopo.grid import InjectionFrame, TopologyState
from gridtopo.nets import save_checkpoint
from gridtopo.powerflow import derive_graph, solve_dc

from conftest import flat_scenario

NOMINAL_GENS = [64.0, 60.0, 30.0, 25.0, 80.0]


def nominal_loads(spec, scale=1.0):
    return [ld.base_mw * scale for ld in spec.loads]


def engine_at(ieee14, catalog, load_scale=1.0, steps=32):
    engine = EpisodeEngine(ieee14, catalog, EpisodeConfig(horizon=steps))
    loads = nominal_loads(ieee14, load_scale)
    total = sum(loads)
    gens = [total - sum(NOMINAL_GENS[1:]), *NOMINAL_GENS[1:]]
    obs = engine.reset(flat_scenario(ieee14, steps, load_mw=loads, gen_mw=gens))
    return engine, obs


class TestGate:
    def test_below_threshold(self, ieee14):
        gate = OptionsGate()
        obs = type("O", (), {"max_rho": lambda self: 0.94})()
        assert not gate.fires(obs)

    def test_boundary_inclusive(self):
        gate = OptionsGate()
        obs = type("O", (), {"max_rho": lambda self: 0.95})()
        assert gate.fires(obs)

    def test_agents_hold_still_below_threshold(self, ieee14, ieee14_catalog):
        # gate supremacy: whatever the nets say, quiet grids get do-nothing
        engine, obs = engine_at(ieee14, ieee14_catalog, load_scale=0.8)
        assert obs.max_rho() < 0.95
        for kind in AGENT_KINDS:
            agent = build_agent(kind, ieee14, ieee14_catalog, seed=1)
            assert agent.act(obs, engine) == 0


def oracle_greedy(engine):
    """Independently coded brute force: python loop over legal actions, graph
    assembly and solve through the public powerflow API, fatality re-derived
    from island flags."""
    spec, catalog = engine.spec, engine.catalog
    inj = InjectionFrame(engine._gen_p.copy(), engine._load_p.copy())
    best_idx, best_score = None, None
    for idx in np.flatnonzero(engine.legal_mask()):
        act = catalog.actions[idx]
        state = engine.state.copy()
        if act.kind == "reconfigure":
            for e, b in zip(spec.substations[act.substation].elements, act.config):
                state.busbar[e.slot] = b
        sol = solve_dc(derive_graph(spec, state, inj))
        bearing = [i for i in sol.islands if i.has_generator or i.has_load]
        fatal = (not sol.converged or len(bearing) != 1
                 or any((i.has_load and not i.has_generator)
                        or (i.has_generator and not i.has_load)
                        for i in sol.islands))
        score = np.inf if fatal else float(sol.rho[state.line_on].max())
        if best_score is None or score < best_score:
            best_idx, best_score = int(idx), score
    return best_idx, best_score


class TestGreedyExpert:
    def test_matches_independent_brute_force_on_random_states(
            self, ieee14, ieee14_catalog):
        rng = np.random.default_rng(21)
        engine, _ = engine_at(ieee14, ieee14_catalog, load_scale=1.15)
        for trial in range(60):
            engine.state = TopologyState(ieee14)
            # random but survivable-ish perturbation
            sub = rng.choice(ieee14_catalog.controllable_substations)
            rng_action = rng.integers(ieee14_catalog.per_substation[sub].start,
                                      ieee14_catalog.per_substation[sub].stop)
            act = ieee14_catalog.actions[rng_action]
            for e, b in zip(ieee14.substations[act.substation].elements, act.config):
                engine.state.busbar[e.slot] = b
            if rng.random() < 0.4:
                engine.state.line_on[rng.integers(0, 20)] = False
            mine = greedy_expert_act(engine)
            oracle_idx, oracle_score = oracle_greedy(engine)
            scores = engine.simulate_action_scores(
                np.flatnonzero(engine.legal_mask()))
            assert mine == oracle_idx, f"trial {trial}"
            assert scores.min() == pytest.approx(
                oracle_score if np.isfinite(oracle_score) else np.inf)

    def test_prefers_improving_reconfiguration_under_stress(
            self, ieee14, ieee14_catalog):
        engine, obs = engine_at(ieee14, ieee14_catalog, load_scale=1.45)
        assert obs.max_rho() >= 0.95
        choice = greedy_expert_act(engine)
        scores = engine.simulate_action_scores(np.arange(len(ieee14_catalog)))
        assert scores[choice] <= scores[0]
        assert choice != 0  # some reconfiguration beats doing nothing here

    def test_exact_ties_break_to_do_nothing(self, ieee14, ieee14_catalog):
        # zero injections: every topology carries zero flow, all scores equal
        engine = EpisodeEngine(ieee14, ieee14_catalog, EpisodeConfig(horizon=8))
        engine.reset(flat_scenario(ieee14, 8, load_mw=[0.0] * 11,
                                   gen_mw=[0.0] * 5))
        assert greedy_expert_act(engine) == 0

    def test_all_fatal_candidates_degrade_to_do_nothing(
            self, ieee14, ieee14_catalog, monkeypatch):
        engine, _ = engine_at(ieee14, ieee14_catalog)
        monkeypatch.setattr(engine, "simulate_action_scores",
                            lambda idx: np.full(len(np.atleast_1d(idx)), np.inf))
        assert greedy_expert_act(engine) == 0


class TestSubstationGreedy:
    def test_simulates_exactly_the_substation_configs(self, ieee14,
                                                      ieee14_catalog,
                                                      monkeypatch):
        engine, _ = engine_at(ieee14, ieee14_catalog)
        calls = []
        original = engine.simulate_action_scores

        def spy(idx):
            calls.append(np.asarray(idx))
            return original(idx)

        monkeypatch.setattr(engine, "simulate_action_scores", spy)
        substation_greedy_act(engine, 2)  # substation 2 has 3 configurations
        assert len(calls) == 1
        assert calls[0].tolist() == list(ieee14_catalog.per_substation[2])
        assert len(calls[0]) == 3

    def test_cooldown_returns_do_nothing(self, ieee14, ieee14_catalog):
        engine, _ = engine_at(ieee14, ieee14_catalog)
        engine.state.cooldown[3] = 2
        assert substation_greedy_act(engine, 3) == 0

    def test_tie_breaks_to_lowest_catalog_index(self, ieee14, ieee14_catalog,
                                                monkeypatch):
        engine, _ = engine_at(ieee14, ieee14_catalog)
        monkeypatch.setattr(engine, "simulate_action_scores",
                            lambda idx: np.zeros(len(np.atleast_1d(idx))))
        assert substation_greedy_act(engine, 4) == \
            ieee14_catalog.per_substation[4].start

    def test_all_fatal_returns_do_nothing(self, ieee14, ieee14_catalog,
                                          monkeypatch):
        engine, _ = engine_at(ieee14, ieee14_catalog)
        monkeypatch.setattr(engine, "simulate_action_scores",
                            lambda idx: np.full(len(np.atleast_1d(idx)), np.inf))
        assert substation_greedy_act(engine, 4) == 0

    def test_equals_exhaustive_outer_loop(self, ieee14, ieee14_catalog):
        # composing the substation-restricted greedy over all substations
        # recovers the full-catalog expert
        rng = np.random.default_rng(5)
        engine, _ = engine_at(ieee14, ieee14_catalog, load_scale=1.3)
        for _ in range(100):
            engine.state = TopologyState(ieee14)
            if rng.random() < 0.5:
                engine.state.line_on[rng.integers(0, 20)] = False
            full = greedy_expert_act(engine)
            best_idx, best_score = 0, engine.simulate_action_scores([0])[0]
            for sub in ieee14_catalog.controllable_substations:
                cand = substation_greedy_act(engine, sub)
                if cand == 0:
                    continue
                score = engine.simulate_action_scores([cand])[0]
                if score < best_score or (score == best_score and cand < best_idx):
                    best_idx, best_score = cand, score
            assert full == best_idx


class TestPolicyAgents:
    def test_untrained_substation_head_samples_uniformly(self, ieee14,
                                                         ieee14_catalog):
        agent = SubstationPolicyAgent(ieee14, ieee14_catalog, seed=0)
        for p in agent.policy.parameters():
            p[:] = 0.0
        engine, obs = engine_at(ieee14, ieee14_catalog)
        rng = np.random.default_rng(0)
        counts = np.zeros(agent.n_head)
        for _ in range(4000):
            d = agent.decide(obs, engine, rng)
            counts[d.head_choice] += 1
        freq = counts / counts.sum()
        np.testing.assert_allclose(freq, 1.0 / agent.n_head, atol=0.03)

    def test_hierarchical_respects_substation_mask(self, ieee14, ieee14_catalog):
        agent = HierarchicalPolicyAgent(ieee14, ieee14_catalog, seed=3)
        engine, obs = engine_at(ieee14, ieee14_catalog)
        rng = np.random.default_rng(1)
        for _ in range(2000):
            d = agent.decide(obs, engine, rng)
            if d.head_choice == len(agent.subs):
                assert d.action_index == 0
            else:
                sub = agent.subs[d.head_choice]
                assert d.action_index in ieee14_catalog.per_substation[sub]

    def test_masked_substations_never_sampled(self, ieee14, ieee14_catalog):
        agent = HierarchicalPolicyAgent(ieee14, ieee14_catalog, seed=3)
        engine, obs = engine_at(ieee14, ieee14_catalog)
        engine.state.cooldown[:] = 3
        engine.state.cooldown[4] = 0  # one substation stays available
        rng = np.random.default_rng(2)
        allowed = {agent.subs.index(4), len(agent.subs)}
        draws = {agent.decide(obs, engine, rng).head_choice for _ in range(3000)}
        assert draws <= allowed

    def test_joint_logprob_matches_sampling_frequency(self, ieee14,
                                                      ieee14_catalog):
        agent = HierarchicalPolicyAgent(ieee14, ieee14_catalog, seed=7)
        engine, obs = engine_at(ieee14, ieee14_catalog)
        rng = np.random.default_rng(3)
        n = 20_000
        counts: dict[tuple, int] = {}
        logps: dict[tuple, float] = {}
        for _ in range(n):
            d = agent.decide(obs, engine, rng)
            if d.conf_choice is None:
                key = ("skip", d.head_choice)
                logps.setdefault(key, d.head_logp)
            else:
                key = (d.head_choice, d.conf_choice)
                logps.setdefault(key, d.head_logp + d.conf_logp)
            counts[key] = counts.get(key, 0) + 1
        checked = 0
        for key, c in counts.items():
            p = np.exp(logps[key])
            if p < 0.01:
                continue
            sigma = np.sqrt(p * (1 - p) / n)
            assert abs(c / n - p) < 3 * sigma + 1e-9, key
            checked += 1
        assert checked >= 3

    def test_eval_seeding_is_deterministic(self, ieee14, ieee14_catalog):
        picks = []
        for _ in range(2):
            agent = build_agent("ppo_native", ieee14, ieee14_catalog,
                                seed=5, eval_seed=11)
            agent.begin_episode(42)
            engine, obs = engine_at(ieee14, ieee14_catalog, load_scale=1.45)
            picks.append([agent.act(obs, engine) for _ in range(20)])
        assert picks[0] == picks[1]


class TestBuildAgent:
    def test_greedy_has_no_parameters(self, ieee14, ieee14_catalog):
        agent = build_agent("greedy", ieee14, ieee14_catalog)
        assert agent.network_map() == {}
        assert "no trainable parameters" in agent.describe()

    def test_native_head_width_is_catalog_size(self, ieee14, ieee14_catalog):
        agent = build_agent("ppo_native", ieee14, ieee14_catalog)
        assert agent.policy.n_out == 106
        assert agent.policy.n_in == 152

    def test_substation_head_has_explicit_do_nothing(self, ieee14,
                                                     ieee14_catalog):
        agent = build_agent("sac_substation", ieee14, ieee14_catalog)
        assert agent.policy.n_out == 8

    def test_hierarchical_has_two_actor_nets(self, ieee14, ieee14_catalog):
        agent = build_agent("ppo_hierarchical", ieee14, ieee14_catalog)
        nets = agent.network_map()
        assert set(nets) == {"sub_policy", "conf_policy"}
        assert nets["sub_policy"].n_out == 8
        assert nets["conf_policy"].n_in == 152 + 7
        assert nets["conf_policy"].n_out == 106

    def test_unknown_kind(self, ieee14, ieee14_catalog):
        with pytest.raises(ValueError, match="unknown agent kind"):
            build_agent("dqn", ieee14, ieee14_catalog)

    def test_checkpoint_roundtrip_and_mismatch(self, ieee14, ieee14_catalog,
                                               tmp_path):
        agent = build_agent("ppo_substation", ieee14, ieee14_catalog, seed=9)
        path = tmp_path / "sub.npz"
        save_checkpoint(path, agent.network_map(), meta={"kind": "ppo_substation"})
        back = build_agent("ppo_substation", ieee14, ieee14_catalog,
                           checkpoint=str(path))
        x = np.zeros(152)
        np.testing.assert_array_equal(back.policy.forward(x),
                                      agent.policy.forward(x))
        with pytest.raises(ValueError, match="trained for"):
            build_agent("ppo_native", ieee14, ieee14_catalog,
                        checkpoint=str(path))
