"""The agent architectures: an activation gate over two temporally extended
modes, greedy one-step-lookahead experts, and the learned policies.

Every agent shares the rule-based top level: while the highest line loading
stays below the gate threshold the agent emits do-nothing, and those steps
are rolled into the previous decision's reward segment.  Only when the gate
fires does the agent pick a substation and configuration, either by
simulating candidates (greedy) or by sampling masked categorical heads.

Substation heads have one output per controllable substation plus a trailing
explicit do-nothing slot, letting the trained level decline to act even when
the gate fired.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .actions import ActionCatalog, legal_actions, mask_for_substation
from .engine import EpisodeEngine
from .grid import GridSpec, Observation
from .nets import Mlp, log_softmax, masked_logits, restore_mlp

GATE_THRESHOLD = 0.95

AGENT_KINDS = ("greedy", "ppo_native", "sac_native", "ppo_substation",
               "sac_substation", "ppo_hierarchical")


@dataclass(frozen=True)
class OptionsGate:
    """Two-mode activity rule split at a loading threshold."""

    rho_threshold: float = GATE_THRESHOLD

    def fires(self, obs: Observation) -> bool:
        return obs.max_rho() >= self.rho_threshold


class FeatureScaler:
    """Fixed elementwise scaling of the raw observation for the networks.

    Active power divides by 100 MW, busbar codes by 2, overflow counters by
    the 2-step grace window; loadings pass through.  Stateless so rollout
    workers need no synchronization.
    """

    def __init__(self, spec: GridSpec):
        n = spec.observation_length()
        ne = spec.n_elements
        self.scale = np.ones(n)
        self.scale[:ne] = 1.0 / 100.0
        self.scale[ne + spec.n_line: 2 * ne + spec.n_line] = 0.5
        self.scale[2 * ne + spec.n_line:] = 0.5
        self.n_features = n

    def __call__(self, obs: Observation) -> np.ndarray:
        return obs.vector * self.scale


@dataclass
class PolicyDecision:
    """Everything a trainer needs to learn from one gate-fired decision."""

    action_index: int
    features: np.ndarray
    head_choice: int | None = None
    head_logits: np.ndarray | None = None
    head_logp: float | None = None
    head_mask: np.ndarray | None = None
    conf_features: np.ndarray | None = None
    conf_choice: int | None = None
    conf_logits: np.ndarray | None = None
    conf_logp: float | None = None
    conf_mask: np.ndarray | None = None


def greedy_expert_act(engine: EpisodeEngine) -> int:
    """Simulate every legal action one step ahead (injections held at their
    current values) and return the catalog index minimizing the resulting
    max loading; ties break to the lowest index, so an all-fatal scan
    degrades to do-nothing."""
    candidates = np.flatnonzero(engine.legal_mask())
    scores = engine.simulate_action_scores(candidates)
    return int(candidates[int(np.argmin(scores))])


def substation_greedy_act(engine: EpisodeEngine, sub: int) -> int:
    """Greedy lookahead restricted to one substation's configurations.

    Returns do-nothing when the substation is cooling down or every
    configuration simulates to a fatal state."""
    catalog = engine.catalog
    if sub not in catalog.per_substation:
        raise KeyError(f"substation {sub} is not controllable")
    if engine.state.cooldown[sub] > 0:
        return 0
    candidates = np.fromiter(catalog.per_substation[sub], np.int64)
    scores = engine.simulate_action_scores(candidates)
    best = int(np.argmin(scores))
    if not np.isfinite(scores[best]):
        return 0
    return int(candidates[best])


class BaseAgent:
    """Common plumbing: gate, per-episode RNG reseeding, action bookkeeping."""

    kind = "base"
    trainable = False

    def __init__(self, spec: GridSpec, catalog: ActionCatalog,
                 gate: OptionsGate = OptionsGate(), eval_seed: int = 0):
        self.spec = spec
        self.catalog = catalog
        self.gate = gate
        self.eval_seed = eval_seed
        self.scaler = FeatureScaler(spec)
        self._rng = np.random.default_rng(eval_seed)

    def begin_episode(self, scenario_id: int):
        # deterministic evaluation: the sampling stream is a pure function
        # of (eval seed, scenario)
        self._rng = np.random.default_rng(
            np.random.SeedSequence([self.eval_seed, scenario_id]))

    def act(self, obs: Observation, engine: EpisodeEngine) -> int:
        if not self.gate.fires(obs):
            return 0
        return self.decide(obs, engine, self._rng).action_index

    def decide(self, obs, engine, rng) -> PolicyDecision:  # pragma: no cover
        raise NotImplementedError

    def network_map(self) -> dict[str, Mlp]:
        return {}

    def describe(self) -> str:
        lines = [f"agent kind: {self.kind}",
                 f"gate: act iff max rho >= {self.gate.rho_threshold}",
                 f"catalog: {len(self.catalog)} actions across "
                 f"{len(self.catalog.controllable_substations)} substations"]
        for name, net in self.network_map().items():
            lines.append(f"  {name}: {net.n_in} -> "
                         + " -> ".join(str(l.w.shape[1]) for l in net.layers)
                         + f" ({net.n_parameters()} parameters)")
        if not self.network_map():
            lines.append("  no trainable parameters")
        return "\n".join(lines)


class GreedyExpertAgent(BaseAgent):
    """Full-catalog brute-force lookahead below a rule-based gate."""

    kind = "greedy"

    def decide(self, obs, engine, rng) -> PolicyDecision:
        return PolicyDecision(greedy_expert_act(engine), self.scaler(obs))


class NativePolicyAgent(BaseAgent):
    """Single categorical head over the whole primitive catalog."""

    trainable = True

    def __init__(self, spec, catalog, policy: Mlp | None = None,
                 seed: int = 0, **kw):
        super().__init__(spec, catalog, **kw)
        self.policy = policy or Mlp(self.scaler.n_features, len(catalog), seed=seed)

    def decide(self, obs, engine, rng) -> PolicyDecision:
        feats = self.scaler(obs)
        mask = legal_actions(self.catalog, engine.state)
        logits = self.policy.forward(feats)[0]
        logp = log_softmax(masked_logits(logits, mask))
        choice = int(rng.choice(logp.shape[0], p=np.exp(logp)))
        return PolicyDecision(choice, feats, head_choice=choice,
                              head_logits=logits, head_logp=float(logp[choice]),
                              head_mask=mask)

    def network_map(self):
        return {"policy": self.policy}


class SubstationPolicyAgent(BaseAgent):
    """Trained substation choice; greedy simulation picks the configuration.

    Head slots are the controllable substations in ascending order followed
    by an explicit do-nothing slot.
    """

    trainable = True

    def __init__(self, spec, catalog, policy: Mlp | None = None,
                 seed: int = 0, **kw):
        super().__init__(spec, catalog, **kw)
        self.subs = list(catalog.controllable_substations)
        self.n_head = len(self.subs) + 1
        self.policy = policy or Mlp(self.scaler.n_features, self.n_head, seed=seed)

    def head_mask(self, engine) -> np.ndarray:
        mask = np.ones(self.n_head, bool)
        for i, sub in enumerate(self.subs):
            mask[i] = engine.state.cooldown[sub] == 0
        return mask

    def decide(self, obs, engine, rng) -> PolicyDecision:
        feats = self.scaler(obs)
        mask = self.head_mask(engine)
        logits = self.policy.forward(feats)[0]
        logp = log_softmax(masked_logits(logits, mask))
        choice = int(rng.choice(self.n_head, p=np.exp(logp)))
        if choice == len(self.subs):
            action = 0  # the explicit decline-to-act slot
        else:
            action = substation_greedy_act(engine, self.subs[choice])
        return PolicyDecision(action, feats, head_choice=choice,
                              head_logits=logits, head_logp=float(logp[choice]),
                              head_mask=mask)

    def network_map(self):
        return {"policy": self.policy}


class HierarchicalPolicyAgent(BaseAgent):
    """Trained substation head and trained configuration head.

    The configuration head receives the observation concatenated with the
    one-hot substation choice and is masked to that substation's catalog
    range.  Actor parameters are separate per level; a value trunk over the
    raw features is shared by both levels at training time.
    """

    trainable = True

    def __init__(self, spec, catalog, sub_policy: Mlp | None = None,
                 conf_policy: Mlp | None = None, seed: int = 0, **kw):
        super().__init__(spec, catalog, **kw)
        self.subs = list(catalog.controllable_substations)
        self.n_head = len(self.subs) + 1
        nf = self.scaler.n_features
        self.sub_policy = sub_policy or Mlp(nf, self.n_head, seed=seed)
        self.conf_policy = conf_policy or Mlp(nf + len(self.subs), len(catalog),
                                              seed=seed + 1)

    def head_mask(self, engine) -> np.ndarray:
        mask = np.ones(self.n_head, bool)
        for i, sub in enumerate(self.subs):
            mask[i] = engine.state.cooldown[sub] == 0
        return mask

    def decide(self, obs, engine, rng) -> PolicyDecision:
        feats = self.scaler(obs)
        mask = self.head_mask(engine)
        logits = self.sub_policy.forward(feats)[0]
        logp = log_softmax(masked_logits(logits, mask))
        choice = int(rng.choice(self.n_head, p=np.exp(logp)))
        decision = PolicyDecision(0, feats, head_choice=choice,
                                  head_logits=logits,
                                  head_logp=float(logp[choice]), head_mask=mask)
        if choice == len(self.subs):
            return decision
        sub = self.subs[choice]
        onehot = np.zeros(len(self.subs))
        onehot[choice] = 1.0
        conf_feats = np.concatenate([feats, onehot])
        conf_mask = mask_for_substation(self.catalog, sub)
        conf_logits = self.conf_policy.forward(conf_feats)[0]
        conf_logp = log_softmax(masked_logits(conf_logits, conf_mask))
        action = int(rng.choice(conf_logp.shape[0], p=np.exp(conf_logp)))
        decision.action_index = action
        decision.conf_features = conf_feats
        decision.conf_choice = action
        decision.conf_logits = conf_logits
        decision.conf_logp = float(conf_logp[action])
        decision.conf_mask = conf_mask
        return decision

    def network_map(self):
        return {"sub_policy": self.sub_policy, "conf_policy": self.conf_policy}


def build_agent(kind: str, spec: GridSpec, catalog: ActionCatalog,
                gate_threshold: float = GATE_THRESHOLD, seed: int = 0,
                eval_seed: int = 0,
                checkpoint: str | None = None):
    """Assemble one of the six architectures, optionally from a checkpoint."""
    if kind not in AGENT_KINDS:
        raise ValueError(f"unknown agent kind {kind!r}; choose from {AGENT_KINDS}")
    gate = OptionsGate(gate_threshold)
    kw = {"gate": gate, "eval_seed": eval_seed}
    nets = {}
    if checkpoint is not None:
        from .nets import load_checkpoint
        raw, meta = load_checkpoint(checkpoint)
        if meta.get("kind") not in (None, kind):
            raise ValueError(
                f"checkpoint was trained for {meta.get('kind')!r}, not {kind!r}")
        nets = {name: restore_mlp(params) for name, params in raw.items()}

    if kind == "greedy":
        return GreedyExpertAgent(spec, catalog, **kw)
    if kind in ("ppo_native", "sac_native"):
        agent = NativePolicyAgent(spec, catalog, policy=nets.get("policy"),
                                  seed=seed, **kw)
    elif kind in ("ppo_substation", "sac_substation"):
        agent = SubstationPolicyAgent(spec, catalog, policy=nets.get("policy"),
                                      seed=seed, **kw)
    else:
        agent = HierarchicalPolicyAgent(spec, catalog,
                                        sub_policy=nets.get("sub_policy"),
                                        conf_policy=nets.get("conf_policy"),
                                        seed=seed, **kw)
    agent.kind = kind
    if nets:
        for name in agent.network_map():
            if name not in nets:
                raise ValueError(f"checkpoint is missing network {name!r}")
    return agent
