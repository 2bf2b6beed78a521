"""Training harness: SMDP segment collection, PPO/SAC loops, validation.

The collector advances episodes step by step; below the gate threshold it
feeds do-nothing actions and accumulates their rewards into the open segment,
so the learners only ever see gate-fired decisions.  Each decision closes the
previous segment (its observation becomes the previous segment's successor
state) and opens the next one.

Per-seed training writes a JSON-lines metrics stream (one row per update with
the running environment-interaction count and episode statistics), keeps the
checkpoint with the best validation mean episode length, and rolls back to
the last finite checkpoint if an update diverges.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .actions import ActionCatalog
from .agents import (BaseAgent, HierarchicalPolicyAgent, PolicyDecision,
                     build_agent)
from .engine import EpisodeConfig, EpisodeEngine, run_episode
from .grid import GridSpec
from .nets import Mlp, save_checkpoint
from .rl import (NonFiniteLossError, PpoBatch, PpoConfig, PrioritizedReplay,
                 SacConfig, TrainableNet, Transition, compute_gae, ppo_update,
                 sac_update)


def ppo_defaults(kind: str, regime: str) -> PpoConfig:
    """Per-architecture/per-regime PPO settings."""
    outages = regime == "contingencies"
    base = dict(lr=1e-4, clip=0.3, kl_coeff=0.2, gamma=0.99,
                minibatch_size=256, batch_size=1024, gae_lambda=0.95)
    if kind == "ppo_hierarchical":
        base.update(lr=5e-4, clip=0.5, kl_coeff=0.3,
                    sgd_iters=8 if outages else 15,
                    entropy_coeff=0.025 if outages else 0.0)
    elif kind == "ppo_native":
        base.update(sgd_iters=15 if outages else 5,
                    entropy_coeff=0.01 if outages else 0.0)
    else:  # ppo_substation
        base.update(sgd_iters=15 if outages else 5, entropy_coeff=0.0)
    return PpoConfig(**base)


def sac_defaults(kind: str, regime: str) -> SacConfig:
    outages = regime == "contingencies"
    if kind == "sac_substation":
        return SacConfig(lr=1e-4, batch_size=512, tau=5e-4,
                         target_update_freq=10, entropy_coeff=0.0,
                         reward_scale=3.0)
    return SacConfig(lr=1e-4, batch_size=512, tau=5e-3,
                     target_update_freq=100,
                     entropy_coeff=0.01 if outages else 0.05,
                     reward_scale=3.0)


@dataclass
class Segment:
    """One closed SMDP decision segment plus learner-side annotations."""

    decision: PolicyDecision
    reward: float
    k: int
    next_features: np.ndarray
    next_head_mask: np.ndarray | None
    done: bool
    episode_id: int


@dataclass
class CollectorStats:
    episodes_done: int = 0
    episode_returns: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)
    env_steps: int = 0

    def recent(self, n=20):
        r = self.episode_returns[-n:]
        ln = self.episode_lengths[-n:]
        return (float(np.mean(r)) if r else float("nan"),
                float(np.mean(ln)) if ln else float("nan"))


class CollectorStarvation(RuntimeError):
    """The gate never fired across many episodes: nothing to train on."""


class SmdpCollector:
    """Streams gate-fired decision segments from consecutive episodes.

    Segment rewards are plain sums over the segment's steps by default;
    passing ``within_segment_gamma`` switches to discounting inside the
    segment (``sum gamma^i r_i``) for callers that prefer the alternative
    aggregation.  Bootstrapping across segments always uses ``gamma**k``.
    """

    def __init__(self, agent: BaseAgent, scenarios, engine_config: EpisodeConfig,
                 rng: np.random.Generator,
                 within_segment_gamma: float | None = None):
        self.agent = agent
        self.scenarios = scenarios
        self.engine = EpisodeEngine(agent.spec, agent.catalog, engine_config)
        self.rng = rng
        self.gamma_in = within_segment_gamma
        self.stats = CollectorStats()
        self._order = []
        self._episode_return = 0.0
        self._episode_id = -1
        self._obs = None
        self._open = None  # (decision, reward_acc, k_acc)

    def _next_scenario(self):
        if not self._order:
            self._order = list(self.rng.permutation(len(self.scenarios)))
        return self.scenarios[self._order.pop()]

    def _start_episode(self):
        scenario = self._next_scenario()
        self._obs = self.engine.reset(scenario)
        self._episode_return = 0.0
        self._episode_id += 1
        self._open = None

    def collect(self, n_segments: int) -> list[Segment]:
        """Run steps until ``n_segments`` segments have closed.

        Raises :class:`CollectorStarvation` if whole passes over the scenario
        set complete without a single gate activation.
        """
        out: list[Segment] = []
        barren_episodes = 0
        if self._obs is None:
            self._start_episode()
        while len(out) < n_segments:
            if barren_episodes > max(50, 3 * len(self.scenarios)):
                raise CollectorStarvation(
                    "max line loading never reached the gate threshold over "
                    f"{barren_episodes} consecutive episodes")
            fired = self.agent.gate.fires(self._obs)
            if fired:
                decision = self.agent.decide(self._obs, self.engine, self.rng)
                if self._open is not None:
                    d, r, k = self._open
                    out.append(Segment(d, r, k, decision.features,
                                       decision.head_mask, False,
                                       self._episode_id))
                self._open = (decision, 0.0, 0)
                action = decision.action_index
            else:
                action = 0
            res = self.engine.step(action)
            self.stats.env_steps += 1
            self._episode_return += res.reward
            if self._open is not None:
                d, r, k = self._open
                w = 1.0 if self.gamma_in is None else self.gamma_in ** k
                self._open = (d, r + w * res.reward, k + 1)
            self._obs = res.observation
            if res.done:
                if self._open is not None:
                    d, r, k = self._open
                    feats = self.agent.scaler(res.observation)
                    terminal = res.done_reason != "horizon"
                    out.append(Segment(d, r, k, feats, None, terminal,
                                       self._episode_id))
                    barren_episodes = 0
                else:
                    barren_episodes += 1
                self.stats.episodes_done += 1
                self.stats.episode_returns.append(self._episode_return)
                self.stats.episode_lengths.append(self.engine.t)
                self._start_episode()
        return out


def validate(agent: BaseAgent, scenarios, engine_config: EpisodeConfig,
             max_scenarios: int | None = None) -> float:
    """Mean episode length of the current policy over validation scenarios."""
    use = scenarios if max_scenarios is None else scenarios[:max_scenarios]
    lengths = []
    for sc in use:
        rec = run_episode(sc, agent, agent.spec, agent.catalog, engine_config)
        lengths.append(rec.length)
    return float(np.mean(lengths)) if lengths else float("nan")


class MetricsWriter:
    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w")

    def write(self, row: dict):
        self._fh.write(json.dumps(row) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class TrainResult:
    seed: int
    best_val_length: float
    best_checkpoint: str
    interactions: int
    failed: bool = False
    failure: str = ""


def _snapshot(nets: dict[str, Mlp]):
    return {name: [p.copy() for p in net.parameters()]
            for name, net in nets.items()}


def _restore(nets: dict[str, Mlp], snap):
    for name, net in nets.items():
        net.set_parameters(snap[name])


def _ppo_batches_from_segments(agent, segments: list[Segment],
                               value_net: Mlp, gamma, lam, value_scale=1.0):
    """GAE over episode-ordered segments, then per-head PPO batches."""
    feats = np.stack([s.decision.features for s in segments])
    values = value_net.forward(feats)[:, 0] * value_scale
    advantages = np.empty(len(segments))
    returns = np.empty(len(segments))
    i = 0
    while i < len(segments):
        j = i
        while j + 1 < len(segments) and \
                segments[j + 1].episode_id == segments[i].episode_id:
            j += 1
        chunk = segments[i: j + 1]
        tail = 0.0 if chunk[-1].done else \
            float(value_net.forward(chunk[-1].next_features)[0, 0]) * value_scale
        adv, ret = compute_gae(
            [s.reward for s in chunk],
            np.concatenate([values[i: j + 1], [tail]]),
            [s.done for s in chunk],
            [s.k for s in chunk], gamma, lam)
        advantages[i: j + 1] = adv
        returns[i: j + 1] = ret
        i = j + 1

    head = PpoBatch(
        obs=feats,
        actions=np.array([s.decision.head_choice for s in segments]),
        logp_old=np.array([s.decision.head_logp for s in segments]),
        logits_old=np.stack([s.decision.head_logits for s in segments]),
        masks=np.stack([s.decision.head_mask for s in segments]),
        advantages=advantages, returns=returns)

    conf_rows = [i for i, s in enumerate(segments)
                 if s.decision.conf_choice is not None]
    conf = None
    if conf_rows:
        rows = [segments[i] for i in conf_rows]
        conf = PpoBatch(
            obs=np.stack([s.decision.conf_features for s in rows]),
            actions=np.array([s.decision.conf_choice for s in rows]),
            logp_old=np.array([s.decision.conf_logp for s in rows]),
            logits_old=np.stack([s.decision.conf_logits for s in rows]),
            masks=np.stack([s.decision.conf_mask for s in rows]),
            advantages=advantages[conf_rows], returns=returns[conf_rows])
    return head, conf


def train_ppo(agent, scenarios_train, scenarios_val, budget: int, seed: int,
              out_dir: Path, engine_config: EpisodeConfig,
              config: PpoConfig | None = None, val_every: int = 20,
              val_max: int | None = 10) -> TrainResult:
    """PPO training for the native, substation, and hierarchical agents.

    The hierarchical agent runs two policy updates per iteration (substation
    head with the shared value fit, then configuration head policy-only) on
    the same GAE advantages, mirroring one reward signal feeding both levels.
    """
    config = config or ppo_defaults(agent.kind, "contingencies")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out_dir / "metrics.jsonl")

    hierarchical = isinstance(agent, HierarchicalPolicyAgent)
    nets = dict(agent.network_map())
    value_net = Mlp(agent.scaler.n_features, 1, seed=seed + 977)
    nets["value"] = value_net
    if hierarchical:
        trained = {
            "sub": TrainableNet.make(agent.sub_policy, config.lr),
            "conf": TrainableNet.make(agent.conf_policy, config.lr)}
    else:
        trained = {"policy": TrainableNet.make(agent.policy, config.lr)}
    value_tn = TrainableNet.make(value_net, config.lr)

    collector = SmdpCollector(
        agent, scenarios_train, engine_config, rng,
        within_segment_gamma=config.gamma if config.discount_within_segment
        else None)
    best_val = -np.inf
    best_path = out_dir / "best.npz"
    interactions = 0
    iteration = 0
    failed = False
    failure = ""
    last_good = _snapshot(nets)
    start = time.time()
    while interactions < budget:
        try:
            segments = collector.collect(config.batch_size)
        except CollectorStarvation as err:
            failed = True
            failure = str(err)
            writer.write({"iteration": iteration, "event": "starved",
                          "detail": failure})
            break
        interactions += len(segments)
        head, conf = _ppo_batches_from_segments(
            agent, segments, value_net, config.gamma, config.gae_lambda,
            config.value_scale)
        try:
            if hierarchical:
                stats = ppo_update(trained["sub"], value_tn, head, config, rng)
                if conf is not None:
                    ppo_update(trained["conf"], None, conf, config, rng)
            else:
                stats = ppo_update(trained["policy"], value_tn, head, config, rng)
            last_good = _snapshot(nets)
        except NonFiniteLossError as err:
            _restore(nets, last_good)
            failed = True
            failure = f"divergence at iteration {iteration}: {err}"
            writer.write({"iteration": iteration, "event": "diverged",
                          "detail": failure})
            break
        iteration += 1
        ep_ret, ep_len = collector.stats.recent()
        writer.write({"iteration": iteration,
                      "env_interactions": interactions,
                      "env_steps": collector.stats.env_steps,
                      "episode_return_mean": ep_ret,
                      "episode_len_mean": ep_len,
                      "policy_loss": stats["policy_loss"],
                      "value_loss": stats["value_loss"],
                      "kl": stats["kl"], "entropy": stats["entropy"],
                      "wall_s": round(time.time() - start, 2)})
        if iteration % val_every == 0 or interactions >= budget:
            val_len = validate(agent, scenarios_val, engine_config, val_max)
            writer.write({"iteration": iteration, "validation_len": val_len,
                          "env_interactions": interactions})
            if val_len > best_val:
                best_val = val_len
                save_checkpoint(best_path, nets,
                                meta={"kind": agent.kind, "seed": seed,
                                      "val_len": val_len,
                                      "interactions": interactions})
    save_checkpoint(out_dir / "last.npz", nets,
                    meta={"kind": agent.kind, "seed": seed})
    if best_val == -np.inf:  # never validated (tiny budget): keep last
        val_len = validate(agent, scenarios_val, engine_config, val_max)
        best_val = val_len
        save_checkpoint(best_path, nets, meta={"kind": agent.kind,
                                               "seed": seed,
                                               "val_len": val_len})
    writer.close()
    return TrainResult(seed, float(best_val), str(best_path), interactions,
                       failed, failure)


def train_sac(agent, scenarios_train, scenarios_val, budget: int, seed: int,
              out_dir: Path, engine_config: EpisodeConfig,
              config: SacConfig | None = None, val_every_updates: int = 2000,
              val_max: int | None = 10, update_every: int = 1) -> TrainResult:
    """Discrete SAC over the agent's decision head (native catalog head or
    substation head; the greedy level 3 is part of the environment from the
    head's point of view)."""
    if isinstance(agent, HierarchicalPolicyAgent):
        raise ValueError("SAC training supports native and substation agents")
    config = config or sac_defaults(agent.kind, "contingencies")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out_dir / "metrics.jsonl")

    actor_net = agent.policy
    n_actions = actor_net.n_out
    actor = TrainableNet.make(actor_net, config.lr)
    critics = (TrainableNet.make(Mlp(actor_net.n_in, n_actions, seed=seed + 31),
                                 config.lr),
               TrainableNet.make(Mlp(actor_net.n_in, n_actions, seed=seed + 37),
                                 config.lr))
    targets = (critics[0].net.clone(), critics[1].net.clone())
    replay = PrioritizedReplay(config.replay_capacity, config.replay_alpha,
                               config.replay_beta)
    nets = {"policy": actor_net, "critic1": critics[0].net,
            "critic2": critics[1].net}
    collector = SmdpCollector(
        agent, scenarios_train, engine_config, rng,
        within_segment_gamma=config.gamma if config.discount_within_segment
        else None)

    best_val = -np.inf
    best_path = out_dir / "best.npz"
    interactions = 0
    n_updates = 0
    failed = False
    failure = ""
    last_good = _snapshot(nets)
    start = time.time()
    while interactions < budget:
        try:
            new_segments = collector.collect(update_every)
        except CollectorStarvation as err:
            failed = True
            failure = str(err)
            writer.write({"update": n_updates, "event": "starved",
                          "detail": failure})
            break
        for seg in new_segments:
            interactions += 1
            replay.add(Transition(
                seg.decision.features, seg.decision.head_choice, seg.reward,
                seg.next_features, seg.done, seg.k,
                seg.decision.head_mask,
                seg.next_head_mask if seg.next_head_mask is not None
                else np.ones(n_actions, bool)))
        if len(replay) < max(config.batch_size, config.learn_starts):
            continue
        try:
            n_updates += 1
            stats = sac_update(actor, critics, targets, replay, config, rng,
                               n_updates)
            if n_updates % 50 == 0:
                last_good = _snapshot(nets)
        except NonFiniteLossError as err:
            _restore(nets, last_good)
            failed = True
            failure = f"divergence at update {n_updates}: {err}"
            writer.write({"update": n_updates, "event": "diverged",
                          "detail": failure})
            break
        if n_updates % 200 == 0:
            ep_ret, ep_len = collector.stats.recent()
            writer.write({"iteration": n_updates,
                          "env_interactions": interactions,
                          "env_steps": collector.stats.env_steps,
                          "episode_return_mean": ep_ret,
                          "episode_len_mean": ep_len,
                          "critic_loss": stats["critic_loss"],
                          "actor_loss": stats["actor_loss"],
                          "entropy": stats["entropy"],
                          "wall_s": round(time.time() - start, 2)})
        if n_updates % val_every_updates == 0:
            val_len = validate(agent, scenarios_val, engine_config, val_max)
            writer.write({"iteration": n_updates, "validation_len": val_len,
                          "env_interactions": interactions})
            if val_len > best_val:
                best_val = val_len
                save_checkpoint(best_path, nets,
                                meta={"kind": agent.kind, "seed": seed,
                                      "val_len": val_len})
    save_checkpoint(out_dir / "last.npz", nets, meta={"kind": agent.kind,
                                                      "seed": seed})
    if best_val == -np.inf:
        val_len = validate(agent, scenarios_val, engine_config, val_max)
        best_val = val_len
        save_checkpoint(best_path, nets, meta={"kind": agent.kind,
                                               "seed": seed,
                                               "val_len": val_len})
    writer.close()
    return TrainResult(seed, float(best_val), str(best_path), interactions,
                       failed, failure)


def train_seed(kind: str, spec: GridSpec, catalog: ActionCatalog,
               scenarios_train, scenarios_val, budget: int, seed: int,
               out_dir: Path, engine_config: EpisodeConfig = EpisodeConfig(),
               regime: str = "contingencies", gate_threshold: float = 0.95,
               overrides: dict | None = None, val_every: int = 20,
               val_max: int | None = 10, sac_update_every: int = 1) -> TrainResult:
    """Train one seed of one agent kind with the regime's default settings."""
    if kind == "greedy":
        raise ValueError("the greedy expert has no trainable parameters")
    agent = build_agent(kind, spec, catalog, gate_threshold=gate_threshold,
                        seed=seed, eval_seed=seed + 10_000)
    if kind.startswith("ppo"):
        config = ppo_defaults(kind, regime)
        if overrides:
            config = replace(config, **overrides)
        return train_ppo(agent, scenarios_train, scenarios_val, budget, seed,
                         out_dir, engine_config, config, val_every=val_every,
                         val_max=val_max)
    config = sac_defaults(kind, regime)
    if overrides:
        config = replace(config, **overrides)
    return train_sac(agent, scenarios_train, scenarios_val, budget, seed,
                     out_dir, engine_config, config, val_max=val_max,
                     update_every=sac_update_every)
