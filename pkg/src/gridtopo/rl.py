"""Policy-gradient machinery: PPO with a fixed KL penalty and entropy bonus,
discrete soft actor-critic with prioritized replay, and segment-aware
advantage estimation.

Decisions arrive as aggregated segments: one transition spans the policy
step plus every following do-nothing step until the next decision, with the
rewards summed and the segment length ``k`` recorded.  All bootstrapping
therefore discounts with ``gamma ** k``.

Gradients with respect to policy logits are computed in closed form
(softmax algebra) and pushed through the networks' analytic backward pass;
the tests check them against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nets import Adam, Mlp, log_softmax, masked_logits


class NonFiniteLossError(RuntimeError):
    """An update produced a non-finite loss; the caller should roll back."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class Transition:
    """One SMDP decision segment."""

    obs: np.ndarray
    action: int
    aggregate_reward: float  # sum of rewards over the segment's k steps
    next_obs: np.ndarray
    done: bool
    k: int  # segment length in environment steps
    mask: np.ndarray  # legal actions at obs
    next_mask: np.ndarray | None = None  # legal actions at next_obs


@dataclass
class PpoConfig:
    lr: float = 1e-4
    gamma: float = 0.99
    clip: float = 0.3
    kl_coeff: float = 0.2
    entropy_coeff: float = 0.0
    sgd_iters: int = 5
    minibatch_size: int = 256
    batch_size: int = 1024
    gae_lambda: float = 0.95
    normalize_advantages: bool = True
    # alternative segment aggregation: sum gamma^i r_i instead of sum r_i
    discount_within_segment: bool = False
    # constant divisor applied to value-net targets (pure conditioning:
    # predictions are multiplied back before advantage estimation)
    value_scale: float = 1.0


@dataclass
class SacConfig:
    lr: float = 1e-4
    gamma: float = 0.99
    batch_size: int = 512
    tau: float = 5e-3
    target_update_freq: int = 100
    entropy_coeff: float = 0.05  # fixed temperature
    reward_scale: float = 3.0
    replay_alpha: float = 0.6
    replay_beta: float = 0.4
    replay_capacity: int = 100_000
    learn_starts: int = 1000
    discount_within_segment: bool = False


@dataclass
class TrainableNet:
    """A network paired with its optimizer state."""

    net: Mlp
    opt: Adam

    @staticmethod
    def make(net: Mlp, lr: float) -> "TrainableNet":
        return TrainableNet(net, Adam(net.parameters(), lr))


def compute_gae(rewards, values, dones, segment_lengths, gamma, lam):
    """Segment-corrected generalized advantage estimation.

    ``values`` has one more entry than ``rewards``: the trailing value
    bootstraps the cut end of the fragment (ignored when the last transition
    is terminal).  Discounting uses ``gamma**k`` per segment.
    """
    rewards = np.asarray(rewards, float)
    dones = np.asarray(dones, bool)
    ks = np.asarray(segment_lengths, np.int64)
    values = np.asarray(values, float)
    n = rewards.shape[0]
    if not (dones.shape[0] == ks.shape[0] == n and values.shape[0] == n + 1):
        raise ValueError("misaligned GAE inputs")
    advantages = np.empty(n)
    acc = 0.0
    for t in range(n - 1, -1, -1):
        g = gamma ** ks[t]
        nonterm = 0.0 if dones[t] else 1.0
        delta = rewards[t] + g * values[t + 1] * nonterm - values[t]
        acc = delta + g * lam * nonterm * acc
        advantages[t] = acc
    return advantages, advantages + values[:-1]


@dataclass
class PpoBatch:
    obs: np.ndarray            # (B, D)
    actions: np.ndarray        # (B,)
    logp_old: np.ndarray       # (B,)
    logits_old: np.ndarray     # (B, A) pre-mask logits of the sampling policy
    masks: np.ndarray          # (B, A) bool
    advantages: np.ndarray     # (B,)
    returns: np.ndarray        # (B,)

    def __len__(self):
        return self.obs.shape[0]


def _policy_terms(net: Mlp, obs, masks):
    logits, cache = net.forward_cached(obs)
    ml = masked_logits(logits, masks)
    logp = log_softmax(ml)
    p = np.exp(logp)
    return logits, cache, logp, p


def ppo_logit_loss(logits, masks, acts, logp_old_a, p_old, lp_old, adv,
                   config: PpoConfig):
    """Per-minibatch PPO loss and its exact gradient wrt the raw logits.

    Pure function of the logits, so it can be checked against central finite
    differences directly.  Returns ``(loss, grad, stats)`` with the loss
    already averaged over the minibatch.
    """
    B = logits.shape[0]
    rows = np.arange(B)
    logp = log_softmax(masked_logits(logits, masks))
    p = np.exp(logp)
    logp_a = logp[rows, acts]
    ratio = np.exp(logp_a - logp_old_a)

    clipped = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip)
    surrogate = np.minimum(ratio * adv, clipped * adv)
    unclipped_active = np.where(
        adv >= 0, ratio <= 1.0 + config.clip, ratio >= 1.0 - config.clip)

    kl = np.where(masks, p_old * (lp_old - logp), 0.0).sum(axis=1)
    entropy = -np.where(masks, p * logp, 0.0).sum(axis=1)
    loss = float(np.mean(-surrogate + config.kl_coeff * kl
                         - config.entropy_coeff * entropy))
    stats = {"kl": float(kl.mean()), "entropy": float(entropy.mean()),
             "clip_fraction": float(np.mean(~unclipped_active)),
             "ratio": ratio}
    if not np.isfinite(loss):
        return loss, np.zeros_like(logits), stats

    # closed forms: d(-surrogate)/dz = -ind*ratio*A*(onehot - p),
    # dKL(old,new)/dz = p - p_old, dH/dz = -p*(logp + H)
    grad = (p - p_old) * config.kl_coeff
    grad += config.entropy_coeff * p * (logp + entropy[:, None])
    coeff = -(unclipped_active * ratio * adv)
    grad[rows, acts] += coeff
    grad -= coeff[:, None] * p
    grad = np.where(masks, grad, 0.0) / B
    return loss, grad, stats


def sac_actor_logit_loss(logits, masks, q_min, alpha):
    """Expected ``alpha*log pi - min Q`` under the categorical policy, with
    its exact gradient wrt the raw logits (Q treated constant)."""
    logp = log_softmax(masked_logits(logits, masks))
    p = np.exp(logp)
    c = np.where(masks, alpha * logp - q_min, 0.0)
    per_sample = np.where(masks, p * c, 0.0).sum(axis=1)
    loss = float(per_sample.mean())
    grad = np.where(masks, p * (c - per_sample[:, None]), 0.0) / logits.shape[0]
    return loss, grad, per_sample


def ppo_update(policy: TrainableNet, value_fn: TrainableNet | None,
               batch: PpoBatch, config: PpoConfig,
               rng: np.random.Generator) -> dict:
    """Clipped-surrogate PPO pass with fixed KL penalty and entropy bonus.

    Runs ``sgd_iters`` epochs of shuffled minibatches.  Masked actions carry
    zero probability throughout.  Raises :class:`NonFiniteLossError` (before
    touching parameters) if any minibatch loss goes non-finite.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty PPO batch")
    adv = batch.advantages
    if config.normalize_advantages and n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    logp_old_full = log_softmax(masked_logits(batch.logits_old, batch.masks))
    p_old_full = np.exp(logp_old_full)

    stats = {"policy_loss": 0.0, "value_loss": 0.0, "kl": 0.0,
             "entropy": 0.0, "clip_fraction": 0.0, "ratio_first": None}
    passes = 0
    for it in range(config.sgd_iters):
        order = rng.permutation(n)
        for lo in range(0, n, config.minibatch_size):
            mb = order[lo: lo + config.minibatch_size]
            B = mb.shape[0]
            obs = batch.obs[mb]
            masks = batch.masks[mb]

            logits, cache = policy.net.forward_cached(obs)
            loss, grad, mb_stats = ppo_logit_loss(
                logits, masks, batch.actions[mb], batch.logp_old[mb],
                p_old_full[mb], logp_old_full[mb], adv[mb], config)
            if stats["ratio_first"] is None:
                stats["ratio_first"] = float(np.abs(mb_stats["ratio"] - 1.0).max())
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    "non-finite PPO policy loss",
                    {"iter": it, "ratio_max": float(np.max(mb_stats["ratio"]))})
            policy.opt.step(policy.net.backward(cache, grad))

            if value_fn is not None:
                v, vcache = value_fn.net.forward_cached(obs)
                v = v[:, 0]
                err = v - batch.returns[mb] / config.value_scale
                value_loss = float(0.5 * np.mean(err ** 2))
                if not np.isfinite(value_loss):
                    raise NonFiniteLossError("non-finite PPO value loss",
                                             {"iter": it})
                value_fn.opt.step(
                    value_fn.net.backward(vcache, (err / B)[:, None]))
                stats["value_loss"] += value_loss

            stats["policy_loss"] += loss
            stats["kl"] += mb_stats["kl"]
            stats["entropy"] += mb_stats["entropy"]
            stats["clip_fraction"] += mb_stats["clip_fraction"]
            passes += 1
    for key in ("policy_loss", "value_loss", "kl", "entropy", "clip_fraction"):
        stats[key] /= max(passes, 1)
    return stats


# ---------------------------------------------------------------------------
# prioritized replay


class PrioritizedReplay:
    """Proportional prioritized experience replay.

    New transitions enter at the current maximum priority; importance
    weights are normalized by their batch maximum.  ``alpha = 0`` degenerates
    to uniform sampling.
    """

    def __init__(self, capacity: int, alpha: float = 0.6, beta: float = 0.4):
        self.capacity = capacity
        self.alpha = alpha
        self.beta = beta
        self._data: list[Transition] = []
        self._prio = np.zeros(capacity)
        self._next = 0

    def __len__(self):
        return len(self._data)

    def add(self, tr: Transition):
        prio = self._prio[: len(self._data)].max() if self._data else 1.0
        if len(self._data) < self.capacity:
            self._data.append(tr)
            self._prio[len(self._data) - 1] = prio
        else:
            self._data[self._next] = tr
            self._prio[self._next] = prio
            self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        n = len(self._data)
        if n == 0:
            raise ValueError("replay buffer is empty")
        scaled = self._prio[:n] ** self.alpha
        probs = scaled / scaled.sum()
        idx = rng.choice(n, size=batch_size, p=probs)
        weights = (n * probs[idx]) ** (-self.beta)
        weights /= weights.max()
        return idx, [self._data[i] for i in idx], weights

    def update_priorities(self, idx, priorities):
        self._prio[np.asarray(idx, np.int64)] = np.maximum(priorities, 1e-6)


# ---------------------------------------------------------------------------
# discrete SAC


def _stack_batch(transitions: list[Transition], n_actions: int):
    obs = np.stack([t.obs for t in transitions])
    next_obs = np.stack([t.next_obs for t in transitions])
    acts = np.array([t.action for t in transitions], np.int64)
    rews = np.array([t.aggregate_reward for t in transitions])
    dones = np.array([t.done for t in transitions], bool)
    ks = np.array([t.k for t in transitions], np.int64)
    masks = np.stack([t.mask for t in transitions])
    next_masks = np.stack([t.next_mask if t.next_mask is not None else
                           np.ones(n_actions, bool) for t in transitions])
    return obs, acts, rews, next_obs, dones, ks, masks, next_masks


def sac_update(actor: TrainableNet, critics: tuple[TrainableNet, TrainableNet],
               targets: tuple[Mlp, Mlp], replay: PrioritizedReplay,
               config: SacConfig, rng: np.random.Generator,
               update_index: int) -> dict:
    """One discrete-SAC gradient step from prioritized replay.

    Twin critics regress on the soft target built from the categorical policy
    expectation over legal next actions; the actor minimizes expected
    ``alpha*log pi - min Q``.  Target networks are polyak-mixed every
    ``target_update_freq`` calls.  Priorities become the mean absolute TD
    error of the twin critics.
    """
    if len(replay) < config.batch_size:
        raise ValueError("replay holds fewer transitions than one batch")
    idx, transitions, weights = replay.sample(config.batch_size, rng)
    n_actions = actor.net.n_out
    obs, acts, rews, next_obs, dones, ks, masks, next_masks = _stack_batch(
        transitions, n_actions)
    B = obs.shape[0]
    rows = np.arange(B)

    # soft target
    next_logp = log_softmax(masked_logits(actor.net.forward(next_obs), next_masks))
    next_p = np.exp(next_logp)
    q_next = np.minimum(targets[0].forward(next_obs), targets[1].forward(next_obs))
    soft = np.where(next_masks,
                    next_p * (q_next - config.entropy_coeff * next_logp), 0.0)
    y = (config.reward_scale * rews
         + (config.gamma ** ks) * (~dones) * soft.sum(axis=1))

    td_abs = np.zeros(B)
    critic_losses = []
    for tn in critics:
        q, cache = tn.net.forward_cached(obs)
        delta = q[rows, acts] - y
        loss = float(0.5 * np.mean(weights * delta ** 2))
        if not np.isfinite(loss):
            raise NonFiniteLossError("non-finite SAC critic loss",
                                     {"update": update_index})
        grad = np.zeros_like(q)
        grad[rows, acts] = weights * delta / B
        tn.opt.step(tn.net.backward(cache, grad))
        td_abs += np.abs(delta)
        critic_losses.append(loss)
    replay.update_priorities(idx, td_abs / 2.0)

    # actor
    logits, cache = actor.net.forward_cached(obs)
    q_min = np.minimum(critics[0].net.forward(obs), critics[1].net.forward(obs))
    actor_loss, grad, _ = sac_actor_logit_loss(logits, masks, q_min,
                                               config.entropy_coeff)
    if not np.isfinite(actor_loss):
        raise NonFiniteLossError("non-finite SAC actor loss",
                                 {"update": update_index})
    actor.opt.step(actor.net.backward(cache, grad))
    logp = log_softmax(masked_logits(logits, masks))
    p = np.exp(logp)

    if update_index % config.target_update_freq == 0:
        for tn, tgt in zip(critics, targets):
            for src, dst in zip(tn.net.parameters(), tgt.parameters()):
                dst *= 1.0 - config.tau
                dst += config.tau * src

    entropy = float(np.mean(-np.where(masks, p * logp, 0.0).sum(axis=1)))
    return {"critic_loss": float(np.mean(critic_losses)),
            "actor_loss": actor_loss, "entropy": entropy,
            "mean_q": float(q_min[rows, acts].mean()),
            "mean_target": float(y.mean())}
