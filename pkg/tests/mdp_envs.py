"""Tiny tabular MDPs with exact dynamic-programming oracles, plus minimal
training loops that drive the PPO/SAC updates on them.  Used by the unit
tests and the acceptance suite."""

import numpy as np

from gridtopo.nets import Mlp, log_softmax, masked_logits, softmax
from gridtopo.rl import (PpoBatch, PpoConfig, PrioritizedReplay, SacConfig,
                         TrainableNet, Transition, compute_gae, ppo_update,
                         sac_update)


class TabularMdp:
    """Deterministic-start tabular MDP: transitions[s][a] = (s', r, done)."""

    def __init__(self, n_states, n_actions, transitions, start=0, horizon=30):
        self.n_states = n_states
        self.n_actions = n_actions
        self.transitions = transitions
        self.start = start
        self.horizon = horizon

    def obs(self, s):
        v = np.zeros(self.n_states)
        v[s] = 1.0
        return v

    def optimal_discounted_return(self, gamma):
        """Value iteration oracle, exact for these finite chains."""
        v = np.zeros(self.n_states)
        for _ in range(10_000):
            nv = np.empty(self.n_states)
            for s in range(self.n_states):
                best = -np.inf
                for a in range(self.n_actions):
                    s2, r, done = self.transitions[s][a]
                    best = max(best, r + (0.0 if done else gamma * v[s2]))
                nv[s] = best
            if np.abs(nv - v).max() < 1e-12:
                v = nv
                break
            v = nv
        return v[self.start]


def make_bandit():
    # one state, two arms: arm 0 pays 1, arm 1 pays 0, episode ends
    tr = {0: {0: (0, 1.0, True), 1: (0, 0.0, True)}}
    return TabularMdp(1, 2, tr, horizon=1)


def make_chain(n=5):
    # move right to reach the rewarding terminal state, left slides back
    tr = {}
    for s in range(n):
        left = max(s - 1, 0)
        if s == n - 2:
            tr[s] = {0: (left, 0.0, False), 1: (n - 1, 1.0, True)}
        else:
            tr[s] = {0: (left, 0.0, False), 1: (min(s + 1, n - 1), 0.0, False)}
    return TabularMdp(n, 2, tr)


def rollout_policy(mdp, policy_probs, gamma, episodes=64, rng=None, greedy=False):
    """Mean discounted return of a stochastic tabular policy."""
    rng = rng or np.random.default_rng(0)
    total = 0.0
    for _ in range(episodes):
        s = mdp.start
        disc = 1.0
        ret = 0.0
        for _t in range(mdp.horizon):
            p = policy_probs[s]
            a = int(np.argmax(p)) if greedy else int(rng.choice(mdp.n_actions, p=p))
            s, r, done = mdp.transitions[s][a]
            ret += disc * r
            disc *= gamma
            if done:
                break
        total += ret
    return total / episodes


def net_policy_probs(mdp, net):
    return np.stack([softmax(masked_logits(
        net.forward(mdp.obs(s))[0], np.ones(mdp.n_actions, bool)))
        for s in range(mdp.n_states)])


def train_ppo_on_mdp(mdp, updates=150, episodes_per_batch=32, seed=0,
                     config=None, width=32):
    config = config or PpoConfig(lr=3e-3, clip=0.2, kl_coeff=0.0,
                                 entropy_coeff=0.01, sgd_iters=4,
                                 minibatch_size=64, gae_lambda=0.95)
    rng = np.random.default_rng(seed)
    policy = TrainableNet.make(
        Mlp(mdp.n_states, mdp.n_actions, width=width, n_hidden=1, seed=seed), config.lr)
    value = TrainableNet.make(
        Mlp(mdp.n_states, 1, width=width, n_hidden=1, seed=seed + 1), config.lr)
    mask = np.ones(mdp.n_actions, bool)
    for _ in range(updates):
        obs_l, act_l, logp_l, logits_l, rew_l, done_l, val_l = [], [], [], [], [], [], []
        ep_bounds = []
        for _e in range(episodes_per_batch):
            s = mdp.start
            start_idx = len(obs_l)
            for _t in range(mdp.horizon):
                o = mdp.obs(s)
                logits = policy.net.forward(o)[0]
                logp = log_softmax(masked_logits(logits, mask))
                a = int(rng.choice(mdp.n_actions, p=np.exp(logp)))
                s2, r, done = mdp.transitions[s][a]
                obs_l.append(o)
                act_l.append(a)
                logp_l.append(logp[a])
                logits_l.append(logits)
                rew_l.append(r)
                done_l.append(done)
                val_l.append(value.net.forward(o)[0, 0])
                s = s2
                if done:
                    break
            ep_bounds.append((start_idx, len(obs_l), s))
        advs = np.empty(len(obs_l))
        rets = np.empty(len(obs_l))
        for lo, hi, last_s in ep_bounds:
            tail = 0.0 if done_l[hi - 1] else value.net.forward(mdp.obs(last_s))[0, 0]
            a, rt = compute_gae(rew_l[lo:hi], np.array(val_l[lo:hi] + [tail]),
                                done_l[lo:hi], np.ones(hi - lo, int),
                                config.gamma, config.gae_lambda)
            advs[lo:hi] = a
            rets[lo:hi] = rt
        batch = PpoBatch(np.stack(obs_l), np.array(act_l), np.array(logp_l),
                         np.stack(logits_l),
                         np.tile(mask, (len(obs_l), 1)), advs, rets)
        ppo_update(policy, value, batch, config, rng)
    return policy.net, value.net


def train_sac_on_mdp(mdp, steps=4000, seed=0, config=None, width=32):
    config = config or SacConfig(lr=3e-3, batch_size=64, tau=5e-2,
                                 target_update_freq=1, entropy_coeff=0.01,
                                 reward_scale=3.0, learn_starts=200,
                                 replay_capacity=20_000)
    rng = np.random.default_rng(seed)
    actor = TrainableNet.make(
        Mlp(mdp.n_states, mdp.n_actions, width=width, n_hidden=1, seed=seed), config.lr)
    critics = (TrainableNet.make(Mlp(mdp.n_states, mdp.n_actions, width=width,
                                     n_hidden=1, seed=seed + 1), config.lr),
               TrainableNet.make(Mlp(mdp.n_states, mdp.n_actions, width=width,
                                     n_hidden=1, seed=seed + 2), config.lr))
    targets = (critics[0].net.clone(), critics[1].net.clone())
    replay = PrioritizedReplay(config.replay_capacity, config.replay_alpha,
                               config.replay_beta)
    mask = np.ones(mdp.n_actions, bool)
    s = mdp.start
    t_in_ep = 0
    n_updates = 0
    for step in range(steps):
        o = mdp.obs(s)
        logits = actor.net.forward(o)[0]
        p = softmax(masked_logits(logits, mask))
        a = int(rng.choice(mdp.n_actions, p=p))
        s2, r, done = mdp.transitions[s][a]
        t_in_ep += 1
        truncated = t_in_ep >= mdp.horizon
        replay.add(Transition(o, a, r, mdp.obs(s2), done, 1, mask.copy(),
                              mask.copy()))
        s = s2
        if done or truncated:
            s = mdp.start
            t_in_ep = 0
        if len(replay) >= max(config.batch_size, config.learn_starts):
            n_updates += 1
            sac_update(actor, critics, targets, replay, config, rng, n_updates)
    return actor.net, critics, targets
