"""Latent-conditioned actor-critic, intrinsic reward, GAE and PPO."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import worldmodel as wm
from .diffnet import NumericError, ParamStore, Tape, adam_step, add_mlp, log_softmax, softmax

ACTOR = "actor"
CRITIC = "critic"


class StaleBufferError(RuntimeError):
    """A rollout buffer was reused after the update that consumed it."""


def init_policy(store: ParamStore, rng: np.random.Generator, obs_dim: int = 16, latent: int = 5,
                n_actions: int = 4, hidden: tuple[int, ...] = (32, 32)) -> None:
    add_mlp(store, ACTOR, [obs_dim + latent, *hidden, n_actions], rng)
    add_mlp(store, CRITIC, [obs_dim + latent, *hidden, 1], rng)


def policy_latent_dim(store: ParamStore, obs_dim: int = 16) -> int:
    return store[f"{ACTOR}.l0.W"].shape[1] - obs_dim


def _n_layers(store: ParamStore, prefix: str) -> int:
    return wm.n_layers(store, prefix)


def _forward(tape: Tape, obs, m):
    x = tape.concat([tape.const(np.atleast_2d(obs)), tape.const(np.atleast_2d(m))], axis=-1)
    logits = tape.mlp(x, ACTOR, _n_layers(tape.store, ACTOR), "tanh")
    value = tape.mlp(x, CRITIC, _n_layers(tape.store, CRITIC), "tanh")
    return logits, value


def policy_outputs(store: ParamStore, obs, m) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(N, A)`` and values ``(N,)`` for a batch of agents."""
    logits, value = _forward(Tape(store, record=False), obs, m)
    if not np.all(np.isfinite(logits.value)):
        raise NumericError("non-finite policy logits")
    return logits.value, value.value[:, 0]


def greedy_action(logits) -> np.ndarray:
    """Row-wise argmax; ``np.argmax`` already returns the lowest index on ties."""
    return np.argmax(np.atleast_2d(logits), axis=-1)


def act(store: ParamStore, obs, m, mode: str = "sample",
        rng: np.random.Generator | None = None):
    """Actions, log-probabilities and values for each row of ``obs``.

    A single 1-D observation returns scalars.
    """
    single = np.ndim(obs) == 1
    logits, values = policy_outputs(store, obs, m)
    logp_all = log_softmax(logits)
    if mode == "greedy":
        a = greedy_action(logits)
    elif mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        p = softmax(logits)
        u = rng.random(len(p))
        a = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), p.shape[1] - 1)
    else:
        raise ValueError(f"unknown action mode {mode!r}")
    logp = logp_all[np.arange(len(a)), a]
    if single:
        return int(a[0]), float(logp[0]), float(values[0])
    return a.astype(int), logp, values


# ---------------------------------------------------------------------------
# intrinsic reward


@dataclass(frozen=True)
class IntrinsicTerms:
    reward: bool = True
    obs: bool = True


def intrinsic_reward_tape(tape: Tape, obs, actions, nbr_actions, nbr_mask, m, o_target,
                          terms: IntrinsicTerms = IntrinsicTerms()):
    """Tape node ``(N,)`` of per-agent intrinsic rewards, or ``None`` when no agent has neighbors.

    ``obs``/``o_target`` are ``(N, 16)`` normalized observations, ``nbr_actions``
    ``(N, 4)`` with -1 for absent neighbors, ``nbr_mask`` ``(N, 4)``, ``m`` a node
    or array ``(N, L)``.
    """
    obs = np.atleast_2d(obs)
    o_target = np.atleast_2d(o_target)
    actions = np.atleast_1d(np.asarray(actions, int))
    nbr_actions = np.atleast_2d(np.asarray(nbr_actions, int))
    nbr_mask = np.atleast_2d(np.asarray(nbr_mask, bool))
    N = len(obs)
    m_node = m if not isinstance(m, np.ndarray) else tape.const(np.atleast_2d(m))
    agent_idx, dirs = np.nonzero(nbr_mask)
    if len(agent_idx) == 0 or not (terms.reward or terms.obs):
        return None
    a_j = nbr_actions[agent_idx, dirs]
    if np.any(a_j < 0):
        raise ValueError("neighbor mask marks a direction without a neighbor action")
    extra = wm.nbr_extra(a_j, dirs)
    m_rows = tape.rows(m_node, agent_idx)
    total = None
    if terms.obs:
        f_o = wm.self_obs_features(obs, actions)
        o_self = wm.head_forward(tape, "dec_o", f_o, m_node)
        o_nbr = wm.head_forward(tape, "dec_on", np.concatenate([f_o[agent_idx], extra], -1), m_rows)
        total = tape.row_norm(tape.sub(tape.rows(o_self, agent_idx), o_nbr))
    if terms.reward:
        f_r = wm.self_reward_features(o_target, obs, actions)
        r_self = wm.head_forward(tape, "dec_r", f_r, m_node)
        r_nbr = wm.head_forward(tape, "dec_rn", np.concatenate([f_r[agent_idx], extra], -1), m_rows)
        gap = tape.row_sum(tape.abs(tape.sub(tape.rows(r_self, agent_idx), r_nbr)))
        total = gap if total is None else tape.add(total, gap)
    return tape.scale(tape.segment_sum(total, agent_idx, N), -1.0)


def intrinsic_reward(store: ParamStore, obs, actions, nbr_actions, nbr_mask, m, o_target,
                     terms: IntrinsicTerms = IntrinsicTerms()):
    """Per-agent ``r_int <= 0``: minus the summed per-neighbor prediction gaps.

    Accepts a single agent (1-D ``obs``) and then returns a float.
    """
    single = np.ndim(obs) == 1
    tape = Tape(store, record=False)
    node = intrinsic_reward_tape(tape, obs, actions, nbr_actions, nbr_mask,
                                 np.atleast_2d(np.asarray(m, float)), o_target, terms)
    n = 1 if single else len(obs)
    out = np.zeros(n) if node is None else node.value
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# rollout buffer and advantages


@dataclass
class RolloutBuffer:
    """Most recent on-policy transitions of one agent."""

    capacity: int = 60
    obs: list = field(default_factory=list)
    latent: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    values: list = field(default_factory=list)
    ext_rewards: list = field(default_factory=list)
    int_rewards: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    mu: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    consumed: bool = False

    _FIELDS = ("obs", "latent", "actions", "logp", "values", "ext_rewards", "int_rewards",
               "dones", "mu", "sigma")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def full(self) -> bool:
        return len(self) >= self.capacity

    def add(self, obs, latent, action, logp, value, ext_reward, int_reward, done,
            mu=None, sigma=None) -> None:
        row = (np.asarray(obs, float), np.asarray(latent, float), int(action), float(logp),
               float(value), float(ext_reward), float(int_reward), bool(done),
               None if mu is None else np.asarray(mu, float),
               None if sigma is None else np.asarray(sigma, float))
        for name, v in zip(self._FIELDS, row):
            getattr(self, name).append(v)
        if len(self) > self.capacity:
            for name in self._FIELDS:
                del getattr(self, name)[0]
        self.consumed = False

    def clear(self) -> None:
        for name in self._FIELDS:
            getattr(self, name).clear()
        self.consumed = True


def gae_advantages(ext_rewards, int_rewards, values, dones, bootstrap: float,
                   gamma: float = 0.95, lam: float = 0.95, alpha: float = 0.1,
                   normalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantages on the shaped reward ``r + alpha * r_int``.

    ``dones[t]`` marks that step ``t`` ended the episode, so nothing is
    bootstrapped past it. Returns ``(advantages, returns)`` where returns are
    the unnormalized ``advantages + values``.
    """
    r = np.asarray(ext_rewards, float) + alpha * np.asarray(int_rewards, float)
    v = np.asarray(values, float)
    d = np.asarray(dones, bool)
    if len(r) == 0:
        raise ValueError("cannot compute advantages of an empty segment")
    adv = np.zeros_like(r)
    last = 0.0
    next_v = float(bootstrap)
    for t in range(len(r) - 1, -1, -1):
        nonterm = 0.0 if d[t] else 1.0
        delta = r[t] + gamma * next_v * nonterm - v[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
        next_v = v[t]
    ret = adv + v
    if normalize:
        adv = normalize_advantages(adv)
    return adv, ret


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, float)
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ---------------------------------------------------------------------------
# PPO


@dataclass(frozen=True)
class PPOConfig:
    epochs: int = 4
    minibatch: int = 16
    clip: float = 0.2
    v_coef: float = 0.5
    ent_coef: float = 0.01
    lr: float = 7e-4
    eps: float = 1e-5
    gamma: float = 0.95
    lam: float = 0.95


def ppo_loss(store: ParamStore, obs, m, actions, old_logp, adv, returns,
             clip: float = 0.2, v_coef: float = 0.5, ent_coef: float = 0.01,
             record: bool = True) -> tuple[float, dict, dict]:
    """Clipped surrogate plus value and entropy terms, averaged over the batch.

    Returns ``(loss, grads, stats)``; ``grads`` is empty when ``record`` is off.
    """
    tape = Tape(store, record=record)
    logits, value = _forward(tape, obs, m)
    lsm = tape.log_softmax(logits)
    logp = tape.pick(lsm, np.asarray(actions, int))
    ratio = tape.exp(tape.sub(logp, tape.const(old_logp)))
    A = tape.const(adv)
    surr = tape.minimum(tape.mul(ratio, A), tape.mul(tape.clip(ratio, 1 - clip, 1 + clip), A))
    pol = tape.scale(tape.mean(surr), -1.0)
    ent = tape.mean(tape.scale(tape.row_sum(tape.mul(tape.exp(lsm), lsm)), -1.0))
    vdiff = tape.sub(value, tape.const(np.asarray(returns, float).reshape(-1, 1)))
    vloss = tape.mean(tape.square(vdiff))
    total = tape.add(tape.add(pol, tape.scale(vloss, v_coef)), tape.scale(ent, -ent_coef))
    stats = {"policy_loss": float(pol.value), "value_loss": float(vloss.value),
             "entropy": float(ent.value), "loss": float(total.value)}
    grads = tape.backward(total) if record else {}
    return float(total.value), grads, stats


def ppo_update(store: ParamStore, buffers: list[RolloutBuffer], bootstrap_values,
               rng: np.random.Generator, cfg: PPOConfig = PPOConfig(), alpha: float = 0.1,
               reward_scale: float = 1.0) -> dict:
    """Pool every agent's segment, run clipped PPO epochs, then clear the buffers.

    Advantages are computed per agent (each agent is its own trajectory) and
    normalized over the pooled batch. Extrinsic rewards are multiplied by
    ``reward_scale`` before shaping.
    """
    if any(b.consumed for b in buffers):
        raise StaleBufferError("rollout buffer was already consumed by a PPO update")
    if not buffers or all(len(b) == 0 for b in buffers):
        raise ValueError("cannot run PPO on empty rollout buffers")
    obs, lat, act_, oldp, advs, rets = [], [], [], [], [], []
    for b, boot in zip(buffers, bootstrap_values):
        if len(b) == 0:
            continue
        adv, ret = gae_advantages(np.asarray(b.ext_rewards) * reward_scale, b.int_rewards,
                                  b.values, b.dones, boot, cfg.gamma, cfg.lam, alpha)
        obs.append(np.array(b.obs))
        lat.append(np.array(b.latent))
        act_.append(np.array(b.actions))
        oldp.append(np.array(b.logp))
        advs.append(adv)
        rets.append(ret)
    obs, lat, act_ = np.concatenate(obs), np.concatenate(lat), np.concatenate(act_)
    oldp, rets = np.concatenate(oldp), np.concatenate(rets)
    advs = normalize_advantages(np.concatenate(advs))
    n = len(act_)
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.minibatch):
            idx = perm[s:s + cfg.minibatch]
            loss, grads, st = ppo_loss(store, obs[idx], lat[idx], act_[idx], oldp[idx],
                                       advs[idx], rets[idx], cfg.clip, cfg.v_coef, cfg.ent_coef)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite PPO loss {loss}")
            adam_step(store, grads, cfg.lr, eps=cfg.eps)
            for k in sums:
                sums[k] += st[k]
            count += 1
    for b in buffers:
        b.clear()
    return {k: v / max(count, 1) for k, v in sums.items()} | {"samples": n}
