"""Four-head decoder set, trajectory buffer and the negative-ELBO objective.

Heads and their inputs (``m`` is the latent sample, actions are one-hot,
``dir`` is the neighbor's direction one-hot):

* ``dec_r``  reward,      (o_{t+1}, o_t, a_t, m)
* ``dec_rn`` reward,      (o_{t+1}, o_t, a_t, a_j, dir_j, m)
* ``dec_o``  observation, (o_t, a_t, m)
* ``dec_on`` observation, (o_t, a_t, a_j, dir_j, m)

Likelihoods are unit-variance Gaussians, so each reconstruction term is
``0.5 * ||target - prediction||^2`` once constants are dropped.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import belief
from .diffnet import Node, ParamStore, Tape, adam_step, add_mlp

HEADS = ("dec_r", "dec_rn", "dec_o", "dec_on")
N_DIRS = 4


@dataclass(frozen=True)
class DecoderDims:
    obs_dim: int = 16
    n_actions: int = 4
    latent: int = 5
    hidden: tuple[int, ...] = (32, 32)

    def in_width(self, head: str) -> int:
        o, a = self.obs_dim, self.n_actions
        base = {"dec_r": 2 * o + a, "dec_rn": 2 * o + 2 * a + N_DIRS,
                "dec_o": o + a, "dec_on": o + 2 * a + N_DIRS}[head]
        return base + self.latent

    def out_width(self, head: str) -> int:
        return 1 if head in ("dec_r", "dec_rn") else self.obs_dim


def init_decoders(store: ParamStore, rng: np.random.Generator,
                  dims: DecoderDims = DecoderDims()) -> None:
    for head in HEADS:
        add_mlp(store, head, [dims.in_width(head), *dims.hidden, dims.out_width(head)], rng)


def n_layers(store: ParamStore, head: str) -> int:
    return sum(1 for n in store.params if n.startswith(f"{head}.l") and n.endswith(".W"))


def head_forward(tape: Tape, head: str, feats: np.ndarray | Node, m: Node) -> Node:
    f = feats if isinstance(feats, Node) else tape.const(feats)
    x = tape.concat([f, m], axis=-1)
    return tape.mlp(x, head, n_layers(tape.store, head), "relu")


def onehot(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=int)
    out = np.zeros(idx.shape + (n,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def self_obs_features(o_t, a_t, n_actions: int = 4) -> np.ndarray:
    return np.concatenate([o_t, onehot(a_t, n_actions)], axis=-1)


def self_reward_features(o_next, o_t, a_t, n_actions: int = 4) -> np.ndarray:
    return np.concatenate([o_next, o_t, onehot(a_t, n_actions)], axis=-1)


def nbr_extra(a_j, dir_j, n_actions: int = 4) -> np.ndarray:
    return np.concatenate([onehot(a_j, n_actions), onehot(dir_j, N_DIRS)], axis=-1)


# ---------------------------------------------------------------------------
# single-call predictions (forward only)


def _predict(store: ParamStore, head: str, feats: np.ndarray, m) -> np.ndarray:
    tape = Tape(store, record=False)
    feats2 = np.atleast_2d(feats)
    m2 = np.atleast_2d(np.asarray(m, float))
    out = head_forward(tape, head, feats2, tape.const(m2)).value
    return out[0] if np.ndim(feats) == 1 else out


def predict_obs_self(store, o_t, a_t, m):
    return _predict(store, "dec_o", self_obs_features(o_t, a_t), m)


def predict_obs_nbr(store, o_t, a_t, a_j, dir_j, m):
    if a_j is None or dir_j is None or np.any(np.asarray(a_j) < 0):
        raise ValueError("neighbor-conditioned prediction needs a present neighbor")
    feats = np.concatenate([self_obs_features(o_t, a_t), nbr_extra(a_j, dir_j)], axis=-1)
    return _predict(store, "dec_on", feats, m)


def predict_reward_self(store, o_next, o_t, a_t, m):
    return _predict(store, "dec_r", self_reward_features(o_next, o_t, a_t), m)


def predict_reward_nbr(store, o_next, o_t, a_t, a_j, dir_j, m):
    if a_j is None or dir_j is None or np.any(np.asarray(a_j) < 0):
        raise ValueError("neighbor-conditioned prediction needs a present neighbor")
    feats = np.concatenate([self_reward_features(o_next, o_t, a_t), nbr_extra(a_j, dir_j)], axis=-1)
    return _predict(store, "dec_rn", feats, m)


def gaussian_log_lik(target, pred) -> float:
    """Unit-variance Gaussian log-likelihood without the normalizing constant."""
    d = np.asarray(target, float) - np.asarray(pred, float)
    return float(-0.5 * np.sum(d * d))


# ---------------------------------------------------------------------------
# trajectories and the buffer


@dataclass
class Trajectory:
    """One intersection's episode. Observations are capacity-normalized."""

    obs: np.ndarray          # (T, 16)
    next_obs: np.ndarray     # (T, 16)
    actions: np.ndarray      # (T,)
    rewards: np.ndarray      # (T,) extrinsic reward following each action, unscaled
    nbr_actions: np.ndarray  # (T, 4), -1 where the direction has no neighbor
    nbr_mask: np.ndarray     # (4,) bool
    task_id: str = ""

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_steps(cls, steps: list[belief.TrajectoryStep], task_id: str = "") -> Trajectory:
        return cls(obs=np.array([s.observation for s in steps], float),
                   next_obs=np.array([s.next_observation for s in steps], float),
                   actions=np.array([s.action for s in steps], int),
                   rewards=np.array([s.reward for s in steps], float),
                   nbr_actions=np.array([s.neighbor_actions for s in steps], int),
                   nbr_mask=np.asarray(steps[0].neighbor_mask, bool),
                   task_id=task_id)

    def steps(self) -> list[belief.TrajectoryStep]:
        return [belief.TrajectoryStep(self.obs[t], int(self.actions[t]), float(self.rewards[t]),
                                      self.next_obs[t], self.nbr_actions[t], self.nbr_mask)
                for t in range(len(self))]


class VaeBuffer:
    """FIFO store of whole trajectories with uniform, seeded sampling."""

    def __init__(self, capacity: int = 100_000) -> None:
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Trajectory] = deque(maxlen=capacity)

    def append(self, traj: Trajectory) -> None:
        self._items.append(traj)

    def extend(self, trajs) -> None:
        for t in trajs:
            self.append(t)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, k: int) -> Trajectory:
        return self._items[k]

    def __iter__(self):
        return iter(self._items)

    def sample(self, n: int, rng: np.random.Generator) -> list[Trajectory]:
        if not self._items:
            raise ValueError("cannot sample from an empty trajectory buffer")
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[k] for k in idx]


# ---------------------------------------------------------------------------
# negative ELBO


@dataclass
class _Feats:
    f_o: np.ndarray    # (T, 20)
    f_r: np.ndarray    # (T, 36)
    f_on: np.ndarray   # (T, J, 28)
    f_rn: np.ndarray   # (T, J, 44)
    y_o: np.ndarray    # (T, 16)
    y_r: np.ndarray    # (T, 1)
    enc_x: np.ndarray  # (T, 21)
    n_nbr: int


def _features(traj: Trajectory, q_scale: float, n_actions: int = 4) -> _Feats:
    T = len(traj)
    f_o = self_obs_features(traj.obs, traj.actions, n_actions)
    f_r = self_reward_features(traj.next_obs, traj.obs, traj.actions, n_actions)
    dirs = np.flatnonzero(traj.nbr_mask)
    J = len(dirs)
    if J:
        extra = nbr_extra(traj.nbr_actions[:, dirs], np.broadcast_to(dirs, (T, J)), n_actions)
        f_on = np.concatenate([np.broadcast_to(f_o[:, None, :], (T, J, f_o.shape[1])), extra], -1)
        f_rn = np.concatenate([np.broadcast_to(f_r[:, None, :], (T, J, f_r.shape[1])), extra], -1)
    else:
        f_on = np.zeros((T, 0, f_o.shape[1] + n_actions + N_DIRS))
        f_rn = np.zeros((T, 0, f_r.shape[1] + n_actions + N_DIRS))
    y_r = (traj.rewards / q_scale)[:, None]
    enc_x = belief.step_input(traj.obs, traj.actions, traj.rewards / q_scale, n_actions)
    return _Feats(f_o, f_r, f_on, f_rn, traj.next_obs, y_r, enc_x, J)


def _sq_term(tape: Tape, head: str, feats: np.ndarray, m_rows: Node, target: np.ndarray,
             w: np.ndarray) -> Node:
    pred = head_forward(tape, head, feats, m_rows)
    diff = tape.sub(pred, tape.const(target))
    return tape.weighted_sum(tape.square(diff), 0.5 * w)


def _decoder_loss(store: ParamStore, feats: list[_Feats], t: int, m_val: np.ndarray,
                  w: np.ndarray) -> tuple[float, dict, np.ndarray]:
    """Reconstruction loss of steps ``0..t-1`` for each trajectory, one latent each."""
    tape = Tape(store)
    m_leaf = tape.leaf(m_val)
    B = len(feats)
    b_idx = np.repeat(np.arange(B), t)
    w_rows = w[b_idx]
    f_o = np.concatenate([f.f_o[:t] for f in feats])
    f_r = np.concatenate([f.f_r[:t] for f in feats])
    y_o = np.concatenate([f.y_o[:t] for f in feats])
    y_r = np.concatenate([f.y_r[:t] for f in feats])
    m_rows = tape.rows(m_leaf, b_idx)
    terms = [_sq_term(tape, "dec_o", f_o, m_rows, y_o, w_rows),
             _sq_term(tape, "dec_r", f_r, m_rows, y_r, w_rows)]

    nb_b, nb_on, nb_rn, nb_yo, nb_yr, nb_w = [], [], [], [], [], []
    for b, f in enumerate(feats):
        J = f.n_nbr
        if J == 0:
            continue
        nb_b.append(np.full(t * J, b))
        nb_on.append(f.f_on[:t].reshape(t * J, -1))
        nb_rn.append(f.f_rn[:t].reshape(t * J, -1))
        nb_yo.append(np.repeat(f.y_o[:t], J, axis=0))
        nb_yr.append(np.repeat(f.y_r[:t], J, axis=0))
        nb_w.append(np.full(t * J, w[b] / J))
    if nb_b:
        idx = np.concatenate(nb_b)
        mn = tape.rows(m_leaf, idx)
        wn = np.concatenate(nb_w)
        terms.append(_sq_term(tape, "dec_on", np.concatenate(nb_on), mn, np.concatenate(nb_yo), wn))
        terms.append(_sq_term(tape, "dec_rn", np.concatenate(nb_rn), mn, np.concatenate(nb_yr), wn))
    total = terms[0]
    for term in terms[1:]:
        total = tape.add(total, term)
    grads = tape.backward(total)
    return float(total.value), grads, m_leaf.grad


def elbo_objective(store: ParamStore, trajs: list[Trajectory], prefixes: list[int],
                   noise: np.ndarray, q_scale: float = 50.0, weights: np.ndarray | None = None,
                   coef: float = 1.0, latent: int | None = None) -> tuple[float, dict]:
    """Weighted negative ELBO over trajectories and prefix lengths, with gradients.

    ``noise`` has shape ``(len(prefixes), len(trajs), latent)``; ``weights`` has
    shape ``(len(prefixes), len(trajs))`` and defaults to all ones.
    """
    if not trajs:
        raise ValueError("no trajectories")
    T = len(trajs[0])
    if any(len(tr) != T for tr in trajs):
        raise ValueError("trajectories in one ELBO batch must share a length")
    for t in prefixes:
        if not 0 < t <= T:
            raise ValueError(f"prefix length {t} outside 1..{T}")
    dims = belief.encoder_dims(store)
    L = dims.latent if latent is None else latent
    K, B = len(prefixes), len(trajs)
    noise = np.asarray(noise, float).reshape(K, B, L)
    w = np.ones((K, B)) if weights is None else np.asarray(weights, float).reshape(K, B)
    w = w * coef
    feats = [_features(tr, q_scale, dims.n_actions) for tr in trajs]

    tape = Tape(store)
    h = tape.const(np.zeros((B, dims.hidden)))
    enc_x = np.stack([f.enc_x for f in feats], axis=1)  # (T, B, 21)
    wanted = {t: k for k, t in enumerate(prefixes)}
    hidden_at: dict[int, Node] = {}
    for s in range(max(prefixes)):
        h = belief.tape_step(tape, h, enc_x[s])
        if s + 1 in wanted:
            hidden_at[s + 1] = h
    mus, lss = [], []
    for t in prefixes:
        mu, ls = belief.tape_head(tape, hidden_at[t], L)
        mus.append(mu)
        lss.append(ls)
    mu_all = tape.concat(mus, axis=0)
    ls_all = tape.concat(lss, axis=0)
    m_all = tape.reparam(mu_all, ls_all, noise.reshape(K * B, L))
    kl = tape.kl_std_normal(mu_all, ls_all)

    total = float((w.reshape(-1) * kl.value).sum())
    grads: dict[str, np.ndarray] = {}
    g_m = np.zeros_like(m_all.value)
    for k, t in enumerate(prefixes):
        rows = slice(k * B, (k + 1) * B)
        loss_k, g_dec, g_mk = _decoder_loss(store, feats, t, m_all.value[rows], w[k])
        total += loss_k
        g_m[rows] = g_mk
        for n, g in g_dec.items():
            grads[n] = grads[n] + g if n in grads else g
    g_enc = tape.backward([(m_all, g_m), (kl, w.reshape(-1))])
    for n, g in g_enc.items():
        grads[n] = grads[n] + g if n in grads else g
    return total, grads


def elbo_loss(store: ParamStore, trajectory: Trajectory, t: int, noise,
              q_scale: float = 50.0) -> tuple[float, dict]:
    """Negative ELBO of one trajectory prefix ``tau_{:t}`` with one latent sample."""
    if not 0 < t <= len(trajectory):
        raise ValueError(f"t={t} outside 1..{len(trajectory)}")
    noise = np.asarray(noise, float).reshape(1, 1, -1)
    return elbo_objective(store, [trajectory], [t], noise, q_scale)


def prefix_grid(length: int, stride: int) -> list[int]:
    ts = list(range(stride, length + 1, stride))
    return ts or [length]


def vae_update(store: ParamStore, buffer: VaeBuffer, rng: np.random.Generator,
               minibatch: int = 25, stride: int = 60, lr: float = 1e-3, eps: float = 1e-5,
               q_scale: float = 50.0, coef: float = 1.0) -> dict:
    """One Adam step on encoder and decoders from a uniformly sampled minibatch."""
    if len(buffer) == 0:
        raise ValueError("cannot update from an empty trajectory buffer")
    batch = buffer.sample(minibatch, rng)
    groups: dict[int, list[Trajectory]] = {}
    for tr in batch:
        groups.setdefault(len(tr), []).append(tr)
    latent = belief.encoder_dims(store).latent
    total_pairs = sum(len(prefix_grid(T, stride)) * len(g) for T, g in groups.items())
    loss, grads = 0.0, {}
    for T in sorted(groups):
        trs = groups[T]
        ts = prefix_grid(T, stride)
        noise = rng.standard_normal((len(ts), len(trs), latent))
        w = np.full((len(ts), len(trs)), 1.0 / total_pairs)
        l, g = elbo_objective(store, trs, ts, noise, q_scale, w, coef)
        loss += l
        for n, v in g.items():
            grads[n] = grads[n] + v if n in grads else v
    if not np.isfinite(loss):
        from .diffnet import NumericError
        raise NumericError(f"non-finite ELBO loss {loss}")
    adam_step(store, grads, lr, eps=eps)
    return {"elbo_loss": loss, "batch": len(batch)}
