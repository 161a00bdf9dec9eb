"""Recurrent trajectory encoder producing a diagonal-Gaussian task belief.

Each step consumes ``(o_t, a_t, r_{t+1})``: the observation, the one-hot action
and the scaled extrinsic reward that followed. The step is embedded by a ReLU
layer, folded into a GRU state, and the state is mapped to ``(mu, log_sigma)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnet import Node, ParamStore, Tape, add_affine, add_gru

PREFIX = "encoder"


@dataclass(frozen=True)
class EncoderDims:
    obs_dim: int = 16
    n_actions: int = 4
    embed: int = 40
    hidden: int = 64
    latent: int = 5

    @property
    def in_dim(self) -> int:
        return self.obs_dim + self.n_actions + 1


@dataclass
class TrajectoryStep:
    observation: np.ndarray
    action: int
    reward: float
    next_observation: np.ndarray
    neighbor_actions: np.ndarray  # (4,) phase ids, -1 where no neighbor
    neighbor_mask: np.ndarray     # (4,) bool, direction order N, E, S, W

    def __post_init__(self) -> None:
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")
        if (self.neighbor_actions >= 0).tolist() != np.asarray(self.neighbor_mask, bool).tolist():
            raise ValueError("neighbor actions inconsistent with presence mask")


@dataclass
class LatentBelief:
    mu: np.ndarray
    sigma: np.ndarray
    sample: np.ndarray
    hidden: np.ndarray

    @property
    def log_sigma(self) -> np.ndarray:
        return np.log(self.sigma)


def init_encoder(store: ParamStore, rng: np.random.Generator,
                 dims: EncoderDims = EncoderDims()) -> None:
    add_affine(store, f"{PREFIX}.embed", dims.in_dim, dims.embed, rng)
    add_gru(store, f"{PREFIX}.gru", dims.embed, dims.hidden, rng)
    add_affine(store, f"{PREFIX}.head", dims.hidden, 2 * dims.latent, rng)


def encoder_dims(store: ParamStore) -> EncoderDims:
    W = store[f"{PREFIX}.embed.W"]
    head = store[f"{PREFIX}.head.W"]
    return EncoderDims(obs_dim=16, n_actions=W.shape[1] - 17, embed=W.shape[0],
                       hidden=head.shape[1], latent=head.shape[0] // 2)


def step_input(obs: np.ndarray, actions: np.ndarray, rewards: np.ndarray,
               n_actions: int = 4) -> np.ndarray:
    """Stack ``[o, onehot(a), r]`` rows; ``rewards`` already scaled."""
    obs = np.atleast_2d(obs)
    onehot = np.zeros((obs.shape[0], n_actions))
    onehot[np.arange(obs.shape[0]), np.asarray(actions, dtype=int).reshape(-1)] = 1.0
    return np.concatenate([obs, onehot, np.asarray(rewards, float).reshape(-1, 1)], axis=1)


def tape_step(tape: Tape, h: Node, x: np.ndarray | Node) -> Node:
    xn = x if isinstance(x, Node) else tape.const(x)
    e = tape.relu(tape.affine(xn, f"{PREFIX}.embed"))
    return tape.gru(e, h, f"{PREFIX}.gru")


def tape_head(tape: Tape, h: Node, latent: int) -> tuple[Node, Node]:
    out = tape.affine(h, f"{PREFIX}.head")
    return tape.cols(out, 0, latent), tape.cols(out, latent, 2 * latent)


def kl_to_prior(belief: LatentBelief | tuple[np.ndarray, np.ndarray]) -> float:
    """KL(N(mu, sigma^2) || N(0, I)) in closed form."""
    if isinstance(belief, LatentBelief):
        mu, sigma = belief.mu, belief.sigma
    else:
        mu, sigma = belief
    mu = np.asarray(mu, float)
    var = np.asarray(sigma, float) ** 2
    return float(0.5 * np.sum(mu * mu + var - 1.0 - np.log(var)))


class BeliefEncoder:
    """Forward-only encoder for rollouts; a batch row per intersection."""

    def __init__(self, store: ParamStore) -> None:
        self.store = store
        self.dims = encoder_dims(store)

    def _belief(self, h: np.ndarray, noise: np.ndarray | None) -> LatentBelief:
        tape = Tape(self.store, record=False)
        mu, ls = tape_head(tape, tape.const(h), self.dims.latent)
        sigma = np.exp(ls.value)
        noise = np.zeros_like(mu.value) if noise is None else np.asarray(noise, float)
        if noise.shape != mu.value.shape:
            raise ValueError(f"noise shape {noise.shape} != latent shape {mu.value.shape}")
        return LatentBelief(mu.value, sigma, mu.value + sigma * noise, h)

    def reset(self, batch: int | None = None, noise=None) -> LatentBelief:
        shape = (self.dims.hidden,) if batch is None else (batch, self.dims.hidden)
        return self._belief(np.zeros(shape), noise)

    def step(self, hidden: np.ndarray, obs, actions, rewards, noise=None) -> LatentBelief:
        single = np.ndim(hidden) == 1
        x = step_input(obs, actions, rewards, self.dims.n_actions)
        tape = Tape(self.store, record=False)
        h = tape_step(tape, tape.const(np.atleast_2d(hidden)), x).value
        if single:
            h = h[0]
        return self._belief(h, noise)

    def encode(self, steps: list[TrajectoryStep], q_scale: float, noise=None) -> LatentBelief:
        """Belief after consuming ``steps`` from a fresh state."""
        b = self.reset()
        for s in steps:
            b = self.step(b.hidden, s.observation, s.action, s.reward / q_scale)
        if noise is not None:
            b = self._belief(b.hidden, noise)
        return b


def encode_step(store: ParamStore, hidden: np.ndarray, step: TrajectoryStep, noise,
                q_scale: float = 50.0) -> LatentBelief:
    return BeliefEncoder(store).step(hidden, step.observation, step.action,
                                     step.reward / q_scale, noise)


def reset_belief(store: ParamStore, noise=None) -> LatentBelief:
    return BeliefEncoder(store).reset(noise=noise)
