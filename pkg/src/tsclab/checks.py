"""Finite-difference checks of the composite losses on small random instances.

Instances use hidden width 8, latent 2 and full 16-dim observations. Biases
are randomized (zero biases let a dead first layer feed an exact zero into the
next ReLU), and any draw where a ReLU, abs or clip input lies closer
than ``KINK_MARGIN`` to its kink is redrawn: a central difference that
straddles a kink measures an average of two one-sided slopes, not the
derivative.
"""

from __future__ import annotations

import numpy as np

from . import agent, belief
from . import worldmodel as wm
from .diffnet import ParamStore, Tape, finite_diff_check, track_kink_margin

HIDDEN = 8
LATENT = 2
FD_STEP = 1e-4
KINK_MARGIN = 10 * FD_STEP


def _jitter_biases(store: ParamStore, rng: np.random.Generator, extra_prefix: str = "") -> None:
    for n in store.names():
        if n.endswith(".b") or (extra_prefix and n.startswith(extra_prefix)):
            store.params[n][...] = rng.normal(scale=0.3, size=store.params[n].shape)


def random_trajectory(rng: np.random.Generator, T: int, mask) -> wm.Trajectory:
    mask = np.asarray(mask, bool)
    nbr = np.where(mask, rng.integers(0, 4, (T, 4)), -1)
    # occupancy fractions of a lightly loaded intersection
    return wm.Trajectory(0.25 * rng.random((T, 16)), 0.25 * rng.random((T, 16)), rng.integers(0, 4, T),
                         -rng.integers(0, 20, T).astype(float), nbr, mask)


def elbo_instance(seed: int = 0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    belief.init_encoder(store, rng, belief.EncoderDims(embed=6, hidden=HIDDEN, latent=LATENT))
    wm.init_decoders(store, rng, wm.DecoderDims(latent=LATENT, hidden=(HIDDEN, HIDDEN)))
    _jitter_biases(store, rng, f"{belief.PREFIX}.head")
    trajs = [random_trajectory(rng, 3, m) for m in ([1, 0, 1, 0], [0, 0, 0, 0])]
    prefixes = [1, 3]
    noise = rng.standard_normal((len(prefixes), len(trajs), LATENT))
    # per-pair weights on the same 1/(K*B) scale as a training minibatch
    weights = rng.uniform(0.5, 1.0, (len(prefixes), len(trajs))) / (len(prefixes) * len(trajs))

    def loss_fn(st):
        return wm.elbo_objective(st, trajs, prefixes, noise, 50.0, weights)

    return loss_fn, store


def ppo_instance(seed: int = 0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    agent.init_policy(store, rng, latent=LATENT, hidden=(HIDDEN, HIDDEN))
    _jitter_biases(store, rng)
    B = 12
    obs, m = rng.random((B, 16)), rng.normal(size=(B, LATENT))
    actions = rng.integers(0, 4, B)
    logits, _ = agent.policy_outputs(store, obs, m)
    lsm = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    # perturbed behaviour log-probs put some ratios outside the clip range
    old = lsm[np.arange(B), actions] + rng.normal(scale=0.3, size=B)
    adv, ret = rng.normal(size=B), rng.normal(size=B)

    def loss_fn(st):
        loss, grads, _ = agent.ppo_loss(st, obs, m, actions, old, adv, ret)
        return loss, grads

    return loss_fn, store


def intrinsic_instance(seed: int = 0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    wm.init_decoders(store, rng, wm.DecoderDims(latent=LATENT, hidden=(HIDDEN, HIDDEN)))
    _jitter_biases(store, rng)
    mask = np.array([[1, 0, 1, 0], [0, 0, 0, 0], [1, 1, 1, 1], [0, 1, 0, 0]], bool)
    n = len(mask)
    nbr = np.where(mask, rng.integers(0, 4, (n, 4)), -1)
    obs, target = rng.random((n, 16)), rng.random((n, 16))
    actions, m = rng.integers(0, 4, n), rng.normal(size=(n, LATENT))

    def loss_fn(st):
        tape = Tape(st)
        total = tape.sum(agent.intrinsic_reward_tape(tape, obs, actions, nbr, mask, m, target))
        return float(total.value), tape.backward(total)

    return loss_fn, store


INSTANCES = {"elbo": elbo_instance, "ppo": ppo_instance, "intrinsic": intrinsic_instance}


def kink_free_instance(name: str, seed: int = 0, max_draws: int = 50):
    """First instance derived from ``seed`` whose non-smooth op inputs all clear ``KINK_MARGIN``."""
    make = INSTANCES[name]
    for k in range(max_draws):
        loss_fn, store = make(seed * 1000 + k)
        with track_kink_margin() as margin:
            loss_fn(store)
        if margin[0] > KINK_MARGIN:
            return loss_fn, store
    raise RuntimeError(f"no kink-free {name} instance in {max_draws} draws")


def run_gradient_checks(seed: int = 0) -> dict[str, float]:
    """Max relative error of each composite loss against central differences."""
    out = {}
    for name in INSTANCES:
        loss_fn, store = kink_free_instance(name, seed)
        out[name] = float(finite_diff_check(loss_fn, store, step=FD_STEP))
    return out
