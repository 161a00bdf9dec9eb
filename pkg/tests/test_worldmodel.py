import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsclab import belief, checks
from tsclab import worldmodel as wm
from tsclab.diffnet import ParamStore, Tape, finite_diff_check


def vae_store(seed=0, zero_outputs=False, zero_head=True, **dec):
    s = ParamStore()
    rng = np.random.default_rng(seed)
    belief.init_encoder(s, rng)
    wm.init_decoders(s, rng, wm.DecoderDims(**dec))
    if zero_head:
        for n in s.names("encoder.head"):
            s.params[n][...] = 0.0
    if zero_outputs:
        for h in wm.HEADS:
            last = wm.n_layers(s, h) - 1
            s.params[f"{h}.l{last}.W"][...] = 0.0
            s.params[f"{h}.l{last}.b"][...] = 0.0
    return s


def constant_trajectory(T, obs, next_obs, reward, mask=(1, 0, 0, 0)):
    mask = np.array(mask, bool)
    return wm.Trajectory(np.tile(obs, (T, 1)), np.tile(next_obs, (T, 1)), np.zeros(T, int),
                         np.full(T, float(reward)), np.where(mask, 0, -1)[None].repeat(T, 0), mask)


def test_decoder_widths():
    s = vae_store()
    assert s["dec_r.l0.W"].shape == (32, 41)
    assert s["dec_rn.l0.W"].shape == (32, 49)
    assert s["dec_o.l0.W"].shape == (32, 25)
    assert s["dec_on.l0.W"].shape == (32, 33)
    assert s["dec_o.l2.W"].shape == (16, 32) and s["dec_r.l2.W"].shape == (1, 32)


def test_zero_heads_predict_zero():
    s = vae_store(zero_outputs=True)
    o, m = np.random.default_rng(0).random(16), np.ones(5)
    assert np.array_equal(wm.predict_obs_self(s, o, 1, m), np.zeros(16))
    assert np.array_equal(wm.predict_obs_nbr(s, o, 1, 2, 3, m), np.zeros(16))
    assert np.array_equal(wm.predict_reward_self(s, o, o, 1, m), np.zeros(1))
    assert np.array_equal(wm.predict_reward_nbr(s, o, o, 1, 0, 0, m), np.zeros(1))


def test_gaussian_log_likelihood_algebra():
    assert wm.gaussian_log_lik([-1.0], [0.0]) == -0.5
    assert wm.gaussian_log_lik([2.0, 0.0], [0.0, 0.0]) == -2.0


def test_missing_neighbor_is_an_error():
    s = vae_store()
    with pytest.raises(ValueError):
        wm.predict_obs_nbr(s, np.zeros(16), 0, -1, 0, np.zeros(5))
    with pytest.raises(ValueError):
        wm.predict_reward_nbr(s, np.zeros(16), np.zeros(16), 0, None, 0, np.zeros(5))


def test_neighbor_head_matches_self_head_on_shared_weights():
    s = vae_store(seed=3)
    # copy dec_o into dec_on on the (o, a) and m columns; neighbor columns stay random
    W_o, W_on = s["dec_o.l0.W"], s["dec_on.l0.W"]
    W_on[:, :20] = W_o[:, :20]
    W_on[:, 28:] = W_o[:, 20:]
    for name in ("l0.b", "l1.W", "l1.b", "l2.W", "l2.b"):
        s.params[f"dec_on.{name}"][...] = s[f"dec_o.{name}"]
    rng = np.random.default_rng(0)
    o, m = rng.random(16), rng.normal(size=5)
    f_o = wm.self_obs_features(o[None], np.array([2]))
    tape = Tape(s, record=False)
    own = wm.head_forward(tape, "dec_o", f_o, tape.const(m[None])).value
    zeroed = np.concatenate([f_o, np.zeros((1, 8))], axis=1)
    nbr = wm.head_forward(tape, "dec_on", zeroed, tape.const(m[None])).value
    assert np.allclose(own, nbr, atol=1e-14)


def test_neighbor_action_changes_output():
    s = vae_store(seed=1)
    o, m = np.full(16, 0.2), np.zeros(5)
    a = wm.predict_obs_nbr(s, o, 0, 0, 1, m)
    b = wm.predict_obs_nbr(s, o, 0, 3, 1, m)
    assert not np.allclose(a, b)


def test_elbo_worked_example():
    s = vae_store(zero_outputs=True)
    target = np.zeros(16)
    target[0] = 2.0  # squared error 4 against a zero prediction
    traj = constant_trajectory(1, np.zeros(16), target, reward=-50.0)  # -1 after scaling
    loss, _ = wm.elbo_loss(s, traj, 1, np.zeros(5), q_scale=50.0)
    assert loss == pytest.approx(5.0, abs=1e-12)


def test_elbo_perfect_prediction_at_prior_is_zero():
    s = vae_store(zero_outputs=True)
    traj = constant_trajectory(3, np.zeros(16), np.zeros(16), reward=0.0)
    loss, _ = wm.elbo_loss(s, traj, 3, np.zeros(5))
    assert loss == 0.0


def test_elbo_prefix_range():
    s = vae_store()
    traj = constant_trajectory(3, np.zeros(16), np.zeros(16), 0.0)
    for t in (0, 4):
        with pytest.raises(ValueError):
            wm.elbo_loss(s, traj, t, np.zeros(5))


def test_elbo_task_identity_irrelevant():
    s = vae_store(zero_head=False)
    rng = np.random.default_rng(0)
    tr = checks.random_trajectory(rng, 5, [1, 1, 0, 0])
    other = wm.Trajectory(tr.obs, tr.next_obs, tr.actions, tr.rewards, tr.nbr_actions,
                          tr.nbr_mask, task_id="another-task")
    noise = rng.normal(size=5)
    assert wm.elbo_loss(s, tr, 5, noise)[0] == wm.elbo_loss(s, other, 5, noise)[0]


def test_batched_objective_equals_sum_of_single_losses():
    s = vae_store(zero_head=False)
    rng = np.random.default_rng(4)
    trs = [checks.random_trajectory(rng, 6, m) for m in ([1, 0, 0, 0], [0, 1, 1, 1])]
    noise = rng.normal(size=(2, 2, 5))
    total, _ = wm.elbo_objective(s, trs, [3, 6], noise)
    singles = sum(wm.elbo_loss(s, trs[b], t, noise[k, b])[0]
                  for k, t in enumerate([3, 6]) for b in range(2))
    assert total == pytest.approx(singles, rel=1e-12)


def test_elbo_gradient_oracle():
    loss_fn, store = checks.kink_free_instance("elbo", 0)
    assert finite_diff_check(loss_fn, store, step=checks.FD_STEP) <= 1e-4


@settings(max_examples=25)
@given(st.floats(-3, 3), st.floats(-2, 1))
def test_loss_at_least_kl_when_predictions_exact(mu, log_sigma):
    s = vae_store(zero_outputs=True)
    s.params["encoder.head.b"][0] = mu
    s.params["encoder.head.b"][5] = log_sigma
    traj = constant_trajectory(2, np.zeros(16), np.zeros(16), 0.0)
    loss, _ = wm.elbo_loss(s, traj, 2, np.zeros(5))
    kl = belief.kl_to_prior((np.r_[mu, np.zeros(4)], np.exp(np.r_[log_sigma, np.zeros(4)])))
    assert loss == pytest.approx(kl, abs=1e-12)
    assert loss >= -1e-12


# buffer ------------------------------------------------------------------------


def test_buffer_fifo_eviction():
    buf = wm.VaeBuffer(capacity=100)
    for k in range(101):
        buf.append(wm.Trajectory(np.zeros((1, 16)), np.zeros((1, 16)), np.zeros(1, int),
                                 np.zeros(1), -np.ones((1, 4), int), np.zeros(4, bool),
                                 task_id=str(k)))
    assert len(buf) == 100
    assert [t.task_id for t in buf] == [str(k) for k in range(1, 101)]


def test_default_capacity():
    assert wm.VaeBuffer().capacity == 100_000


def test_sampling_with_replacement_from_one():
    buf = wm.VaeBuffer()
    tr = constant_trajectory(4, np.zeros(16), np.zeros(16), 0.0)
    buf.append(tr)
    batch = buf.sample(25, np.random.default_rng(0))
    assert len(batch) == 25 and all(b is tr for b in batch)
    s = vae_store()
    stats = wm.vae_update(s, buf, np.random.default_rng(0), minibatch=25, stride=2)
    assert np.isfinite(stats["elbo_loss"]) and stats["batch"] == 25


def test_empty_buffer_update_fails():
    with pytest.raises(ValueError):
        wm.vae_update(vae_store(), wm.VaeBuffer(), np.random.default_rng(0))


def test_prefix_grid():
    assert wm.prefix_grid(720, 60) == list(range(60, 721, 60))
    assert wm.prefix_grid(30, 60) == [30]


# training sanity ---------------------------------------------------------------------


def _fit(buf, updates, seed=0):
    s = vae_store(seed=seed)
    rng = np.random.default_rng(seed)
    losses = [wm.vae_update(s, buf, rng, minibatch=4, stride=5)["elbo_loss"] for _ in range(updates)]
    return s, losses


def test_loss_decreases_over_200_updates():
    rng = np.random.default_rng(0)
    buf = wm.VaeBuffer()
    for mask in ([1, 0, 0, 1], [0, 1, 1, 0], [1, 1, 1, 1]):
        buf.append(checks.random_trajectory(rng, 10, mask))
    _, losses = _fit(buf, 200)
    assert losses[-1] < losses[0]


def test_overfit_identity_transition_and_constant_reward():
    o = np.linspace(0.05, 0.8, 16)
    buf = wm.VaeBuffer()
    buf.append(constant_trajectory(10, o, o, reward=-10.0, mask=(1, 0, 1, 0)))
    s, _ = _fit(buf, 600)
    m = belief.BeliefEncoder(s).encode(buf[0].steps(), q_scale=50.0).mu
    assert np.max(np.abs(wm.predict_obs_self(s, o, 0, m) - o)) <= 1e-2
    assert np.max(np.abs(wm.predict_obs_nbr(s, o, 0, 0, 0, m) - o)) <= 1e-2
    assert abs(wm.predict_reward_self(s, o, o, 0, m)[0] - (-0.2)) <= 0.05
    assert abs(wm.predict_reward_nbr(s, o, o, 0, 0, 2, m)[0] - (-0.2)) <= 0.05


def test_neighbor_terms_are_averaged_over_degree():
    s = vae_store(zero_outputs=True)
    target = np.zeros(16)
    target[0] = 2.0
    one = constant_trajectory(1, np.zeros(16), target, reward=-50.0, mask=(1, 0, 0, 0))
    three = constant_trajectory(1, np.zeros(16), target, reward=-50.0, mask=(1, 1, 0, 1))
    assert wm.elbo_loss(s, three, 1, np.zeros(5))[0] == pytest.approx(
        wm.elbo_loss(s, one, 1, np.zeros(5))[0], abs=1e-12)
