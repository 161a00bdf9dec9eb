"""Meta-training, meta-testing, classical baselines and the ablation suite.

One training iteration is one joint simulator episode: every intersection
keeps its own belief and rollout buffer while sharing the policy, encoder and
decoder parameters. PPO runs whenever the per-agent buffers fill (every
``rollout_capacity`` control steps) and at episode end; the world model is
updated after each episode from the trajectory buffer.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agent, belief, controllers, demand, netsim
from . import worldmodel as wm
from .config import VARIANTS, ConfigError, ExperimentConfig
from .diffnet import ParamStore, load_checkpoint, save_checkpoint, store_from_params

METRIC_FIELDS = ("iteration", "seed", "avg_travel_time_s", "ext_reward", "int_reward",
                 "mean_queue", "elbo_loss", "policy_loss", "value_loss", "entropy", "wall_s")

# which intrinsic-reward terms each variant uses; None means no intrinsic reward
VARIANT_TERMS = {
    "baseline": None,
    "latent": None,
    "latent+tran_rs": agent.IntrinsicTerms(reward=False, obs=True),
    "latent+rew_rs": agent.IntrinsicTerms(reward=True, obs=False),
    "full": agent.IntrinsicTerms(reward=True, obs=True),
}


class CheckpointError(ValueError):
    """Checkpoint lacks parameter groups needed for the requested run."""


@dataclass
class MetricsRecord:
    iteration: int
    seed: int
    avg_travel_time_s: float
    ext_reward: float
    int_reward: float
    mean_queue: float
    elbo_loss: float = float("nan")
    policy_loss: float = float("nan")
    value_loss: float = float("nan")
    entropy: float = float("nan")
    wall_s: float = 0.0

    def row(self) -> list:
        return [getattr(self, f) for f in METRIC_FIELDS]

    def deterministic_row(self) -> tuple:
        """All fields except wall-clock time, which no seed can pin down."""
        return tuple(repr(getattr(self, f)) for f in METRIC_FIELDS if f != "wall_s")


def write_metrics(path: str | Path, records: list[MetricsRecord], append: bool = False) -> None:
    path = Path(path)
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow(r.row())


def read_metrics(path: str | Path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        vals = {k: float(v) for k, v in r.items()}
        vals["iteration"] = int(vals["iteration"])
        vals["seed"] = int(vals["seed"])
        out.append(MetricsRecord(**vals))
    return out


# ---------------------------------------------------------------------------
# scenario construction


def build_network(cfg: ExperimentConfig) -> netsim.RoadNetwork:
    if cfg.roadnet:
        return netsim.load_network(cfg.roadnet)
    return netsim.grid_network(cfg.grid_rows, cfg.grid_cols)


def build_demand(cfg: ExperimentConfig, network: netsim.RoadNetwork, seed: int,
                 flow: str | None = None) -> netsim.ArrivalSchedule:
    return demand.build_schedule(flow or cfg.flow, network, cfg.horizon, seed, cfg.flow_path,
                                 poisson=cfg.poisson_arrivals)


def neighbor_tables(network: netsim.RoadNetwork) -> tuple[np.ndarray, np.ndarray]:
    """``(mask (N,4), index (N,4))`` of neighbors in N, E, S, W order; index 0 where absent."""
    mask = np.zeros((network.n, 4), bool)
    idx = np.zeros((network.n, 4), int)
    for i in range(network.n):
        for d, j in network.neighbor_list(i):
            mask[i, d] = True
            idx[i, d] = j
    return mask, idx


# ---------------------------------------------------------------------------
# models


@dataclass
class Models:
    policy: ParamStore
    vae: ParamStore | None
    variant: str

    @property
    def uses_latent(self) -> bool:
        return self.variant != "baseline"

    def params(self) -> dict[str, np.ndarray]:
        out = dict(self.policy.params)
        if self.vae is not None:
            out.update(self.vae.params)
        return out


def init_models(cfg: ExperimentConfig, seed: int) -> Models:
    rng = np.random.default_rng([seed, 1])
    policy = ParamStore()
    agent.init_policy(policy, rng, latent=cfg.latent_dim, hidden=tuple(cfg.policy_hidden))
    vae = None
    if cfg.variant != "baseline":
        vae = ParamStore()
        belief.init_encoder(vae, rng, belief.EncoderDims(embed=cfg.encoder_embed,
                                                         hidden=cfg.encoder_hidden,
                                                         latent=cfg.latent_dim))
        # a zero output head starts every belief at the N(0, I) prior
        for n in vae.names(f"{belief.PREFIX}.head"):
            vae.params[n][...] = 0.0
        wm.init_decoders(vae, rng, wm.DecoderDims(latent=cfg.latent_dim,
                                                  hidden=tuple(cfg.decoder_hidden)))
    return Models(policy, vae, cfg.variant)


def checkpoint_meta(cfg: ExperimentConfig, seed: int, iterations: int) -> dict:
    return {"variant": cfg.variant, "latent_dim": cfg.latent_dim, "seed": seed,
            "iterations": iterations, "q_scale": cfg.q_scale}


def save_models(path: str | Path, models: Models, meta: dict) -> None:
    save_checkpoint(path, models.params(), meta)


def load_models(path: str | Path) -> tuple[Models, dict]:
    try:
        params, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from None
    policy = store_from_params(params, (agent.ACTOR + ".", agent.CRITIC + "."))
    variant = meta.get("variant", "full")
    for prefix in (agent.ACTOR, agent.CRITIC):
        if not policy.has_prefix(prefix + "."):
            raise CheckpointError(f"checkpoint lacks policy parameters {prefix}.*")
    vae = store_from_params(params, [belief.PREFIX + "."] + [h + "." for h in wm.HEADS])
    if variant != "baseline" and not vae.has_prefix(belief.PREFIX + "."):
        raise CheckpointError("checkpoint lacks encoder parameters encoder.*")
    return Models(policy, vae if vae.params else None, variant), meta


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Learner:
    """Training-time state shared across episodes of one run."""

    cfg: ExperimentConfig
    buffers: list[agent.RolloutBuffer]
    vae_buffer: wm.VaeBuffer
    update_rng: np.random.Generator
    ppo_stats: list[dict] = field(default_factory=list)
    max_rollout_len: int = 0

    @property
    def ppo_cfg(self) -> agent.PPOConfig:
        c = self.cfg
        return agent.PPOConfig(epochs=c.ppo_epochs, minibatch=c.policy_minibatch, clip=c.ppo_clip,
                               v_coef=c.value_loss_coef, ent_coef=c.entropy_coef,
                               lr=c.policy_lr, eps=c.adam_eps, gamma=c.gamma, lam=c.gae_lambda)


@dataclass
class EpisodeResult:
    avg_travel_time_s: float
    ext_reward: float
    int_reward: float
    mean_queue: float
    trajectories: list[wm.Trajectory]
    state: netsim.SimState


def run_episode(cfg: ExperimentConfig, models: Models, network: netsim.RoadNetwork,
                schedule: netsim.ArrivalSchedule, seed: int, mode: str,
                rollout_rng: np.random.Generator, learner: Learner | None = None) -> EpisodeResult:
    """Roll the shared encoder and policy over one joint episode.

    With a ``learner`` the transitions feed PPO (run in-loop whenever the
    rollout buffers fill) and the finished trajectories are returned for the
    world-model buffer.
    """
    n = network.n
    L = cfg.latent_dim
    state = netsim.reset(network, schedule, seed, cfg.horizon)
    mask, nidx = neighbor_tables(network)
    terms = VARIANT_TERMS.get(models.variant)
    use_int = learner is not None and terms is not None and cfg.alpha > 0
    enc = belief.BeliefEncoder(models.vae) if models.uses_latent else None
    bel = enc.reset(batch=n) if enc else None
    T = cfg.n_steps
    obs_log = np.zeros((T, n, netsim.OBS_DIM))
    next_log = np.zeros((T, n, netsim.OBS_DIM))
    act_log = np.zeros((T, n), int)
    rew_log = np.zeros((T, n))
    nbr_log = np.full((T, n, 4), -1)
    ext_total = int_total = queue_total = 0.0

    o = netsim.observe_all(state, normalized=True)
    for t in range(T):
        if enc is None:
            m = np.zeros((n, L))
        elif mode == "greedy":
            m = bel.mu
        else:
            m = bel.mu + bel.sigma * rollout_rng.standard_normal((n, L))
        a, logp, v = agent.act(models.policy, o, m, mode, rollout_rng)
        netsim.step(state, a, cfg.control_interval)
        o_next = netsim.observe_all(state, normalized=True)
        q = netsim.queue_lengths(state, cfg.queue_mode)
        r = cfg.reward_weight * q
        nbr_a = np.where(mask, a[nidx], -1)
        if use_int:
            r_int = agent.intrinsic_reward(models.vae, o, a, nbr_a, mask, m, o_next, terms)
        else:
            r_int = np.zeros(n)
        obs_log[t], next_log[t], act_log[t], rew_log[t], nbr_log[t] = o, o_next, a, r, nbr_a
        ext_total += r.sum()
        int_total += r_int.sum()
        queue_total += q.mean()
        if enc is not None:
            bel = enc.step(bel.hidden, o, a, r / cfg.q_scale)
        done = t == T - 1
        if learner is not None:
            for i, buf in enumerate(learner.buffers):
                buf.add(o[i], m[i], a[i], logp[i], v[i], r[i], r_int[i], done,
                        None if enc is None else bel.mu[i], None if enc is None else bel.sigma[i])
            learner.max_rollout_len = max(learner.max_rollout_len, len(learner.buffers[0]))
            if done or learner.buffers[0].full:
                if done:
                    boot = np.zeros(n)
                else:
                    m_next = np.zeros((n, L)) if enc is None else bel.mu
                    boot = agent.policy_outputs(models.policy, o_next, m_next)[1]
                learner.ppo_stats.append(agent.ppo_update(
                    models.policy, learner.buffers, boot, learner.update_rng, learner.ppo_cfg,
                    alpha=cfg.alpha if use_int else 0.0, reward_scale=1.0 / cfg.q_scale))
        o = o_next

    trajs = [wm.Trajectory(obs_log[:, i].copy(), next_log[:, i].copy(), act_log[:, i].copy(),
                           rew_log[:, i].copy(), nbr_log[:, i].copy(), mask[i].copy(),
                           task_id=f"{network.intersections[i].id}@seed{seed}")
             for i in range(n)]
    return EpisodeResult(netsim.average_travel_time(state, cfg.horizon), float(ext_total),
                         float(int_total), float(queue_total / T), trajs, state)


# ---------------------------------------------------------------------------
# training and testing


@dataclass
class TrainResult:
    models: Models
    metrics: list[MetricsRecord]
    learner: Learner | None
    seed: int


def meta_train(cfg: ExperimentConfig, seed: int | None = None, out_dir: str | Path | None = None,
               progress=None) -> TrainResult:
    """Train shared policy and (for latent variants) the world model for ``cfg.iterations`` episodes."""
    if cfg.classical_kind is not None:
        raise ConfigError("meta_train needs a learning variant, not a classical controller")
    seed = cfg.seeds[0] if seed is None else seed
    models = init_models(cfg, seed)
    network = build_network(cfg)
    schedule = build_demand(cfg, network, seed)
    learner = Learner(cfg, [agent.RolloutBuffer(cfg.rollout_capacity) for _ in range(network.n)],
                      wm.VaeBuffer(cfg.vae_buffer_capacity), np.random.default_rng([seed, 3]))
    rollout_rng = np.random.default_rng([seed, 2])
    metrics: list[MetricsRecord] = []
    for k in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        learner.ppo_stats = []
        ep = run_episode(cfg, models, network, schedule, seed, "sample", rollout_rng, learner)
        elbo = float("nan")
        if models.vae is not None:
            learner.vae_buffer.extend(ep.trajectories)
            losses = [wm.vae_update(models.vae, learner.vae_buffer, learner.update_rng,
                                    cfg.vae_minibatch, cfg.elbo_stride, cfg.vae_lr, cfg.adam_eps,
                                    cfg.q_scale, cfg.elbo_coef)["elbo_loss"]
                      for _ in range(cfg.vae_updates_per_iteration)]
            elbo = float(np.mean(losses)) if losses else float("nan")
        ps = learner.ppo_stats
        rec = MetricsRecord(
            iteration=k, seed=seed, avg_travel_time_s=ep.avg_travel_time_s,
            ext_reward=ep.ext_reward, int_reward=ep.int_reward, mean_queue=ep.mean_queue,
            elbo_loss=elbo,
            policy_loss=float(np.mean([s["policy_loss"] for s in ps])),
            value_loss=float(np.mean([s["value_loss"] for s in ps])),
            entropy=float(np.mean([s["entropy"] for s in ps])),
            wall_s=time.perf_counter() - t0)
        metrics.append(rec)
        if progress is not None:
            progress(rec)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_models(out / "checkpoint.json", models, checkpoint_meta(cfg, seed, cfg.iterations))
        write_metrics(out / "metrics.csv", metrics)
    return TrainResult(models, metrics, learner, seed)


def meta_test(checkpoint: str | Path | Models, cfg: ExperimentConfig, seeds=None,
              mode: str | None = None) -> list[MetricsRecord]:
    """Frozen rollouts of encoder and policy; decoders are never touched."""
    models = load_models(checkpoint)[0] if not isinstance(checkpoint, Models) else checkpoint
    if models.variant != "baseline" and models.vae is None:
        raise CheckpointError("checkpoint lacks encoder parameters encoder.*")
    latent = agent.policy_latent_dim(models.policy)
    if latent != cfg.latent_dim:
        cfg = cfg.replace(latent_dim=latent)
    network = build_network(cfg)
    mode = mode or cfg.eval_mode
    records = []
    for seed in (cfg.seeds if seeds is None else seeds):
        t0 = time.perf_counter()
        schedule = build_demand(cfg, network, seed)
        ep = run_episode(cfg, models, network, schedule, seed, mode,
                         np.random.default_rng([seed, 2]), None)
        records.append(MetricsRecord(0, seed, ep.avg_travel_time_s, ep.ext_reward, 0.0,
                                     ep.mean_queue, wall_s=time.perf_counter() - t0))
    return records


def run_classical(cfg: ExperimentConfig, kind: str | None = None, seeds=None,
                  flow: str | None = None) -> list[MetricsRecord]:
    """One episode per seed of a classical controller; one metrics row per seed."""
    kind = kind or cfg.classical_kind
    if kind not in controllers.KINDS:
        raise ConfigError(f"unknown controller kind {kind!r}")
    network = build_network(cfg)
    dt = int(cfg.control_interval)
    records = []
    for seed in (cfg.seeds if seeds is None else seeds):
        t0 = time.perf_counter()
        spec = controllers.ControllerSpec(kind, plan=tuple(cfg.fixedtime_plan),
                                          offsets=tuple(cfg.fixedtime_offsets),
                                          sotl_threshold=cfg.sotl_threshold,
                                          sotl_min_green=cfg.sotl_min_green, seed=seed)
        ctl = controllers.Controller(spec, network.n, dt)
        state = netsim.reset(network, build_demand(cfg, network, seed, flow), seed, cfg.horizon)
        ext = queue = 0.0
        for _ in range(cfg.n_steps):
            netsim.step(state, ctl.select(state), dt)
            q = netsim.queue_lengths(state, cfg.queue_mode)
            ext += float((cfg.reward_weight * q).sum())
            queue += float(q.mean())
        records.append(MetricsRecord(0, seed, netsim.average_travel_time(state, cfg.horizon), ext,
                                     0.0, queue / cfg.n_steps, wall_s=time.perf_counter() - t0))
    return records


def mean_travel_time(records: list[MetricsRecord]) -> float:
    return float(np.mean([r.avg_travel_time_s for r in records]))


@dataclass
class AblationTable:
    scenarios: list[str]
    rows: dict[str, list[float]]
    int_reward: dict[str, float]

    def to_markdown(self) -> str:
        head = "| variant | " + " | ".join(self.scenarios) + " |"
        sep = "|---|" + "---|" * len(self.scenarios)
        body = [f"| {v} | " + " | ".join(f"{x:.2f}" for x in vals) + " |"
                for v, vals in self.rows.items()]
        return "\n".join([head, sep, *body])

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", *self.scenarios])
            for v, vals in self.rows.items():
                w.writerow([v, *vals])


def run_ablation(cfg: ExperimentConfig, seeds=None, scenarios=None, progress=None) -> AblationTable:
    """Train every variant on every scenario and tabulate greedy test travel time."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    scenarios = list(cfg.ablation_scenarios if scenarios is None else scenarios)
    rows: dict[str, list[float]] = {}
    int_totals: dict[str, float] = {}
    for variant in VARIANTS:
        vals = []
        total_int = 0.0
        for flow in scenarios:
            vc = cfg.replace(variant=variant, flow=flow)
            tts = []
            for seed in seeds:
                res = meta_train(vc, seed)
                total_int += sum(abs(r.int_reward) for r in res.metrics)
                tts.extend(r.avg_travel_time_s for r in meta_test(res.models, vc, [seed]))
            vals.append(float(np.mean(tts)))
            if progress is not None:
                progress(variant, flow, vals[-1])
        rows[variant] = vals
        int_totals[variant] = total_int
    return AblationTable(scenarios, rows, int_totals)


def plot_metrics(records: list[MetricsRecord], path: str | Path, baselines: dict | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    its = [r.iteration for r in records]
    axes[0].plot(its, [r.avg_travel_time_s for r in records], label="training episode")
    for k, (name, val) in enumerate((baselines or {}).items()):
        axes[0].axhline(val, ls="--", lw=1, color=f"C{k + 1}", label=name)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("average travel time (s)")
    axes[0].legend(fontsize=8)
    axes[1].plot(its, [r.elbo_loss for r in records])
    axes[1].set_xlabel("iteration")
    axes[1].set_ylabel("negative ELBO")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
