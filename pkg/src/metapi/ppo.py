"""Recurrent PPO over a task distribution, with a privileged critic.

Each epoch samples a batch of FOPTD tasks, runs one full episode per task
with the stochastic policy, computes GAE advantages, takes up to
``policy_iters`` full-batch PPO-Clip steps (stopping early once the mean KL
to the collecting policy exceeds ``max_kl``) and then fits the critic.

Costs are minimized but PPO runs in the usual reward convention
(``r = -c``) internally; the critic itself predicts discounted cost-to-go.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .agent import Agent, PrivilegedInfo, config_hash, load_checkpoint, save_checkpoint
from .meta_env import COST_CAP, EpisodeConfig, FoptdEnv, TaskDistribution
from .nn import Adam

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "mean_cost", "kl", "clip_frac", "policy_iters", "value_loss", "flagged", "wall_time")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 2500
    episodes_per_epoch: int = 300
    hidden: int = 100
    discount: float = 0.99
    gae_lambda: float = 0.95
    policy_iters: int = 20
    value_iters: int = 40
    max_kl: float = 0.015
    clip_eps: float = 0.2
    lr: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.5
    seq_len: int = 40
    n_steps: int = 40
    rl_dt: float = 2.75
    dt: float = 0.05
    setpoint_period: float = 11.0
    delta_max: float = 0.1
    gain_min: float = 0.01
    gain_max: float = 3.0
    initial_Kc: float = 0.05
    initial_tau_i: float = 1.0
    y0_width: float = 0.1
    K_min: float = 0.25
    K_max: float = 1.0
    tau_min: float = 0.25
    tau_max: float = 1.0
    ratio_min: float = 0.0
    ratio_max: float = 1.0
    privileged: bool = True
    init_log_std: float = math.log(0.5)
    normalize_advantages: bool = True
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.n_steps % self.seq_len:
            raise ValueError("sequence length must divide the episode length")
        if self.seq_len != self.n_steps:
            raise ValueError("only full-episode BPTT sequences are supported")

    @property
    def distribution(self) -> TaskDistribution:
        return TaskDistribution((self.K_min, self.K_max), (self.tau_min, self.tau_max),
                                (self.ratio_min, self.ratio_max))

    @property
    def episode(self) -> EpisodeConfig:
        return EpisodeConfig(n_steps=self.n_steps, rl_dt=self.rl_dt, dt=self.dt,
                             setpoint_period=self.setpoint_period, initial_Kc=self.initial_Kc,
                             initial_tau_i=self.initial_tau_i, y0_width=self.y0_width,
                             delta_max=self.delta_max, gain_min=self.gain_min, gain_max=self.gain_max,
                             beta1=self.beta1, beta2=self.beta2)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def full_config(**overrides) -> TrainConfig:
    """Published full-scale hyperparameters."""
    return replace(TrainConfig(), **overrides)


def scaled_config(**overrides) -> TrainConfig:
    """Desk-scale run on a narrowed task box."""
    base = TrainConfig(epochs=200, episodes_per_epoch=32, hidden=32, K_min=0.4, K_max=0.6,
                       tau_min=0.8, tau_max=1.0, ratio_min=0.1, ratio_max=0.3, checkpoint_every=50)
    return replace(base, **overrides)


def smoke_config(**overrides) -> TrainConfig:
    base = TrainConfig(epochs=10, episodes_per_epoch=4, hidden=8, checkpoint_every=5)
    return replace(base, **overrides)


PRESETS: dict[str, Callable[..., TrainConfig]] = {
    "full": full_config, "scaled": scaled_config, "smoke": smoke_config,
}


def make_agent(config: TrainConfig) -> Agent:
    return Agent(hidden=config.hidden, privileged=config.privileged, seed=config.seed,
                 delta_max=config.delta_max, init_log_std=config.init_log_std)


@dataclass
class RolloutBuffer:
    """One epoch of episodes, time-major: arrays are (T, B, ...)."""
    obs: np.ndarray
    pre_squash: np.ndarray
    actions: np.ndarray
    log_prob_old: np.ndarray
    mean_old: np.ndarray
    log_std_old: np.ndarray
    costs: np.ndarray
    values_old: np.ndarray
    deep_hidden: np.ndarray
    task_params: np.ndarray  # (B, 3)
    flagged: bool = False
    advantages: np.ndarray | None = None
    cost_targets: np.ndarray | None = None

    @property
    def n_transitions(self) -> int:
        return self.costs.size

    def critic_inputs(self, agent: Agent) -> np.ndarray:
        T, B, _ = self.obs.shape
        priv = PrivilegedInfo(np.broadcast_to(self.task_params, (T, B, 3)).reshape(T * B, 3),
                              self.deep_hidden.reshape(T * B, -1))
        return agent.critic.features(self.obs.reshape(T * B, -1), priv)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def collect_epoch(agent: Agent, config: TrainConfig, rng: np.random.Generator) -> RolloutBuffer:
    n, T = config.episodes_per_epoch, config.n_steps
    tasks = config.distribution.sample(rng, n)
    env = FoptdEnv(tasks, config.episode, rng=rng)
    obs = env.observation()
    state = agent.initial_state(n)
    task_params = np.array([[t.K, t.tau, t.theta] for t in tasks])
    H = agent.hidden
    buf = {k: [] for k in ("obs", "pre", "act", "logp", "mean", "cost", "value", "h2")}
    for _ in range(T):
        out, state = agent.act(obs, state, rng)
        value = agent.value(obs, PrivilegedInfo(task_params, state.h2))
        buf["obs"].append(obs)
        buf["pre"].append(out.pre_squash)
        buf["act"].append(out.action)
        buf["logp"].append(out.log_prob)
        buf["mean"].append(out.mean)
        buf["value"].append(value)
        buf["h2"].append(state.h2)
        obs, cost, _ = env.step(out.action)
        buf["cost"].append(cost)
    costs = np.array(buf["cost"])
    return RolloutBuffer(
        obs=np.array(buf["obs"]), pre_squash=np.array(buf["pre"]), actions=np.array(buf["act"]),
        log_prob_old=np.array(buf["logp"]), mean_old=np.array(buf["mean"]),
        log_std_old=agent.log_std.data.copy(), costs=costs, values_old=np.array(buf["value"]),
        deep_hidden=np.array(buf["h2"]).reshape(T, n, H), task_params=task_params,
        flagged=bool(np.any(costs >= COST_CAP)),
    )


def gae(costs: np.ndarray, values: np.ndarray, discount: float = 0.99,
        lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """GAE along axis 0 for complete episodes (terminal value 0).

    ``values`` are cost-to-go estimates. Returns (advantages in the reward
    convention, cost-to-go targets), both un-normalized.
    """
    costs = np.asarray(costs, dtype=float)
    values = np.asarray(values, dtype=float)
    if costs.shape != values.shape:
        raise ad.ShapeError(f"costs {costs.shape} and values {values.shape} differ")
    r = -costs
    v = -values
    adv = np.zeros_like(r)
    running = np.zeros_like(r[0])
    for t in range(len(r) - 1, -1, -1):
        v_next = v[t + 1] if t + 1 < len(r) else 0.0
        delta = r[t] + discount * v_next - v[t]
        running = delta + discount * lam * running
        adv[t] = running
    return adv, -(adv + v)


def ppo_clip_objective(ratio, advantage, eps: float = 0.2):
    """Per-sample ``min(ratio A, clip(ratio, 1-eps, 1+eps) A)`` (to be maximized)."""
    if isinstance(ratio, ad.Tensor):
        return ad.minimum(ratio * advantage, ad.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)
    ratio = np.asarray(ratio, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def gaussian_kl(mean_old: np.ndarray, log_std_old: np.ndarray, mean_new: np.ndarray,
                log_std_new: np.ndarray) -> np.ndarray:
    """Closed-form KL(old || new) of diagonal Gaussians, summed over the last axis."""
    var_old = np.exp(2 * log_std_old)
    var_new = np.exp(2 * log_std_new)
    kl = log_std_new - log_std_old + (var_old + (mean_old - mean_new) ** 2) / (2 * var_new) - 0.5
    return kl.sum(axis=-1)


def policy_loss(agent: Agent, buffer: RolloutBuffer,
                clip_eps: float) -> tuple[ad.Tensor, ad.Tensor, np.ndarray]:
    """Negated mean clip objective, the replayed policy means and the ratios."""
    logp, means = agent.sequence_log_prob(buffer.obs, buffer.pre_squash)
    ratio = ad.exp(logp - buffer.log_prob_old)
    return -ad.mean(ppo_clip_objective(ratio, buffer.advantages, clip_eps)), means, ratio.data


def value_loss(agent: Agent, inputs: np.ndarray, targets: np.ndarray) -> ad.Tensor:
    v = agent.critic(inputs)
    return ad.mean(ad.square(v[:, 0] - targets))


@dataclass
class PolicyUpdateStats:
    kl_history: list[float] = field(default_factory=list)
    kl: float = 0.0
    clip_frac: float = 0.0
    iterations: int = 0
    aborted: bool = False


def _kl_now(agent: Agent, buffer: RolloutBuffer, means: np.ndarray) -> float:
    return float(np.mean(gaussian_kl(buffer.mean_old, buffer.log_std_old, means, agent.log_std.data)))


def ppo_policy_update(agent: Agent, buffer: RolloutBuffer, config: TrainConfig,
                      optimizer: Adam) -> PolicyUpdateStats:
    stats = PolicyUpdateStats()
    params = agent.policy_parameters()
    snapshot = [p.data.copy() for p in params]
    for i in range(config.policy_iters):
        loss, means, ratio = policy_loss(agent, buffer, config.clip_eps)
        kl = _kl_now(agent, buffer, means.data)
        stats.kl_history.append(kl)
        stats.kl = kl
        if i > 0 and kl > config.max_kl:
            break
        if not np.isfinite(loss.item()):
            for p, s in zip(params, snapshot):
                p.data = s
            stats.aborted = True
            return stats
        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step()
        stats.iterations += 1
        stats.clip_frac = float(np.mean(np.abs(ratio - 1.0) > config.clip_eps))
    else:
        with ad.no_grad():
            _, means = agent.sequence_log_prob(buffer.obs, buffer.pre_squash)
        stats.kl = _kl_now(agent, buffer, means.data)
        stats.kl_history.append(stats.kl)
    return stats


def value_update(agent: Agent, buffer: RolloutBuffer, config: TrainConfig, optimizer: Adam) -> float:
    inputs = buffer.critic_inputs(agent)
    targets = buffer.cost_targets.reshape(-1)
    loss_val = float("nan")
    for _ in range(config.value_iters):
        loss = value_loss(agent, inputs, targets)
        loss_val = loss.item()
        optimizer.zero_grad()
        ad.backward(loss)
        optimizer.step()
    return loss_val


def prepare_advantages(buffer: RolloutBuffer, config: TrainConfig) -> None:
    adv, targets = gae(buffer.costs, buffer.values_old, config.discount, config.gae_lambda)
    if config.normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    buffer.advantages = adv
    buffer.cost_targets = targets


@dataclass
class TrainResult:
    agent: Agent
    log: list[dict]
    checkpoints: list[Path]


def _save(path: Path, agent: Agent, config: TrainConfig, epoch: int,
          pi_opt: Adam, v_opt: Adam) -> None:
    extra = {f"pi.{k}": v for k, v in pi_opt.state_arrays().items()}
    extra.update({f"v.{k}": v for k, v in v_opt.state_arrays().items()})
    save_checkpoint(path, agent, {"epoch": epoch, "seed": config.seed, "config_hash": config.hash(),
                                  "config": config.to_dict()}, extra)


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted((Path(out_dir) / "checkpoints").glob("epoch_*.bin"))
    return found[-1] if found else None


def train(config: TrainConfig, out_dir: str | Path | None = None, resume: bool = False,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    agent = make_agent(config)
    pi_opt = Adam(agent.policy_parameters(), lr=config.lr)
    v_opt = Adam(agent.value_parameters(), lr=config.lr)
    start = 1
    log_rows: list[dict] = []
    ckpts: list[Path] = []
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = Path(out_dir) / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    if resume:
        if out_dir is None or latest_checkpoint(out_dir) is None:
            raise FileNotFoundError("nothing to resume from")
        path = latest_checkpoint(out_dir)
        loaded, meta, arrays = load_checkpoint(path)
        if meta["config_hash"] != config.hash():
            raise ValueError("checkpoint was written with a different configuration")
        agent.load_state_arrays(arrays)
        pi_opt.load_state_arrays({k[3:]: v for k, v in arrays.items() if k.startswith("pi.")})
        v_opt.load_state_arrays({k[2:]: v for k, v in arrays.items() if k.startswith("v.")})
        start = meta["epoch"] + 1
        log_rows = _read_log(Path(out_dir) / "train_log.csv", upto=meta["epoch"])

    bad_streak = 0
    t0 = time.perf_counter()
    for epoch in range(start, config.epochs + 1):
        rng = epoch_rng(config.seed, epoch)
        buffer = collect_epoch(agent, config, rng)
        prepare_advantages(buffer, config)
        stats = ppo_policy_update(agent, buffer, config, pi_opt)
        vloss = value_update(agent, buffer, config, v_opt)
        flagged = buffer.flagged or stats.aborted or not np.isfinite(vloss)
        bad_streak = bad_streak + 1 if (stats.aborted or not np.isfinite(vloss)) else 0
        row = {
            "epoch": epoch,
            "mean_cost": float(buffer.costs.sum(axis=0).mean()),
            "kl": stats.kl,
            "clip_frac": stats.clip_frac,
            "policy_iters": stats.iterations,
            "value_loss": vloss,
            "flagged": int(flagged),
            "wall_time": time.perf_counter() - t0,
        }
        log_rows.append(row)
        if progress:
            progress(row)
        log.debug("epoch %d cost %.4f kl %.4f iters %d", epoch, row["mean_cost"], stats.kl, stats.iterations)
        if bad_streak >= 5:
            raise TrainingDivergedError(f"5 consecutive non-finite epochs ending at epoch {epoch}")
        if ckpt_dir is not None and (epoch % config.checkpoint_every == 0 or epoch == config.epochs):
            path = ckpt_dir / f"epoch_{epoch:05d}.bin"
            _save(path, agent, config, epoch, pi_opt, v_opt)
            ckpts.append(path)
            write_log(Path(out_dir) / "train_log.csv", log_rows)
    if out_dir is not None:
        write_log(Path(out_dir) / "train_log.csv", log_rows)
    return TrainResult(agent, log_rows, ckpts)


def write_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    with open(path) as fh:
        rows = []
        for r in csv.DictReader(fh):
            if int(r["epoch"]) > upto:
                break
            rows.append({k: (int(v) if k in ("epoch", "policy_iters", "flagged") else float(v))
                         for k, v in r.items()})
    return rows


def final_training_cost(log_rows: list[dict], fraction: float = 0.1) -> float:
    """Mean episode cost over the last ``fraction`` of epochs (at least one)."""
    k = max(1, int(round(fraction * len(log_rows))))
    return float(np.mean([r["mean_cost"] for r in log_rows[-k:]]))
