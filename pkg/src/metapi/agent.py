"""Recurrent meta-RL actor and the privileged feedforward critic.

The actor sees only the loop data ``[kp, ki, e, integral(e)]`` and carries
two GRU hidden states across RL steps. The critic is used only offline; it
may additionally read the true plant parameters and a copy of the actor's
deep hidden state.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .meta_env import DELTA_MAX
from .nn import Dense, GRUCell, LOG_2PI, Module, gaussian_logprob, load_tensors, save_tensors

OBS_DIM = 4
ACT_DIM = 2
PRIV_DIM = 3
CHECKPOINT_KIND = "metapi-agent"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ActorState:
    h1: np.ndarray
    h2: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "ActorState":
        return cls(np.zeros((batch, hidden)), np.zeros((batch, hidden)))


@dataclass
class PrivilegedInfo:
    """Critic-only side information, one row per loop."""
    params: np.ndarray       # (B, 3): K, tau, theta
    deep_hidden: np.ndarray  # (B, H)


@dataclass
class PolicyOutput:
    mean: np.ndarray
    log_std: np.ndarray
    pre_squash: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray


def squash_log_det(pre_squash: np.ndarray, delta_max: float) -> np.ndarray:
    """Sum over action dims of log|d action / d pre_squash| for ``delta_max * tanh``."""
    u = pre_squash
    # log(1 - tanh(u)^2) written to stay finite for large |u|
    log_sech2 = 2.0 * (math.log(2.0) - np.abs(u) - np.log1p(np.exp(-2.0 * np.abs(u))))
    return np.sum(math.log(delta_max) + log_sech2, axis=-1)


class Actor(Module):
    def __init__(self, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.gru1 = GRUCell(OBS_DIM, hidden, rng, name="actor.gru1")
        self.gru2 = GRUCell(hidden, hidden, rng, name="actor.gru2")
        self.fc1 = Dense(hidden, hidden, "leaky_relu", rng, name="actor.fc1")
        self.fc2 = Dense(hidden, ACT_DIM, "identity", rng, name="actor.fc2")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in (self.gru1, self.gru2, self.fc1, self.fc2):
            out.update(m.named_parameters())
        return out

    def __call__(self, obs, h1, h2, forget: float = 1.0) -> tuple[Tensor, Tensor, Tensor]:
        h1 = self.gru1(obs, h1, forget)
        h2 = self.gru2(h1, h2, forget)
        mean = self.fc2(self.fc1(h2))
        return mean, h1, h2


class Critic(Module):
    def __init__(self, hidden: int, privileged: bool, rng: np.random.Generator):
        self.privileged = privileged
        self.n_in = OBS_DIM + (PRIV_DIM if privileged else 0) + hidden
        self.fc1 = Dense(self.n_in, hidden, "leaky_relu", rng, name="critic.fc1")
        self.fc2 = Dense(hidden, hidden, "leaky_relu", rng, name="critic.fc2")
        self.fc3 = Dense(hidden, 1, "identity", rng, name="critic.fc3")

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for m in (self.fc1, self.fc2, self.fc3):
            out.update(m.named_parameters())
        return out

    def features(self, obs: np.ndarray, priv: PrivilegedInfo) -> np.ndarray:
        parts = [obs, priv.params, priv.deep_hidden] if self.privileged else [obs, priv.deep_hidden]
        x = np.concatenate(parts, axis=-1)
        if x.shape[-1] != self.n_in:
            raise ad.ShapeError(f"critic expects {self.n_in} inputs, got {x.shape[-1]}")
        return x

    def __call__(self, x) -> Tensor:
        return self.fc3(self.fc2(self.fc1(x)))


class Agent:
    """Actor, critic and the state-independent policy log-std."""

    def __init__(self, hidden: int = 100, privileged: bool = True, seed: int = 0,
                 delta_max: float = DELTA_MAX, init_log_std: float = math.log(0.5)):
        rng = np.random.default_rng(seed)
        self.hidden = hidden
        self.privileged = privileged
        self.delta_max = delta_max
        self.actor = Actor(hidden, rng)
        self.critic = Critic(hidden, privileged, rng)
        self.log_std = Tensor(np.full(ACT_DIM, init_log_std), requires_grad=True, name="policy.log_std")

    def policy_parameters(self) -> list[Tensor]:
        return self.actor.parameters() + [self.log_std]

    def value_parameters(self) -> list[Tensor]:
        return self.critic.parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.actor.named_parameters()
        out.update(self.critic.named_parameters())
        out[self.log_std.name] = self.log_std
        return out

    def initial_state(self, batch: int) -> ActorState:
        return ActorState.zeros(batch, self.hidden)

    # -- online pieces (no graph) ------------------------------------------------
    def policy_mean(self, obs: np.ndarray, state: ActorState, forget: float = 1.0) -> tuple[np.ndarray, ActorState]:
        with ad.no_grad():
            mean, h1, h2 = self.actor(obs, state.h1, state.h2, forget)
        return mean.data, ActorState(h1.data, h2.data)

    def act(self, obs: np.ndarray, state: ActorState, rng: np.random.Generator,
            forget: float = 1.0) -> tuple[PolicyOutput, ActorState]:
        mean, new_state = self.policy_mean(obs, state, forget)
        log_std = self.log_std.data
        u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
        return self._output(mean, log_std, u), new_state

    def _output(self, mean, log_std, u) -> PolicyOutput:
        gauss = np.sum(-0.5 * ((u - mean) / np.exp(log_std)) ** 2 - log_std - 0.5 * LOG_2PI, axis=-1)
        logp = gauss - squash_log_det(u, self.delta_max)
        return PolicyOutput(mean, np.broadcast_to(log_std, mean.shape).copy(), u,
                            self.delta_max * np.tanh(u), logp)

    def deterministic_action(self, obs: np.ndarray, state: ActorState,
                             forget: float = 1.0) -> tuple[np.ndarray, ActorState]:
        mean, new_state = self.policy_mean(obs, state, forget)
        return self.delta_max * np.tanh(mean), new_state

    def value(self, obs: np.ndarray, priv: PrivilegedInfo) -> np.ndarray:
        with ad.no_grad():
            return self.critic(self.critic.features(obs, priv)).data[:, 0]

    # -- differentiable pieces ----------------------------------------------------
    def sequence_log_prob(self, obs_seq: np.ndarray, pre_squash_seq: np.ndarray,
                          forget: float = 1.0) -> tuple[Tensor, Tensor]:
        """Replay (T, B, 4) observations from zero state; returns (log-prob, mean) stacks.

        The squash correction depends only on the stored pre-squash samples,
        so it is added as a constant.
        """
        T, B, _ = obs_seq.shape
        h1 = Tensor(np.zeros((B, self.hidden)))
        h2 = h1
        logps, means = [], []
        for t in range(T):
            mean, h1, h2 = self.actor(obs_seq[t], h1, h2, forget)
            logps.append(gaussian_logprob(mean, self.log_std, pre_squash_seq[t])
                         - squash_log_det(pre_squash_seq[t], self.delta_max))
            means.append(mean)
        return ad.stack(logps), ad.stack(means)

    # -- checkpoints ----------------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)}")
        for k, p in params.items():
            if arrays[k].shape != p.data.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arrays[k].shape} vs {p.data.shape}")
            p.data = arrays[k].copy()

    def architecture(self) -> dict:
        return {"hidden": self.hidden, "privileged": self.privileged, "delta_max": self.delta_max}


def actor_forward(agent: Agent, obs: np.ndarray, state: ActorState, rng: np.random.Generator,
                  forget: float = 1.0) -> tuple[PolicyOutput, ActorState]:
    return agent.act(obs, state, rng, forget)


def critic_forward(agent: Agent, obs: np.ndarray, priv: PrivilegedInfo) -> np.ndarray:
    return agent.value(obs, priv)


def deterministic_action(agent: Agent, obs: np.ndarray, state: ActorState,
                         forget: float = 1.0) -> tuple[np.ndarray, ActorState]:
    return agent.deterministic_action(obs, state, forget)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, agent: Agent, metadata: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    meta = {"kind": CHECKPOINT_KIND, "version": CHECKPOINT_VERSION, "architecture": agent.architecture()}
    meta.update(metadata or {})
    arrays = agent.state_arrays()
    if extra:
        arrays.update(extra)
    save_tensors(path, arrays, meta)


def load_checkpoint(path) -> tuple[Agent, dict, dict[str, np.ndarray]]:
    """Returns (agent, metadata, all stored arrays)."""
    arrays, meta = load_tensors(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not an agent checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {meta.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    arch = meta["architecture"]
    agent = Agent(hidden=arch["hidden"], privileged=arch["privileged"], delta_max=arch["delta_max"])
    agent.load_state_arrays(arrays)
    return agent, meta, arrays
