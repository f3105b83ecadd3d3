"""Reward-shaping baselines against the Frank-Wolfe agent.

Both baselines run through the identical environment, replay and driver
code; only the actor-update rule differs.  The single-critic agent folds
the budget penalty into one scalar reward with a fixed weight.  The
dual-critic agent keeps the two critics separate and, after each episode,
steers the actor by whichever critic the episode's outcome says is the
problem: the budget critic after a violation, the quality critic otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import agents, codec


@dataclass(frozen=True)
class SingleCriticConfig(agents.TrainerConfig):
    """Trainer settings plus the reward-mixing weight."""

    lam: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass(frozen=True)
class DualCriticConfig(agents.TrainerConfig):
    """Trainer settings plus the deviation level that counts as a violation."""

    violation_tolerance: float = 0.05

    def __post_init__(self):
        super().__post_init__()
        if self.violation_tolerance < 0:
            raise ValueError("violation_tolerance must be non-negative")


def mixed_rewards(batch: agents.Batch, lam: float) -> np.ndarray:
    """Scalarized reward windows: quality gain plus ``lam`` times the budget
    penalty, recomputed from the stored per-channel rewards."""
    return batch.rewards_distortion + lam * batch.rewards_rate


def _dpg_actor_step(actor: agents.ActorNetwork, critic: agents.QNetwork,
                    batch: agents.Batch) -> float:
    """One deterministic policy-gradient step up the critic surface.

    The critic is evaluated at the actor's own actions; the actor ascends
    the batch-mean value.  Returns the pre-step mean critic value.
    """
    deltas = actor.act_batch(batch.states)
    values = critic.value_batch(batch.states, deltas)
    slopes = critic.action_gradient_batch(batch.states, deltas)
    # minimize -mean Q: upstream on each actor output is -slope / B
    grad = actor.output_gradient_batch(batch.states, -slopes / len(batch))
    actor.apply_gradient(grad)
    return float(np.mean(values))


class SingleCriticAlgorithm:
    """One critic on the mixed reward; plain deterministic policy gradient."""

    def __init__(self, config: SingleCriticConfig, critic: agents.QNetwork,
                 critic_target: agents.QNetwork):
        self.config = config
        self.critic = critic
        self.critic_target = critic_target

    @classmethod
    def create(cls, config: SingleCriticConfig, n_frames: int,
               rng: np.random.Generator) -> "SingleCriticAlgorithm":
        critic = agents.QNetwork.create(n_frames, config.hidden_widths,
                                        config.delta_qp_range,
                                        config.net_learning_rate, rng)
        return cls(config, critic, critic.clone())

    def critic_step(self, batch, actor_target, ctx):
        cfg = self.config
        disc = cfg.gamma ** np.arange(cfg.n_step)
        y = mixed_rewards(batch, cfg.lam) @ disc
        boot_actions = actor_target.act_batch(batch.bootstrap_states)
        tail = cfg.gamma**cfg.n_step * batch.has_bootstrap
        y = y + tail * self.critic_target.value_batch(batch.bootstrap_states,
                                                      boot_actions)
        loss = self.critic.update(batch.states, batch.actions, y)
        return {"critic_loss": loss, "critic_loss_rate": None}

    def actor_step(self, actor, batch, ctx):
        value = _dpg_actor_step(actor, self.critic, batch)
        return {"actor_value": value}

    def sync_targets(self):
        self.critic_target.params.values[...] = self.critic.params.values

    def networks(self):
        return {"critic": self.critic, "critic_target": self.critic_target}


class DualCriticAlgorithm:
    """Separate critics; the last episode's outcome picks which one leads.

    A rate deviation beyond the tolerance counts as a violation and routes
    the actor update through the budget critic (whose value rises as the
    deviation shrinks); otherwise the quality critic leads.
    """

    def __init__(self, config: DualCriticConfig, critics: agents.CriticPair):
        self.config = config
        self.critics = critics

    @classmethod
    def create(cls, config: DualCriticConfig, n_frames: int,
               rng: np.random.Generator) -> "DualCriticAlgorithm":
        return cls(config, agents.CriticPair.create(config, n_frames, rng))

    def critic_step(self, batch, actor_target, ctx):
        targets = agents.critic_targets(batch, self.critics, actor_target)
        loss_d, loss_r = agents.update_critics(self.critics, batch, targets)
        return {"critic_loss": loss_d, "critic_loss_rate": loss_r}

    def actor_step(self, actor, batch, ctx):
        violated = (ctx.last_summary is not None
                    and ctx.last_summary.rate_deviation
                    > self.config.violation_tolerance)
        critic = self.critics.rate if violated else self.critics.distortion
        value = _dpg_actor_step(actor, critic, batch)
        return {"actor_value": value,
                "critic_used": "rate" if violated else "distortion"}

    def sync_targets(self):
        self.critics.sync()

    def networks(self):
        return {
            "critic_distortion": self.critics.distortion,
            "critic_rate": self.critics.rate,
            "critic_distortion_target": self.critics.distortion_target,
            "critic_rate_target": self.critics.rate_target,
        }


def _train(config, env_factory, algorithm_cls, method):
    env = env_factory() if callable(env_factory) else env_factory
    rng_init, rng_noise, rng_sample = (
        np.random.default_rng(c)
        for c in np.random.SeedSequence(config.seed).spawn(3)
    )
    actor = agents.ActorNetwork.create(env.n_frames, config.hidden_widths,
                                       config.delta_qp_range,
                                       config.net_learning_rate, rng_init)
    algorithm = algorithm_cls.create(config, env.n_frames, rng_init)
    return agents.run_training(config, env, algorithm, actor, actor.clone(),
                               rng_noise, rng_sample, method)


def train_single_critic(config: SingleCriticConfig,
                        env_factory) -> agents.TrainingResult:
    result = _train(config, env_factory, SingleCriticAlgorithm, "single")
    result.extra["lam"] = config.lam
    return result


def train_dual_critic(config: DualCriticConfig,
                      env_factory) -> agents.TrainingResult:
    result = _train(config, env_factory, DualCriticAlgorithm, "dual")
    result.extra["violation_tolerance"] = config.violation_tolerance
    return result
