"""Frank-Wolfe policy optimization over state-dependent feasible QP sets.

The rate critic defines, per state, which QPs keep the predicted budget
penalty above a threshold.  The actor is never pushed through the
constraint: its output is projected onto the feasible interval, a
Frank-Wolfe step inside the set produces a reference action, and the actor
regresses toward that reference.  The projection is a lookup, not part of
any gradient chain, so the constraint can never zero out learning the way a
hard clamp baked into the network would.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import agents, codec


@dataclass(frozen=True)
class FeasibleSet:
    """Feasible QPs for one state, discretized on a fixed grid.

    ``mask`` marks grid points whose rate-critic value clears the
    threshold; ``lo``/``hi`` span the interval hull of the marked points.
    With nothing marked, the hull collapses to the grid point with the
    highest critic value and ``fallback_used`` is set.
    """

    grid: np.ndarray
    mask: np.ndarray
    values: np.ndarray
    lo: float
    hi: float
    fallback_used: bool

    @classmethod
    def from_mask(cls, grid, mask, values) -> "FeasibleSet":
        grid = np.asarray(grid, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        values = np.asarray(values, dtype=np.float64)
        if grid.shape != mask.shape or grid.shape != values.shape:
            raise ValueError("grid, mask and values must share one shape")
        if mask.any():
            feasible = grid[mask]
            return cls(grid, mask, values, float(feasible[0]),
                       float(feasible[-1]), False)
        best = int(np.argmax(values))
        point = float(grid[best])
        return cls(grid, mask, values, point, point, True)

    @property
    def n_feasible(self) -> int:
        return int(self.mask.sum())

    @property
    def is_contiguous(self) -> bool:
        """True when the marked points form one unbroken run."""
        idx = np.flatnonzero(self.mask)
        return len(idx) == 0 or bool(idx[-1] - idx[0] + 1 == len(idx))


def feasible_set(
    q_r: Callable[[codec.StateVector, np.ndarray], np.ndarray],
    state: codec.StateVector,
    threshold: float,
    base_qp: float,
    delta_range: tuple[float, float] = codec.DELTA_QP_RANGE,
    step: float = 0.1,
) -> FeasibleSet:
    """Evaluate the rate critic on the QP grid around ``base_qp``.

    ``q_r`` maps ``(state, absolute QP array)`` to critic values; a grid
    point is feasible when its value is at least ``threshold``.  The grid is
    built from integer multiples of ``step`` so its endpoints are exact.
    """
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    lo_k = round(delta_range[0] / step)
    hi_k = round(delta_range[1] / step)
    grid = base_qp + np.arange(lo_k, hi_k + 1) * step
    values = np.asarray(q_r(state, grid), dtype=np.float64)
    if values.shape != grid.shape:
        raise ValueError(
            f"critic returned shape {values.shape}, expected {grid.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise ValueError("critic produced non-finite values on the grid")
    return FeasibleSet.from_mask(grid, values >= threshold, values)


def project(action: float, fset: FeasibleSet, mode: str = "hull") -> float:
    """Nearest feasible point to ``action``.

    ``hull`` clamps onto the interval hull; ``grid`` returns the nearest
    marked grid point, which matters when the mask is disconnected.
    Distance ties resolve toward the lower QP.
    """
    if not math.isfinite(action):
        raise ValueError("action must be finite")
    if mode == "hull":
        return float(min(max(action, fset.lo), fset.hi))
    if mode == "grid":
        candidates = fset.grid[fset.mask] if fset.mask.any() else np.array([fset.lo])
        return float(candidates[np.argmin(np.abs(candidates - action))])
    raise ValueError(f"unknown projection mode {mode!r}")


def fw_direction(
    grad_fn: Callable[[codec.StateVector, float], float],
    state: codec.StateVector,
    fset: FeasibleSet,
    projected: float,
) -> float:
    """Feasible point maximizing the linearized value along the critic slope.

    The inner product of a candidate QP with the scalar gradient is maximal
    at the hull's upper end for a positive slope and the lower end for a
    negative one; a flat slope keeps the projected point.
    """
    g = float(grad_fn(state, projected))
    if not math.isfinite(g):
        raise ValueError("critic gradient is non-finite")
    if g > 0.0:
        return fset.hi
    if g < 0.0:
        return fset.lo
    return projected


def reference_action(projected: float, direction: float, alpha: float) -> float:
    """Step from the projected action toward the Frank-Wolfe direction."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    return projected + alpha * (direction - projected)


def actor_update(actor: agents.ActorNetwork, state: codec.StateVector,
                 reference_qp: float, base_qp: float) -> float:
    """One squared-error step pulling the actor toward the reference action.

    The reference is a constant: gradients flow only through the actor's
    own output, never through the projection or the critics.
    """
    loss, grad = actor.regression_gradient(state, reference_qp - base_qp)
    actor.apply_gradient(grad)
    return loss


def zero_gradient_probe(
    actor: agents.ActorNetwork,
    grad_fn: Callable[[codec.StateVector, float], float],
    state: codec.StateVector,
    fset: FeasibleSet,
    base_qp: float,
) -> float:
    """Parameter-gradient norm of the clamp-through baseline.

    This is what an actor trained by backpropagating the distortion critic
    through a hard clamp onto the feasible interval would receive.  When the
    actor's output sits outside the hull the clamp saturates, its derivative
    is zero, and the whole parameter gradient vanishes identically.
    """
    delta = actor.act(state)
    qp = base_qp + delta
    clamped = float(min(max(qp, fset.lo), fset.hi))
    inside = fset.lo < qp < fset.hi
    g = float(grad_fn(state, clamped)) if inside else 0.0
    grad = actor.output_gradient(state, g)
    return float(np.linalg.norm(grad.values))


@dataclass(frozen=True)
class FwUpdate:
    """Everything one per-state actor update computed, for tracing."""

    base_qp: float
    raw_delta: float
    projected_qp: float
    direction_qp: float
    reference_qp: float
    actor_loss: float
    fallback_used: bool
    gradient: float


def fw_actor_step(
    actor: agents.ActorNetwork,
    q_d: agents.QNetwork,
    q_r: agents.QNetwork,
    state: codec.StateVector,
    config: agents.TrainerConfig,
) -> FwUpdate:
    """Full constrained update for one state.

    Builds the feasible set from the rate critic, projects the actor's
    action, follows the distortion critic's slope to the Frank-Wolfe
    direction, forms the reference action and regresses the actor toward
    it.  The critics are only read, never modified.
    """
    base = state.base_qp
    fset = feasible_set(
        lambda s, qps: q_r.value_grid(s, qps - base),
        state,
        config.feasible_threshold,
        base,
        config.delta_qp_range,
        config.qp_grid_step,
    )
    raw_delta = actor.act(state)
    projected = project(base + raw_delta, fset)
    grad_fn = lambda s, qp: q_d.action_gradient(s, qp - base)
    direction = fw_direction(grad_fn, state, fset, projected)
    reference = reference_action(projected, direction, config.fw_learning_rate)
    loss = actor_update(actor, state, reference, base)
    return FwUpdate(
        base_qp=base,
        raw_delta=raw_delta,
        projected_qp=projected,
        direction_qp=direction,
        reference_qp=reference,
        actor_loss=loss,
        fallback_used=fset.fallback_used,
        gradient=float(grad_fn(state, projected)),
    )


class NfwpoAlgorithm:
    """Per-batch hooks wiring the Frank-Wolfe actor rule into the shared
    training driver."""

    def __init__(self, config: agents.TrainerConfig, critics: agents.CriticPair,
                 unconstrained: bool = False):
        self.config = config
        self.critics = critics
        self.unconstrained = unconstrained

    def critic_step(self, batch, actor_target, ctx):
        targets = agents.critic_targets(batch, self.critics, actor_target)
        loss_d, loss_r = agents.update_critics(self.critics, batch, targets)
        return {"critic_loss": loss_d, "critic_loss_rate": loss_r}

    def actor_step(self, actor, batch, ctx):
        losses = []
        violations = 0
        fallbacks = 0
        for state in batch.state_vectors():
            if self.unconstrained:
                losses.append(self._unconstrained_step(actor, state))
                continue
            upd = fw_actor_step(actor, self.critics.distortion,
                                self.critics.rate, state, self.config)
            losses.append(upd.actor_loss)
            fallbacks += int(upd.fallback_used)
            # the reference action must stay inside the interval hull
            fs_lo = min(upd.projected_qp, upd.direction_qp)
            fs_hi = max(upd.projected_qp, upd.direction_qp)
            if not fs_lo - 1e-9 <= upd.reference_qp <= fs_hi + 1e-9:
                violations += 1
        return {
            "actor_loss": float(np.mean(losses)),
            "violations": violations,
            "fallbacks": fallbacks,
        }

    def _unconstrained_step(self, actor, state):
        """Ablation: chase the distortion critic's grid argmax and ignore
        the budget entirely."""
        base = state.base_qp
        cfg = self.config
        lo_k = round(cfg.delta_qp_range[0] / cfg.qp_grid_step)
        hi_k = round(cfg.delta_qp_range[1] / cfg.qp_grid_step)
        grid = base + np.arange(lo_k, hi_k + 1) * cfg.qp_grid_step
        values = self.critics.distortion.value_grid(state, grid - base)
        target = float(grid[np.argmax(values)])
        return actor_update(actor, state, target, base)

    def sync_targets(self):
        self.critics.sync()

    def networks(self):
        return {
            "critic_distortion": self.critics.distortion,
            "critic_rate": self.critics.rate,
            "critic_distortion_target": self.critics.distortion_target,
            "critic_rate_target": self.critics.rate_target,
        }


def train_nfwpo(config: agents.TrainerConfig, env_factory,
                unconstrained: bool = False) -> agents.TrainingResult:
    """Train the Frank-Wolfe agent; all randomness stems from
    ``config.seed``."""
    env = env_factory() if callable(env_factory) else env_factory
    rng_init, rng_noise, rng_sample = (
        np.random.default_rng(c) for c in np.random.SeedSequence(config.seed).spawn(3)
    )
    actor = agents.ActorNetwork.create(env.n_frames, config.hidden_widths,
                                       config.delta_qp_range,
                                       config.net_learning_rate, rng_init)
    critics = agents.CriticPair.create(config, env.n_frames, rng_init)
    algorithm = NfwpoAlgorithm(config, critics, unconstrained=unconstrained)
    method = "nfwpo-unconstrained" if unconstrained else "nfwpo"
    return agents.run_training(config, env, algorithm, actor, actor.clone(),
                               rng_noise, rng_sample, method)
