"""Shared actor-critic machinery for all training methods.

One training driver owns the rollout/replay/metrics loop; the methods differ
only in the algorithm object that updates critics and the actor from each
sampled batch.  Replay stores whole episodes so multi-step reward windows
never cross an episode boundary.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import zipfile
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import __version__, codec, nn

STATE_DIM = len(codec.FEATURE_NAMES)

METRICS_SCHEMA = "fwalloc.metrics.v1"
CHECKPOINT_SCHEMA = "fwalloc.checkpoint.v1"


class InsufficientDataError(RuntimeError):
    """Raised when a batch is requested from a replay buffer that is too empty."""


def state_input_scale(n_frames: int) -> np.ndarray:
    """Per-feature factors that bring raw observations to roughly unit range.

    Counts and QP units are divided down; fraction-valued features pass
    through unchanged.
    """
    scale = np.ones(STATE_DIM)
    scale[codec.FEATURE_NAMES.index("frames_remaining")] = 1.0 / n_frames
    scale[codec.FEATURE_NAMES.index("temporal_id")] = 0.5
    scale[codec.FEATURE_NAMES.index("base_qp")] = 1.0 / 51.0
    return scale


@dataclass(frozen=True)
class TrainerConfig:
    """Hyperparameters shared by every method."""

    gamma: float = 0.99
    fw_learning_rate: float = 0.1
    net_learning_rate: float = 0.001
    feasible_threshold: float = -0.05
    delta_qp_range: tuple[float, float] = codec.DELTA_QP_RANGE
    qp_grid_step: float = 0.1
    n_step: int = 3
    batch_size: int = 64
    episodes: int = 2000
    target_sync_period: int = 5
    # small buffer on purpose: old rollouts from a very different policy are
    # worse than useless here, they keep the critics anchored to stale data
    buffer_capacity: int = 6400
    warmup_episodes: int = 100
    noise_scale_start: float = 1.5
    noise_scale_final: float = 0.05
    noise_decay_fraction: float = 0.8
    hidden_widths: tuple[int, int] = (64, 64)
    updates_per_episode: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.fw_learning_rate <= 1.0:
            raise ValueError("fw_learning_rate must lie in (0, 1]")
        if self.net_learning_rate <= 0:
            raise ValueError("net_learning_rate must be positive")
        if self.feasible_threshold >= 0:
            raise ValueError("feasible_threshold must be negative")
        lo, hi = self.delta_qp_range
        if not lo < hi:
            raise ValueError("delta_qp_range must satisfy lo < hi")
        if self.qp_grid_step <= 0:
            raise ValueError("qp_grid_step must be positive")
        for name in ("n_step", "batch_size", "episodes", "target_sync_period",
                     "buffer_capacity", "updates_per_episode"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.warmup_episodes < 0:
            raise ValueError("warmup_episodes must be non-negative")
        if self.noise_scale_start < 0 or self.noise_scale_final < 0:
            raise ValueError("noise scales must be non-negative")
        if not 0.0 < self.noise_decay_fraction <= 1.0:
            raise ValueError("noise_decay_fraction must lie in (0, 1]")
        object.__setattr__(self, "delta_qp_range", (float(lo), float(hi)))
        object.__setattr__(self, "hidden_widths", tuple(self.hidden_widths))

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("delta_qp_range", "hidden_widths"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def config_hash(config: TrainerConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


class ActorNetwork:
    """Deterministic policy: observation -> delta QP inside the allowed window.

    The bounded output squashes through tanh, so emitted deltas can never
    leave ``delta_range``.
    """

    def __init__(self, spec: nn.MlpSpec, params: nn.ParamVector,
                 state_scale: np.ndarray, optim: nn.OptimState | None = None):
        self.spec = spec
        self.params = params
        self.state_scale = np.asarray(state_scale, dtype=np.float64)
        self.optim = optim

    @classmethod
    def create(cls, n_frames: int, hidden: Sequence[int], delta_range,
               learning_rate: float, rng: np.random.Generator) -> "ActorNetwork":
        spec = nn.MlpSpec(
            (STATE_DIM, *hidden, 1),
            output_activation="bounded",
            output_range=(float(delta_range[0]), float(delta_range[1])),
        )
        params = nn.init_params(spec, rng)
        optim = nn.OptimState.for_params(params, learning_rate=learning_rate)
        return cls(spec, params, state_input_scale(n_frames), optim)

    def _input(self, state) -> np.ndarray:
        arr = state.as_array() if isinstance(state, codec.StateVector) else np.asarray(state)
        return arr * self.state_scale

    def act(self, state) -> float:
        return float(nn.forward(self.spec, self.params, self._input(state))[0])

    def act_batch(self, states: np.ndarray) -> np.ndarray:
        x = np.asarray(states, dtype=np.float64) * self.state_scale
        return nn.forward(self.spec, self.params, x)[:, 0]

    def regression_gradient(self, state, target_delta: float):
        """Squared-error pull of the emitted delta toward ``target_delta``.

        Returns ``(loss, parameter_gradient)`` without touching the
        parameters; the target is a constant, so the gradient flows only
        through the actor output.
        """
        x = self._input(state)
        out = float(nn.forward(self.spec, self.params, x)[0])
        diff = out - float(target_delta)
        grad, _ = nn.backward(self.spec, self.params, x, np.array([2.0 * diff]))
        return diff * diff, grad

    def output_gradient(self, state, upstream: float) -> nn.ParamVector:
        """Parameter gradient of ``upstream * act(state)``."""
        x = self._input(state)
        grad, _ = nn.backward(self.spec, self.params, x, np.array([float(upstream)]))
        return grad

    def output_gradient_batch(self, states: np.ndarray,
                              upstream: np.ndarray) -> nn.ParamVector:
        """Parameter gradient of ``sum_i upstream[i] * act(states[i])``."""
        x = np.asarray(states, dtype=np.float64) * self.state_scale
        grad, _ = nn.backward(self.spec, self.params, x,
                              np.asarray(upstream, dtype=np.float64)[:, None])
        return grad

    def apply_gradient(self, grad: nn.ParamVector) -> None:
        nn.optimizer_step(self.params, grad, self.optim)

    def clone(self) -> "ActorNetwork":
        return ActorNetwork(self.spec, self.params.copy(), self.state_scale)

    def param_hash(self) -> str:
        return hashlib.sha256(self.params.values.tobytes()).hexdigest()


class QNetwork:
    """State-action value head over the scaled observation plus delta QP."""

    def __init__(self, spec: nn.MlpSpec, params: nn.ParamVector,
                 state_scale: np.ndarray, action_scale: float,
                 optim: nn.OptimState | None = None):
        self.spec = spec
        self.params = params
        self.state_scale = np.asarray(state_scale, dtype=np.float64)
        self.action_scale = float(action_scale)
        self.optim = optim

    @classmethod
    def create(cls, n_frames: int, hidden: Sequence[int], delta_range,
               learning_rate: float, rng: np.random.Generator) -> "QNetwork":
        spec = nn.MlpSpec((STATE_DIM + 1, *hidden, 1))
        params = nn.init_params(spec, rng)
        optim = nn.OptimState.for_params(params, learning_rate=learning_rate)
        action_scale = 1.0 / max(abs(delta_range[0]), abs(delta_range[1]))
        return cls(spec, params, state_input_scale(n_frames), action_scale, optim)

    def _inputs(self, states: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(states, dtype=np.float64)) * self.state_scale
        d = np.asarray(deltas, dtype=np.float64).reshape(-1, 1) * self.action_scale
        return np.concatenate([s, d], axis=1)

    def value(self, state, delta: float) -> float:
        arr = state.as_array() if isinstance(state, codec.StateVector) else np.asarray(state)
        return float(self.value_batch(arr[None, :], np.array([delta]))[0])

    def value_batch(self, states: np.ndarray, deltas: np.ndarray) -> np.ndarray:
        return nn.forward(self.spec, self.params, self._inputs(states, deltas))[:, 0]

    def value_grid(self, state, deltas: np.ndarray) -> np.ndarray:
        """The critic along an action grid at a fixed state."""
        arr = state.as_array() if isinstance(state, codec.StateVector) else np.asarray(state)
        tiled = np.repeat(arr[None, :], len(deltas), axis=0)
        return self.value_batch(tiled, np.asarray(deltas, dtype=np.float64))

    def action_gradient(self, state, delta: float) -> float:
        """d value / d delta at one state-action pair, in raw delta units."""
        arr = state.as_array() if isinstance(state, codec.StateVector) else np.asarray(state)
        x = self._inputs(arr[None, :], np.array([delta]))[0]
        _, input_grad = nn.backward(self.spec, self.params, x, np.array([1.0]))
        return float(input_grad[-1] * self.action_scale)

    def action_gradient_batch(self, states: np.ndarray,
                              deltas: np.ndarray) -> np.ndarray:
        """d value / d delta for a batch of state-action pairs."""
        x = self._inputs(states, deltas)
        _, input_grad = nn.backward(self.spec, self.params, x,
                                    np.ones((len(x), 1)))
        return input_grad[:, -1] * self.action_scale

    def update(self, states: np.ndarray, deltas: np.ndarray,
               targets: np.ndarray) -> float:
        """One mean-squared-error step toward ``targets``; returns the
        pre-step loss."""
        x = self._inputs(states, deltas)
        preds = nn.forward(self.spec, self.params, x)[:, 0]
        resid = preds - np.asarray(targets, dtype=np.float64)
        loss = float(np.mean(resid * resid))
        og = (2.0 * resid / len(resid))[:, None]
        grad, _ = nn.backward(self.spec, self.params, x, og)
        nn.optimizer_step(self.params, grad, self.optim)
        return loss

    def clone(self) -> "QNetwork":
        return QNetwork(self.spec, self.params.copy(), self.state_scale,
                        self.action_scale)

    def param_hash(self) -> str:
        return hashlib.sha256(self.params.values.tobytes()).hexdigest()


@dataclass
class CriticPair:
    """Separate quality and budget critics with their frozen target copies."""

    distortion: QNetwork
    rate: QNetwork
    distortion_target: QNetwork
    rate_target: QNetwork
    gamma: float
    n_step: int

    @classmethod
    def create(cls, config: TrainerConfig, n_frames: int,
               rng: np.random.Generator) -> "CriticPair":
        mk = lambda: QNetwork.create(n_frames, config.hidden_widths,
                                     config.delta_qp_range,
                                     config.net_learning_rate, rng)
        distortion, rate = mk(), mk()
        return cls(distortion, rate, distortion.clone(), rate.clone(),
                   config.gamma, config.n_step)

    def sync(self) -> None:
        """Hard copy: targets become exactly the live parameters."""
        self.distortion_target.params.values[...] = self.distortion.params.values
        self.rate_target.params.values[...] = self.rate.params.values


@dataclass(frozen=True)
class Batch:
    """Sampled n-step windows, zero-padded past each window's end.

    ``rewards_*[i, k]`` is the k-th reward inside window i (zero beyond
    ``steps[i]``).  ``bootstrap_states[i]`` is the state n steps ahead when
    the window does not hit the episode end, else zeros with
    ``has_bootstrap[i]`` false.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards_distortion: np.ndarray
    rewards_rate: np.ndarray
    steps: np.ndarray
    bootstrap_states: np.ndarray
    has_bootstrap: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def state_vectors(self) -> list[codec.StateVector]:
        return [codec.StateVector.from_array(row) for row in self.states]


@dataclass
class _EpisodeRecord:
    states: np.ndarray
    actions: np.ndarray
    rewards_d: np.ndarray
    rewards_r: np.ndarray
    length: int


class ReplayBuffer:
    """Episode-aware transition store with whole-episode eviction.

    Every transition index is an eligible window start; a window takes up to
    ``n_step`` rewards from its own episode and bootstraps only when a state
    ``n_step`` ahead exists.
    """

    def __init__(self, capacity: int, n_step: int):
        if capacity < 1 or n_step < 1:
            raise ValueError("capacity and n_step must be positive")
        self.capacity = capacity
        self.n_step = n_step
        self._episodes: deque[_EpisodeRecord] = deque()
        self._total = 0

    def push_episode(self, transitions: Sequence[codec.Transition]) -> None:
        if not transitions:
            raise ValueError("cannot push an empty episode")
        if any(t.terminal for t in transitions[:-1]) or not transitions[-1].terminal:
            raise ValueError("episode must end, and only end, with a terminal transition")
        states = np.stack([t.state.as_array() for t in transitions])
        actions = np.array([t.action for t in transitions])
        r_d = np.array([t.reward_distortion for t in transitions])
        r_r = np.array([t.reward_rate for t in transitions])
        for arr in (states, actions, r_d, r_r):
            if not np.all(np.isfinite(arr)):
                raise ValueError("episode contains non-finite values")
        self._episodes.append(
            _EpisodeRecord(states, actions, r_d, r_r, len(transitions))
        )
        self._total += len(transitions)
        while self._total > self.capacity and len(self._episodes) > 1:
            gone = self._episodes.popleft()
            self._total -= gone.length

    @property
    def n_transitions(self) -> int:
        return self._total

    @property
    def n_windows(self) -> int:
        return self._total

    @property
    def n_episodes(self) -> int:
        return len(self._episodes)

    def windows(self) -> Iterable[tuple[int, int]]:
        """(episode index, start offset) of every eligible window."""
        for e, rec in enumerate(self._episodes):
            for t in range(rec.length):
                yield e, t

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self.n_windows:
            raise InsufficientDataError(
                f"requested {batch_size} windows, buffer holds {self.n_windows}"
            )
        flat = list(self.windows())
        picks = rng.choice(len(flat), size=batch_size, replace=False)
        n = self.n_step
        states = np.zeros((batch_size, STATE_DIM))
        actions = np.zeros(batch_size)
        rew_d = np.zeros((batch_size, n))
        rew_r = np.zeros((batch_size, n))
        steps = np.zeros(batch_size, dtype=np.int64)
        boot_states = np.zeros((batch_size, STATE_DIM))
        has_boot = np.zeros(batch_size)
        for i, pick in enumerate(picks):
            e, t = flat[pick]
            rec = self._episodes[e]
            k = min(n, rec.length - t)
            states[i] = rec.states[t]
            actions[i] = rec.actions[t]
            rew_d[i, :k] = rec.rewards_d[t : t + k]
            rew_r[i, :k] = rec.rewards_r[t : t + k]
            steps[i] = k
            if t + n < rec.length:
                boot_states[i] = rec.states[t + n]
                has_boot[i] = 1.0
        return Batch(states, actions, rew_d, rew_r, steps, boot_states, has_boot)


def critic_targets(batch: Batch, critics: CriticPair,
                   actor_target: ActorNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Discounted reward-to-go targets with a bootstrapped tail.

    Each target sums the window's discounted rewards and, when a state
    ``n_step`` ahead exists, adds ``gamma^n`` times the target critic at the
    target actor's action there.  Windows ending at the episode end use the
    plain reward sum.
    """
    gamma, n = critics.gamma, critics.n_step
    if batch.rewards_distortion.shape[1] != n:
        raise ValueError("batch window width does not match critic n_step")
    disc = gamma ** np.arange(n)
    y_d = batch.rewards_distortion @ disc
    y_r = batch.rewards_rate @ disc
    boot_actions = actor_target.act_batch(batch.bootstrap_states)
    tail = gamma**n * batch.has_bootstrap
    y_d = y_d + tail * critics.distortion_target.value_batch(
        batch.bootstrap_states, boot_actions
    )
    y_r = y_r + tail * critics.rate_target.value_batch(
        batch.bootstrap_states, boot_actions
    )
    return y_d, y_r


def update_critics(critics: CriticPair, batch: Batch,
                   targets: tuple[np.ndarray, np.ndarray]) -> tuple[float, float]:
    """One squared-error step on each critic; returns the pre-step losses."""
    y_d, y_r = targets
    loss_d = critics.distortion.update(batch.states, batch.actions, y_d)
    loss_r = critics.rate.update(batch.states, batch.actions, y_r)
    return loss_d, loss_r


@dataclass(frozen=True)
class NoiseSchedule:
    """Exploration scale decaying linearly, then holding at the final value."""

    start: float
    final: float
    decay_fraction: float
    episodes: int

    def scale(self, episode: int) -> float:
        horizon = max(1, round(self.decay_fraction * self.episodes))
        frac = min(1.0, episode / horizon)
        return self.start + (self.final - self.start) * frac


def apply_exploration_noise(action: float, scale: float,
                            rng: np.random.Generator,
                            delta_range) -> float:
    """Gaussian perturbation clipped back into the action window.

    A zero scale returns the action unchanged without consuming a draw.
    """
    if scale < 0:
        raise ValueError("noise scale must be non-negative")
    if scale == 0.0:
        return float(np.clip(action, delta_range[0], delta_range[1]))
    return float(
        np.clip(action + rng.normal(0.0, scale), delta_range[0], delta_range[1])
    )


class TrainingContext:
    """Per-episode facts the algorithm hooks may consult."""

    def __init__(self):
        self.episode = 0
        self.last_summary: codec.EpisodeSummary | None = None


@dataclass
class TrainingResult:
    method: str
    config: TrainerConfig
    env_info: dict
    actor: ActorNetwork
    actor_target: ActorNetwork
    networks: dict[str, QNetwork]
    metrics: list[dict]
    final_eval: dict
    counters: dict
    extra: dict = field(default_factory=dict)

    def report_dict(self) -> dict:
        return {
            "schema": "fwalloc.report.v1",
            "method": self.method,
            "seed": self.config.seed,
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config),
            "env": self.env_info,
            "episodes": self.metrics,
            "final_eval": self.final_eval,
            "counters": self.counters,
            "code_version": __version__,
        }


def evaluate_greedy(env: codec.GopEnvironment, actor: ActorNetwork,
                    deviation_tolerance: float = 0.05) -> dict:
    """Noise-free rollout of every environment instance.

    Deviations within ``deviation_tolerance`` of the budget count as zero in
    the tolerated aggregate, mirroring the evaluation convention used for
    the rate-control tables.
    """
    rows = []
    for model, ep in env.eval_instances():
        _, summary = codec.run_episode(model, lambda s: actor.act(s), ep)
        rows.append(
            {
                "qp_level": summary.qp_level,
                "budget_factor": summary.budget_factor,
                "rate_deviation": summary.rate_deviation,
                "distortion_gain": summary.distortion_gain,
                "total_bits": summary.total_bits,
                "total_quality": summary.total_quality,
            }
        )
    raw = [r["rate_deviation"] for r in rows]
    tolerated = [0.0 if d <= deviation_tolerance else d for d in raw]
    return {
        "instances": rows,
        "mean_abs_deviation": float(np.mean(raw)),
        "mean_tolerated_deviation": float(np.mean(tolerated)),
        "mean_distortion_gain": float(np.mean([r["distortion_gain"] for r in rows])),
    }


def run_training(config: TrainerConfig, env: codec.GopEnvironment, algorithm,
                 actor: ActorNetwork, actor_target: ActorNetwork,
                 rng_noise: np.random.Generator,
                 rng_sample: np.random.Generator, method: str) -> TrainingResult:
    """The rollout/replay/update loop every method runs through.

    The ``algorithm`` object supplies ``critic_step(batch, actor_target,
    ctx)``, ``actor_step(actor, batch, ctx)``, ``sync_targets()`` and
    ``networks()``; everything else is identical across methods.
    """
    buffer = ReplayBuffer(config.buffer_capacity, config.n_step)
    schedule = NoiseSchedule(config.noise_scale_start, config.noise_scale_final,
                             config.noise_decay_fraction, config.episodes)
    ctx = TrainingContext()
    rows: list[dict] = []
    counters = {"feasibility_violations": 0, "fallback_events": 0}
    lo, hi = config.delta_qp_range
    for episode in range(config.episodes):
        model, ep0 = env.episode_setup(episode)
        scale = schedule.scale(episode)
        if episode < config.warmup_episodes:
            # uniform action coverage before the actor steers the data;
            # without it the critics only ever see one narrow policy and
            # rank off-policy actions arbitrarily
            policy = lambda s: float(rng_noise.uniform(lo, hi))
        else:
            policy = lambda s: apply_exploration_noise(
                actor.act(s), scale, rng_noise, config.delta_qp_range
            )
        transitions, summary = codec.run_episode(model, policy, ep0)
        buffer.push_episode(transitions)
        ctx.episode = episode
        ctx.last_summary = summary
        losses: dict = {}
        stats: dict = {}
        if buffer.n_windows >= config.batch_size:
            for _ in range(config.updates_per_episode):
                batch = buffer.sample_batch(config.batch_size, rng_sample)
                losses = algorithm.critic_step(batch, actor_target, ctx)
                stats = algorithm.actor_step(actor, batch, ctx)
        counters["feasibility_violations"] += stats.get("violations", 0)
        counters["fallback_events"] += stats.get("fallbacks", 0)
        if (episode + 1) % config.target_sync_period == 0:
            algorithm.sync_targets()
            actor_target.params.values[...] = actor.params.values
        rows.append(
            {
                "episode": episode,
                "critic_loss": losses.get("critic_loss"),
                "critic_loss_rate": losses.get("critic_loss_rate"),
                "abs_rate_deviation": summary.rate_deviation,
                "distortion_gain": summary.distortion_gain,
                "noise_scale": scale,
            }
        )
    final_eval = evaluate_greedy(env, actor)
    return TrainingResult(
        method=method,
        config=config,
        env_info=env.describe(),
        actor=actor,
        actor_target=actor_target,
        networks=algorithm.networks(),
        metrics=rows,
        final_eval=final_eval,
        counters=counters,
    )


def write_metrics_csv(path, rows: Sequence[dict]) -> None:
    """Per-episode training metrics with a schema comment line up top."""
    columns = ["episode", "critic_loss", "critic_loss_rate",
               "abs_rate_deviation", "distortion_gain", "noise_scale"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {METRICS_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            out = []
            for col in columns:
                v = row.get(col)
                if v is None:
                    out.append("")
                elif col == "episode":
                    out.append(str(v))
                else:
                    out.append(format(v, ".10g"))
            writer.writerow(out)


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        parsed = {"episode": int(row["episode"])}
        for key, value in row.items():
            if key != "episode":
                parsed[key] = float(value) if value else None
        rows.append(parsed)
    return rows


def _optim_payload(optim: nn.OptimState | None) -> bytes:
    buf = io.BytesIO()
    if optim is None:
        np.savez(buf, none=np.array([1]))
    else:
        np.savez(
            buf,
            m=optim.m, v=optim.v,
            meta=np.array([optim.learning_rate, optim.beta1, optim.beta2,
                           optim.eps, float(optim.step_count)]),
            mode=np.array([0 if optim.mode == "adam" else 1]),
        )
    return buf.getvalue()


def _optim_from_payload(raw: bytes) -> nn.OptimState | None:
    data = np.load(io.BytesIO(raw))
    if "none" in data:
        return None
    meta = data["meta"]
    return nn.OptimState(
        learning_rate=float(meta[0]), mode="adam" if data["mode"][0] == 0 else "plain",
        beta1=float(meta[1]), beta2=float(meta[2]), eps=float(meta[3]),
        step_count=int(meta[4]), m=data["m"], v=data["v"],
    )


def save_checkpoint(path, result: TrainingResult) -> None:
    """Bundle every network, optimizer state and the run's configuration."""
    nets: dict[str, tuple] = {"actor": (result.actor.spec, result.actor.params,
                                        result.actor.optim),
                              "actor_target": (result.actor_target.spec,
                                               result.actor_target.params,
                                               result.actor_target.optim)}
    for name, q in result.networks.items():
        nets[name] = (q.spec, q.params, q.optim)
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "method": result.method,
        "config": result.config.to_dict(),
        "env": result.env_info,
        "extra": result.extra,
        "nets": sorted(nets),
        "code_version": __version__,
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for name, (spec, params, optim) in nets.items():
            zf.writestr(f"nets/{name}.fwnn", nn.dumps_params(spec, params))
            zf.writestr(f"nets/{name}.optim.npz", _optim_payload(optim))


@dataclass
class CheckpointBundle:
    method: str
    config: TrainerConfig
    raw_config: dict
    env_info: dict
    nets: dict[str, tuple[nn.MlpSpec, nn.ParamVector]]
    optims: dict[str, nn.OptimState | None]
    extra: dict

    def actor(self) -> ActorNetwork:
        spec, params = self.nets["actor"]
        return ActorNetwork(spec, params,
                            state_input_scale(int(self.env_info["n_frames"])),
                            self.optims.get("actor"))

    def critic(self, name: str) -> QNetwork:
        spec, params = self.nets[name]
        delta_range = self.config.delta_qp_range
        return QNetwork(
            params=params, spec=spec,
            state_scale=state_input_scale(int(self.env_info["n_frames"])),
            action_scale=1.0 / max(abs(delta_range[0]), abs(delta_range[1])),
            optim=self.optims.get(name),
        )


def load_checkpoint(path) -> CheckpointBundle:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema") != CHECKPOINT_SCHEMA:
            raise nn.CheckpointError(
                f"unsupported checkpoint schema {manifest.get('schema')!r}"
            )
        nets, optims = {}, {}
        for name in manifest["nets"]:
            spec, params = nn.loads_params(zf.read(f"nets/{name}.fwnn"))
            nets[name] = (spec, params)
            optims[name] = _optim_from_payload(zf.read(f"nets/{name}.optim.npz"))
    # method-specific config fields ride along in extra; the core trainer
    # fields are enough to rebuild networks for evaluation
    raw_config = manifest["config"]
    base_fields = {f.name for f in fields(TrainerConfig)}
    core = {k: v for k, v in raw_config.items() if k in base_fields}
    return CheckpointBundle(
        method=manifest["method"],
        config=TrainerConfig.from_dict(core),
        raw_config=raw_config,
        env_info=manifest["env"],
        nets=nets,
        optims=optims,
        extra=manifest.get("extra", {}),
    )
