"""Deterministic synthetic GOP encoder used as the training environment.

A GOP is a fixed hierarchical structure of I/B/b frames.  Each frame's bit
cost follows an exponential-in-QP curve and its quality degrades linearly in
its own QP plus a penalty when reference frames were coded above the model
anchor QP.  Episodes encode the frames in coding order under a GOP-level bit
budget; rewards are quality gain over a fixed anchor policy per frame and a
single budget-deviation penalty on the last frame.

Everything here is pure and float64: same model, episode and QPs give
bit-identical numbers on any platform.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

FRAME_TYPES = ("I", "B", "b")

# Offsets from the rate-point QP level to each frame type's base QP.
BASE_QP_OFFSETS = {"I": -3.0, "B": -2.0, "b": 2.0}

# Per-frame QP may deviate from its base by at most this much either way.
DELTA_QP_RANGE = (-5.0, 5.0)

PROFILES = ("easy", "textured", "motion-heavy")

TRACE_SCHEMA = "fwalloc.trace.v1"


class EpisodeCompleteError(RuntimeError):
    """Raised when encoding is attempted on a finished episode."""


class QpRangeError(ValueError):
    """Raised when a frame QP leaves the allowed window around its base."""


@dataclass(frozen=True)
class GopStructure:
    """Frame layout of one GOP.

    Display positions run ``0 .. size``.  Position 0 is the leading context
    frame: the previous GOP's closing I-frame, already encoded at its base
    QP.  It contributes no bits and no decision; it only serves as a
    reference.  ``coding_order`` lists the ``size`` decision frames in the
    order they are encoded.
    """

    size: int
    frame_types: tuple[str, ...]
    temporal_ids: tuple[int, ...]
    references: tuple[tuple[int, ...], ...]
    coding_order: tuple[int, ...]

    def __post_init__(self):
        n = self.size
        if n < 1:
            raise ValueError("GOP must contain at least one decision frame")
        if len(self.frame_types) != n + 1:
            raise ValueError("frame_types must cover positions 0..size")
        if len(self.temporal_ids) != n + 1 or len(self.references) != n + 1:
            raise ValueError("temporal_ids and references must cover positions 0..size")
        if any(t not in FRAME_TYPES for t in self.frame_types):
            raise ValueError(f"frame types must be one of {FRAME_TYPES}")
        if self.frame_types[0] != "I" or self.references[0] != ():
            raise ValueError("position 0 must be a reference-free I frame")
        if sorted(self.coding_order) != list(range(1, n + 1)):
            raise ValueError("coding_order must be a permutation of 1..size")
        coded_at = {0: -1}
        for order, display in enumerate(self.coding_order):
            for ref in self.references[display]:
                if ref not in coded_at:
                    raise ValueError(
                        f"frame {display} references {ref} before it is coded"
                    )
            coded_at[display] = order

    @property
    def coding_index(self) -> dict[int, int]:
        """Display position -> index in coding order."""
        return {d: i for i, d in enumerate(self.coding_order)}


def hierarchical_b_gop16() -> GopStructure:
    """Two-level hierarchical-B GOP of 16 decision frames.

    The closing I-frame is coded first, then the mid-GOP B-frame predicted
    from both I-frames, then the b-frames of each half predicted from their
    surrounding I/B pair.
    """
    types = ["I"] + ["b"] * 7 + ["B"] + ["b"] * 7 + ["I"]
    tids = [0] + [2] * 7 + [1] + [2] * 7 + [0]
    refs: list[tuple[int, ...]] = [()] * 17
    refs[8] = (0, 16)
    for d in range(1, 8):
        refs[d] = (0, 8)
    for d in range(9, 16):
        refs[d] = (8, 16)
    order = (16, 8) + tuple(range(1, 8)) + tuple(range(9, 16))
    return GopStructure(16, tuple(types), tuple(tids), tuple(refs), order)


def chain_gop(n: int) -> GopStructure:
    """Small chain GOP for oracle-sized instances: B then b frames, each
    predicted from its predecessor."""
    if n < 1:
        raise ValueError("chain GOP needs at least one decision frame")
    types = ("I", "B") + ("b",) * (n - 1)
    tids = (0, 1) + (2,) * (n - 1)
    refs = ((),) + tuple((d - 1,) for d in range(1, n + 1))
    return GopStructure(n, types, tids, refs, tuple(range(1, n + 1)))


# Parameter ranges per profile.  Complexity ranges are disjoint across both
# frame types and profiles so that I > B > b within a profile and harder
# profiles cost strictly more bits at every QP.
_PROFILE_PARAMS = {
    "easy": {
        "complexity": {"I": (24e3, 36e3), "B": (8e3, 12e3), "b": (2.4e3, 4e3)},
        "ceiling": (86.0, 94.0),
        "slope": (0.7, 1.2),
        "dependency": {"I": (0.0, 0.0), "B": (0.1, 0.3), "b": (0.2, 0.5)},
    },
    "textured": {
        "complexity": {"I": (60e3, 90e3), "B": (14e3, 22e3), "b": (4e3, 7e3)},
        "ceiling": (80.0, 90.0),
        "slope": (1.2, 2.0),
        "dependency": {"I": (0.0, 0.0), "B": (0.2, 0.4), "b": (0.3, 0.6)},
    },
    "motion-heavy": {
        "complexity": {"I": (110e3, 150e3), "B": (28e3, 40e3), "b": (9e3, 14e3)},
        "ceiling": (72.0, 86.0),
        "slope": (1.5, 2.4),
        "dependency": {"I": (0.0, 0.0), "B": (0.4, 0.7), "b": (0.5, 0.9)},
    },
}


@dataclass(frozen=True)
class GopModel:
    """Synthetic rate/quality parameters for one GOP's frames.

    Per display position: ``complexity`` is the bit cost at the anchor QP,
    ``quality_ceiling`` the quality score at the anchor QP with pristine
    references, ``quality_slope`` the per-QP quality drop, ``dependency``
    the sensitivity to reference frames coded above the anchor QP.
    """

    structure: GopStructure
    complexity: tuple[float, ...]
    quality_ceiling: tuple[float, ...]
    quality_slope: tuple[float, ...]
    dependency: tuple[float, ...]
    anchor_qp: float = 32.0

    def __post_init__(self):
        n = self.structure.size + 1
        for name in ("complexity", "quality_ceiling", "quality_slope", "dependency"):
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValueError(f"{name} must cover positions 0..{n - 1}")
        if any(c <= 0 for c in self.complexity):
            raise ValueError("complexity must be positive")
        if any(not 0.0 <= d <= 1.0 for d in self.dependency):
            raise ValueError("dependency must lie in [0, 1]")

    def bits(self, display: int, qp: float) -> float:
        """Bit cost of one frame: halves for every 6 QP steps above anchor."""
        return self.complexity[display] * 2.0 ** ((self.anchor_qp - qp) / 6.0)

    def quality(self, display: int, qp: float, ref_qps: Sequence[float]) -> float:
        """Quality score in [0, 100] given the frame's QP and its references'."""
        value = self.quality_ceiling[display]
        value -= self.quality_slope[display] * (qp - self.anchor_qp)
        if ref_qps:
            penalty = np.mean([max(0.0, r - self.anchor_qp) for r in ref_qps])
            value -= self.dependency[display] * penalty
        return float(np.clip(value, 0.0, 100.0))

    def to_dict(self) -> dict:
        return {
            "structure": {
                "size": self.structure.size,
                "frame_types": list(self.structure.frame_types),
                "temporal_ids": list(self.structure.temporal_ids),
                "references": [list(r) for r in self.structure.references],
                "coding_order": list(self.structure.coding_order),
            },
            "complexity": list(self.complexity),
            "quality_ceiling": list(self.quality_ceiling),
            "quality_slope": list(self.quality_slope),
            "dependency": list(self.dependency),
            "anchor_qp": self.anchor_qp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GopModel":
        s = d["structure"]
        structure = GopStructure(
            size=int(s["size"]),
            frame_types=tuple(s["frame_types"]),
            temporal_ids=tuple(s["temporal_ids"]),
            references=tuple(tuple(r) for r in s["references"]),
            coding_order=tuple(s["coding_order"]),
        )
        return cls(
            structure=structure,
            complexity=tuple(d["complexity"]),
            quality_ceiling=tuple(d["quality_ceiling"]),
            quality_slope=tuple(d["quality_slope"]),
            dependency=tuple(d["dependency"]),
            anchor_qp=float(d["anchor_qp"]),
        )


def build_gop_model(
    seed: int, profile: str, structure: GopStructure | None = None
) -> GopModel:
    """Draw one GOP model from a profile's parameter ranges, deterministically."""
    if profile not in _PROFILE_PARAMS:
        raise ValueError(f"unknown profile {profile!r}; choose from {PROFILES}")
    if structure is None:
        structure = hierarchical_b_gop16()
    params = _PROFILE_PARAMS[profile]
    rng = np.random.default_rng(
        np.random.SeedSequence((int(seed), PROFILES.index(profile)))
    )
    complexity, ceiling, slope, dependency = [], [], [], []
    for ftype in structure.frame_types:
        lo, hi = params["complexity"][ftype]
        complexity.append(float(rng.uniform(lo, hi)))
        ceiling.append(float(rng.uniform(*params["ceiling"])))
        slope.append(float(rng.uniform(*params["slope"])))
        dlo, dhi = params["dependency"][ftype]
        dependency.append(float(rng.uniform(dlo, dhi)) if dhi > dlo else dlo)
    return GopModel(
        structure=structure,
        complexity=tuple(complexity),
        quality_ceiling=tuple(ceiling),
        quality_slope=tuple(slope),
        dependency=tuple(dependency),
    )


def base_qp_for(qp_level: float, frame_type: str) -> float:
    return float(qp_level) + BASE_QP_OFFSETS[frame_type]


def anchor_total_bits(model: GopModel, qp_level: float) -> float:
    """Bits the anchor policy (all deltas zero) spends on one GOP."""
    total = 0.0
    for display in model.structure.coding_order:
        ftype = model.structure.frame_types[display]
        total += model.bits(display, base_qp_for(qp_level, ftype))
    return total


@dataclass(frozen=True)
class EpisodeState:
    """Progress of one GOP encode: what was spent and chosen so far.

    ``chosen_qps`` is in coding order.  States are immutable; encoding a
    frame returns the successor state.
    """

    qp_level: float
    budget_factor: float
    r_gop: float
    anchor_bits: float
    frame_index: int
    bits_spent: float
    chosen_qps: tuple[float, ...]

    def __post_init__(self):
        if self.r_gop <= 0:
            raise ValueError("bit budget must be positive")
        if len(self.chosen_qps) != self.frame_index:
            raise ValueError("chosen_qps must hold one QP per encoded frame")


def fresh_episode(
    model: GopModel, qp_level: float, budget_factor: float
) -> EpisodeState:
    """Start an episode with budget ``budget_factor`` times the anchor bits."""
    if not 1.0 <= qp_level <= 51.0:
        raise ValueError(f"qp_level {qp_level} outside [1, 51]")
    if budget_factor <= 0:
        raise ValueError("budget_factor must be positive")
    anchor = anchor_total_bits(model, qp_level)
    return EpisodeState(
        qp_level=float(qp_level),
        budget_factor=float(budget_factor),
        r_gop=budget_factor * anchor,
        anchor_bits=anchor,
        frame_index=0,
        bits_spent=0.0,
        chosen_qps=(),
    )


def _qp_of_display(model: GopModel, ep: EpisodeState, display: int) -> float:
    """QP the referenced frame was actually coded at (context frame: base I QP)."""
    if display == 0:
        return base_qp_for(ep.qp_level, "I")
    order = model.structure.coding_index[display]
    if order >= ep.frame_index:
        raise ValueError(f"frame {display} not encoded yet")
    return ep.chosen_qps[order]


def episode_complete(model: GopModel, ep: EpisodeState) -> bool:
    return ep.frame_index >= model.structure.size


def encode_frame(
    model: GopModel, ep: EpisodeState, qp: float
) -> tuple[float, float, float, EpisodeState]:
    """Encode the next frame in coding order at ``qp``.

    Returns ``(bits, quality, anchor_quality, next_state)``.  The anchor
    quality is what the frame scores when it and all its references sit at
    their base QPs; it does not depend on the episode's actual choices.
    """
    if episode_complete(model, ep):
        raise EpisodeCompleteError("all frames already encoded")
    display = model.structure.coding_order[ep.frame_index]
    ftype = model.structure.frame_types[display]
    base = base_qp_for(ep.qp_level, ftype)
    lo, hi = base + DELTA_QP_RANGE[0], base + DELTA_QP_RANGE[1]
    if not lo - 1e-9 <= qp <= hi + 1e-9:
        raise QpRangeError(
            f"frame {display}: qp {qp} outside [{lo}, {hi}] around base {base}"
        )
    refs = model.structure.references[display]
    bits = model.bits(display, qp)
    quality = model.quality(display, qp, [_qp_of_display(model, ep, r) for r in refs])
    anchor_refs = [
        base_qp_for(ep.qp_level, model.structure.frame_types[r]) for r in refs
    ]
    anchor_quality = model.quality(display, base, anchor_refs)
    nxt = replace(
        ep,
        frame_index=ep.frame_index + 1,
        bits_spent=ep.bits_spent + bits,
        chosen_qps=ep.chosen_qps + (float(qp),),
    )
    return bits, quality, anchor_quality, nxt


def distortion_reward(quality: float, anchor_quality: float) -> float:
    """Per-frame quality gain over the anchor policy."""
    for v in (quality, anchor_quality):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"quality {v} outside [0, 100]")
    return quality - anchor_quality


def rate_reward(ep: EpisodeState, is_last: bool) -> float:
    """Budget penalty, paid once after the last frame: minus the relative
    absolute deviation of spent bits from the GOP budget."""
    if not is_last:
        return 0.0
    return -abs(ep.r_gop - ep.bits_spent) / ep.r_gop


FEATURE_NAMES = (
    "intra_complexity",
    "dependency",
    "remaining_intra_complexity",
    "remaining_dependency",
    "bits_remaining_frac",
    "frames_remaining",
    "temporal_id",
    "budget_level",
    "base_qp",
)


@dataclass(frozen=True)
class StateVector:
    """Observation before encoding one frame.

    Scales: complexity features are fractions of the GOP's largest coded
    frame; ``dependency`` features are the raw model coefficients in [0, 1];
    ``bits_remaining_frac`` is the unspent fraction of the budget (negative
    once overspent); ``frames_remaining`` counts frames not yet encoded,
    current one included; ``temporal_id`` is the raw hierarchy level;
    ``budget_level`` is the budget as a multiple of the anchor policy's
    bits; ``base_qp`` is the current frame's base QP in QP units.
    """

    intra_complexity: float
    dependency: float
    remaining_intra_complexity: float
    remaining_dependency: float
    bits_remaining_frac: float
    frames_remaining: float
    temporal_id: float
    budget_level: float
    base_qp: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.intra_complexity,
                self.dependency,
                self.remaining_intra_complexity,
                self.remaining_dependency,
                self.bits_remaining_frac,
                self.frames_remaining,
                self.temporal_id,
                self.budget_level,
                self.base_qp,
            ],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "StateVector":
        return cls(*(float(v) for v in arr))


def extract_state(model: GopModel, ep: EpisodeState) -> StateVector:
    """Observation for the next frame to encode; episode must not be complete."""
    if episode_complete(model, ep):
        raise EpisodeCompleteError("episode complete; no next frame to observe")
    structure = model.structure
    display = structure.coding_order[ep.frame_index]
    coded = structure.coding_order
    s_max = max(model.complexity[d] for d in coded)
    remaining = coded[ep.frame_index :]
    return StateVector(
        intra_complexity=model.complexity[display] / s_max,
        dependency=model.dependency[display],
        remaining_intra_complexity=float(
            np.mean([model.complexity[d] / s_max for d in remaining])
        ),
        remaining_dependency=float(np.mean([model.dependency[d] for d in remaining])),
        bits_remaining_frac=(ep.r_gop - ep.bits_spent) / ep.r_gop,
        frames_remaining=float(structure.size - ep.frame_index),
        temporal_id=float(structure.temporal_ids[display]),
        budget_level=ep.r_gop / ep.anchor_bits,
        base_qp=base_qp_for(ep.qp_level, structure.frame_types[display]),
    )


def _terminal_state(model: GopModel, ep: EpisodeState) -> StateVector:
    """Episode-over snapshot stored as the final transition's successor.

    Frame-specific features are zero; budget features keep their final
    values.  Never bootstrapped from, only stored."""
    return StateVector(
        intra_complexity=0.0,
        dependency=0.0,
        remaining_intra_complexity=0.0,
        remaining_dependency=0.0,
        bits_remaining_frac=(ep.r_gop - ep.bits_spent) / ep.r_gop,
        frames_remaining=0.0,
        temporal_id=0.0,
        budget_level=ep.r_gop / ep.anchor_bits,
        base_qp=0.0,
    )


@dataclass(frozen=True)
class Transition:
    state: StateVector
    action: float  # delta QP actually executed
    reward_distortion: float
    reward_rate: float
    next_state: StateVector
    terminal: bool


@dataclass(frozen=True)
class FrameRecord:
    display: int
    frame_type: str
    temporal_id: int
    qp: float
    bits: float
    quality: float
    anchor_quality: float


@dataclass(frozen=True)
class EpisodeSummary:
    qp_level: float
    budget_factor: float
    r_gop: float
    total_bits: float
    total_quality: float
    total_anchor_quality: float
    distortion_gain: float
    rate_deviation: float  # |r_gop - total_bits| / r_gop
    frames: tuple[FrameRecord, ...]

    def to_dict(self) -> dict:
        d = {
            "schema": TRACE_SCHEMA,
            "qp_level": self.qp_level,
            "budget_factor": self.budget_factor,
            "r_gop": self.r_gop,
            "total_bits": self.total_bits,
            "total_quality": self.total_quality,
            "total_anchor_quality": self.total_anchor_quality,
            "distortion_gain": self.distortion_gain,
            "rate_deviation": self.rate_deviation,
            "frames": [vars(f) for f in self.frames],
        }
        return d


def run_episode(
    model: GopModel,
    policy: Callable[[StateVector], float],
    ep: EpisodeState,
) -> tuple[list[Transition], EpisodeSummary]:
    """Roll one episode under ``policy`` (state -> delta QP).

    The policy's action is added to the frame's base QP; it must be finite
    and within the allowed delta window.
    """
    structure = model.structure
    transitions: list[Transition] = []
    frames: list[FrameRecord] = []
    total_quality = 0.0
    total_anchor = 0.0
    while not episode_complete(model, ep):
        state = extract_state(model, ep)
        action = float(policy(state))
        if not np.isfinite(action):
            raise ValueError(f"policy produced non-finite action {action}")
        if not DELTA_QP_RANGE[0] - 1e-9 <= action <= DELTA_QP_RANGE[1] + 1e-9:
            raise ValueError(
                f"policy action {action} outside the delta window "
                f"{DELTA_QP_RANGE}"
            )
        display = structure.coding_order[ep.frame_index]
        bits, quality, anchor_quality, ep = encode_frame(
            model, ep, state.base_qp + action
        )
        terminal = episode_complete(model, ep)
        r_d = distortion_reward(quality, anchor_quality)
        r_r = rate_reward(ep, terminal)
        next_state = _terminal_state(model, ep) if terminal else extract_state(model, ep)
        transitions.append(
            Transition(state, action, r_d, r_r, next_state, terminal)
        )
        frames.append(
            FrameRecord(
                display=display,
                frame_type=structure.frame_types[display],
                temporal_id=structure.temporal_ids[display],
                qp=ep.chosen_qps[-1],
                bits=bits,
                quality=quality,
                anchor_quality=anchor_quality,
            )
        )
        total_quality += quality
        total_anchor += anchor_quality
    summary = EpisodeSummary(
        qp_level=ep.qp_level,
        budget_factor=ep.budget_factor,
        r_gop=ep.r_gop,
        total_bits=ep.bits_spent,
        total_quality=total_quality,
        total_anchor_quality=total_anchor,
        distortion_gain=total_quality - total_anchor,
        rate_deviation=abs(ep.r_gop - ep.bits_spent) / ep.r_gop,
        frames=tuple(frames),
    )
    return transitions, summary


def anchor_policy(state: StateVector) -> float:
    """The fixed reference allocation: every frame at its base QP."""
    return 0.0


def write_trace_csv(path, summary: EpisodeSummary) -> None:
    """Frame-by-frame trace with a schema comment line up top."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema: {TRACE_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["frame", "type", "tid", "qp", "bits", "quality", "anchor_quality"]
        )
        for f in summary.frames:
            writer.writerow(
                [
                    f.display,
                    f.frame_type,
                    f.temporal_id,
                    format(f.qp, ".10g"),
                    format(f.bits, ".10g"),
                    format(f.quality, ".10g"),
                    format(f.anchor_quality, ".10g"),
                ]
            )


class GopEnvironment:
    """A pool of GOP models cycled with budget factors and rate points.

    ``episode_setup(i)`` deterministically walks the cross product of
    (model, qp_level, budget_factor), so training sees every combination
    equally often and reruns are bit-identical.
    """

    def __init__(
        self,
        models: Sequence[GopModel],
        qp_levels: Sequence[float],
        budget_factors: Sequence[float] = (0.8, 1.0, 1.2),
        profile: str = "custom",
        seed: int = 0,
    ):
        if not models:
            raise ValueError("need at least one GOP model")
        self.models = tuple(models)
        self.qp_levels = tuple(float(q) for q in qp_levels)
        self.budget_factors = tuple(float(f) for f in budget_factors)
        self.profile = profile
        self.seed = seed
        self.structure = self.models[0].structure
        self._combos = [
            (m, lvl, f)
            for m in self.models
            for lvl in self.qp_levels
            for f in self.budget_factors
        ]

    @property
    def n_frames(self) -> int:
        return self.structure.size

    @property
    def n_instances(self) -> int:
        return len(self._combos)

    def episode_setup(self, index: int) -> tuple[GopModel, EpisodeState]:
        model, level, factor = self._combos[index % len(self._combos)]
        return model, fresh_episode(model, level, factor)

    def eval_instances(self) -> list[tuple[GopModel, EpisodeState]]:
        """One fresh episode per (model, level, factor) combination."""
        return [
            (m, fresh_episode(m, lvl, f)) for m, lvl, f in self._combos
        ]

    def describe(self) -> dict:
        return {
            "profile": self.profile,
            "seed": self.seed,
            "pool_size": len(self.models),
            "qp_levels": list(self.qp_levels),
            "budget_factors": list(self.budget_factors),
            "n_frames": self.n_frames,
            "structure": "chain" if self.structure.size < 16 else "hierarchical",
        }


def make_environment(
    profile: str,
    qp_levels: Sequence[float],
    seed: int,
    pool_size: int = 4,
    budget_factors: Sequence[float] = (0.8, 1.0, 1.2),
    structure: GopStructure | None = None,
) -> GopEnvironment:
    """Build the model pool for one profile from a single seed."""
    children = np.random.SeedSequence(int(seed)).generate_state(pool_size)
    models = [
        build_gop_model(int(child), profile, structure) for child in children
    ]
    return GopEnvironment(
        models, qp_levels, budget_factors, profile=profile, seed=seed
    )
