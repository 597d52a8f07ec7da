"""Procedural multi-person motion dataset with templated descriptions.

Clips are built on a 7-joint toy skeleton (root, chest, head, two hands, two
feet) whose joints are always placed exactly one bone length from their
parent, so clean clips satisfy the bone-length loss exactly. Six single-person
primitives and five two-or-more-person interaction patterns cover the class
vocabulary; per-clip randomness (start pose, speeds, phases, template choice,
and a constant per-joint position offset of sigma units) makes the
distribution non-degenerate while keeping each clip smooth.

Records serialize to newline-delimited JSON with all floats rounded to 9
significant digits; generation is a pure function of (seed, record index), so
reruns are byte-identical and records may be produced in parallel.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, ValidationError
from .motion import (
    MotionSeq,
    SkeletonDef,
    assemble_motion,
    matrix_to_rot6d,
    validate_motion,
)

PRIMITIVES = ("stand", "walk_forward", "walk_circle", "wave", "squat", "kick")
PATTERNS = ("approach", "follow", "circle_around", "mirror", "high_five")

# local frame: x lateral (left negative), y up, z forward
_HAND_L = np.array([-0.25, -0.9, 0.0])
_HAND_R = np.array([0.25, -0.9, 0.0])
_FOOT_LAT = 0.17
_FOOT_DOWN = 0.98
_LEG = 0.9
_ARM = 0.6
REST_ROOT_HEIGHT = _LEG * _FOOT_DOWN / math.hypot(_FOOT_LAT, _FOOT_DOWN)


def skeleton_preset(name: str = "toy7") -> SkeletonDef:
    if name != "toy7":
        raise ValidationError(f"unknown skeleton preset {name!r}")
    return SkeletonDef(
        joint_count=7,
        parent=(-1, 0, 1, 1, 1, 0, 0),
        bone_length=(0.5, 0.3, 0.6, 0.6, 0.9, 0.9),
        foot_joints=(5, 5, 6, 6),
        fps=20.0,
    )


PRIMITIVE_TEXTS = {
    "stand": (
        "a person stands still",
        "someone stands in place without moving",
        "a person holds a calm standing pose",
    ),
    "walk_forward": (
        "a person walks forward in a straight line",
        "someone strides straight ahead",
        "a person walks ahead at a steady pace",
    ),
    "walk_circle": (
        "a person walks along a circular path",
        "someone walks round in a circle",
        "a person circles the floor while walking",
    ),
    "wave": (
        "a person waves one hand in greeting",
        "someone raises a hand and waves",
        "a person waves at somebody",
    ),
    "squat": (
        "a person squats down and rises repeatedly",
        "someone performs deep squats",
        "a person bends the knees into squats",
    ),
    "kick": (
        "a person kicks forward with one leg",
        "someone snaps a kick into the air",
        "a person throws quick kicks",
    ),
}

ROLE_TEXTS = {
    ("approach", 0): (
        "a person walks toward the other to meet",
        "a person closes the gap toward the other",
        "a person steps closer to meet the other",
    ),
    ("approach", 1): (
        "a person advances to meet the first",
        "a person comes forward to meet",
        "a person moves in until they meet",
    ),
    ("follow", 0): (
        "a person leads the way walking forward",
        "a person walks ahead as the leader",
        "a person sets the pace in front",
    ),
    ("follow", 1): (
        "a person follows close behind the leader",
        "a person trails after the one in front",
        "a person keeps behind and follows",
    ),
    ("circle_around", 0): (
        "a person stands while another circles them",
        "a person stays in place at the center",
        "a person holds still in the middle",
    ),
    ("circle_around", 1): (
        "a person walks circles around the other",
        "a person orbits around the one standing",
        "a person loops around the other person",
    ),
    ("mirror", 1): (
        "a person mirrors the other's movements",
        "a person copies the other like a mirror",
        "a person imitates the other in mirror image",
    ),
    ("high_five", 0): (
        "a person walks up and gives a high five",
        "a person approaches and claps a high five",
        "a person reaches out for a high five",
    ),
    ("high_five", 1): (
        "a person steps in and returns the high five",
        "a person meets the other's hand for a high five",
        "a person raises a hand to slap a high five",
    ),
}

INTERACTIVE_TEXTS = {
    "approach": (
        "{count} people walk toward each other and meet",
        "{count} people approach until they stand close",
        "{count} people close in and meet face to face",
    ),
    "follow": (
        "{count} people walk in a line, each following the one ahead",
        "{count} people follow the leader across the floor",
        "{count} people walk single file behind a leader",
    ),
    "circle_around": (
        "{count} people interact, one standing while the others circle around",
        "{count} people form a scene of circling around one person",
        "{count} people move with one at the center and the rest orbiting",
    ),
    "mirror": (
        "{count} people mirror each other's movements",
        "{count} people move in mirror image of one another",
        "{count} people copy each other like reflections",
    ),
    "high_five": (
        "{count} people walk together and exchange high fives",
        "{count} people meet and slap a high five",
        "{count} people come together for a high five",
    ),
}

_COUNT_WORDS = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six"}


@dataclass(frozen=True)
class GeneratorConfig:
    """Knobs for dataset generation; weights select primitives and patterns."""

    seed: int = 0
    n_samples: int = 2200
    frames: int = 32
    n_persons: int = 2
    skeleton: str = "toy7"
    train_fraction: float = 10.0 / 11.0
    noise_sigma: float = 0.01
    primitive_weights: dict = field(
        default_factory=lambda: {k: 1.0 for k in PRIMITIVES}
    )
    pattern_weights: dict = field(default_factory=lambda: {k: 1.0 for k in PATTERNS})

    def __post_init__(self):
        if self.n_samples < 1 or self.frames < 8 or self.n_persons < 1:
            raise ValidationError("n_samples >= 1, frames >= 8, n_persons >= 1 required")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError(
                f"train_fraction must lie strictly between 0 and 1, got {self.train_fraction}"
            )
        for table, names in ((self.primitive_weights, PRIMITIVES), (self.pattern_weights, PATTERNS)):
            vals = [float(table.get(k, 0.0)) for k in names]
            if min(vals) < 0 or sum(vals) == 0:
                raise ValidationError("weights must be non-negative and not all zero")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


@dataclass
class SampleRecord:
    """One dataset entry: N motions, their texts, and a split tag."""

    id: str
    motions: list[MotionSeq]
    texts_single: list[str]
    text_interactive: str
    split: str

    @property
    def n_persons(self) -> int:
        return len(self.motions)

    def validate(self):
        if len(self.motions) != len(self.texts_single):
            raise DatasetError(f"record {self.id}: motions/texts length mismatch")
        if self.split not in ("train", "test"):
            raise DatasetError(f"record {self.id}: bad split {self.split!r}")
        f = self.motions[0].frames
        for m in self.motions:
            if m.frames != f:
                raise DatasetError(f"record {self.id}: motions disagree on frame count")
            validate_motion(m)


# ---------------------------------------------------------------------------
# pose construction


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _apply_yaw(theta: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """Rotate local-frame vectors (F x 3) by per-frame yaw angles."""
    c, s = np.cos(theta), np.sin(theta)
    x, y, z = vecs[..., 0], vecs[..., 1], vecs[..., 2]
    return np.stack([x * c + z * s, y, -x * s + z * c], axis=-1)


def _yaw_rot6d(theta: np.ndarray) -> np.ndarray:
    """First two columns of the yaw rotation matrix, per frame."""
    c, s = np.cos(theta), np.sin(theta)
    z = np.zeros_like(theta)
    o = np.ones_like(theta)
    return np.stack([c, z, -s, z, o, z], axis=-1)


def _build_positions(root, heading, hand_l, hand_r, foot_l, foot_r, torso_dir=None):
    """Place all joints exactly one bone length from their parent."""
    f = root.shape[0]
    pos = np.zeros((f, 7, 3))
    pos[:, 0] = root
    if torso_dir is None:
        chest = root + np.array([0.0, 0.5, 0.0])
    else:
        chest = root + 0.5 * _apply_yaw(heading, _unit(torso_dir))
    pos[:, 1] = chest
    if torso_dir is None:
        pos[:, 2] = chest + np.array([0.0, 0.3, 0.0])
    else:
        pos[:, 2] = chest + 0.3 * _apply_yaw(heading, _unit(torso_dir))
    pos[:, 3] = chest + _ARM * _apply_yaw(heading, _unit(hand_l))
    pos[:, 4] = chest + _ARM * _apply_yaw(heading, _unit(hand_r))
    pos[:, 5] = root + _LEG * _apply_yaw(heading, _unit(foot_l))
    pos[:, 6] = root + _LEG * _apply_yaw(heading, _unit(foot_r))
    return pos


def _build_rotations(heading: np.ndarray) -> np.ndarray:
    """Yaw rotations on root and chest, identity elsewhere."""
    f = heading.shape[0]
    rot = np.tile(np.array([1.0, 0, 0, 0, 1.0, 0]), (f, 7, 1))
    yaw = _yaw_rot6d(heading)
    rot[:, 0] = yaw
    rot[:, 1] = yaw
    return rot


def _static_dirs(f: int):
    hand_l = np.tile(_HAND_L, (f, 1))
    hand_r = np.tile(_HAND_R, (f, 1))
    foot_l = np.tile([-_FOOT_LAT, -_FOOT_DOWN, 0.0], (f, 1))
    foot_r = np.tile([_FOOT_LAT, -_FOOT_DOWN, 0.0], (f, 1))
    return hand_l, hand_r, foot_l, foot_r


def _gait_dirs(f: int, fps: float, speeds: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Alternating leg-lift directions scaled by per-frame root speed.

    Wherever the root holds exactly still the legs return to the rest
    direction bit-for-bit, so planted feet are bitwise static and register
    clean ground contacts. While the root moves, the oscillation is lateral
    and vertical only (orthogonal to travel), so foot speed never drops below
    root speed and moving feet can never be labelled as in contact.
    """
    t = np.arange(f) / fps
    freq = 1.4 + 0.2 * rng.random()
    omega = 2 * math.pi * freq
    phase = rng.uniform(0, 2 * math.pi)
    phi = omega * t + phase
    scale = np.clip(speeds / 0.6, 0.0, 1.0)
    lift_l = 0.1 * scale * np.maximum(0, np.cos(phi))
    lift_r = 0.1 * scale * np.maximum(0, -np.cos(phi))
    zero = np.zeros(f)
    foot_l = np.stack([np.full(f, -_FOOT_LAT), -_FOOT_DOWN + lift_l, zero], axis=-1)
    foot_r = np.stack([np.full(f, _FOOT_LAT), -_FOOT_DOWN + lift_r, zero], axis=-1)
    return foot_l, foot_r


def _frame_speeds(root: np.ndarray, fps: float) -> np.ndarray:
    """Per-frame root speed with the frame-0-copies-frame-1 convention."""
    d = np.linalg.norm(np.diff(root, axis=0), axis=1) * fps
    if len(d) == 0:
        return np.zeros(root.shape[0])
    return np.concatenate([[d[0]], d])


def _offset_noise(positions: np.ndarray, rng, sigma: float) -> np.ndarray:
    """Constant per-joint offset: varies the clip without roughening trajectories."""
    if sigma <= 0:
        return positions
    return positions + rng.normal(0.0, sigma, size=(1, positions.shape[1], 3))


def _pick(rng, options, weights=None) -> str:
    options = list(options)
    if weights is None:
        idx = int(rng.integers(len(options)))
    else:
        w = np.array([float(weights.get(k, 0.0)) for k in options])
        idx = int(rng.choice(len(options), p=w / w.sum()))
    return options[idx]


# ---------------------------------------------------------------------------
# single-person primitives


def _primitive_motion(kind: str, f: int, skeleton: SkeletonDef, rng):
    fps = skeleton.fps
    t = np.arange(f) / fps
    duration = (f - 1) / fps
    start = np.array([rng.uniform(-0.5, 0.5), REST_ROOT_HEIGHT, rng.uniform(-0.5, 0.5)])
    psi = rng.uniform(-math.pi, math.pi)
    hand_l, hand_r, foot_l, foot_r = _static_dirs(f)
    heading = np.full(f, psi)
    root = np.tile(start, (f, 1))

    if kind == "stand":
        pass
    elif kind == "walk_forward":
        speed = max(0.8, 0.55 / duration)
        forward = np.array([math.sin(psi), 0.0, math.cos(psi)])
        root = start + speed * t[:, None] * forward
        foot_l, foot_r = _gait_dirs(f, fps, np.full(f, speed), rng)
    elif kind == "walk_circle":
        radius = rng.uniform(0.8, 1.4)
        speed = max(0.8, 0.55 / duration)
        alpha = psi + speed / radius * t
        center = start - radius * np.array([math.sin(psi), 0.0, math.cos(psi)])
        root = center + radius * np.stack(
            [np.sin(alpha), np.zeros(f), np.cos(alpha)], axis=-1
        )
        heading = alpha + math.pi / 2
        foot_l, foot_r = _gait_dirs(f, fps, np.full(f, speed), rng)
    elif kind == "wave":
        side = 4 if rng.random() < 0.5 else 3
        omega = 2 * math.pi * 1.5 / duration
        y = 0.55 + 0.25 * np.sin(omega * t)
        x = 0.35 if side == 4 else -0.35
        dirs = np.stack([np.full(f, x), y, np.full(f, 0.15)], axis=-1)
        if side == 4:
            hand_r = dirs
        else:
            hand_l = dirs
    elif kind == "squat":
        # crouch by pitching the torso; root and feet stay planted so the
        # grounded contacts are exactly still
        omega = 2 * math.pi * rng.uniform(1.0, 1.5) / duration
        bend = rng.uniform(0.7, 1.0) * 0.5 * (1 - np.cos(omega * t))
        torso = np.stack([np.zeros(f), np.cos(bend), np.sin(bend)], axis=-1)
        hand_fwd = np.sin(bend)
        hand_l = np.stack([np.full(f, -0.25), -0.9 + 0.7 * hand_fwd, 0.5 * hand_fwd], axis=-1)
        hand_r = np.stack([np.full(f, 0.25), -0.9 + 0.7 * hand_fwd, 0.5 * hand_fwd], axis=-1)
        positions = _build_positions(root, heading, hand_l, hand_r, foot_l, foot_r,
                                     torso_dir=torso)
        return positions, _build_rotations(heading)
    elif kind == "kick":
        side = 6 if rng.random() < 0.5 else 5
        omega = 2 * math.pi * rng.uniform(1.0, 1.5) / duration
        swing = np.maximum(0.0, np.sin(omega * t))
        # dead zone: the foot leaves its exact rest pose with a jump, so it is
        # never simultaneously slow and near the ground
        swing = np.where(swing < 0.05, 0.0, swing)
        lat = _FOOT_LAT if side == 6 else -_FOOT_LAT
        dirs = np.stack(
            [np.full(f, lat), -_FOOT_DOWN + 0.75 * swing, 0.9 * swing], axis=-1
        )
        if side == 6:
            foot_r = dirs
        else:
            foot_l = dirs
    else:
        raise ValidationError(f"unknown primitive kind {kind!r}")

    positions = _build_positions(root, heading, hand_l, hand_r, foot_l, foot_r)
    rotations = _build_rotations(heading)
    return positions, rotations


def generate_primitive(
    kind: str,
    frames: int,
    seed,
    skeleton: SkeletonDef | None = None,
    noise_sigma: float = 0.01,
) -> tuple[MotionSeq, str]:
    """One single-person clip of the given kind plus a description."""
    if frames < 8:
        raise ValidationError("frames must be >= 8")
    if kind not in PRIMITIVES:
        raise ValidationError(f"unknown primitive kind {kind!r}")
    skeleton = skeleton or skeleton_preset()
    rng = np.random.default_rng(seed)
    positions, rotations = _primitive_motion(kind, frames, skeleton, rng)
    positions = _offset_noise(positions, rng, noise_sigma)
    text = PRIMITIVE_TEXTS[kind][int(rng.integers(3))]
    return assemble_motion(positions, rotations, skeleton), text


# ---------------------------------------------------------------------------
# interaction patterns


def _reflect_positions(positions: np.ndarray, plane_x: float) -> np.ndarray:
    out = positions.copy()
    out[..., 0] = 2.0 * plane_x - out[..., 0]
    return out


def _reflect_rotations(rotations: np.ndarray) -> np.ndarray:
    from .motion import rot6d_to_matrix

    f, j, _ = rotations.shape
    s = np.diag([-1.0, 1.0, 1.0])
    out = np.empty_like(rotations)
    for fi in range(f):
        for ji in range(j):
            m = rot6d_to_matrix(rotations[fi, ji])
            out[fi, ji] = matrix_to_rot6d(s @ m @ s)
    return out


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3 - 2 * u)


def _walker(root: np.ndarray, heading: np.ndarray, fps: float, rng,
            arms=None) -> tuple[np.ndarray, np.ndarray]:
    """Body around a given root path, with gait scaled to per-frame speed."""
    f = root.shape[0]
    speeds = _frame_speeds(root, fps)
    hand_l, hand_r, foot_l, foot_r = _static_dirs(f)
    if speeds.max() > 0:
        foot_l, foot_r = _gait_dirs(f, fps, speeds, rng)
    if arms is not None:
        hand_l, hand_r = arms
    positions = _build_positions(root, heading, hand_l, hand_r, foot_l, foot_r)
    return positions, _build_rotations(heading)


def _hold_walk_hold(f: int, start: float, end: float, w0: float, w1: float) -> np.ndarray:
    """Scalar profile: exactly ``start`` before w0*f, linear to ``end`` by
    w1*f, exactly ``end`` after. Exact holds keep planted feet bitwise still."""
    i0 = max(int(round(w0 * f)), 0)
    i1 = min(max(int(round(w1 * f)), i0 + 1), f)
    out = np.empty(f)
    out[:i0] = start
    ramp = np.arange(i1 - i0) / max(i1 - i0 - 1, 1)
    out[i0:i1] = start + (end - start) * ramp
    out[i1:] = end
    return out


def _interaction_motion(pattern: str, n: int, f: int, skeleton: SkeletonDef,
                        rng, sigma: float, primitive_weights=None):
    fps = skeleton.fps
    t = np.arange(f) / fps
    u = np.arange(f) / (f - 1)
    persons = []

    if pattern == "approach":
        r0 = rng.uniform(1.3, 1.8)
        rf = 0.15
        base = rng.uniform(0, 2 * math.pi)
        radius = _hold_walk_hold(f, r0, rf, 0.08, 0.85)
        for k in range(n):
            beta = base + 2 * math.pi * k / n
            root = np.stack(
                [radius * math.sin(beta), np.full(f, REST_ROOT_HEIGHT),
                 radius * math.cos(beta)], axis=-1,
            )
            heading = np.full(f, beta + math.pi)
            persons.append(_walker(root, heading, fps, rng))
    elif pattern == "follow":
        psi = rng.uniform(-math.pi, math.pi)
        speed = max(0.8, 0.6 * fps / (f - 1))
        forward = np.array([math.sin(psi), 0.0, math.cos(psi)])
        lateral = np.array([math.cos(psi), 0.0, -math.sin(psi)])
        start = np.array([rng.uniform(-0.3, 0.3), REST_ROOT_HEIGHT, rng.uniform(-0.3, 0.3)])
        lag_frames = max(int(round(0.35 * fps)), 1)
        for k in range(n):
            tk = np.maximum(t - k * lag_frames / fps, 0.0)
            root = start + speed * tk[:, None] * forward + 0.35 * k * lateral
            heading = np.full(f, psi)
            persons.append(_walker(root, heading, fps, rng))
    elif pattern == "circle_around":
        center = np.array([rng.uniform(-0.3, 0.3), REST_ROOT_HEIGHT, rng.uniform(-0.3, 0.3)])
        center_heading = np.full(f, rng.uniform(-math.pi, math.pi))
        hand_l, hand_r, foot_l, foot_r = _static_dirs(f)
        persons.append(
            (
                _build_positions(np.tile(center, (f, 1)), center_heading,
                                 hand_l, hand_r, foot_l, foot_r),
                _build_rotations(center_heading),
            )
        )
        radius = rng.uniform(1.0, 1.4)
        revs = rng.uniform(0.5, 0.9)
        for k in range(1, n):
            alpha = 2 * math.pi * (revs * u + (k - 1) / max(n - 1, 1))
            root = center + radius * np.stack(
                [np.sin(alpha), np.zeros(f), np.cos(alpha)], axis=-1
            )
            heading = alpha + math.pi / 2
            persons.append(_walker(root, heading, fps, rng))
    elif pattern == "mirror":
        kind = _pick(rng, PRIMITIVES, primitive_weights)
        base_pos, base_rot = _primitive_motion(kind, f, skeleton, rng)
        base_pos = base_pos + np.array([rng.uniform(-1.5, -0.9), 0.0, 0.0])
        base_pos = _offset_noise(base_pos, rng, sigma)
        persons.append((base_pos, base_rot))
        for k in range(1, n):
            prev_pos, prev_rot = persons[k - 1]
            plane = (k - 1) * 1.2
            persons.append((_reflect_positions(prev_pos, plane), _reflect_rotations(prev_rot)))
        texts = [PRIMITIVE_TEXTS[kind][int(rng.integers(3))]]
        for k in range(1, n):
            texts.append(ROLE_TEXTS[("mirror", 1)][int(rng.integers(3))])
        return persons, texts, True
    elif pattern == "high_five":
        d0 = rng.uniform(2.4, 3.2)
        meet = 0.5
        reach_in = _smoothstep((u - 0.5) / 0.18) * (1 - _smoothstep((u - 0.82) / 0.14))
        walk = _hold_walk_hold(f, 0.0, 1.0, 0.06, 0.48)
        pairs = []
        for k in range(n):
            sign = -1.0 if k % 2 == 0 else 1.0
            row = 0.0 if n <= 2 else 0.9 * (k // 2)
            x = sign * (d0 / 2 + (meet - d0 / 2) * walk)
            root = np.stack(
                [x, np.full(f, REST_ROOT_HEIGHT), np.full(f, row)], axis=-1
            )
            heading = np.full(f, math.pi / 2 * (1.0 if sign < 0 else -1.0))
            up = 0.35 * reach_in
            fwd = 0.25 + 0.7 * reach_in
            if sign < 0:
                arm = np.stack([np.full(f, 0.25), -0.9 + (0.9 + up) * reach_in, fwd], axis=-1)
                arms = (np.tile(_HAND_L, (f, 1)), arm)
            else:
                arm = np.stack([np.full(f, -0.25), -0.9 + (0.9 + up) * reach_in, fwd], axis=-1)
                arms = (arm, np.tile(_HAND_R, (f, 1)))
            pairs.append(_walker(root, heading, fps, rng, arms=arms))
        persons = pairs
    else:
        raise ValidationError(f"unknown interaction pattern {pattern!r}")

    texts = []
    for k in range(n):
        role = min(k, 1)
        texts.append(ROLE_TEXTS[(pattern, role)][int(rng.integers(3))])
    return persons, texts, False


def generate_interaction(
    pattern: str,
    n_persons: int,
    frames: int,
    seed,
    skeleton: SkeletonDef | None = None,
    noise_sigma: float = 0.01,
    primitive_weights: dict | None = None,
) -> tuple[list[MotionSeq], list[str], str]:
    """N interacting clips, per-person role texts, and a joint description."""
    if n_persons < 2:
        raise ValidationError("interactions need at least 2 persons")
    if frames < 8:
        raise ValidationError("frames must be >= 8")
    if pattern not in PATTERNS:
        raise ValidationError(f"unknown interaction pattern {pattern!r}")
    skeleton = skeleton or skeleton_preset()
    rng = np.random.default_rng(seed)
    persons, texts, noise_done = _interaction_motion(
        pattern, n_persons, frames, skeleton, rng, noise_sigma, primitive_weights
    )
    motions = []
    for pos, rot in persons:
        if not noise_done:
            pos = _offset_noise(pos, rng, noise_sigma)
        motions.append(assemble_motion(pos, rot, skeleton))
    count = _COUNT_WORDS.get(n_persons, str(n_persons))
    interactive = INTERACTIVE_TEXTS[pattern][int(rng.integers(3))].format(count=count)
    return motions, texts, interactive


# ---------------------------------------------------------------------------
# dataset assembly and serialization


def _split_ids(ids: list[str], train_fraction: float) -> dict[str, str]:
    """Deterministic split by hash rank with largest-remainder counts."""
    n = len(ids)
    quota_train = train_fraction * n
    quota_test = (1.0 - train_fraction) * n
    n_train, n_test = int(quota_train), int(quota_test)
    if n_train + n_test < n:
        if quota_train - n_train >= quota_test - n_test:
            n_train += 1
        else:
            n_test += 1
    ranked = sorted(ids, key=lambda s: hashlib.sha256(s.encode()).hexdigest())
    return {rid: ("train" if i < n_train else "test") for i, rid in enumerate(ranked)}


def generate_records(config: GeneratorConfig) -> list[SampleRecord]:
    skeleton = skeleton_preset(config.skeleton)
    ids = [f"{config.seed}-{i:06d}" for i in range(config.n_samples)]
    split = _split_ids(ids, config.train_fraction)
    records = []
    for i, rid in enumerate(ids):
        rng = np.random.default_rng((int(config.seed) & 0xFFFFFFFFFFFFFFFF, i))
        if config.n_persons == 1:
            kind = _pick(rng, PRIMITIVES, config.primitive_weights)
            motion, text = generate_primitive(
                kind, config.frames, rng, skeleton, config.noise_sigma
            )
            motions, texts, interactive = [motion], [text], ""
        else:
            pattern = _pick(rng, PATTERNS, config.pattern_weights)
            motions, texts, interactive = generate_interaction(
                pattern, config.n_persons, config.frames, rng, skeleton,
                config.noise_sigma, config.primitive_weights,
            )
        records.append(
            SampleRecord(
                id=rid, motions=motions, texts_single=texts,
                text_interactive=interactive, split=split[rid],
            )
        )
    return records


def record_to_json(record: SampleRecord) -> str:
    """Serialize one record; every float is written with 9 significant digits."""
    first = record.motions[0]

    def fmt(v: float) -> str:
        return format(v, ".9g")

    motions = "[%s]" % ",".join(
        "[%s]" % ",".join(
            "[%s]" % ",".join(map(fmt, frame)) for frame in m.data.tolist()
        )
        for m in record.motions
    )
    return (
        '{"id":%s,"n_persons":%d,"F":%d,"J":%d,"fps":%s,"motions":%s,'
        '"texts_single":%s,"text_interactive":%s,"split":%s}'
        % (
            json.dumps(record.id),
            record.n_persons,
            first.frames,
            first.skeleton.joint_count,
            fmt(first.skeleton.fps),
            motions,
            json.dumps(record.texts_single),
            json.dumps(record.text_interactive),
            json.dumps(record.split),
        )
    )


def write_dataset(records: list[SampleRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for record in records:
            fh.write(record_to_json(record))
            fh.write("\n")


def generate_dataset(config: GeneratorConfig, path: str | Path) -> list[SampleRecord]:
    """Generate records and write them as one newline-delimited JSON file."""
    records = generate_records(config)
    write_dataset(records, path)
    return records


def load_text_overrides(path: str | Path) -> dict[str, tuple[list[str], str]]:
    """External (interactive, per-person) text triples keyed by record id.

    The file uses the same newline-delimited JSON shape with fields
    id / texts_single / text_interactive, so splits produced by a real
    language model can replace the templated ones.
    """
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out[obj["id"]] = (list(obj["texts_single"]), obj.get("text_interactive", ""))
    return out


def load_dataset(
    path: str | Path,
    skeleton: SkeletonDef | None = None,
    text_overrides: dict[str, tuple[list[str], str]] | None = None,
    split: str | None = None,
) -> list[SampleRecord]:
    skeleton = skeleton or skeleton_preset()
    records = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"{path}:{ln}: bad JSON ({e})") from e
            if obj.get("J") != skeleton.joint_count:
                raise DatasetError(
                    f"{path}:{ln}: record J={obj.get('J')} does not match skeleton "
                    f"J={skeleton.joint_count}"
                )
            texts = list(obj["texts_single"])
            interactive = obj.get("text_interactive", "")
            if text_overrides and obj["id"] in text_overrides:
                texts, interactive = text_overrides[obj["id"]]
            motions = [
                MotionSeq(np.asarray(m, dtype=np.float64), skeleton)
                for m in obj["motions"]
            ]
            if len(motions) != int(obj["n_persons"]) or len(texts) != len(motions):
                raise DatasetError(f"{path}:{ln}: inconsistent person count")
            rec = SampleRecord(
                id=obj["id"], motions=motions, texts_single=texts,
                text_interactive=interactive, split=obj["split"],
            )
            if split is None or rec.split == split:
                records.append(rec)
    return records
