"""Per-frame motion representation and kinematic helpers.

A motion clip for one person is a dense ``F x D`` array with a fixed channel
layout per frame, ``D = 12J + 4``:

    [0,   3J)   global joint positions (world frame, y-up)
    [3J,  6J)   global joint velocities (units / second)
    [6J, 12J)   local joint rotations, 6D continuous parameterization
    [12J, 12J+4) binary foot-ground contact flags (L-heel, L-toe, R-heel, R-toe)

Keeping global positions (rather than root-relative ones) preserves the
spatial relationship between people, which is what the multi-person
conditioning operates on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotationError, ValidationError

UP_AXIS = 1  # y-up world

DEGENERATE_EPS = 1e-8
DEFAULT_HEIGHT_THRESH = 0.05
DEFAULT_SPEED_THRESH = 0.2
VELOCITY_TOL = 1e-5


def pose_dim(joint_count: int) -> int:
    """Channel count of one frame: 3J positions + 3J velocities + 6J rotations + 4 contacts."""
    if joint_count < 1:
        raise ValidationError(f"joint_count must be >= 1, got {joint_count}")
    return 12 * joint_count + 4


@dataclass(frozen=True)
class SkeletonDef:
    """Static skeleton description: topology, bone lengths, foot joints, frame rate.

    ``parent[j]`` is the parent joint index with -1 for the single root.
    ``bone_length[j-1]`` is the length of the bone ending at non-root joint j
    (indexed in joint order, root excluded). ``foot_joints`` always has 4
    entries (L-heel, L-toe, R-heel, R-toe); duplicate a joint when the
    skeleton has a single joint per foot.
    """

    joint_count: int
    parent: tuple[int, ...]
    bone_length: tuple[float, ...]
    foot_joints: tuple[int, int, int, int]
    fps: float = 20.0

    def __post_init__(self):
        j = self.joint_count
        if j < 1:
            raise ValidationError("joint_count must be >= 1")
        if len(self.parent) != j:
            raise ValidationError("parent array length must equal joint_count")
        roots = [i for i, p in enumerate(self.parent) if p == -1]
        if len(roots) != 1:
            raise ValidationError("skeleton must have exactly one root (parent == -1)")
        for i, p in enumerate(self.parent):
            if p != -1 and not 0 <= p < j:
                raise ValidationError(f"parent index {p} of joint {i} out of range")
        # walk each joint to the root; a cycle never terminates within j hops
        for i in range(j):
            seen = 0
            k = i
            while k != -1:
                k = self.parent[k]
                seen += 1
                if seen > j:
                    raise ValidationError("parent array contains a cycle")
        if len(self.bone_length) != j - 1:
            raise ValidationError("bone_length must have joint_count - 1 entries")
        if any(b <= 0 for b in self.bone_length):
            raise ValidationError("bone lengths must be strictly positive")
        if len(self.foot_joints) != 4:
            raise ValidationError("foot_joints must have exactly 4 entries")
        if any(not 0 <= f < j for f in self.foot_joints):
            raise ValidationError("foot_joints indices out of range")
        if self.fps <= 0:
            raise ValidationError("fps must be positive")

    @property
    def pose_dim(self) -> int:
        return pose_dim(self.joint_count)

    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) pairs for each non-root joint, in joint order."""
        return [(p, i) for i, p in enumerate(self.parent) if p != -1]


@dataclass
class MotionSeq:
    """One person's motion clip: an ``F x D`` array plus its skeleton."""

    data: np.ndarray
    skeleton: SkeletonDef

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValidationError("motion data must be a 2-D array")
        if self.data.shape[1] != self.skeleton.pose_dim:
            raise ValidationError(
                f"motion has {self.data.shape[1]} channels, expected "
                f"{self.skeleton.pose_dim} for J={self.skeleton.joint_count}"
            )
        if self.data.shape[0] < 2:
            raise ValidationError("motion must have at least 2 frames")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    # channel-group accessors; slices of the canonical layout
    def get_positions(self) -> np.ndarray:
        j = self.skeleton.joint_count
        return self.data[:, : 3 * j].reshape(self.frames, j, 3)

    def get_velocities(self) -> np.ndarray:
        j = self.skeleton.joint_count
        return self.data[:, 3 * j : 6 * j].reshape(self.frames, j, 3)

    def get_rotations(self) -> np.ndarray:
        j = self.skeleton.joint_count
        return self.data[:, 6 * j : 12 * j].reshape(self.frames, j, 6)

    def get_contacts(self) -> np.ndarray:
        j = self.skeleton.joint_count
        return self.data[:, 12 * j : 12 * j + 4]


@dataclass
class SpatialSignal:
    """Desired global joint positions plus an observation mask.

    ``targets`` is ``F x J x 3``; ``observed`` is ``F x J`` with 1 marking a
    constrained (frame, joint) pair. Target values are only required to be
    finite where observed.
    """

    targets: np.ndarray
    observed: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.observed = np.asarray(self.observed, dtype=np.float64)
        if self.targets.ndim != 3 or self.targets.shape[2] != 3:
            raise ValidationError("targets must have shape F x J x 3")
        if self.observed.shape != self.targets.shape[:2]:
            raise ValidationError("observed mask must have shape F x J")
        if not np.isin(self.observed, (0.0, 1.0)).all():
            raise ValidationError("observed mask must be binary")
        if not np.isfinite(self.targets[self.observed > 0]).all():
            raise ValidationError("targets must be finite where observed")

    @property
    def frames(self) -> int:
        return self.targets.shape[0]

    @property
    def joints(self) -> int:
        return self.targets.shape[1]


def rot6d_to_matrix(r: np.ndarray) -> np.ndarray:
    """Orthonormalize a 6D rotation (two stacked 3-vectors) into a matrix.

    Gram-Schmidt: b1 = a1/|a1|, b2 = normalized rejection of a2 from b1,
    b3 = b1 x b2. The 6 numbers are the first two matrix columns, so
    (1,0,0, 0,1,0) is the identity.
    """
    r = np.asarray(r, dtype=np.float64).reshape(6)
    a1, a2 = r[:3], r[3:]
    n1 = np.linalg.norm(a1)
    if n1 <= DEGENERATE_EPS:
        raise DegenerateRotationError("first 6D rotation vector is near zero")
    b1 = a1 / n1
    a2p = a2 - (a2 @ b1) * b1
    n2 = np.linalg.norm(a2p)
    if n2 <= DEGENERATE_EPS:
        raise DegenerateRotationError("6D rotation vectors are near parallel")
    b2 = a2p / n2
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def matrix_to_rot6d(m: np.ndarray) -> np.ndarray:
    """Inverse convention of :func:`rot6d_to_matrix`: first two columns, stacked."""
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[:, 0], m[:, 1]])


IDENTITY_ROT6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


def compute_velocities(positions: np.ndarray, fps: float) -> np.ndarray:
    """Backward finite-difference velocities scaled by fps; frame 0 copies frame 1."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[0] < 2:
        raise ValidationError("need at least 2 frames to compute velocities")
    vel = np.empty_like(positions)
    vel[1:] = (positions[1:] - positions[:-1]) * fps
    vel[0] = vel[1]
    return vel


def detect_foot_contacts(
    positions: np.ndarray,
    skeleton: SkeletonDef,
    height_thresh: float = DEFAULT_HEIGHT_THRESH,
    speed_thresh: float = DEFAULT_SPEED_THRESH,
) -> np.ndarray:
    """Label a foot joint as in contact when it is both low and slow.

    ``positions`` is ``F x J x 3`` or flat ``F x 3J``. Returns ``F x 4``
    binary flags in foot_joints order.
    """
    if height_thresh <= 0 or speed_thresh <= 0:
        raise ValidationError("contact thresholds must be positive")
    positions = np.asarray(positions, dtype=np.float64)
    f = positions.shape[0]
    j = skeleton.joint_count
    positions = positions.reshape(f, j, 3)
    vel = compute_velocities(positions.reshape(f, 3 * j), skeleton.fps).reshape(f, j, 3)
    contacts = np.zeros((f, 4))
    for c, joint in enumerate(skeleton.foot_joints):
        height = positions[:, joint, UP_AXIS]
        speed = np.linalg.norm(vel[:, joint], axis=1)
        contacts[:, c] = ((height < height_thresh) & (speed < speed_thresh)).astype(np.float64)
    return contacts


def assemble_motion(
    positions: np.ndarray,
    rotations: np.ndarray,
    skeleton: SkeletonDef,
    contacts: np.ndarray | None = None,
) -> MotionSeq:
    """Pack positions (F x J x 3) and 6D rotations (F x J x 6) into a MotionSeq.

    Velocity channels are derived with :func:`compute_velocities`; contacts
    default to :func:`detect_foot_contacts` on the given positions.
    """
    positions = np.asarray(positions, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    f = positions.shape[0]
    j = skeleton.joint_count
    if positions.shape != (f, j, 3):
        raise ValidationError(f"positions must have shape ({f}, {j}, 3)")
    if rotations.shape != (f, j, 6):
        raise ValidationError(f"rotations must have shape ({f}, {j}, 6)")
    flat_pos = positions.reshape(f, 3 * j)
    vel = compute_velocities(flat_pos, skeleton.fps)
    if contacts is None:
        contacts = detect_foot_contacts(positions, skeleton)
    contacts = np.asarray(contacts, dtype=np.float64)
    if contacts.shape != (f, 4):
        raise ValidationError(f"contacts must have shape ({f}, 4)")
    data = np.concatenate([flat_pos, vel, rotations.reshape(f, 6 * j), contacts], axis=1)
    return MotionSeq(data=data, skeleton=skeleton)


def validate_motion(
    motion: MotionSeq,
    vel_tol: float = VELOCITY_TOL,
    check_velocity: bool = True,
) -> None:
    """Raise ValidationError unless the clip satisfies every layout invariant.

    Checks: finite values, binary contacts, and (unless disabled) velocity
    channels consistent with finite differences of the position channels.
    Network samples are only required to pass with ``check_velocity=False``
    until their velocity channels are rewritten from positions.
    """
    if not np.isfinite(motion.data).all():
        raise ValidationError("motion contains NaN or Inf")
    contacts = motion.get_contacts()
    if not np.isin(contacts, (0.0, 1.0)).all():
        raise ValidationError("contact channels must be exactly 0 or 1")
    if check_velocity:
        j = motion.skeleton.joint_count
        expected = compute_velocities(
            motion.get_positions().reshape(motion.frames, 3 * j), motion.skeleton.fps
        )
        err = np.abs(motion.get_velocities().reshape(motion.frames, 3 * j) - expected).max()
        if err > vel_tol:
            raise ValidationError(
                f"velocity channels inconsistent with positions (max error {err:.3g})"
            )
