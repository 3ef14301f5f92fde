"""Kinematic model and conversions between joint positions and bone directions.

A pose is stored as one directional vector per bone (parent -> child), so the
representation is invariant to bone lengths and to global translation. The 2D
view of a 3D pose drops the depth axis (index 2) without renormalizing.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, ShapeMismatch, ZeroBoneLength

DEFAULT_FPS = 15.0
DEFAULT_SEQ_LEN = 34
DEPTH_AXIS = 2

DEFAULT_JOINT_NAMES = (
    "pelvis",
    "spine",
    "neck",
    "head",
    "l_shoulder",
    "l_elbow",
    "l_wrist",
    "r_shoulder",
    "r_elbow",
    "r_wrist",
)
DEFAULT_PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8)


@dataclass(frozen=True)
class SkeletonTopology:
    """Tree of joints. ``parent_of[j]`` is the parent of joint ``j`` (-1 at the root).

    Bones are ordered by child joint index, skipping the root.
    """

    parent_of: tuple[int, ...] = DEFAULT_PARENTS
    root_index: int = 0
    joint_names: tuple[str, ...] | None = DEFAULT_JOINT_NAMES
    _order: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parent_of)
        object.__setattr__(self, "parent_of", parents)
        n = len(parents)
        if n < 2:
            raise InvalidConfig("a skeleton needs at least two joints")
        if not 0 <= self.root_index < n or parents[self.root_index] != -1:
            raise InvalidConfig("root joint must exist and have parent -1")
        children: list[list[int]] = [[] for _ in range(n)]
        for j, p in enumerate(parents):
            if j == self.root_index:
                continue
            if not 0 <= p < n or p == j:
                raise InvalidConfig(f"joint {j} has invalid parent {p}")
            children[p].append(j)
        order, queue = [], deque([self.root_index])
        while queue:
            j = queue.popleft()
            order.append(j)
            queue.extend(children[j])
        if len(order) != n:
            raise InvalidConfig("parent graph is not a tree rooted at root_index")
        object.__setattr__(self, "_order", tuple(order))
        if self.joint_names is not None and len(self.joint_names) != n:
            raise InvalidConfig("joint_names length must equal joint count")

    @property
    def joint_count(self) -> int:
        return len(self.parent_of)

    @property
    def bone_count(self) -> int:
        return self.joint_count - 1

    @property
    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) pairs in bone order."""
        return [(p, c) for c, p in enumerate(self.parent_of) if c != self.root_index]

    @property
    def traversal_order(self) -> tuple[int, ...]:
        return self._order

    @classmethod
    def chain(cls, joint_count: int) -> "SkeletonTopology":
        """Serial chain 0 -> 1 -> ... -> joint_count-1."""
        return cls(parent_of=tuple(range(-1, joint_count - 1)), joint_names=None)


@dataclass(frozen=True)
class PoseSequence:
    """``data`` has shape (frames, bones, dims) with dims 2 or 3."""

    data: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] not in (2, 3):
            raise ShapeMismatch(f"pose data must be (frames, bones, 2|3), got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bone_count(self) -> int:
        return self.data.shape[1]

    @property
    def dims(self) -> int:
        return self.data.shape[2]

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.data.astype(np.float64), axis=-1)

    def validate(self, tol: float = 1e-6) -> None:
        """Check the norm invariant: exactly unit in 3D, at most unit in 2D."""
        norms = self.norms()
        if not np.all(np.isfinite(norms)):
            raise ValueError("pose data contains non-finite values")
        if self.dims == 3 and np.max(np.abs(norms - 1.0)) > tol:
            raise ValueError("3D directional vectors must have unit norm")
        if self.dims == 2 and np.max(norms) > 1.0 + tol:
            raise ValueError("2D directional vectors must have norm <= 1")


@dataclass(frozen=True)
class RawJointSequence:
    """Absolute joint positions, shape (frames, joints, 3)."""

    data: np.ndarray
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ShapeMismatch(f"joint data must be (frames, joints, 3), got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def to_directional(raw: RawJointSequence, topo: SkeletonTopology | None = None) -> PoseSequence:
    """Unit parent->child vector for every bone of every frame."""
    topo = topo or SkeletonTopology()
    if raw.data.shape[1] != topo.joint_count:
        raise ShapeMismatch(
            f"raw sequence has {raw.data.shape[1]} joints, topology has {topo.joint_count}"
        )
    parents, children = np.array(topo.bones).T
    diff = raw.data[:, children] - raw.data[:, parents]
    lengths = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(lengths < 1e-12):
        raise ZeroBoneLength("bone length below 1e-12")
    return PoseSequence(diff / lengths, raw.fps)


def from_directional(
    seq: PoseSequence,
    topo: SkeletonTopology | None = None,
    bone_lengths: Sequence[float] | np.ndarray | None = None,
) -> RawJointSequence:
    """Rebuild joint positions with the root at the origin."""
    topo = topo or SkeletonTopology()
    if seq.dims != 3:
        raise DimensionMismatch("from_directional needs 3D directional vectors")
    if seq.bone_count != topo.bone_count:
        raise ShapeMismatch("bone count does not match topology")
    lengths = (
        np.ones(topo.bone_count)
        if bone_lengths is None
        else np.asarray(bone_lengths, dtype=np.float64)
    )
    if lengths.shape != (topo.bone_count,) or np.any(lengths <= 0):
        raise ZeroBoneLength("bone lengths must be positive, one per bone")
    bone_of_child = {c: b for b, (_, c) in enumerate(topo.bones)}
    out = np.zeros((seq.frames, topo.joint_count, 3))
    data = seq.data.astype(np.float64)
    for j in topo.traversal_order:
        if j == topo.root_index:
            continue
        b = bone_of_child[j]
        out[:, j] = out[:, topo.parent_of[j]] + lengths[b] * data[:, b]
    return RawJointSequence(out, seq.fps)


def project_2d(seq: PoseSequence) -> PoseSequence:
    """Drop the depth component; vectors are not renormalized."""
    if seq.dims != 3:
        raise DimensionMismatch("project_2d needs a 3D sequence")
    return PoseSequence(seq.data[..., :DEPTH_AXIS].copy(), seq.fps)


def mirror_depth(seq: PoseSequence) -> PoseSequence:
    """Negate the depth component. Shares its 2D projection with ``seq``."""
    if seq.dims != 3:
        raise DimensionMismatch("mirror_depth needs a 3D sequence")
    data = seq.data.copy()
    data[..., DEPTH_AXIS] *= -1
    return PoseSequence(data, seq.fps)


def renormalize(data: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(data, axis=-1, keepdims=True)
    return data / np.maximum(norms, eps)
