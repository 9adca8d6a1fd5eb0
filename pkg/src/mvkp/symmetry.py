"""Finite rotational symmetry groups and the canonical-form operator.

An object with symmetry group G renders identically under poses ``(R S, t)``
for every ``S`` in G. Continuous symmetries of revolution are approximated
by the cyclic group of ``samples`` rotations about the axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, EmptyGroup
from .geometry import Pose, axis_angle

GROUP_TOL = 1e-9
CLOSURE_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class SymmetryGroup:
    elements: np.ndarray
    kind: str = "finite"
    axis: tuple | None = None
    sample_count: int | None = None
    _checked: bool = field(default=True, repr=False)

    def __post_init__(self):
        els = np.asarray(self.elements, dtype=float).reshape(-1, 3, 3)
        object.__setattr__(self, "elements", els)
        if len(els) == 0:
            raise EmptyGroup("symmetry group has no elements")
        eye = np.eye(3)
        for S in els:
            if np.abs(S.T @ S - eye).max() > GROUP_TOL or abs(np.linalg.det(S) - 1.0) > GROUP_TOL:
                raise ConfigInvalid("symmetry elements must be proper rotations")
        if not np.any(np.abs(els - eye).reshape(len(els), -1).max(axis=1) < GROUP_TOL):
            raise ConfigInvalid("symmetry group must contain the identity")
        if self._checked:
            _check_closure(els)

    def __len__(self):
        return len(self.elements)

    @classmethod
    def trivial(cls):
        return cls(np.eye(3)[None])

    @classmethod
    def cyclic(cls, axis, order):
        if order < 1:
            raise ConfigInvalid("cyclic order must be >= 1")
        els = [axis_angle(axis, 2 * np.pi * k / order) if k else np.eye(3) for k in range(order)]
        return cls(np.stack(els), "finite", tuple(np.asarray(axis, float) / np.linalg.norm(axis)), None)

    @classmethod
    def revolution(cls, axis, sample_count=36):
        g = cls.cyclic(axis, sample_count)
        return cls(g.elements, "discretized-revolution", g.axis, int(sample_count), _checked=False)

    @classmethod
    def from_config(cls, cfg):
        """Build from a config mapping.

        Accepted forms: ``{"matrices": [...]}``, ``{"axis": [..], "order": n}``
        or ``{"axis": [..], "revolution": true, "samples": n}``. An empty or
        missing mapping is the trivial group.
        """
        if not cfg:
            return cls.trivial()
        if "matrices" in cfg:
            return cls(np.asarray(cfg["matrices"], dtype=float))
        if "axis" not in cfg:
            raise ConfigInvalid("symmetry: expected 'matrices' or 'axis'")
        axis = np.asarray(cfg["axis"], dtype=float)
        if axis.shape != (3,) or np.linalg.norm(axis) == 0:
            raise ConfigInvalid("symmetry.axis must be a nonzero 3-vector")
        if cfg.get("revolution"):
            return cls.revolution(axis, int(cfg.get("samples", 36)))
        return cls.cyclic(axis, int(cfg.get("order", 1)))

    def to_config(self):
        if self.kind == "discretized-revolution":
            return {"axis": list(self.axis), "revolution": True, "samples": self.sample_count}
        return {"matrices": self.elements.tolist()}


def _check_closure(els):
    flat = els.reshape(len(els), 9)
    for A in els:
        prods = np.einsum("ij,njk->nik", A, els).reshape(len(els), 9)
        d = np.abs(prods[:, None, :] - flat[None, :, :]).max(axis=2).min(axis=1)
        if d.max() > CLOSURE_TOL:
            raise ConfigInvalid("symmetry group is not closed under composition")


def closest_symmetry(R, group: SymmetryGroup):
    """Group element minimising ``||S^-1 R - I||_F``; ties go to the lower index."""
    if group is None or len(group.elements) == 0:
        raise EmptyGroup("empty symmetry group")
    R = np.asarray(R, dtype=float)
    resid = np.linalg.norm(np.einsum("nji,jk->nik", group.elements, R) - np.eye(3), axis=(1, 2))
    idx = int(np.argmin(resid))
    return group.elements[idx], idx


def canonicalize(R, group: SymmetryGroup):
    """Map a rotation to ``S^-1 R`` for the closest group element S."""
    S, _ = closest_symmetry(R, group)
    return S.T @ np.asarray(R, dtype=float)


def equivalent_poses(pose: Pose, group: SymmetryGroup):
    return [Pose(pose.rotation @ S, pose.translation) for S in group.elements]


def canonical_pose(pose: Pose, group: SymmetryGroup):
    """Representative of ``{(R S, t)}`` closest to the identity rotation."""
    R = canonicalize(pose.rotation.T, group).T
    return Pose(R, pose.translation)
