"""Articulated bodies and a differentiable forward-kinematics transition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ConfigurationError, Tensor

# Elementary rotation about axis k is  R = E0[k] + cos(t) * EC[k] + sin(t) * ES[k].
_E0 = np.zeros((3, 3, 3))
_EC = np.zeros((3, 3, 3))
_ES = np.zeros((3, 3, 3))
for _k in range(3):
    _i, _j = [a for a in range(3) if a != _k]
    _E0[_k, _k, _k] = 1.0
    _EC[_k, _i, _i] = _EC[_k, _j, _j] = 1.0
    # right-handed: X rotates y->z, Y rotates z->x, Z rotates x->y
    _ES[_k, _i, _j] = -1.0 if _k != 1 else 1.0
    _ES[_k, _j, _i] = 1.0 if _k != 1 else -1.0

_AXIS = {"X": 0, "Y": 1, "Z": 2}


@dataclass(frozen=True)
class BodyTopology:
    """Kinematic tree. ``parents[0] == -1``; every other parent precedes its child."""

    parents: tuple
    offsets: np.ndarray  # (J, 3) link offset from parent, feet
    reference: np.ndarray  # (J, 3) rotations of the reference pose, radians
    euler_order: str = "XYZ"

    def __post_init__(self):
        J = len(self.parents)
        if J < 1:
            raise ConfigurationError("topology needs at least one joint")
        if self.parents[0] != -1:
            raise ConfigurationError("joint 0 must be the root (parent -1)")
        for j in range(1, J):
            if not 0 <= self.parents[j] < j:
                raise ConfigurationError(
                    f"joint {j} has parent {self.parents[j]}; parents must precede children"
                )
        offsets = np.asarray(self.offsets, dtype=np.float64)
        reference = np.asarray(self.reference, dtype=np.float64)
        if offsets.shape != (J, 3) or reference.shape != (J, 3):
            raise ConfigurationError(
                f"offsets {offsets.shape} / reference {reference.shape} must be ({J}, 3)"
            )
        order = self.euler_order.upper()
        if sorted(order) != ["X", "Y", "Z"]:
            raise ConfigurationError(f"euler order must permute XYZ, got {self.euler_order!r}")
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "reference", np.mod(reference, dc.TWO_PI))
        object.__setattr__(self, "euler_order", order)

    @property
    def joints(self):
        return len(self.parents)

    @property
    def dof(self):
        return 3 * self.joints

    @property
    def state_dim(self):
        """Positions plus rotations for all joints."""
        return 6 * self.joints

    def with_euler_order(self, order):
        return BodyTopology(self.parents, self.offsets, self.reference, order)

    def reference_pose(self, batch=None):
        rot = self.reference if batch is None else np.broadcast_to(
            self.reference, (batch,) + self.reference.shape
        ).copy()
        rot = Tensor(rot)
        return Pose(rot, fk_positions(rot, self))

    def metadata(self):
        return {
            "joints": self.joints,
            "parents": list(self.parents),
            "offsets": self.offsets.tolist(),
            "reference": self.reference.tolist(),
            "euler_order": self.euler_order,
            "euler_convention": "intrinsic, R = R_first @ R_second @ R_third",
            "units": "feet, radians",
        }


@dataclass
class Pose:
    """Joint rotations (..., J, 3) and derived world positions (..., J, 3)."""

    rotations: Tensor
    positions: Tensor

    def flat(self):
        """State vector: all positions then all rotations, shape (..., 6J)."""
        lead = self.positions.shape[:-2]
        return dc.concat(
            [dc.reshape(self.positions, lead + (-1,)), dc.reshape(self.rotations, lead + (-1,))],
            axis=-1,
        )


def default_arm(joints=4, link_length=1.0, euler_order="XYZ"):
    """Serial chain with unit links along +x and an all-zero reference pose."""
    if joints < 1:
        raise ConfigurationError(f"joints must be >= 1, got {joints}")
    offsets = np.zeros((joints, 3))
    offsets[1:, 0] = link_length
    parents = (-1,) + tuple(range(joints - 1))
    return BodyTopology(parents, offsets, np.zeros((joints, 3)), euler_order)


def _as_joint_array(rotations, topo):
    rotations = dc.as_tensor(rotations)
    shape = rotations.shape
    if len(shape) >= 2 and shape[-2:] == (topo.joints, 3):
        return rotations
    if shape and shape[-1] == topo.dof:
        return dc.reshape(rotations, shape[:-1] + (topo.joints, 3))
    raise ConfigurationError(
        f"rotations of shape {shape} do not match a {topo.joints}-joint body"
    )


def _monomial_basis(order):
    """Constant (27, 9) map from trig monomials to the composed rotation matrix.

    With E_k(t) = E0[k] + cos(t) EC[k] + sin(t) ES[k], the product
    E_a(t_a) E_b(t_b) E_c(t_c) is linear in the 27 products f_a f_b f_c of
    the features f = (1, cos, sin).
    """
    a, b, c = (_AXIS[ch] for ch in order)
    mats = [(_E0[k], _EC[k], _ES[k]) for k in (a, b, c)]
    basis = np.zeros((3, 3, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            for k in range(3):
                basis[i, j, k] = mats[0][i] @ mats[1][j] @ mats[2][k]
    return basis.reshape(27, 9)


_BASIS_CACHE = {}


def local_rotations(rotations, topo):
    """Per-joint rotation matrices (..., J, 3, 3) from Euler angles."""
    rot = _as_joint_array(rotations, topo)
    basis = _BASIS_CACHE.get(topo.euler_order)
    if basis is None:
        basis = _BASIS_CACHE[topo.euler_order] = _monomial_basis(topo.euler_order)
    a, b, c = (_AXIS[ch] for ch in topo.euler_order)
    one = np.ones(rot.shape[:-1] + (1,))
    feats = dc.concat([one, dc.cos(rot), dc.sin(rot)], axis=-1)  # (..., J, 1+3+3)
    pick = [0, 1 + a, 4 + a], [0, 1 + b, 4 + b], [0, 1 + c, 4 + c]
    fa, fb, fc = (feats[..., idx] for idx in pick)
    lead = rot.shape[:-1]
    outer = dc.mul(
        dc.mul(dc.reshape(fa, lead + (3, 1, 1)), dc.reshape(fb, lead + (1, 3, 1))),
        dc.reshape(fc, lead + (1, 1, 3)),
    )
    mats = dc.matmul(dc.reshape(outer, (-1, 27)), basis)
    return dc.reshape(mats, lead + (3, 3))


def fk_positions(rotations, topo):
    """World joint positions (..., J, 3); the root stays at the origin."""
    local = local_rotations(rotations, topo)
    lead = local.shape[:-3]
    world = [None] * topo.joints
    pos = [None] * topo.joints
    world[0] = local[..., 0, :, :]
    pos[0] = Tensor(np.zeros(lead + (3, 1)))
    for j in range(1, topo.joints):
        p = topo.parents[j]
        offset = topo.offsets[j].reshape(3, 1)
        pos[j] = dc.add(pos[p], dc.matmul(world[p], offset))
        world[j] = dc.matmul(world[p], local[..., j, :, :])
    stacked = dc.stack(pos, axis=-3)  # (..., J, 3, 1)
    return dc.reshape(stacked, lead + (topo.joints, 3))


def fk_step(pose, action, topo):
    """Advance rotations by the angular-velocity action (dt = 1) and re-run FK."""
    action = _as_joint_array(action, topo)
    if action.shape != pose.rotations.shape:
        raise ConfigurationError(
            f"action shape {action.shape} does not match pose {pose.rotations.shape}"
        )
    rot = dc.wrap_angle(dc.add(pose.rotations, action))
    return Pose(rot, fk_positions(rot, topo))


def upsample_rotations(rotations, frames, unwrap=True):
    """Linear interpolation of a (T, ...) rotation sequence onto ``frames`` samples.

    With ``unwrap`` the angles are first unwrapped so a step across 2*pi does
    not sweep backwards around the circle; pass ``unwrap=False`` when the input
    is already continuous (e.g. cumulative actions). Output is wrapped again.
    """
    rotations = np.asarray(rotations, dtype=np.float64)
    T = rotations.shape[0]
    if T == 1 or frames == 1:
        return np.mod(np.repeat(rotations[:1], frames, axis=0), dc.TWO_PI)
    unwrapped = np.unwrap(rotations, axis=0) if unwrap else rotations
    src = np.linspace(0.0, 1.0, T)
    dst = np.linspace(0.0, 1.0, frames)
    flat = unwrapped.reshape(T, -1)
    out = np.stack([np.interp(dst, src, flat[:, k]) for k in range(flat.shape[1])], axis=1)
    return np.mod(out.reshape((frames,) + rotations.shape[1:]), dc.TWO_PI)
