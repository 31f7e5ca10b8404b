"""Quaternion helpers for pose regression.

Quaternions are stored real part first: ``(w, x, y, z)`` = ``(u, v)``.
All NumPy functions accept a single quaternion of shape ``(4,)`` or a batch
``(..., 4)``. The ``*_torch`` variants are differentiable and used by the loss.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from thermoloc.errors import DegenerateQuaternionError, InvalidQuaternionError

UNIT_TOL = 1e-6
SMALL_ANGLE = 1e-8


@dataclass
class Pose:
    """Position ``l`` in meters and canonical unit quaternion ``q`` (wxyz)."""

    l: np.ndarray
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        self.l = np.asarray(self.l, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(self.l)):
            raise ValueError("position must be finite")
        self.q = canonicalize_hemisphere(self.q)


def canonicalize_hemisphere(q):
    """Normalize and pick the sign with ``w >= 0``.

    When ``w == 0`` the first nonzero imaginary component is made positive,
    so ``q`` and ``-q`` always map to the same array.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(~np.isfinite(norm)) or np.any(norm <= 0):
        raise DegenerateQuaternionError("cannot canonicalize a zero-norm quaternion")
    q = q / norm
    flat = q.reshape(-1, 4)
    sign = np.ones(flat.shape[0])
    for i, row in enumerate(flat):
        nz = np.flatnonzero(row)
        if row[nz[0]] < 0:
            sign[i] = -1.0
    return (flat * sign[:, None]).reshape(q.shape)


def _check_unit(q):
    norm = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(norm - 1.0) > UNIT_TOL):
        raise InvalidQuaternionError(f"quaternion is not unit norm (|q| = {norm})")


def quat_log(q):
    """Map a unit quaternion to ``v / |v| * arccos(u)``.

    Near the identity (``|v| < 1e-8`` and ``u > 0``) the first-order series
    ``v / u`` is used instead, which is finite and smooth.
    """
    q = np.asarray(q, dtype=np.float64)
    _check_unit(q)
    u = q[..., :1]
    v = q[..., 1:]
    vnorm = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = np.arccos(np.clip(u, -1.0, 1.0))
    small = vnorm < SMALL_ANGLE
    safe_norm = np.where(small, 1.0, vnorm)
    general = v / safe_norm * angle
    series = np.where(u > 0, v / np.where(u > 0, u, 1.0), np.zeros_like(v))
    return np.where(small, series, general)


def quat_exp(w):
    """Inverse of :func:`quat_log` on the ball ``|w| <= pi``."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    small = theta < SMALL_ANGLE
    # sin(t)/t with a series near zero
    sinc = np.where(small, 1.0 - theta**2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
    return np.concatenate([np.cos(theta), w * sinc], axis=-1)


def angular_error_deg(q1, q2):
    """Rotation angle between two unit quaternions, in degrees, in [0, 180].

    Equal to ``2 arccos(min(1, |<q1, q2>|))``, evaluated as
    ``4 atan2(|q1 - s q2|, |q1 + s q2|)`` with ``s = sign<q1, q2>`` because the
    arccos form loses about 1e-6 degrees of precision near zero error.
    """
    q1 = np.asarray(q1, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    sign = np.where(np.sum(q1 * q2, axis=-1, keepdims=True) < 0, -1.0, 1.0)
    q2 = q2 * sign
    diff = np.linalg.norm(q1 - q2, axis=-1)
    total = np.linalg.norm(q1 + q2, axis=-1)
    return np.degrees(4.0 * np.arctan2(diff, total))


def position_error_m(l1, l2):
    return np.linalg.norm(np.asarray(l1, dtype=np.float64) - np.asarray(l2, dtype=np.float64), axis=-1)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[math.cos(angle / 2)], axis * math.sin(angle / 2)])


def quat_multiply(q1, q2):
    w1, x1, y1, z1 = np.moveaxis(np.asarray(q1, dtype=np.float64), -1, 0)
    w2, x2, y2, z2 = np.moveaxis(np.asarray(q2, dtype=np.float64), -1, 0)
    return np.stack([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ], axis=-1)


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


# -- differentiable versions -------------------------------------------------


def canonicalize_torch(q):
    """Batched hemisphere canonicalization of unit quaternions ``(..., 4)``.

    The tie-break for ``w == 0`` matches :func:`canonicalize_hemisphere`.
    """
    sign = torch.ones_like(q[..., :1])
    decided = torch.zeros_like(q[..., 0], dtype=torch.bool)
    for i in range(4):
        c = q[..., i]
        take = (~decided) & (c != 0)
        sign = torch.where((take & (c < 0)).unsqueeze(-1), -torch.ones_like(sign), sign)
        decided = decided | take
    return q * sign


def quat_log_torch(q):
    """Differentiable :func:`quat_log` for a batch of unit quaternions.

    The angle is computed as ``atan2(|v|, u)``, which equals ``arccos(u)`` for
    unit quaternions but keeps a finite derivative as ``u`` approaches 1.
    """
    u = q[..., :1]
    v = q[..., 1:]
    sq = (v * v).sum(dim=-1, keepdim=True)
    small = sq < SMALL_ANGLE**2
    vnorm = torch.sqrt(torch.where(small, torch.ones_like(sq), sq))
    angle = torch.atan2(vnorm, u)
    general = v / vnorm * angle
    pos = u > 0
    series = torch.where(pos, v / torch.where(pos, u, torch.ones_like(u)), torch.zeros_like(v))
    return torch.where(small, series, general)
