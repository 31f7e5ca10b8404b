"""Pose regressor and the learnable-weight L1 pose loss."""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from thermoloc.errors import DegenerateQuaternionError, TrainingDivergenceError
from thermoloc.quaternion import canonicalize_torch, quat_log_torch

MIN_QUAT_NORM = 1e-12


@dataclass
class PoseEstimate:
    l: torch.Tensor       # (B, 3)
    q_raw: torch.Tensor   # (B, 4), unnormalized
    q: torch.Tensor       # (B, 4), unit norm, canonical hemisphere


def _mlp(d_in, hidden, d_out, dropout):
    return nn.Sequential(
        nn.Linear(d_in, hidden),
        nn.GELU(),
        nn.Dropout(dropout),
        nn.Linear(hidden, d_out),
    )


def normalize_quaternion(q_raw):
    norm = q_raw.norm(dim=-1, keepdim=True)
    if torch.any(norm < MIN_QUAT_NORM):
        raise DegenerateQuaternionError(
            f"regressed quaternion norm {norm.min().item():.3e} is below {MIN_QUAT_NORM}"
        )
    return canonicalize_torch(q_raw / norm)


class PoseRegressor(nn.Module):
    """Two MLPs on the pooled feature: position ``(3,)`` and raw quaternion ``(4,)``."""

    def __init__(self, d_model, hidden=None, dropout=0.0):
        super().__init__()
        hidden = hidden or d_model
        self.position = _mlp(d_model, hidden, 3, dropout)
        self.rotation = _mlp(d_model, hidden, 4, dropout)
        with torch.no_grad():
            self.rotation[-1].bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))

    def forward(self, feature):
        l = self.position(feature)
        q_raw = self.rotation(feature)
        return PoseEstimate(l=l, q_raw=q_raw, q=normalize_quaternion(q_raw))


def pose_loss(l_pred, q_pred, l_gt, q_gt, beta, gamma):
    """Batch mean of ``|l - l_gt|_1 e^-beta + beta + |log q - log q_gt|_1 e^-gamma + gamma``.

    ``q_pred`` and ``q_gt`` must be unit quaternions; both are canonicalized
    here so the double cover does not affect the value.
    """
    pos = (l_pred - l_gt).abs().sum(dim=-1)
    rot = (quat_log_torch(canonicalize_torch(q_pred))
           - quat_log_torch(canonicalize_torch(q_gt))).abs().sum(dim=-1)
    return (pos * torch.exp(-beta) + beta + rot * torch.exp(-gamma) + gamma).mean()


class PoseLoss(nn.Module):
    """Holds the learnable balance weights ``beta`` (position) and ``gamma`` (rotation)."""

    def __init__(self, beta0=-3.0, gamma0=0.0):
        super().__init__()
        self.beta = nn.Parameter(torch.tensor(float(beta0)))
        self.gamma = nn.Parameter(torch.tensor(float(gamma0)))

    def forward(self, pred, l_gt, q_gt):
        return pose_loss(pred.l, pred.q, l_gt, q_gt,
                         self.beta.to(pred.l.dtype), self.gamma.to(pred.l.dtype))


def check_finite_grads(parameters):
    """Raise :class:`TrainingDivergenceError` naming the first non-finite gradient."""
    for name, p in parameters:
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise TrainingDivergenceError(f"non-finite gradient in parameter {name!r}")


def loss_params_step(loss_module, optimizer):
    """Apply one optimizer step after checking ``beta``/``gamma`` gradients."""
    check_finite_grads(loss_module.named_parameters())
    optimizer.step()
    for name in ("beta", "gamma"):
        if not math.isfinite(getattr(loss_module, name).item()):
            raise TrainingDivergenceError(f"{name} became non-finite")
