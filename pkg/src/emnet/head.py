"""Gaze regression head, angle/vector conversion and error metrics.

Angles are radians, yaw horizontal and pitch vertical. The 3D gaze vector is

    x = -cos(pitch) sin(yaw),  y = -sin(pitch),  z = -cos(pitch) cos(yaw)

so (0, 0) looks straight down the negative z axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import tensor_core as tc
from .blocks import Linear
from .errors import ShapeError


@dataclass(frozen=True)
class GazeAngles:
    yaw: float
    pitch: float


class GazeHead(nn.Module):
    """GAP -> Linear(C, hidden) -> h-swish -> Linear(hidden, 2); column 0 yaw, 1 pitch."""

    def __init__(self, in_channels: int = 540, hidden: int = 256):
        super().__init__()
        self.in_channels = in_channels
        self.fc1 = Linear(in_channels, hidden)
        self.fc2 = Linear(hidden, 2)

    def forward(self, f):
        if f.shape[1] != self.in_channels:
            raise ShapeError(f"gaze head expects {self.in_channels} channels (axis 1), got {f.shape[1]}")
        return self.fc2(tc.h_swish(self.fc1(tc.global_avg_pool(f).flatten(1))))


def angles_to_vector(yaw, pitch):
    """Unit gaze vectors, shape (..., 3); accepts scalars or arrays."""
    yaw = np.asarray(yaw, dtype=np.float64)
    pitch = np.asarray(pitch, dtype=np.float64)
    return np.stack([-np.cos(pitch) * np.sin(yaw), -np.sin(pitch), -np.cos(pitch) * np.cos(yaw)], axis=-1)


def angular_error_deg(g, g_hat):
    """Angle in degrees between gaze vectors (..., 3); scale-invariant and symmetric."""
    g = np.asarray(g, dtype=np.float64)
    g_hat = np.asarray(g_hat, dtype=np.float64)
    ng = np.linalg.norm(g, axis=-1)
    nh = np.linalg.norm(g_hat, axis=-1)
    if np.any(ng == 0) or np.any(nh == 0):
        raise ValueError("angular error undefined for a zero vector")
    # atan2 form of arccos(cos): same angle, but stays accurate near 0 and 180 degrees
    cross = np.linalg.norm(np.cross(g / ng[..., None], g_hat / nh[..., None]), axis=-1)
    dot = np.sum(g * g_hat, axis=-1) / (ng * nh)
    return np.degrees(np.arctan2(cross, dot))


def angles_error_deg(pred, label):
    """Angular error between (yaw, pitch) arrays of shape (..., 2)."""
    pred = np.asarray(pred, dtype=np.float64)
    label = np.asarray(label, dtype=np.float64)
    return angular_error_deg(angles_to_vector(label[..., 0], label[..., 1]),
                             angles_to_vector(pred[..., 0], pred[..., 1]))


def mae_loss(pred: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all samples and both angle components."""
    if pred.shape != label.shape:
        raise ShapeError(f"prediction shape {tuple(pred.shape)} != label shape {tuple(label.shape)}")
    if pred.shape[0] == 0:
        raise ValueError("mae_loss of an empty batch")
    return (pred - label).abs().mean()
