"""Rotary positional encoding and re-encoding of cached keys.

Pairs ``(x[2i], x[2i+1])`` are rotated by ``pos * theta_i`` with
``theta_i = base ** (-2i / d)``. Moving a cached key from one position to
another only needs a rotation by the position difference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RopeParams:
    head_dim: int
    base: float = 10000.0

    def __post_init__(self) -> None:
        if self.head_dim < 2 or self.head_dim % 2:
            raise ValueError(f"head_dim must be even and >= 2, got {self.head_dim}")
        if self.base <= 0:
            raise ValueError("base must be positive")

    @property
    def thetas(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


def _rotate(x: np.ndarray, angle_pos, params: RopeParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.head_dim:
        raise ValueError(f"vector dimension {x.shape[-1]} != head_dim {params.head_dim}")
    # angle_pos broadcasts against x's leading dims
    ang = np.asarray(angle_pos, dtype=np.float64)[..., None] * params.thetas
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, ang.shape[:-1] + (params.head_dim,)))
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_apply(vector, pos, params: RopeParams) -> np.ndarray:
    """Encode ``vector`` (shape ``(..., d)``) at position ``pos``."""
    return _rotate(vector, pos, params)


def rerope(vector, old_pos, new_pos, params: RopeParams) -> np.ndarray:
    """Move an encoded vector from ``old_pos`` to ``new_pos``.

    Undo-then-redo collapses to a single rotation by the difference.
    """
    return _rotate(vector, np.asarray(new_pos) - np.asarray(old_pos), params)
