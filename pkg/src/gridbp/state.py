"""Polar state vector (bus voltage angles and magnitudes)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StateVector:
    """Angles in radians, magnitudes in per-unit; index k is bus k+1."""

    theta: np.ndarray
    vm: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "vm", np.asarray(self.vm, dtype=float))
        if self.theta.shape != self.vm.shape:
            raise ValueError("theta and vm must have equal length")

    @classmethod
    def flat(cls, n_bus: int) -> "StateVector":
        return cls(np.zeros(n_bus), np.ones(n_bus))

    @property
    def n_bus(self) -> int:
        return self.theta.size

    def stacked(self) -> np.ndarray:
        """Full 2N vector [theta, vm]."""
        return np.concatenate([self.theta, self.vm])

    @classmethod
    def from_stacked(cls, x: np.ndarray) -> "StateVector":
        n = x.size // 2
        return cls(x[:n].copy(), x[n:].copy())

    def replace_theta(self, theta: np.ndarray) -> "StateVector":
        return StateVector(theta, self.vm.copy())

    def to_dict(self) -> dict:
        return {"theta_rad": self.theta.tolist(), "vm_pu": self.vm.tolist()}
