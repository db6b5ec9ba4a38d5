"""Discounted CRRA / log utility fields and their conjugates."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_CLAMP_LO, _CLAMP_HI = 1e-300, 1e300


@dataclass(frozen=True)
class Utility:
    """u(x) = log x (gamma == 1) or x^(1-gamma)/(1-gamma).

    The field version is U(t, x) = exp(-(delta_pref - r) t) u(x), which is
    what results from discounting at delta_pref against the clock
    exp(-r t) dt. With both rates zero the field is u itself.
    """

    gamma: float = 1.0
    delta_pref: float = 0.0
    r: float = 0.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")

    @classmethod
    def log(cls, delta_pref: float = 0.0, r: float = 0.0) -> "Utility":
        return cls(1.0, delta_pref, r)

    @property
    def is_log(self) -> bool:
        return self.gamma == 1.0

    # -- scalar utility ------------------------------------------------
    def u(self, x):
        x = np.asarray(x, dtype=float)
        if self.is_log:
            return np.log(x)
        return x ** (1.0 - self.gamma) / (1.0 - self.gamma)

    def du(self, x):
        return np.asarray(x, dtype=float) ** (-self.gamma)

    def d2u(self, x):
        return -self.gamma * np.asarray(x, dtype=float) ** (-self.gamma - 1.0)

    def inv(self, y):
        """Inverse marginal utility i = (u')^-1, arguments clamped to a safe range."""
        y = np.clip(np.asarray(y, dtype=float), _CLAMP_LO, _CLAMP_HI)
        return y ** (-1.0 / self.gamma)

    def conj(self, y):
        """v(y) = sup_x u(x) - x y."""
        y = np.asarray(y, dtype=float)
        if self.is_log:
            return -np.log(y) - 1.0
        g = self.gamma
        return g / (1.0 - g) * y ** ((g - 1.0) / g)

    # -- time-dependent field ------------------------------------------
    def weight(self, t):
        return np.exp(-(self.delta_pref - self.r) * np.asarray(t, dtype=float))

    def U(self, t, x):
        return self.weight(t) * self.u(x)

    def dU(self, t, x):
        return self.weight(t) * self.du(x)

    def d2U(self, t, x):
        return self.weight(t) * self.d2u(x)

    def I(self, t, y):
        w = self.weight(t)
        return self.inv(np.asarray(y, dtype=float) / w)

    def V(self, t, y):
        w = self.weight(t)
        return w * self.conj(np.asarray(y, dtype=float) / w)

    def describe(self) -> dict:
        return {"kind": "log" if self.is_log else "crra", "gamma": self.gamma,
                "delta_pref": self.delta_pref, "r": self.r}
