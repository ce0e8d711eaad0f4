"""Chi-squared and KL f-divergences with their convex conjugates.

The conjugate is taken over the nonnegative half-line, ``f*(y) = sup_{x>=0}
x*y - f(x)``, so ``f*'(y)`` is always a valid (nonnegative) density ratio.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("chi_squared", "kl")


@dataclass(frozen=True)
class FDivergence:
    kind: str = "chi_squared"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown divergence {self.kind!r}; choose from {KINDS}")

    def f(self, x):
        return f_value(self, x)

    def conjugate(self, y):
        return conjugate(self, y)

    def conjugate_prime(self, y):
        return conjugate_prime(self, y)


CHI_SQUARED = FDivergence("chi_squared")
KL = FDivergence("kl")


def get_divergence(name: str | FDivergence) -> FDivergence:
    if isinstance(name, FDivergence):
        return name
    aliases = {"chi2": "chi_squared", "chi_square": "chi_squared", "chi-squared": "chi_squared"}
    return FDivergence(aliases.get(name, name))


def f_value(div: FDivergence, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("f-divergence generator is only defined for x >= 0")
    if div.kind == "chi_squared":
        out = (x - 1.0) ** 2
    else:
        # 0 log 0 = 0
        safe = np.where(x > 0, x, 1.0)
        out = np.where(x > 0, x * np.log(safe), 0.0)
    return out if out.ndim else float(out)


def conjugate(div: FDivergence, y):
    y = np.asarray(y, dtype=float)
    if div.kind == "chi_squared":
        out = np.where(y >= -2.0, 0.25 * y * y + y, -1.0)
    else:
        out = np.exp(y - 1.0)
    return out if out.ndim else float(out)


def conjugate_prime(div: FDivergence, y):
    """Derivative of the conjugate, i.e. the maximizing ratio ``x*(y)``."""
    y = np.asarray(y, dtype=float)
    if div.kind == "chi_squared":
        out = np.maximum(0.0, 1.0 + 0.5 * y)
    else:
        out = np.exp(y - 1.0)
    return out if out.ndim else float(out)


def divergence_from_ratios(div: FDivergence, ratios, base_weights) -> float:
    """``D_f(p || q) = sum_i q_i f(p_i / q_i)`` given ratios ``p/q`` and ``q``."""
    ratios = np.asarray(ratios, dtype=float)
    base_weights = np.asarray(base_weights, dtype=float)
    if ratios.shape != base_weights.shape:
        raise ValueError(f"length mismatch: {ratios.shape} vs {base_weights.shape}")
    return float(np.sum(base_weights * f_value(div, ratios)))


def divergence(div: FDivergence, p, q) -> float:
    """``D_f(p || q)`` for discrete distributions; ``q`` must cover ``p``."""
    p = np.asarray(p, dtype=float).ravel()
    q = np.asarray(q, dtype=float).ravel()
    support = q > 0
    if np.any(p[~support] > 0):
        return float("inf")
    return divergence_from_ratios(div, p[support] / q[support], q[support])
