"""Consumer-side primitives: per-stage utility families and internal-state
transition families.

Utilities expose one-sided derivatives in both the action and the internal
state; kink positions in the action are queryable so solvers can land on
them exactly.  Transitions must be monotone in the action with a fixed sign,
and nondecreasing in the internal state; both properties are relied on by
the marginal-value chain rules in the equilibrium module.

All array arguments broadcast; scalars work too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Utility",
    "CappedLinear",
    "LinearQuadratic",
    "Transition",
    "ShiftableCap",
    "LinearTransition",
    "IdentityTransition",
]


def _stage(params, t):
    """Pick the stage-t entry of a per-stage tuple, repeating the last one."""
    return params[min(t, len(params) - 1)]


class Utility:
    """Stage utility ``U_t(z, a)``, nonnegative on the declared domain."""

    def value(self, t, z, a, s=None):
        raise NotImplementedError

    def d_action(self, t, z, a, s=None):
        """(left, right) derivatives in the action."""
        raise NotImplementedError

    def d_state(self, t, z, a, s=None):
        """(left, right) derivatives in the internal state."""
        raise NotImplementedError

    def action_kinks(self, t, z, s=None) -> tuple[float, ...]:
        """Action values where the stage utility is not differentiable."""
        return ()


@dataclass(frozen=True)
class CappedLinear(Utility):
    """``U_t = slope_t * min(a, z)``: linear demand value capped by the
    current internal state (the maximum amount the consumer can use)."""

    slopes: tuple[float, ...]

    def value(self, t, z, a, s=None):
        return _stage(self.slopes, t) * np.minimum(np.asarray(a, dtype=float), z)

    def d_action(self, t, z, a, s=None):
        d = _stage(self.slopes, t)
        a = np.asarray(a, dtype=float)
        left = np.where(a <= z, d, 0.0)
        right = np.where(a < z, d, 0.0)
        return left, right

    def d_state(self, t, z, a, s=None):
        d = _stage(self.slopes, t)
        z = np.asarray(z, dtype=float)
        left = np.where(z <= a, d, 0.0)
        right = np.where(z < a, d, 0.0)
        return left, right

    def action_kinks(self, t, z, s=None):
        return (float(z),)


@dataclass(frozen=True)
class LinearQuadratic(Utility):
    """Smooth concave utility
    ``U_t = const_t + la_t*a - qa_t*a^2 + lz_t*z - qz_t*z^2``.

    Concavity requires ``qa, qz >= 0``; nonnegativity on the scenario domain
    is checked by sampling in ``scenario.validate``.
    """

    const: tuple[float, ...] = (0.0,)
    lin_a: tuple[float, ...] = (0.0,)
    quad_a: tuple[float, ...] = (0.0,)
    lin_z: tuple[float, ...] = (0.0,)
    quad_z: tuple[float, ...] = (0.0,)

    def value(self, t, z, a, s=None):
        a = np.asarray(a, dtype=float)
        z = np.asarray(z, dtype=float)
        return (
            _stage(self.const, t)
            + _stage(self.lin_a, t) * a
            - _stage(self.quad_a, t) * a * a
            + _stage(self.lin_z, t) * z
            - _stage(self.quad_z, t) * z * z
        )

    def d_action(self, t, z, a, s=None):
        a = np.asarray(a, dtype=float)
        d = _stage(self.lin_a, t) - 2.0 * _stage(self.quad_a, t) * a
        d = d + np.zeros_like(np.asarray(z, dtype=float) * a)
        return d, d.copy()

    def d_state(self, t, z, a, s=None):
        z = np.asarray(z, dtype=float)
        d = _stage(self.lin_z, t) - 2.0 * _stage(self.quad_z, t) * z
        d = d + np.zeros_like(np.asarray(a, dtype=float) * z)
        return d, d.copy()


class Transition:
    """Internal-state update ``z' = r(z, a, s')``.

    ``action_sign`` declares the fixed monotonicity direction in the action
    (+1 nondecreasing, -1 nonincreasing, 0 constant); transitions must be
    nondecreasing in ``z``.
    """

    action_sign: int = 0

    def next_state(self, z, a, s_next=None):
        raise NotImplementedError

    def d_action(self, z, a, s_next=None):
        raise NotImplementedError

    def d_state(self, z, a, s_next=None):
        raise NotImplementedError

    def action_kinks(self, z, s_next=None) -> tuple[float, ...]:
        return ()


@dataclass(frozen=True)
class ShiftableCap(Transition):
    """Deferred-consumption dynamics ``z' = floor + max(0, z - max(a, base))``.

    Consuming above ``base`` (but below the current cap ``z``) eats into the
    next stage's cap one for one; the next cap never falls below ``floor``.
    Nonincreasing in the action.
    """

    base: float
    floor: float

    action_sign = -1

    def next_state(self, z, a, s_next=None):
        a = np.asarray(a, dtype=float)
        return self.floor + np.maximum(0.0, z - np.maximum(a, self.base))

    def d_action(self, z, a, s_next=None):
        a = np.asarray(a, dtype=float)
        inner = z - np.maximum(a, self.base)
        left = np.where((a > self.base) & (inner >= 0.0), -1.0, 0.0)
        right = np.where((a >= self.base) & (inner > 0.0), -1.0, 0.0)
        return left, right

    def d_state(self, z, a, s_next=None):
        inner = np.asarray(z, dtype=float) - np.maximum(np.asarray(a, dtype=float), self.base)
        left = np.where(inner > 0.0, 1.0, 0.0)
        right = np.where(inner >= 0.0, 1.0, 0.0)
        return left, right

    def action_kinks(self, z, s_next=None):
        return (float(self.base), float(z))


@dataclass(frozen=True)
class LinearTransition(Transition):
    """``z' = clip(offset + gain_state*z + gain_action*a, 0, cap)``.

    ``gain_state`` must be nonnegative; ``gain_action`` may take either sign
    but its sign fixes the monotonicity direction.
    """

    offset: float = 0.0
    gain_state: float = 0.0
    gain_action: float = 0.0
    cap: float = float("inf")

    def __post_init__(self):
        if self.gain_state < 0.0:
            raise ValueError("gain_state must be >= 0 (transition nondecreasing in z)")
        sign = 0 if self.gain_action == 0.0 else (1 if self.gain_action > 0.0 else -1)
        object.__setattr__(self, "action_sign", sign)

    def _raw(self, z, a):
        return self.offset + self.gain_state * np.asarray(z, dtype=float) + self.gain_action * np.asarray(a, dtype=float)

    def next_state(self, z, a, s_next=None):
        return np.clip(self._raw(z, a), 0.0, self.cap)

    def _sided(self, raw, gain):
        # Derivative is the gain strictly inside the clip window; at a clip
        # boundary only the side that moves back inside keeps the gain.
        inside = (raw > 0.0) & (raw < self.cap)
        at_lo = raw <= 0.0
        at_hi = raw >= self.cap
        left = np.where(inside | (at_lo & (gain < 0.0)) | (at_hi & (gain > 0.0)), gain, 0.0)
        right = np.where(inside | (at_lo & (gain > 0.0)) | (at_hi & (gain < 0.0)), gain, 0.0)
        return left, right

    def d_action(self, z, a, s_next=None):
        return self._sided(self._raw(z, a), self.gain_action)

    def d_state(self, z, a, s_next=None):
        return self._sided(self._raw(z, a), self.gain_state)

    def action_kinks(self, z, s_next=None):
        if self.gain_action == 0.0:
            return ()
        kinks = []
        for target in (0.0, self.cap):
            if np.isfinite(target):
                kinks.append(float((target - self.offset - self.gain_state * z) / self.gain_action))
        return tuple(kinks)


@dataclass(frozen=True)
class IdentityTransition(Transition):
    """Internal state carried over unchanged."""

    action_sign = 0

    def next_state(self, z, a, s_next=None):
        return np.asarray(z, dtype=float) + 0.0 * np.asarray(a, dtype=float)

    def d_action(self, z, a, s_next=None):
        zero = np.zeros(np.broadcast(np.asarray(z), np.asarray(a)).shape)
        return zero, zero.copy()

    def d_state(self, z, a, s_next=None):
        one = np.ones(np.broadcast(np.asarray(z), np.asarray(a)).shape)
        return one, one.copy()
