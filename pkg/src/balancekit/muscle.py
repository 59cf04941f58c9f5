"""Hill-type rigid-tendon muscle: force curves and excitation-activation dynamics.

Force along the tendon line for activation ``a``, normalized fiber length
``l`` and normalized fiber velocity ``v``::

    F = strength_scale * f_max * (a * F_L(l) * F_V(v) + F_p(l)) * cos(pennation)

Curve shapes (see :mod:`balancekit._kernels` for the constants):

* active force-length: Gaussian ``exp(-((l-1)/0.45)^2)``, peak 1 at l = 1
* force-velocity: two-branch hyperbola, 0 at v = -1, 1 at v = 0,
  eccentric plateau 1.4, C1-continuous at v = 0
* passive: ``(exp(4*(l-1)/0.6) - 1)/(exp(4) - 1)`` for l > 1, zero below

Activation follows first-order dynamics ``da/dt = (u - a)/tau(u, a)`` with
the asymmetric time constant of Eq.-style two-branch form; both excitation
and activation live in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from . import _kernels as K

DEFAULT_TAU_ACT = 0.01
DEFAULT_TAU_DEACT = 0.04
DEFAULT_V_MAX = 10.0  # optimal fiber lengths per second


class MuscleDomainError(ValueError):
    """Raised when a curve is evaluated outside its domain."""


@dataclass(frozen=True)
class MuscleParams:
    """Per-muscle constants. Lengths in m, forces in N, angles in rad."""

    name: str
    f_max: float
    l_opt: float
    pennation: float = 0.0
    v_max: float = DEFAULT_V_MAX
    tau_act: float = DEFAULT_TAU_ACT
    tau_deact: float = DEFAULT_TAU_DEACT
    strength_scale: float = 1.0

    def __post_init__(self):
        if self.f_max <= 0:
            raise ValueError(f"{self.name}: f_max must be positive")
        if self.l_opt <= 0:
            raise ValueError(f"{self.name}: l_opt must be positive")
        if not 0.0 <= self.pennation < math.pi / 2:
            raise ValueError(f"{self.name}: pennation must be in [0, pi/2)")
        if self.v_max <= 0:
            raise ValueError(f"{self.name}: v_max must be positive")
        if self.tau_act <= 0 or self.tau_deact <= 0:
            raise ValueError(f"{self.name}: time constants must be positive")
        if not 0.0 <= self.strength_scale <= 1.0:
            raise ValueError(f"{self.name}: strength_scale must be in [0, 1]")

    def scaled(self, strength_scale: float) -> "MuscleParams":
        return replace(self, strength_scale=strength_scale)


@dataclass
class MuscleState:
    """Dynamic muscle state: activation, excitation, normalized length/velocity."""

    a: float = 0.0
    u: float = 0.0
    l_norm: float = 1.0
    v_norm: float = 0.0

    def validate(self):
        if not 0.0 <= self.a <= 1.0:
            raise ValueError("activation outside [0, 1]")
        if not 0.0 <= self.u <= 1.0:
            raise ValueError("excitation outside [0, 1]")
        if self.l_norm <= 0.0:
            raise MuscleDomainError("l_norm must be positive")


def active_force_length(l_norm: float) -> float:
    """Active force-length multiplier, in [0, 1] with maximum at l_norm = 1."""
    if l_norm <= 0.0:
        raise MuscleDomainError(f"l_norm must be positive, got {l_norm}")
    return K.active_force_length_s(float(l_norm))


def force_velocity(v_norm: float) -> float:
    """Force-velocity multiplier: 0 at full shortening, 1 isometric, <= 1.4."""
    return K.force_velocity_s(float(v_norm))


def passive_force(l_norm: float) -> float:
    """Passive force-length multiplier: zero at or below optimal length."""
    if l_norm <= 0.0:
        raise MuscleDomainError(f"l_norm must be positive, got {l_norm}")
    return K.passive_force_s(float(l_norm))


def muscle_force(params: MuscleParams, state: MuscleState) -> float:
    """Tendon-line force in N for the given params and state. Never negative."""
    state.validate()
    f = params.strength_scale * params.f_max * (
        state.a * active_force_length(state.l_norm) * force_velocity(state.v_norm)
        + passive_force(state.l_norm)
    ) * math.cos(params.pennation)
    return f


def time_constant(u: float, a: float, tau_act: float = DEFAULT_TAU_ACT,
                  tau_deact: float = DEFAULT_TAU_DEACT) -> float:
    """Effective activation/deactivation time constant.

    tau_act*(0.5 + 1.5a) when u > a, tau_deact/(0.5 + 1.5a) otherwise.
    """
    return K.activation_tau_s(float(u), float(a), float(tau_act), float(tau_deact))


def step_activation(a: float, u: float, dt: float,
                    tau_act: float = DEFAULT_TAU_ACT,
                    tau_deact: float = DEFAULT_TAU_DEACT) -> float:
    """One explicit-Euler activation step, clamped to [0, 1]."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    tau = time_constant(u, a, tau_act, tau_deact)
    a_new = a + dt * (u - a) / tau
    return min(1.0, max(0.0, a_new))
