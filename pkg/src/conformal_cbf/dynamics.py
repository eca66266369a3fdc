"""Ego dynamics: control-affine model, RK4 stepping, velocity tracking.

The simulated robot is a planar double integrator

    d/dt (x, y, vx, vy) = (vx, vy, 0, 0) + (0, 0, ux, uy)

driven at acceleration level.  The safety filter decides a velocity, and
a proportional tracking law converts it into acceleration commands.
Integration uses a single classical RK4 step per control period with the
control held constant over the step.  For the double integrator the
vector field is linear with nilpotent drift, so one RK4 step reproduces
the exact discretization; sub-stepping changes nothing but roundoff.
"""

from dataclasses import dataclass
from typing import Callable

import numpy as np

from conformal_cbf.errors import InputError


@dataclass(frozen=True)
class ControlAffineModel:
    """Dynamics of the form xdot = f(x) + g(x) u.

    Attributes:
        f: drift field, maps state (n,) to (n,).
        g: actuation matrix field, maps state (n,) to (n, m).
        state_dim: n.
        control_dim: m.
    """

    f: Callable[[np.ndarray], np.ndarray]
    g: Callable[[np.ndarray], np.ndarray]
    state_dim: int
    control_dim: int


@dataclass(frozen=True)
class RobotState:
    """Planar position and velocity of the ego robot."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        vel = np.asarray(self.velocity, dtype=np.float64)
        if pos.shape != (2,) or vel.shape != (2,):
            raise InputError("RobotState needs planar position and velocity")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise InputError("RobotState entries must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    @staticmethod
    def from_vector(x: np.ndarray) -> "RobotState":
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (4,):
            raise InputError("state vector must have 4 entries")
        return RobotState(position=x[:2].copy(), velocity=x[2:].copy())


@dataclass(frozen=True)
class TrackingActuator:
    """Proportional velocity-tracking law u = -gain * (v - v_cmd)."""

    gain: float

    def __post_init__(self):
        if not (np.isfinite(self.gain) and self.gain > 0.0):
            raise InputError("tracking gain must be positive and finite")


def double_integrator() -> ControlAffineModel:
    """Planar double integrator with acceleration input."""

    def f(x: np.ndarray) -> np.ndarray:
        return np.array([x[2], x[3], 0.0, 0.0])

    def g(x: np.ndarray) -> np.ndarray:
        return np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])

    return ControlAffineModel(f=f, g=g, state_dim=4, control_dim=2)


def step(
    model: ControlAffineModel,
    state: RobotState,
    control: np.ndarray,
    dt: float,
) -> RobotState:
    """Advance the state by one RK4 step with zero-order-hold control.

    Args:
        model: dynamics with state_dim 4 (position, velocity layout).
        state: current ego state.
        control: control vector of length model.control_dim, held
            constant over the step.
        dt: step length in seconds, strictly positive.

    Returns:
        The state after dt seconds.
    """
    if model.state_dim != 4:
        raise InputError("step expects a position/velocity state of dimension 4")
    if not (np.isfinite(dt) and dt > 0.0):
        raise InputError("dt must be positive and finite")
    u = np.asarray(control, dtype=np.float64)
    if u.shape != (model.control_dim,):
        raise InputError(
            f"control must have shape ({model.control_dim},), got {u.shape}"
        )
    if not np.all(np.isfinite(u)):
        raise InputError("control entries must be finite")

    def xdot(x: np.ndarray) -> np.ndarray:
        return model.f(x) + model.g(x) @ u

    x0 = state.as_vector()
    k1 = xdot(x0)
    k2 = xdot(x0 + 0.5 * dt * k1)
    k3 = xdot(x0 + 0.5 * dt * k2)
    k4 = xdot(x0 + dt * k3)
    x1 = x0 + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return RobotState.from_vector(x1)


def track_velocity(
    actuator: TrackingActuator,
    velocity: np.ndarray,
    commanded: np.ndarray,
) -> np.ndarray:
    """Acceleration command steering the current velocity to the commanded one."""
    v = np.asarray(velocity, dtype=np.float64)
    c = np.asarray(commanded, dtype=np.float64)
    if v.shape != (2,) or c.shape != (2,):
        raise InputError("track_velocity expects planar velocities")
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(c))):
        raise InputError("velocities must be finite")
    return -actuator.gain * (v - c)
