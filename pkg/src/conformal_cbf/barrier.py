"""Potential-field barrier function and the affine safety constraints.

Safety against one agent is encoded by a barrier built from a repulsive
potential of the distance d between ego and agent:

    U(d) = (k_rep / 2) * (1/d - 1/rho0)^2   for d < rho0, else 0
    h    = 1 / (1 + U) - delta

h rises from -delta at contact to 1 - delta once the agent is out of the
sensing radius rho0, and U is C^1 at rho0 so the gradient vanishes there
smoothly.  The zero level of h marks the collision distance.

With a velocity u as the decision variable, the barrier condition
dh/dt + alpha(h) >= 0 splits into an ego term grad_ego . u, an agent
term grad_agent . xdot_agent, and alpha(h).  Both the true constraint
(actual agent state) and the deployed constraint (predicted agent state,
plus an additive calibration margin) are produced here as affine rows
for the projection QP.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar

from conformal_cbf.errors import InputError, SingularityError


@dataclass(frozen=True)
class ClassKappa:
    """Extended class-kappa function: strictly increasing, zero at zero.

    Two kinds are supported.  "linear" is alpha(r) = slope * r with
    Lipschitz constant slope.  "arctan" is the squashing-shaped
    alpha(r) = slope * arctan(r) / pi, bounded in (-slope/2, slope/2),
    with Lipschitz constant slope / pi.
    """

    kind: str
    slope: float

    def __post_init__(self):
        if self.kind not in ("linear", "arctan"):
            raise InputError(f"unknown class-kappa kind {self.kind!r}")
        if not (np.isfinite(self.slope) and self.slope > 0.0):
            raise InputError("class-kappa slope must be positive and finite")

    @staticmethod
    def linear(slope: float) -> "ClassKappa":
        return ClassKappa(kind="linear", slope=slope)

    @staticmethod
    def arctan(slope: float = 1.0) -> "ClassKappa":
        return ClassKappa(kind="arctan", slope=slope)

    def value(self, r: float) -> float:
        if self.kind == "linear":
            return self.slope * r
        return self.slope * math.atan(r) / math.pi

    @property
    def lipschitz(self) -> float:
        """Global Lipschitz constant of the function."""
        if self.kind == "linear":
            return self.slope
        return self.slope / math.pi


@dataclass(frozen=True)
class PotentialFieldCbf:
    """Barrier h = 1/(1 + U) - delta for the repulsive potential U above.

    Attributes:
        k_rep: repulsion strength, > 0.
        rho0: sensing radius beyond which the potential vanishes, > 0.
        delta: level shift in (0, 1); 1/delta - 1 is the potential at
            which h crosses zero.
    """

    k_rep: float
    rho0: float
    delta: float

    def __post_init__(self):
        if not (np.isfinite(self.k_rep) and self.k_rep > 0.0):
            raise InputError("k_rep must be positive and finite")
        if not (np.isfinite(self.rho0) and self.rho0 > 0.0):
            raise InputError("rho0 must be positive and finite")
        if not (np.isfinite(self.delta) and 0.0 < self.delta < 1.0):
            raise InputError("delta must lie in (0, 1)")

    def potential(self, d: float) -> float:
        if d <= 0.0:
            raise SingularityError("potential undefined at non-positive distance")
        if d >= self.rho0:
            return 0.0
        return 0.5 * self.k_rep * (1.0 / d - 1.0 / self.rho0) ** 2

    def radial_derivative(self, d: float) -> float:
        """dh/dd, zero at and beyond rho0."""
        if d <= 0.0:
            raise SingularityError("gradient undefined at non-positive distance")
        if d >= self.rho0:
            return 0.0
        w = 1.0 / d - 1.0 / self.rho0
        u = 0.5 * self.k_rep * w * w
        return self.k_rep * w / (d * d * (1.0 + u) ** 2)

    def zero_level_distance(self) -> float:
        """Distance at which h crosses zero; the collision threshold."""
        w = math.sqrt(2.0 * (1.0 / self.delta - 1.0) / self.k_rep)
        return 1.0 / (1.0 / self.rho0 + w)


@dataclass(frozen=True)
class AgentState:
    """Position and velocity of one sensed (or predicted) agent."""

    agent_id: int
    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64)
        vel = np.asarray(self.velocity, dtype=np.float64)
        if pos.shape != (2,) or vel.shape != (2,):
            raise InputError("AgentState needs planar position and velocity")
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
            raise InputError("AgentState entries must be finite")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "velocity", vel)


@dataclass(frozen=True)
class AffineConstraint:
    """One halfplane row normal . u + offset >= 0 of the safety QP."""

    normal: np.ndarray
    offset: float
    agent_id: int

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if n.shape != (2,):
            raise InputError("constraint normal must be planar")
        if not (np.all(np.isfinite(n)) and np.isfinite(self.offset)):
            raise InputError("constraint entries must be finite")
        object.__setattr__(self, "normal", n)

    def residual(self, u: np.ndarray) -> float:
        return float(self.normal @ np.asarray(u, dtype=np.float64) + self.offset)


@dataclass(frozen=True)
class BoundSet:
    """Regularity and prediction-error bounds used by the certificates.

    m_h bounds the agent-side gradient norm of the barrier, e_v the
    prediction position error, e_d the error of the agent-side barrier
    flow term.  All are global (worst-case) bounds.
    """

    m_h: float
    e_v: float
    e_d: float

    def __post_init__(self):
        for name in ("m_h", "e_v", "e_d"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0.0):
                raise InputError(f"{name} must be nonnegative and finite")


def cbf_value(cbf: PotentialFieldCbf, ego_position, agent_position) -> float:
    """Barrier value h at the given ego/agent positions."""
    p = np.asarray(ego_position, dtype=np.float64)
    q = np.asarray(agent_position, dtype=np.float64)
    if p.shape != (2,) or q.shape != (2,):
        raise InputError("positions must be planar")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InputError("positions must be finite")
    d = float(np.linalg.norm(p - q))
    if d == 0.0:
        raise SingularityError("barrier undefined for coincident positions")
    return 1.0 / (1.0 + cbf.potential(d)) - cbf.delta


def cbf_gradient(
    cbf: PotentialFieldCbf, ego_position, agent_position
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of h with respect to ego and agent position.

    Returns:
        (grad_ego, grad_agent); the two are exact negatives since h
        depends on the positions only through their difference.  Both
        are exactly zero at distances >= rho0.
    """
    p = np.asarray(ego_position, dtype=np.float64)
    q = np.asarray(agent_position, dtype=np.float64)
    if p.shape != (2,) or q.shape != (2,):
        raise InputError("positions must be planar")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InputError("positions must be finite")
    diff = p - q
    d = float(np.linalg.norm(diff))
    if d == 0.0:
        raise SingularityError("gradient undefined for coincident positions")
    slope = cbf.radial_derivative(d)
    grad_ego = (slope / d) * diff
    return grad_ego, -grad_ego


def build_true_constraint(
    cbf: PotentialFieldCbf,
    alpha: ClassKappa,
    ego_position,
    agent: AgentState,
) -> AffineConstraint:
    """Barrier condition against the agent's actual state, affine in u.

    The row is grad_ego . u + (grad_agent . v_agent + alpha(h)) >= 0,
    everything evaluated at the true agent position and velocity.
    """
    h = cbf_value(cbf, ego_position, agent.position)
    grad_ego, grad_agent = cbf_gradient(cbf, ego_position, agent.position)
    offset = float(grad_agent @ agent.velocity) + alpha.value(h)
    return AffineConstraint(normal=grad_ego, offset=offset, agent_id=agent.agent_id)


def build_conformal_constraint(
    cbf: PotentialFieldCbf,
    alpha: ClassKappa,
    ego_position,
    predicted: AgentState,
    lam: float,
) -> AffineConstraint:
    """Deployed constraint: the barrier condition at the predicted agent
    state with the calibration margin lam added to the offset.

    With a perfect prediction and lam = 0 this is the true constraint.
    """
    if not np.isfinite(lam):
        raise InputError("margin must be finite")
    base = build_true_constraint(cbf, alpha, ego_position, predicted)
    return AffineConstraint(
        normal=base.normal, offset=base.offset + lam, agent_id=predicted.agent_id
    )


@lru_cache(maxsize=64)
def _gradient_norm_bound(k_rep: float, rho0: float) -> float:
    # Parameterize by w = 1/d - 1/rho0 in (0, inf); the gradient norm is
    #   phi(w) = k_rep * w * (w + 1/rho0)^2 / (1 + (k_rep/2) w^2)^2
    # which vanishes at both ends, so a log-spaced scan plus a bounded
    # local refinement pins the interior maximum.
    c = 1.0 / rho0

    def phi(w):
        return k_rep * w * (w + c) ** 2 / (1.0 + 0.5 * k_rep * w * w) ** 2

    grid = np.logspace(-12.0, 12.0, 240001)
    values = phi(grid)
    i = int(np.argmax(values))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, grid.size - 1)]
    result = minimize_scalar(
        lambda w: -phi(w), bounds=(lo, hi), method="bounded",
        options={"xatol": 1e-14},
    )
    return float(max(values[i], phi(float(result.x))))


def gradient_norm_bound(cbf: PotentialFieldCbf) -> float:
    """Global bound on the agent-side gradient norm of h, found numerically.

    The bound does not depend on delta; results are cached per
    (k_rep, rho0) pair.
    """
    return _gradient_norm_bound(cbf.k_rep, cbf.rho0)


def bound_set_for(cbf: PotentialFieldCbf, e_v: float, e_d: float) -> BoundSet:
    """BoundSet with m_h computed from the barrier parameters."""
    return BoundSet(m_h=gradient_norm_bound(cbf), e_v=e_v, e_d=e_d)
