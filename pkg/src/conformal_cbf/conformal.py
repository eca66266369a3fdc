"""Online calibration of the constraint margin and its certificates.

The deployed constraint replaces the true barrier condition with one
evaluated at predicted agent states plus a margin lam.  How much the
deployed condition under- or over-covers the true one at a sample is the
gap

    gap = q_pred + alpha(h_pred) + lam - q_true - alpha(h_true)

where q is the agent-side flow term grad_agent . v_agent and h the
barrier value; a positive gap means the deployed constraint was looser
than the truth.  A window's loss squashes the worst gap over all agents
and sample instants through an odd, strictly increasing map s into
(-1/2, 1/2), by default s(r) = arctan(r) / pi.

After each window the margin moves by the loss surplus,

    lam <- lam + eta * (epsilon - loss)

which steers the running average loss toward the target epsilon (the
target may be negative).  Because both loss and epsilon lie in
(-1/2, 1/2), a single update never moves lam by eta or more.

Two certificates close the loop.  The margin level

    lam_safe = s^-1(epsilon_safe) - e_d - M_alpha * m_h * e_v

guarantees loss <= epsilon_safe whenever lam <= lam_safe under the
stated prediction-error and regularity bounds.  And for any loss
sequence that respects "lam <= lam_safe implies loss <= epsilon_safe"
with epsilon_safe <= epsilon, every prefix of length K satisfies

    mean(loss_1..loss_K) <= epsilon + (lam_1 - lam_safe + eta) / (eta * K)

while lam never drops below lam_safe - eta.  The update arithmetic here
is plain Python so exact number types pass through unchanged.
"""

import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Callable

from conformal_cbf.barrier import (
    AgentState,
    BoundSet,
    ClassKappa,
    PotentialFieldCbf,
    cbf_gradient,
    cbf_value,
)
from conformal_cbf.errors import ConfigError, InputError
from conformal_cbf.predictor import SampledTrajectory, differentiate

#: Window verdict when no agent was in range: the margin must not move.
NO_AGENTS = None


@dataclass(frozen=True)
class Squashing:
    """Odd, strictly increasing map of the gap into (-1/2, 1/2)."""

    name: str
    fn: Callable[[float], float]
    inv: Callable[[float], float]

    @staticmethod
    def arctan_over_pi() -> "Squashing":
        return Squashing(
            name="arctan-over-pi",
            fn=lambda r: math.atan(r) / math.pi,
            inv=lambda y: math.tan(math.pi * y),
        )

    def value(self, r: float) -> float:
        if not math.isfinite(r):
            raise InputError("squashing input must be finite")
        return self.fn(r)

    def inverse(self, y: float) -> float:
        if not -0.5 < y < 0.5:
            raise InputError("squashing inverse needs an argument in (-1/2, 1/2)")
        return self.inv(y)


_DEFAULT_SQUASH = Squashing.arctan_over_pi()


@dataclass
class ConformalState:
    """Margin, learning rate, target, and the update bookkeeping.

    A single owner updates the state sequentially; loss_history holds
    every recorded window loss in order, and lambda_initial keeps the
    margin the state started from so prefix identities can be checked.
    """

    lam: float
    eta: float
    epsilon: float
    lambda_initial: float = None  # type: ignore[assignment]
    loss_history: list = field(default_factory=list)
    updates_applied: int = 0

    def __post_init__(self):
        if not math.isfinite(float(self.lam)):
            raise ConfigError("lam must be finite")
        if not (math.isfinite(float(self.eta)) and float(self.eta) > 0.0):
            raise ConfigError("eta must be positive and finite")
        if not -0.5 < float(self.epsilon) < 0.5:
            raise ConfigError("epsilon must lie in (-1/2, 1/2)")
        if self.lambda_initial is None:
            self.lambda_initial = self.lam

    def update(self, loss):
        """Apply one window's verdict; NO_AGENTS leaves everything as is."""
        if loss is NO_AGENTS:
            return self
        if not -0.5 < float(loss) < 0.5:
            raise InputError("loss must lie in (-1/2, 1/2)")
        self.lam = self.lam + self.eta * (self.epsilon - loss)
        self.loss_history.append(loss)
        self.updates_applied += 1
        return self


def update_lambda(state: ConformalState, loss) -> ConformalState:
    """Margin update lam <- lam + eta * (epsilon - loss); see ConformalState.update."""
    return state.update(loss)


@dataclass(frozen=True)
class SafetyCertificate:
    """A loss level epsilon_safe and a margin level lambda_safe at or
    below which the window loss is guaranteed not to exceed it."""

    epsilon_safe: float
    lambda_safe: float


def gap(
    cbf: PotentialFieldCbf,
    alpha: ClassKappa,
    ego_position,
    actual: AgentState,
    predicted: AgentState,
    lam: float,
) -> float:
    """Looseness of the deployed constraint relative to the true one at
    one sample; see the module docstring for the formula."""
    if actual.agent_id != predicted.agent_id:
        raise InputError(
            f"gap compares one agent with itself, got ids "
            f"{actual.agent_id} and {predicted.agent_id}"
        )
    if not math.isfinite(float(lam)):
        raise InputError("margin must be finite")
    h_true = cbf_value(cbf, ego_position, actual.position)
    h_pred = cbf_value(cbf, ego_position, predicted.position)
    _, g_true = cbf_gradient(cbf, ego_position, actual.position)
    _, g_pred = cbf_gradient(cbf, ego_position, predicted.position)
    q_true = float(g_true @ actual.velocity)
    q_pred = float(g_pred @ predicted.velocity)
    # grouped as differences so a perfect prediction cancels exactly
    return (q_pred - q_true) + (alpha.value(h_pred) - alpha.value(h_true)) + lam


def window_loss(
    cbf: PotentialFieldCbf,
    alpha: ClassKappa,
    predicted,
    actual,
    ego: SampledTrajectory,
    lam: float,
    squash: Squashing = _DEFAULT_SQUASH,
):
    """Squashed worst gap over every agent and sample instant of a window.

    Args:
        predicted: SampledTrajectory per agent, as an iterable or an
            id-keyed mapping.
        actual: realized trajectories over the same agents.
        ego: the ego's realized positions over the same window.
        lam: margin the window was driven with.

    Returns:
        The loss in (-1/2, 1/2), or NO_AGENTS when no agent is present.

    Raises:
        InputError: agent sets differ, or any trajectory disagrees with
            the ego window's start frame, dt, or sample count.
    """
    if isinstance(predicted, Mapping):
        predicted = predicted.values()
    if isinstance(actual, Mapping):
        actual = actual.values()
    predicted = list(predicted)
    actual = list(actual)
    if ego.n_samples < 2:
        raise InputError("ego window needs at least 2 samples")
    pred_by_id = {t.agent_id: t for t in predicted}
    act_by_id = {t.agent_id: t for t in actual}
    if len(pred_by_id) != len(predicted) or len(act_by_id) != len(actual):
        raise InputError("duplicate agent ids in a window")
    if set(pred_by_id) != set(act_by_id):
        raise InputError("predicted and actual windows cover different agents")
    if not pred_by_id:
        return NO_AGENTS
    for traj in predicted + actual:
        if (
            traj.start_frame != ego.start_frame
            or traj.n_samples != ego.n_samples
            or traj.dt != ego.dt
        ):
            raise InputError(
                f"trajectory of agent {traj.agent_id} does not match the ego window"
            )

    worst = -math.inf
    for agent_id in sorted(pred_by_id):
        pred = pred_by_id[agent_id]
        act = act_by_id[agent_id]
        for i in range(ego.n_samples):
            frame = ego.start_frame + i
            g = gap(
                cbf,
                alpha,
                ego.positions[i],
                AgentState(
                    agent_id=agent_id,
                    position=act.positions[i],
                    velocity=differentiate(act, frame),
                ),
                AgentState(
                    agent_id=agent_id,
                    position=pred.positions[i],
                    velocity=differentiate(pred, frame),
                ),
                lam,
            )
            if g > worst:
                worst = g
    return squash.value(worst)


def lambda_safe_bound(
    bounds: BoundSet,
    alpha: ClassKappa,
    epsilon_safe: float,
    squash: Squashing = _DEFAULT_SQUASH,
) -> float:
    """Margin level below which the window loss cannot exceed epsilon_safe,
    given the regularity and prediction-error bounds."""
    return (
        squash.inverse(epsilon_safe)
        - bounds.e_d
        - alpha.lipschitz * bounds.m_h * bounds.e_v
    )


def make_certificate(
    bounds: BoundSet,
    alpha: ClassKappa,
    epsilon_safe: float,
    squash: Squashing = _DEFAULT_SQUASH,
) -> SafetyCertificate:
    """Certificate at the sharpest margin level the bounds support."""
    return SafetyCertificate(
        epsilon_safe=epsilon_safe,
        lambda_safe=lambda_safe_bound(bounds, alpha, epsilon_safe, squash),
    )


def risk_bound(state: ConformalState, lambda_safe: float, k_prime: int):
    """Realized prefix-average loss and its guaranteed ceiling.

    Args:
        lambda_safe: certified margin level for a loss level at or below
            the state's target epsilon.
        k_prime: prefix length, between 1 and the number of recorded
            losses.

    Returns:
        (average, bound) with average <= bound whenever lambda_safe
        certifies a loss level epsilon_safe <= epsilon.

    Raises:
        ConfigError: the state started below lambda_safe - eta, where
            the guarantee does not apply.
    """
    if not isinstance(k_prime, int) or k_prime < 1:
        raise InputError("k_prime must be a positive integer")
    if k_prime > len(state.loss_history):
        raise InputError(
            f"k_prime {k_prime} exceeds {len(state.loss_history)} recorded losses"
        )
    if not math.isfinite(float(lambda_safe)):
        raise InputError("lambda_safe must be finite")
    if state.lambda_initial < lambda_safe - state.eta:
        raise ConfigError(
            "the initial margin sits below lambda_safe - eta; "
            "the risk bound does not cover this configuration"
        )
    average = sum(state.loss_history[:k_prime]) / k_prime
    bound = state.epsilon + (
        state.lambda_initial - lambda_safe + state.eta
    ) / (state.eta * k_prime)
    return average, bound
