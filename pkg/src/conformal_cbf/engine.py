"""Closed-loop replay: sense, predict, constrain, filter, track, integrate.

Frames are grouped into sensing windows of tau_frames frames.  At each
window boundary the scene's ground truth up to that frame counts as
released: the previous window's predictions are scored against what the
agents actually did and the constraint margin moves by
eta * (epsilon - loss); then agents within rho0 of the robot are sensed
and re-predicted over the horizon.  Inside a window every frame builds
one inflated barrier constraint per predicted agent from the prediction
at that frame, projects the goal-attracting reference velocity onto the
constraints, converts the projected command to an acceleration, and
integrates one frame with that acceleration held.

Windows without a scorable agent leave the margin untouched and record
no loss.  The first window never has predictions (there is no history
yet), so a run always starts unconstrained.
"""

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from itertools import product

import numpy as np

from conformal_cbf.barrier import (
    AgentState,
    ClassKappa,
    PotentialFieldCbf,
    build_conformal_constraint,
)
from conformal_cbf.conformal import NO_AGENTS, ConformalState, window_loss
from conformal_cbf.dynamics import (
    RobotState,
    TrackingActuator,
    double_integrator,
    step,
    track_velocity,
)
from conformal_cbf.errors import (
    ConfigError,
    InfeasibleError,
    InfeasibleRunError,
    InputError,
)
from conformal_cbf.predictor import (
    CONSTANT_VELOCITY,
    GROUND_TRUTH,
    NOISE_BOUNDED,
    PredictorKind,
    SampledTrajectory,
    differentiate,
    predict,
)
from conformal_cbf.qp import QpProblem, solve_with_relaxation
from conformal_cbf.scenario import (
    RobotTask,
    ScenarioFrameSet,
    reference_control,
    sensed_agents,
)


@dataclass(frozen=True)
class SimConfig:
    """Everything one run needs besides the scene and the task.

    k_att, when set, overrides the task's attraction gain so sweeps can
    vary it.  collision_distance and relax_lambda_step default to the
    barrier's zero-level distance and eta * (1/2 - epsilon).  The run
    seed is forwarded to the predictor, which derives all of its own
    randomness from it.
    """

    dt: float = 1.0 / 30.0
    tau_frames: int = 12
    horizon_frames: int = 40
    alpha_slope: float = 0.1
    k_acc: float = 2.0
    k_rep: float = 20.0
    k_att: float | None = None
    rho0: float = 400.0
    delta: float = 0.5
    eta: float = 100.0
    epsilon: float = 0.0
    lambda_initial: float = 0.0
    predictor: PredictorKind = PredictorKind(kind=CONSTANT_VELOCITY)
    max_frames: int = 2000
    seed: int = 0
    collision_distance: float | None = None
    relax_lambda_step: float | None = None
    relax_max_steps: int = 8
    integration_substeps: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ConfigError("dt must be positive and finite")
        if not isinstance(self.tau_frames, int) or self.tau_frames < 2:
            # a window needs two samples before its motion can be differenced
            raise ConfigError("tau_frames must be an integer >= 2")
        if not isinstance(self.horizon_frames, int) or self.horizon_frames < self.tau_frames:
            raise ConfigError("horizon_frames must cover at least one window")
        for name in ("alpha_slope", "k_acc", "k_rep", "rho0", "eta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0.0):
                raise ConfigError(f"{name} must be positive and finite")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie in (0, 1)")
        if not -0.5 < self.epsilon < 0.5:
            raise ConfigError("epsilon must lie in (-1/2, 1/2)")
        if not math.isfinite(self.lambda_initial):
            raise ConfigError("lambda_initial must be finite")
        if self.k_att is not None and not (math.isfinite(self.k_att) and self.k_att > 0.0):
            raise ConfigError("k_att must be positive when given")
        if not isinstance(self.max_frames, int) or self.max_frames < 1:
            raise ConfigError("max_frames must be a positive integer")
        if self.collision_distance is not None and not (
            math.isfinite(self.collision_distance) and self.collision_distance > 0.0
        ):
            raise ConfigError("collision_distance must be positive when given")
        if self.relax_lambda_step is not None and not (
            math.isfinite(self.relax_lambda_step) and self.relax_lambda_step > 0.0
        ):
            raise ConfigError("relax_lambda_step must be positive when given")
        if not isinstance(self.relax_max_steps, int) or self.relax_max_steps < 0:
            raise ConfigError("relax_max_steps must be a nonnegative integer")
        if not isinstance(self.integration_substeps, int) or self.integration_substeps < 1:
            raise ConfigError("integration_substeps must be a positive integer")

    def cbf(self) -> PotentialFieldCbf:
        return PotentialFieldCbf(k_rep=self.k_rep, rho0=self.rho0, delta=self.delta)

    def class_kappa(self) -> ClassKappa:
        return ClassKappa.linear(self.alpha_slope)

    def collision_threshold(self) -> float:
        if self.collision_distance is not None:
            return self.collision_distance
        return self.cbf().zero_level_distance()

    def relaxation_step(self) -> float:
        if self.relax_lambda_step is not None:
            return self.relax_lambda_step
        return self.eta * (0.5 - self.epsilon)


@dataclass(frozen=True)
class RunMetrics:
    """Outcome of one run.

    t_goal is None when the goal was never reached; d_min is inf and
    l_avg is nan when the scene never offered an agent or a scorable
    window.  lambda_trace holds (window index, margin) pairs covering
    the margin before each window and after the last scored one.
    """

    t_goal: float | None
    n_collide: int
    d_min: float
    l_avg: float
    inflation_events: int
    lambda_trace: tuple

    @property
    def reached(self) -> bool:
        return self.t_goal is not None


def run(
    config: SimConfig,
    scene: ScenarioFrameSet,
    task: RobotTask,
    trace_path=None,
) -> RunMetrics:
    """Execute the closed loop on one scene.

    Args:
        trace_path: optional file that receives one JSON record per
            frame (state, margin, constraint count, QP status).

    Raises:
        ConfigError: config.dt disagrees with the scene's frame rate.
        InfeasibleRunError: the constraint set stayed empty even after
            exhausting relaxation; diagnostics carry the frame state.
    """
    cbf = config.cbf()
    alpha = config.class_kappa()
    model = double_integrator()
    actuator = TrackingActuator(gain=config.k_acc)
    kind = replace(config.predictor, seed=config.seed)
    if config.k_att is not None:
        task = replace(task, attract_gain=config.k_att)
    if scene.frames:
        if not math.isclose(config.dt, scene.dt, rel_tol=1e-9, abs_tol=0.0):
            raise ConfigError(
                f"config dt {config.dt} does not match scene frame rate "
                f"1/{scene.fps}"
            )
        dt = scene.dt  # bitwise the scene's grid so windows align exactly
    else:
        dt = config.dt

    collision_d = config.collision_threshold()
    relax_step = config.relaxation_step()
    margin = ConformalState(
        lam=config.lambda_initial, eta=config.eta, epsilon=config.epsilon
    )
    state = task.start
    start = scene.start_frame
    tau = config.tau_frames

    predictions: dict = {}
    ego_window: list = []
    window_start = start
    lambda_trace = [(1, margin.lam)]
    n_collide = 0
    d_min = math.inf
    inflation_events = 0
    t_goal = None

    trace_fh = open(trace_path, "w", encoding="utf-8") if trace_path else None
    try:
        for offset in range(config.max_frames):
            frame = start + offset
            if offset % tau == 0:
                if offset > 0:
                    loss = _score_window(
                        cbf, alpha, margin.lam, predictions, ego_window,
                        window_start, dt, scene,
                    )
                    margin.update(loss)
                    lambda_trace.append((offset // tau + 1, margin.lam))
                predictions = _predict_window(config, kind, cbf, scene, state, frame)
                ego_window = []
                window_start = frame

            ego_window.append(np.array(state.position, dtype=np.float64))
            actual = scene.agents_at(frame)
            if actual:
                nearest = min(
                    float(np.linalg.norm(pos - state.position))
                    for pos in actual.values()
                )
                d_min = min(d_min, nearest)
                if nearest < collision_d:
                    n_collide += 1
            if float(np.linalg.norm(task.goal - state.position)) <= task.goal_radius:
                t_goal = offset * dt
                break

            rows = []
            for agent_id in sorted(predictions):
                ptraj = predictions[agent_id]
                if not ptraj.contains(frame):
                    continue
                pos = ptraj.position_at(frame)
                dist = float(np.linalg.norm(pos - state.position))
                if dist <= 0.0 or dist >= config.rho0:
                    continue
                rows.append(
                    build_conformal_constraint(
                        cbf,
                        alpha,
                        state.position,
                        AgentState(
                            agent_id=agent_id,
                            position=pos,
                            velocity=differentiate(ptraj, frame),
                        ),
                        margin.lam,
                    )
                )
            reference = reference_control(task, state)
            try:
                solution, inflation = solve_with_relaxation(
                    QpProblem(reference=reference, constraints=rows),
                    relax_step,
                    config.relax_max_steps,
                )
            except InfeasibleError as exc:
                raise InfeasibleRunError(
                    f"no feasible velocity at frame {frame} after "
                    f"{config.relax_max_steps} relaxation steps",
                    diagnostics={
                        "frame": frame,
                        "position": [float(v) for v in state.position],
                        "velocity": [float(v) for v in state.velocity],
                        "lambda": float(margin.lam),
                        "n_constraints": len(rows),
                        "agent_ids": [c.agent_id for c in rows],
                        "relax_lambda_step": relax_step,
                        "relax_max_steps": config.relax_max_steps,
                    },
                ) from exc
            if inflation > 0.0:
                inflation_events += 1

            if trace_fh is not None:
                trace_fh.write(
                    json.dumps(
                        {
                            "frame": frame,
                            "position": [float(v) for v in state.position],
                            "velocity": [float(v) for v in state.velocity],
                            "lambda": float(margin.lam),
                            "n_constraints": len(rows),
                            "status": "relaxed" if inflation > 0.0 else "ok",
                            "inflation": float(inflation),
                            "command": [float(v) for v in solution.decision],
                            "tracking_error": float(
                                np.linalg.norm(state.velocity - solution.decision)
                            ),
                        }
                    )
                    + "\n"
                )

            accel = track_velocity(actuator, state.velocity, solution.decision)
            sub_dt = dt / config.integration_substeps
            for _ in range(config.integration_substeps):
                state = step(model, state, accel, sub_dt)

        if len(ego_window) == tau:
            # the run ended exactly on a window boundary; score the
            # completed window so its loss is not silently dropped
            loss = _score_window(
                cbf, alpha, margin.lam, predictions, ego_window,
                window_start, dt, scene,
            )
            margin.update(loss)
            lambda_trace.append(
                ((window_start - start) // tau + 2, margin.lam)
            )
    finally:
        if trace_fh is not None:
            trace_fh.close()

    history = margin.loss_history
    l_avg = sum(history) / len(history) if history else math.nan
    return RunMetrics(
        t_goal=t_goal,
        n_collide=n_collide,
        d_min=d_min,
        l_avg=l_avg,
        inflation_events=inflation_events,
        lambda_trace=tuple(lambda_trace),
    )


def _predict_window(config, kind, cbf, scene, state, frame):
    """Predictions for the agents sensed at a window boundary.

    Agents without two frames of contiguous history, or without a
    recorded future when an oracle kind needs one, are left out; they
    simply contribute no constraint this window.
    """
    sensed = sensed_agents(scene, state.position, config.rho0, frame)
    histories = {}
    for agent_id, _ in sensed:
        hist = scene.history_of(agent_id, frame, config.tau_frames)
        if hist is not None and hist.n_samples >= 2:
            histories[agent_id] = hist
    if not histories:
        return {}
    futures = None
    if kind.kind in (GROUND_TRUTH, NOISE_BOUNDED):
        futures = {}
        for agent_id in list(histories):
            fut = scene.future_of(agent_id, frame, config.horizon_frames)
            if fut is None:
                del histories[agent_id]
            else:
                futures[agent_id] = fut
        if not histories:
            return {}
    return predict(
        kind,
        histories,
        config.horizon_frames,
        futures=futures,
        cbf=cbf,
        ego_positions=np.array(state.position, dtype=np.float64),
    )


def _score_window(cbf, alpha, lam, predictions, ego_positions, window_start, dt, scene):
    """Worst per-agent window loss against the revealed ground truth.

    Each agent is scored over the prefix where its prediction, its
    actual track, and the ego window all exist; the squash map is
    monotone, so the max over per-agent losses is the loss over the
    union of their instants.
    """
    if not predictions or len(ego_positions) < 2:
        return NO_AGENTS
    ego = SampledTrajectory(
        agent_id=-1,
        start_frame=window_start,
        dt=dt,
        positions=np.asarray(ego_positions, dtype=np.float64),
    )
    worst = None
    for agent_id in sorted(predictions):
        ptraj = predictions[agent_id]
        actual = scene.future_of(agent_id, window_start, ego.n_samples)
        if actual is None:
            continue
        n = min(ego.n_samples, actual.n_samples, ptraj.n_samples)
        if n < 2:
            continue
        loss = window_loss(
            cbf,
            alpha,
            {agent_id: ptraj.prefix(n)},
            {agent_id: actual.prefix(n)},
            ego.prefix(n),
            lam,
        )
        if worst is None or loss > worst:
            worst = loss
    return NO_AGENTS if worst is None else worst


@dataclass(frozen=True)
class SweepRow:
    """One grid cell: the parameter overrides and the outcome, with
    error text instead of metrics when the run failed."""

    params: dict
    metrics: RunMetrics | None
    error: str | None


def _run_cell(payload):
    cell, config, scene, task, error = payload
    if error is not None:
        return SweepRow(params=cell, metrics=None, error=error)
    try:
        return SweepRow(params=cell, metrics=run(config, scene, task), error=None)
    except Exception as exc:
        return SweepRow(params=cell, metrics=None, error=f"{type(exc).__name__}: {exc}")


def sweep(
    base: SimConfig,
    grid: dict,
    scene: ScenarioFrameSet,
    task: RobotTask,
    workers: int = 1,
) -> list:
    """Run every cell of the cartesian grid over SimConfig fields.

    Cells are ordered by grid position (first key outermost).  Each run
    is independent and uses the base seed, so results do not depend on
    workers; failures become rows with error text and the sweep
    continues.
    """
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers must be a positive integer")
    known = {f.name for f in fields(SimConfig)}
    for name in grid:
        if name not in known:
            raise ConfigError(f"unknown sweep parameter {name!r}")
        if not list(grid[name]):
            raise ConfigError(f"sweep parameter {name!r} has no values")
    names = list(grid)
    payloads = []
    for combo in product(*(list(grid[n]) for n in names)):
        cell = dict(zip(names, combo))
        try:
            cfg = replace(base, **cell)
            payloads.append((cell, cfg, scene, task, None))
        except (ConfigError, InputError) as exc:
            payloads.append((cell, None, scene, task, f"{type(exc).__name__}: {exc}"))
    if workers == 1 or len(payloads) <= 1:
        return [_run_cell(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_cell, payloads))
