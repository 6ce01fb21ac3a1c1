"""Walking pattern generation: step buffer, preview control, swing curves.

CoM trajectories come from discrete LQ preview control on the cart-table
model; the reference is rebuilt from the step data buffer every 2 ms tick so
buffer mutations (including mid-swing landing retargets) flow into the motion
without resetting state. Swing feet follow per-axis quintics with a vertical
apex, rebuilt C2-continuously on retarget.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.linalg

from .errors import (
    InsufficientSteps,
    NumericalFailure,
    ReplanOutOfRange,
    RetargetTooLate,
    RevisionConflict,
)
from .geometry import quintic_coefficients, quintic_eval
from .planner import Footstep, Side
from . import stabilize

TELEMETRY_COLUMNS = [
    "t",
    "com_x",
    "com_y",
    "com_vx",
    "com_vy",
    "zmp_ref_x",
    "zmp_ref_y",
    "zmp_meas_x",
    "zmp_meas_y",
    "swing_x",
    "swing_y",
    "swing_z",
    "sdb_revision",
    "support_phase",
    "czmp_x",
    "czmp_y",
    "w_left",
    "w_right",
]


@dataclass(frozen=True)
class LipmParams:
    com_height: float = 0.7
    gravity: float = 9.81
    dt: float = 0.002
    # The slowest closed-loop pole is the pendulum constant exp(-omega dt),
    # so the preview tail only drops below 1e-3 of its head for horizons
    # beyond ~1.9 s at z_c = 0.7; 2.2 s leaves margin.
    preview_horizon: float = 2.2

    def __post_init__(self) -> None:
        if self.com_height <= 0 or self.dt <= 0:
            raise ValueError("com_height and dt must be positive")
        if self.preview_horizon < 1.0:
            raise ValueError("preview horizon must be at least 1 second")

    @property
    def n_preview(self) -> int:
        return int(round(self.preview_horizon / self.dt))

    @property
    def omega(self) -> float:
        return math.sqrt(self.gravity / self.com_height)


@dataclass
class ComState:
    x: float = 0.0
    y: float = 0.0
    vx: float = 0.0
    vy: float = 0.0
    ax: float = 0.0
    ay: float = 0.0

    def zmp(self, params: LipmParams) -> tuple[float, float]:
        """Cart-table ZMP, always derived from the state."""
        k = params.com_height / params.gravity
        return self.x - k * self.ax, self.y - k * self.ay


class StepState(Enum):
    PENDING = "pending"
    ACTIVE = "active"
    COMPLETED = "completed"


@dataclass
class StepData:
    target: Footstep
    duration: float
    dsp_fraction: float
    state: StepState = StepState.PENDING

    def __post_init__(self) -> None:
        if self.duration <= 0:
            raise ValueError("step duration must be positive")
        if not 0.0 <= self.dsp_fraction < 0.5:
            raise ValueError("dsp_fraction must be in [0, 0.5)")


@dataclass
class StepDataBuffer:
    """Ordered, mutable buffer of timed footstep commands.

    The revision counter increments on every mutation; writers pass the
    revision they read so stale updates are rejected instead of silently
    clobbering newer content.
    """

    entries: list[StepData] = field(default_factory=list)
    cursor: int = 0
    revision: int = 0
    active_start: float = 0.0
    step_duration: float = 0.5
    dsp_fraction: float = 0.1
    stopping: bool = False

    @property
    def active(self) -> StepData | None:
        if 0 <= self.cursor < len(self.entries):
            return self.entries[self.cursor]
        return None

    @property
    def pending_count(self) -> int:
        if self.active is None:
            return 0
        return len(self.entries) - self.cursor - 1

    def pending(self) -> list[StepData]:
        if self.active is None:
            return []
        return self.entries[self.cursor + 1 :]


def update_sdb(
    sdb: StepDataBuffer,
    new_steps: list[Footstep],
    at_revision: int,
    *,
    retarget_active: bool = False,
    replan_limit: float = 0.5,
) -> StepDataBuffer:
    """Replace the buffer's future content with a freshly planned sequence.

    Only pending entries and (optionally) the active step's landing target
    change; the active step keeps its timing. A retargeted active step may
    move at most `replan_limit` meters from its previous target. Returns a
    new buffer with the revision bumped.
    """
    if at_revision != sdb.revision:
        raise RevisionConflict(
            f"update based on revision {at_revision}, buffer is at {sdb.revision}"
        )
    if len(new_steps) < 2:
        raise InsufficientSteps("continued walking requires at least two future steps")

    entries = [replace(e) for e in sdb.entries[: sdb.cursor + 1]]
    rest = new_steps
    if retarget_active:
        if sdb.active is None:
            raise ValueError("no active step to retarget")
        old = entries[sdb.cursor]
        new_target = new_steps[0]
        if new_target.side is not old.target.side:
            raise ValueError("retargeted step must keep the active side")
        disp = math.sqrt(
            (new_target.x - old.target.x) ** 2
            + (new_target.y - old.target.y) ** 2
            + (new_target.z - old.target.z) ** 2
        )
        if disp > replan_limit + 1e-12:
            raise ReplanOutOfRange(
                f"retarget displacement {disp:.3f} m exceeds limit {replan_limit:.3f} m"
            )
        entries[sdb.cursor] = StepData(
            new_target, old.duration, old.dsp_fraction, StepState.ACTIVE
        )
        rest = new_steps[1:]

    prev_side = entries[-1].target.side if entries else None
    for step in rest:
        if prev_side is not None and step.side is not prev_side.opposite:
            raise ValueError("footstep sides must alternate")
        entries.append(StepData(step, sdb.step_duration, sdb.dsp_fraction, StepState.PENDING))
        prev_side = step.side

    return StepDataBuffer(
        entries=entries,
        cursor=sdb.cursor,
        revision=sdb.revision + 1,
        active_start=sdb.active_start,
        step_duration=sdb.step_duration,
        dsp_fraction=sdb.dsp_fraction,
        stopping=False,
    )


# --- preview control -------------------------------------------------------


@dataclass
class PreviewGains:
    """Gains of the incremental LQ tracking law.

    Per axis the control increment is
        du = -gain_integral * (zmp - ref[0]) - gain_state . dx
             + gain_preview . diff(ref window)
    where dx is the state increment over one tick; integrating du gives the
    jerk command. Acting on reference increments keeps a constant reference
    exactly force-free, so standing is a true fixed point.
    """

    gain_integral: float
    gain_state: np.ndarray  # (3,) on the state increment
    gain_preview: np.ndarray  # (N,) on future reference increments
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    closed_loop: np.ndarray  # (4, 4) augmented closed-loop matrix


def preview_gains(
    params: LipmParams, q_error: float = 1.0, q_state: float = 0.0, r: float = 1e-6
) -> PreviewGains:
    """LQ tracking gains for the discrete cart-table with integrated error.

    The Riccati equation is solved for the incremental system whose state is
    the current tracking error plus the one-tick state increment; the preview
    sequence weights future reference increments over the horizon.
    """
    dt = params.dt
    zc_g = params.com_height / params.gravity
    a = np.array([[1.0, dt, dt * dt / 2.0], [0.0, 1.0, dt], [0.0, 0.0, 1.0]])
    b = np.array([[dt**3 / 6.0], [dt * dt / 2.0], [dt]])
    c = np.array([[1.0, 0.0, -zc_g]])

    # Augmented state [zmp error; state increment]; future reference
    # increments enter the error row as a previewable disturbance.
    a_aug = np.zeros((4, 4))
    a_aug[0, 0] = 1.0
    a_aug[0, 1:] = (c @ a)[0]
    a_aug[1:, 1:] = a
    b_aug = np.vstack([c @ b, b])
    q_aug = np.diag([q_error, q_state, q_state, q_state])
    r_mat = np.array([[r]])

    try:
        p = scipy.linalg.solve_discrete_are(a_aug, b_aug, q_aug, r_mat)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy internal
        raise NumericalFailure(f"Riccati solve failed: {exc}") from exc

    denom = (r_mat + b_aug.T @ p @ b_aug).item()
    feedback = (b_aug.T @ p @ a_aug) / denom  # du = -feedback @ [e_ref; dx]
    closed = a_aug - b_aug @ feedback
    if np.max(np.abs(np.linalg.eigvals(closed))) >= 1.0:
        raise NumericalFailure("closed-loop preview system is not stable")

    n = params.n_preview
    gp = np.empty(n)
    gr = np.array([1.0, 0.0, 0.0, 0.0])
    x = p @ gr
    bt = b_aug[:, 0]
    for i in range(n):
        gp[i] = float(bt @ x) / denom
        x = closed.T @ x

    return PreviewGains(
        gain_integral=float(feedback[0, 0]),
        gain_state=feedback[0, 1:].copy(),
        gain_preview=gp,
        a=a,
        b=b[:, 0],
        c=c[0],
        closed_loop=closed,
    )


class PreviewController:
    """Per-axis incremental preview tracking; owns the integrated jerk."""

    def __init__(self, gains: PreviewGains):
        self.gains = gains
        self.u = np.zeros(2)
        self._prev: list[np.ndarray | None] = [None, None]

    def reset(self) -> None:
        self.u[:] = 0.0
        self._prev = [None, None]

    def tick(self, state: ComState, ref_x: np.ndarray, ref_y: np.ndarray) -> ComState:
        """One closed-loop integration step; jerk is the control input.

        The reference windows carry n_preview + 1 samples: the current tick's
        reference followed by the preview horizon.
        """
        g = self.gains
        n = g.gain_preview.size
        out = []
        for axis, (vec, ref) in enumerate(
            (
                (np.array([state.x, state.vx, state.ax]), ref_x),
                (np.array([state.y, state.vy, state.ay]), ref_y),
            )
        ):
            prev = self._prev[axis]
            delta = vec - prev if prev is not None else np.zeros(3)
            err = float(g.c @ vec) - ref[0]
            du = (
                -g.gain_integral * err
                - float(g.gain_state @ delta)
                + float(g.gain_preview @ np.diff(ref[: n + 1]))
            )
            self.u[axis] += du
            self._prev[axis] = vec
            out.append(g.a @ vec + g.b * self.u[axis])
        nx, ny = out
        return ComState(x=nx[0], y=ny[0], vx=nx[1], vy=ny[1], ax=nx[2], ay=ny[2])


def zmp_reference(
    sdb: StepDataBuffer,
    t: float,
    params: LipmParams,
    feet: dict[Side, Footstep],
    anchor_xy: tuple[float, float] | None = None,
    strict: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample the piecewise ZMP reference over [t, t + horizon].

    During single support the reference holds the support-foot center; each
    step opens with a double-support ramp from the previous anchor to the new
    support. Past the final buffered step the last support is held. Standing
    (no active step) holds the mid-feet point. With `strict` set, an active
    walk with fewer than two pending steps raises unless the buffer is
    flagged as stopping.
    """
    knots_t, knots_x, knots_y = zmp_knots(sdb, feet, anchor_xy, strict=strict)
    times = t + np.arange(params.n_preview + 1) * params.dt
    return np.interp(times, knots_t, knots_x), np.interp(times, knots_t, knots_y)


STAND_RAMP = 0.2  # seconds to shift the reference to mid-feet after a walk


def zmp_knots(
    sdb: StepDataBuffer,
    feet: dict[Side, Footstep],
    anchor_xy: tuple[float, float] | None,
    strict: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Breakpoints of the piecewise-linear ZMP reference."""
    active = sdb.active
    if active is None:
        mx = 0.5 * (feet[Side.LEFT].x + feet[Side.RIGHT].x)
        my = 0.5 * (feet[Side.LEFT].y + feet[Side.RIGHT].y)
        if anchor_xy is not None and (anchor_xy[0] != mx or anchor_xy[1] != my):
            # Walk just ended: ramp from the final support to mid-feet.
            t0 = sdb.active_start
            return (
                np.array([t0, t0 + STAND_RAMP]),
                np.array([anchor_xy[0], mx]),
                np.array([anchor_xy[1], my]),
            )
        return np.array([0.0]), np.array([mx]), np.array([my])

    if strict and not sdb.stopping and sdb.pending_count < 2:
        raise InsufficientSteps(
            f"walking requires two pending steps, have {sdb.pending_count}"
        )

    if anchor_xy is None:
        swing0 = feet[active.target.side]
        anchor_xy = (swing0.x, swing0.y)

    ts = [sdb.active_start]
    xs = [anchor_xy[0]]
    ys = [anchor_xy[1]]
    support = feet[active.target.side.opposite]
    sup_xy = (support.x, support.y)
    t_step = sdb.active_start
    for entry in sdb.entries[sdb.cursor :]:
        dsp_end = t_step + entry.dsp_fraction * entry.duration
        t_end = t_step + entry.duration
        ts.extend([dsp_end, t_end])
        xs.extend([sup_xy[0], sup_xy[0]])
        ys.extend([sup_xy[1], sup_xy[1]])
        # The step's landing target becomes the next step's support.
        sup_xy = (entry.target.x, entry.target.y)
        t_step = t_end
    return np.array(ts), np.array(xs), np.array(ys)


# --- swing trajectories ----------------------------------------------------

_AXES = ("x", "y", "z", "yaw")


@dataclass
class SwingTrajectory:
    """Per-axis quintic segments with an explicit vertical apex."""

    t0: float
    touchdown_time: float
    target: Footstep
    apex: float
    apex_time: float
    apex_z: float
    segments: dict[str, list[tuple[float, float, np.ndarray]]]

    @property
    def duration(self) -> float:
        return self.touchdown_time - self.t0

    def evaluate(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Position, velocity, acceleration over (x, y, z, yaw) at time t."""
        t = min(max(t, self.t0), self.touchdown_time)
        pos = np.empty(4)
        vel = np.empty(4)
        acc = np.empty(4)
        for i, axis in enumerate(_AXES):
            for ta, tb, coeffs in self.segments[axis]:
                if t <= tb or (ta, tb, coeffs) is self.segments[axis][-1]:
                    d = tb - ta
                    tau = 0.0 if d == 0 else (t - ta) / d
                    p, v, a = quintic_eval(coeffs, min(tau, 1.0), d if d > 0 else 1.0)
                    pos[i], vel[i], acc[i] = p, v, a
                    break
        return pos, vel, acc


def _segment(ta, tb, p0, v0, a0, p1, v1, a1):
    d = tb - ta
    return (ta, tb, quintic_coefficients(p0, v0, a0, p1, v1, a1, d))


def swing_trajectory(
    start_pose: tuple[float, float, float, float],
    target: Footstep,
    duration: float,
    apex: float,
    t0: float = 0.0,
) -> SwingTrajectory:
    """Swing curve from a planted pose to the landing target.

    All axes start and end with zero velocity and acceleration. The vertical
    axis uses two segments meeting at the apex (max endpoint height plus the
    apex clearance) at mid-phase, so touchdown always arrives with zero
    vertical velocity.
    """
    if duration <= 0:
        raise ValueError("swing duration must be positive")
    x0, y0, z0, yaw0 = start_pose
    tf = t0 + duration
    tm = t0 + 0.5 * duration
    apex_z = max(z0, target.z) + apex
    segments = {
        "x": [_segment(t0, tf, x0, 0, 0, target.x, 0, 0)],
        "y": [_segment(t0, tf, y0, 0, 0, target.y, 0, 0)],
        "yaw": [_segment(t0, tf, yaw0, 0, 0, target.yaw, 0, 0)],
        "z": [
            _segment(t0, tm, z0, 0, 0, apex_z, 0, 0),
            _segment(tm, tf, apex_z, 0, 0, target.z, 0, 0),
        ],
    }
    return SwingTrajectory(t0, tf, target, apex, tm, apex_z, segments)


def retarget_swing(
    current: SwingTrajectory,
    now: float,
    foot_state: tuple[np.ndarray, np.ndarray, np.ndarray],
    new_target: Footstep,
    min_window: float = 0.1,
) -> SwingTrajectory:
    """Rebuild the swing toward a new landing target without moving touchdown.

    The new curve matches the supplied foot state (position, velocity,
    acceleration) at `now`, keeping the seam C2-continuous, and still lands
    with zero velocity at the original touchdown time. Raises when less than
    `min_window` seconds of swing remain.
    """
    tf = current.touchdown_time
    remaining = tf - now
    if remaining < min_window - 1e-12:
        raise RetargetTooLate(
            f"{remaining * 1000:.0f} ms of swing left, need {min_window * 1000:.0f} ms"
        )
    pos, vel, acc = foot_state
    ends = {"x": new_target.x, "y": new_target.y, "yaw": new_target.yaw}
    segments = {
        axis: [_segment(now, tf, pos[i], vel[i], acc[i], ends[axis], 0, 0)]
        for i, axis in ((0, "x"), (1, "y"), (3, "yaw"))
    }
    tm = current.apex_time
    apex_z = max(current.apex_z, new_target.z + current.apex, pos[2])
    if now < tm - 1e-9:
        segments["z"] = [
            _segment(now, tm, pos[2], vel[2], acc[2], apex_z, 0, 0),
            _segment(tm, tf, apex_z, 0, 0, new_target.z, 0, 0),
        ]
    else:
        segments["z"] = [_segment(now, tf, pos[2], vel[2], acc[2], new_target.z, 0, 0)]
    return SwingTrajectory(now, tf, new_target, current.apex, tm, apex_z, segments)


# --- gait engine -----------------------------------------------------------


@dataclass
class GaitEvent:
    kind: str  # touchdown | step_started | stand
    t: float
    footstep: Footstep | None = None
    step_index: int = -1


class GaitEngine:
    """Single owner of the walking state, ticked at the control rate.

    Consumes the step data buffer, runs preview control for the CoM, drives
    the swing foot, and appends one telemetry row per tick. Buffer mutations
    go through :meth:`apply_update`, which validates against the revision
    counter and commits atomically; the CoM state itself is never reset, so
    accepted mutations keep the motion continuous.
    """

    def __init__(
        self,
        params: LipmParams,
        gains: PreviewGains,
        left0: Footstep,
        right0: Footstep,
        *,
        step_duration: float = 0.5,
        dsp_fraction: float = 0.1,
        swing_apex: float = 0.05,
        retarget_window: float = 0.1,
        replan_limit: float = 0.5,
        capture_gain: float = 3.0,
        compliant_model: "stabilize.CompliantLipm | None" = None,
    ):
        self.params = params
        self.controller = PreviewController(gains)
        self.feet: dict[Side, Footstep] = {Side.LEFT: left0, Side.RIGHT: right0}
        self.sdb = StepDataBuffer(step_duration=step_duration, dsp_fraction=dsp_fraction)
        self.swing: SwingTrajectory | None = None
        self.swing_apex = swing_apex
        self.retarget_window = retarget_window
        self.replan_limit = replan_limit
        self.capture_fb = stabilize.CapturePointFeedback(
            gain=capture_gain, omega=params.omega
        )
        self.compliant = compliant_model
        self._compliant_sq_sum = 0.0

        mid_x = 0.5 * (left0.x + right0.x)
        mid_y = 0.5 * (left0.y + right0.y)
        self.com = ComState(x=mid_x, y=mid_y)
        self.anchor = (mid_x, mid_y)
        self._swing_display = np.array([left0.x, left0.y, left0.z])

        self._ticks = 0
        self._t_origin = 0.0
        self.step_counter = 0
        self.events: list[GaitEvent] = []
        self.telemetry: list[tuple] = []
        self._knots = None
        self._knots_key = None

    @property
    def t(self) -> float:
        return self._t_origin + self._ticks * self.params.dt

    @property
    def walking(self) -> bool:
        return self.sdb.active is not None

    def pop_events(self) -> list[GaitEvent]:
        out = self.events
        self.events = []
        return out

    def start_walking(self, steps: list[Footstep], anchor_mid: bool = True) -> None:
        if self.walking:
            raise ValueError("already walking")
        if len(steps) < 2:
            raise InsufficientSteps("need at least two steps to start walking")
        entries = []
        prev_side = None
        for step in steps:
            if prev_side is not None and step.side is not prev_side.opposite:
                raise ValueError("footstep sides must alternate")
            entries.append(
                StepData(step, self.sdb.step_duration, self.sdb.dsp_fraction)
            )
            prev_side = step.side
        entries[0].state = StepState.ACTIVE
        self.sdb = StepDataBuffer(
            entries=entries,
            cursor=0,
            revision=self.sdb.revision + 1,
            active_start=self.t,
            step_duration=self.sdb.step_duration,
            dsp_fraction=self.sdb.dsp_fraction,
            stopping=len(entries) - 1 < 2,
        )
        if anchor_mid:
            self.anchor = (
                0.5 * (self.feet[Side.LEFT].x + self.feet[Side.RIGHT].x),
                0.5 * (self.feet[Side.LEFT].y + self.feet[Side.RIGHT].y),
            )
        self.step_counter += 1
        self.events.append(GaitEvent("step_started", self.t, steps[0], self.step_counter))

    def apply_update(
        self, new_steps: list[Footstep], at_revision: int, retarget_active: bool = False
    ) -> None:
        """Validate and commit a buffer update; atomic on failure."""
        new_sdb = update_sdb(
            self.sdb,
            new_steps,
            at_revision,
            retarget_active=retarget_active,
            replan_limit=self.replan_limit,
        )
        new_swing = self.swing
        if retarget_active and self.swing is not None:
            state = self.swing.evaluate(self.t)
            new_swing = retarget_swing(
                self.swing, self.t, state, new_steps[0], self.retarget_window
            )
        new_sdb.stopping = new_sdb.pending_count < 2
        self.sdb = new_sdb
        self.swing = new_swing
        self._knots = None

    def tick(self) -> None:
        self._advance_phase()
        ref_x, ref_y = self._reference_window()
        zmp_meas = self.com.zmp(self.params)

        swing_pos = self._swing_position()
        czmp = stabilize.czmp(
            ref_cp=self._capture_point(),
            meas_cp=self._capture_point(),
            ref_zmp=(ref_x[0], ref_y[0]),
            fb=self.capture_fb,
        )
        left, right = self.feet[Side.LEFT], self.feet[Side.RIGHT]
        w_left, w_right = stabilize.foot_weight_distribution(
            czmp, (left.x, left.y), (right.x, right.y)
        )
        if self.compliant is not None:
            _, y_zmp = stabilize.compliant_step(
                self.compliant, self.com.y, self.params.dt, self.com.vy
            )
            self._compliant_sq_sum += (y_zmp - ref_y[0]) ** 2

        self.telemetry.append(
            (
                self.t,
                self.com.x,
                self.com.y,
                self.com.vx,
                self.com.vy,
                ref_x[0],
                ref_y[0],
                zmp_meas[0],
                zmp_meas[1],
                swing_pos[0],
                swing_pos[1],
                swing_pos[2],
                self.sdb.revision,
                self._phase_token(),
                czmp[0],
                czmp[1],
                w_left,
                w_right,
            )
        )

        self.com = self.controller.tick(self.com, ref_x, ref_y)
        self._ticks += 1

    def compliant_rms(self) -> float:
        n = len(self.telemetry)
        return math.sqrt(self._compliant_sq_sum / n) if n else 0.0

    # -- internals --

    def _capture_point(self) -> tuple[float, float]:
        w = self.params.omega
        return self.com.x + self.com.vx / w, self.com.y + self.com.vy / w

    def _phase_token(self) -> str:
        active = self.sdb.active
        if active is None:
            return "stand"
        ssp_start = self.sdb.active_start + active.dsp_fraction * active.duration
        if self.t < ssp_start:
            return "dsp"
        return "ssp_left" if active.target.side is Side.RIGHT else "ssp_right"

    def _swing_position(self) -> np.ndarray:
        active = self.sdb.active
        if self.swing is not None:
            pos, _, _ = self.swing.evaluate(self.t)
            self._swing_display = pos[:3].copy()
        elif active is not None:
            foot = self.feet[active.target.side]
            self._swing_display = np.array([foot.x, foot.y, foot.z])
        return self._swing_display

    def _advance_phase(self) -> None:
        while True:
            active = self.sdb.active
            if active is None:
                return
            t_end = self.sdb.active_start + active.duration
            if self.t < t_end - 1e-9:
                break
            side = active.target.side
            self.feet[side] = active.target
            support = self.feet[side.opposite]
            self.anchor = (support.x, support.y)
            active.state = StepState.COMPLETED
            self.swing = None
            self.events.append(GaitEvent("touchdown", t_end, active.target, self.step_counter))
            self.sdb.cursor += 1
            self.sdb.revision += 1
            self.sdb.active_start = t_end
            self._knots = None
            nxt = self.sdb.active
            if nxt is not None:
                nxt.state = StepState.ACTIVE
                self.step_counter += 1
                self.events.append(
                    GaitEvent("step_started", t_end, nxt.target, self.step_counter)
                )
                if self.sdb.pending_count < 2:
                    self.sdb.stopping = True
            else:
                self.events.append(GaitEvent("stand", t_end))

        active = self.sdb.active
        if active is not None and self.swing is None:
            ssp_start = self.sdb.active_start + active.dsp_fraction * active.duration
            if self.t >= ssp_start - 1e-9:
                foot = self.feet[active.target.side]
                self.swing = swing_trajectory(
                    (foot.x, foot.y, foot.z, foot.yaw),
                    active.target,
                    self.sdb.active_start + active.duration - ssp_start,
                    self.swing_apex,
                    t0=ssp_start,
                )

    def _reference_window(self) -> tuple[np.ndarray, np.ndarray]:
        key = (self.sdb.revision, self.sdb.cursor, self.sdb.active_start)
        if self._knots is None or self._knots_key != key:
            self._knots = zmp_knots(self.sdb, self.feet, self.anchor)
            self._knots_key = key
        kt, kx, ky = self._knots
        times = self.t + np.arange(self.params.n_preview + 1) * self.params.dt
        return np.interp(times, kt, kx), np.interp(times, kt, ky)
