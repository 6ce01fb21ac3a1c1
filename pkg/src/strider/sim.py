"""Deterministic scenario engine closing the perception-planning-control loop.

Terrain boxes feed a synthetic depth pipeline (cloud -> plane segmentation ->
steppable grid) whose results reach the step buffer after a modeled sensing
and communication latency. Footstep plans are requested once per step during
single support; scripted terrain disturbances trigger an additional reactive
pipeline pass that may retarget the active swing mid-flight. Everything runs
on the 2 ms control clock from explicit seeds, so a scenario replays
bit-identically.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Point, Polygon
from shapely.ops import unary_union

from .errors import (
    ConfigError,
    InvalidEvent,
    NoFeasiblePath,
    ReplanOutOfRange,
    RetargetTooLate,
)
from .geometry import rect_corners
from .mapping import (
    MappingConfig,
    RegionOfInterest,
    SteppableGrid,
    TerrainBox,
    generate_synthetic_cloud,
    map_cloud,
)
from .pattern import (
    TELEMETRY_COLUMNS,
    GaitEngine,
    LipmParams,
    preview_gains,
)
from .planner import (
    Footstep,
    PlannerConfig,
    ReachabilityModel,
    SafetyScorer,
    Side,
    plan,
    validity_test,
)

SCENARIO_SCHEMA_VERSION = 1

ACTIVE_TARGET = "active_target"


@dataclass(frozen=True)
class LatencyModel:
    """Serial pipeline stage latencies in seconds."""

    depth_acquire: float = 0.033
    mapping: float = 0.067
    planning: float = 0.005
    comm: float = 0.010

    def __post_init__(self) -> None:
        for name in ("depth_acquire", "mapping", "planning", "comm"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def total(self) -> float:
        return self.depth_acquire + self.mapping + self.planning + self.comm

    @property
    def post_acquire(self) -> float:
        return self.mapping + self.planning + self.comm


@dataclass
class Disturbance:
    """Scripted terrain change: move a stone at a time or swing phase."""

    stone_id: str
    dx: float
    dy: float
    time: float | None = None
    step_index: int | None = None
    swing_phase: float | None = None

    def __post_init__(self) -> None:
        timed = self.time is not None
        phased = self.step_index is not None and self.swing_phase is not None
        if timed == phased:
            raise ValueError("disturbance needs either a time or a step/phase trigger")


@dataclass(frozen=True)
class WalkParams:
    step_time: float = 0.5
    dsp_fraction: float = 0.1
    speed_target: float = 0.3
    swing_apex: float = 0.05

    def __post_init__(self) -> None:
        if self.step_time <= 0 or self.speed_target <= 0:
            raise ValueError("step_time and speed_target must be positive")


@dataclass
class Scenario:
    name: str
    terrain: list[TerrainBox]
    walk: WalkParams = field(default_factory=WalkParams)
    disturbances: list[Disturbance] = field(default_factory=list)
    latency: LatencyModel = field(default_factory=LatencyModel)
    cloud_sigma: float = 0.002
    cloud_density: float = 50000.0
    seed: int = 0
    mapping: dict = field(default_factory=dict)
    roi_length: float = 2.0
    roi_width: float = 1.0
    roi_back_margin: float = 0.25
    planner_iterations: int = 350
    max_steps: int = 4
    min_steps: int = 2
    forward_bias: float = 0.8
    # The perceived grid is optimistic at surface edges by up to a cell plus
    # noise spill; planning with an inflated footprint keeps the real foot
    # fully on true terrain.
    planner_margin: float = 0.015
    reach: ReachabilityModel = field(default_factory=ReachabilityModel)
    foot_length: float = 0.24
    foot_width: float = 0.13
    stance_left: tuple[float, float, float, float] = (0.0, 0.13, 0.0, 0.0)
    stance_right: tuple[float, float, float, float] = (0.0, -0.13, 0.0, 0.0)
    replan_enabled: bool = True
    replan_limit: float = 0.5
    course_end_x: float = 3.2
    max_sim_time: float = 30.0
    com_height: float = 0.7
    schema_version: int = SCENARIO_SCHEMA_VERSION

    def stance_footsteps(self) -> tuple[Footstep, Footstep]:
        lx, ly, lz, lyaw = self.stance_left
        rx, ry, rz, ryaw = self.stance_right
        dims = dict(length=self.foot_length, width=self.foot_width)
        return (
            Footstep(Side.LEFT, lx, ly, lz, lyaw, **dims),
            Footstep(Side.RIGHT, rx, ry, rz, ryaw, **dims),
        )

    def mapping_config(self, origin_x: float, origin_y: float, seed: int) -> MappingConfig:
        roi = RegionOfInterest(
            length=self.roi_length,
            width=self.roi_width,
            origin_x=origin_x,
            origin_y=origin_y,
        )
        return MappingConfig(roi=roi, seed=seed, **self.mapping)

    def planner_config(self, seed: int) -> PlannerConfig:
        return PlannerConfig(
            iterations=self.planner_iterations,
            max_steps=self.max_steps,
            min_steps=self.min_steps,
            forward_bias=self.forward_bias,
            seed=seed,
        )

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        return _scenario_from_dict(doc)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "terrain": [
                {"id": b.box_id, "center": list(b.center), "size": list(b.size)}
                for b in self.terrain
            ],
            "walk": {
                "step_time": self.walk.step_time,
                "dsp_fraction": self.walk.dsp_fraction,
                "speed_target": self.walk.speed_target,
                "swing_apex": self.walk.swing_apex,
            },
            "disturbances": [
                {
                    "stone_id": d.stone_id,
                    "dx": d.dx,
                    "dy": d.dy,
                    **({"time": d.time} if d.time is not None else {}),
                    **(
                        {"step_index": d.step_index, "swing_phase": d.swing_phase}
                        if d.step_index is not None
                        else {}
                    ),
                }
                for d in self.disturbances
            ],
            "latency": {
                "depth_acquire": self.latency.depth_acquire,
                "mapping": self.latency.mapping,
                "planning": self.latency.planning,
                "comm": self.latency.comm,
            },
            "cloud": {"sigma": self.cloud_sigma, "density": self.cloud_density},
            "seed": self.seed,
            "mapping": dict(self.mapping),
            "roi": {
                "length": self.roi_length,
                "width": self.roi_width,
                "back_margin": self.roi_back_margin,
            },
            "planner": {
                "iterations": self.planner_iterations,
                "max_steps": self.max_steps,
                "min_steps": self.min_steps,
                "forward_bias": self.forward_bias,
                "margin": self.planner_margin,
            },
            "reach": {
                "forward": list(self.reach.forward),
                "lateral": list(self.reach.lateral),
                "yaw_deg": [math.degrees(self.reach.yaw[0]), math.degrees(self.reach.yaw[1])],
                "max_height_delta": self.reach.max_height_delta,
            },
            "footprint": [self.foot_length, self.foot_width],
            "stance": {"left": list(self.stance_left), "right": list(self.stance_right)},
            "replan_enabled": self.replan_enabled,
            "replan_limit": self.replan_limit,
            "course_end_x": self.course_end_x,
            "max_sim_time": self.max_sim_time,
            "com_height": self.com_height,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _take(doc: dict, key: str, default, context: str):
    if key in doc:
        return doc.pop(key)
    if default is _REQUIRED:
        raise ConfigError(f"missing required key: {context}{key}")
    return default


_REQUIRED = object()


def _reject_unknown(doc: dict, context: str) -> None:
    if doc:
        raise ConfigError(f"unknown key: {context}{next(iter(doc))}")


def _scenario_from_dict(doc: dict) -> Scenario:
    doc = dict(doc)
    version = _take(doc, "schema_version", SCENARIO_SCHEMA_VERSION, "")
    if version != SCENARIO_SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version: {version}")
    name = _take(doc, "name", "unnamed", "")

    terrain = []
    for i, raw in enumerate(_take(doc, "terrain", _REQUIRED, "")):
        raw = dict(raw)
        ctx = f"terrain[{i}]."
        terrain.append(
            TerrainBox(
                box_id=str(_take(raw, "id", f"box{i}", ctx)),
                center=tuple(_take(raw, "center", _REQUIRED, ctx)),
                size=tuple(_take(raw, "size", _REQUIRED, ctx)),
            )
        )
        _reject_unknown(raw, ctx)

    walk_raw = dict(_take(doc, "walk", {}, ""))
    walk = WalkParams(
        step_time=_take(walk_raw, "step_time", 0.5, "walk."),
        dsp_fraction=_take(walk_raw, "dsp_fraction", 0.1, "walk."),
        speed_target=_take(walk_raw, "speed_target", 0.3, "walk."),
        swing_apex=_take(walk_raw, "swing_apex", 0.05, "walk."),
    )
    _reject_unknown(walk_raw, "walk.")

    disturbances = []
    for i, raw in enumerate(_take(doc, "disturbances", [], "")):
        raw = dict(raw)
        ctx = f"disturbances[{i}]."
        disturbances.append(
            Disturbance(
                stone_id=str(_take(raw, "stone_id", _REQUIRED, ctx)),
                dx=float(_take(raw, "dx", 0.0, ctx)),
                dy=float(_take(raw, "dy", 0.0, ctx)),
                time=_take(raw, "time", None, ctx),
                step_index=_take(raw, "step_index", None, ctx),
                swing_phase=_take(raw, "swing_phase", None, ctx),
            )
        )
        _reject_unknown(raw, ctx)

    lat_raw = dict(_take(doc, "latency", {}, ""))
    latency = LatencyModel(
        depth_acquire=_take(lat_raw, "depth_acquire", 0.033, "latency."),
        mapping=_take(lat_raw, "mapping", 0.067, "latency."),
        planning=_take(lat_raw, "planning", 0.005, "latency."),
        comm=_take(lat_raw, "comm", 0.010, "latency."),
    )
    _reject_unknown(lat_raw, "latency.")

    cloud_raw = dict(_take(doc, "cloud", {}, ""))
    cloud_sigma = _take(cloud_raw, "sigma", 0.002, "cloud.")
    cloud_density = _take(cloud_raw, "density", 50000.0, "cloud.")
    _reject_unknown(cloud_raw, "cloud.")

    mapping_raw = dict(_take(doc, "mapping", {}, ""))
    allowed_mapping = {
        "voxel_downsample",
        "ransac_dist_threshold",
        "ransac_max_planes",
        "ransac_min_inliers",
        "ransac_iterations",
        "max_tilt_deg",
        "resolution",
        "min_points_per_cell",
    }
    for key in mapping_raw:
        if key not in allowed_mapping:
            raise ConfigError(f"unknown key: mapping.{key}")

    roi_raw = dict(_take(doc, "roi", {}, ""))
    roi_length = _take(roi_raw, "length", 2.0, "roi.")
    roi_width = _take(roi_raw, "width", 1.0, "roi.")
    roi_back_margin = _take(roi_raw, "back_margin", 0.25, "roi.")
    _reject_unknown(roi_raw, "roi.")

    plan_raw = dict(_take(doc, "planner", {}, ""))
    planner_iterations = _take(plan_raw, "iterations", 350, "planner.")
    max_steps = _take(plan_raw, "max_steps", 4, "planner.")
    min_steps = _take(plan_raw, "min_steps", 2, "planner.")
    forward_bias = _take(plan_raw, "forward_bias", 0.8, "planner.")
    planner_margin = _take(plan_raw, "margin", 0.015, "planner.")
    _reject_unknown(plan_raw, "planner.")

    reach_raw = dict(_take(doc, "reach", {}, ""))
    yaw_deg = _take(reach_raw, "yaw_deg", [-20.0, 20.0], "reach.")
    reach = ReachabilityModel(
        forward=tuple(_take(reach_raw, "forward", [-0.05, 0.35], "reach.")),
        lateral=tuple(_take(reach_raw, "lateral", [0.15, 0.30], "reach.")),
        yaw=(math.radians(yaw_deg[0]), math.radians(yaw_deg[1])),
        max_height_delta=_take(reach_raw, "max_height_delta", 0.15, "reach."),
    )
    _reject_unknown(reach_raw, "reach.")

    footprint = _take(doc, "footprint", [0.24, 0.13], "")
    stance_raw = dict(_take(doc, "stance", {}, ""))
    stance_left = tuple(_take(stance_raw, "left", [0.0, 0.13, 0.0, 0.0], "stance."))
    stance_right = tuple(_take(stance_raw, "right", [0.0, -0.13, 0.0, 0.0], "stance."))
    _reject_unknown(stance_raw, "stance.")

    scenario = Scenario(
        name=name,
        terrain=terrain,
        walk=walk,
        disturbances=disturbances,
        latency=latency,
        cloud_sigma=cloud_sigma,
        cloud_density=cloud_density,
        seed=int(_take(doc, "seed", 0, "")),
        mapping=mapping_raw,
        roi_length=roi_length,
        roi_width=roi_width,
        roi_back_margin=roi_back_margin,
        planner_iterations=planner_iterations,
        max_steps=max_steps,
        min_steps=min_steps,
        forward_bias=forward_bias,
        planner_margin=planner_margin,
        reach=reach,
        foot_length=footprint[0],
        foot_width=footprint[1],
        stance_left=stance_left,
        stance_right=stance_right,
        replan_enabled=bool(_take(doc, "replan_enabled", True, "")),
        replan_limit=float(_take(doc, "replan_limit", 0.5, "")),
        course_end_x=float(_take(doc, "course_end_x", 3.2, "")),
        max_sim_time=float(_take(doc, "max_sim_time", 30.0, "")),
        com_height=float(_take(doc, "com_height", 0.7, "")),
    )
    _reject_unknown(doc, "")
    return scenario


class World:
    """Ground-truth terrain with a timestamped disturbance history, so the
    box layout at any past instant can be reconstructed exactly."""

    def __init__(self, boxes: list[TerrainBox]):
        self._initial = {b.box_id: b for b in boxes}
        if len(self._initial) != len(boxes):
            raise ValueError("terrain box ids must be unique")
        self._moves: list[tuple[float, str, float, float]] = []

    def box_ids(self) -> list[str]:
        return list(self._initial)

    def boxes_at(self, t: float) -> list[TerrainBox]:
        boxes = dict(self._initial)
        for te, bid, dx, dy in self._moves:
            if te <= t + 1e-12:
                boxes[bid] = boxes[bid].translated(dx, dy)
        return list(boxes.values())

    def move(self, t: float, stone_id: str, dx: float, dy: float) -> None:
        if stone_id not in self._initial:
            raise InvalidEvent(f"unknown stone id: {stone_id}")
        self._moves.append((t, stone_id, dx, dy))


def apply_disturbance(world: World, t: float, stone_id: str, dx: float, dy: float) -> World:
    """Translate a stone at time t; clouds sampled at or after t see the new
    pose, while the perceived grid lags by the pipeline latency."""
    world.move(t, stone_id, dx, dy)
    return world


def check_touchdown(
    footstep: Footstep, boxes: list[TerrainBox], height_tol: float = 0.02
) -> float:
    """Fraction of the footprint over ground-truth walkable surface.

    Only box tops within `height_tol` of the footstep height count; the
    intersection uses the true rectangles, not the perceived grid.
    """
    foot = Polygon(rect_corners(footstep.x, footstep.y, footstep.yaw, footstep.length, footstep.width))
    candidates = []
    for b in boxes:
        if abs(b.top_z - footstep.z) <= height_tol:
            (x_lo, x_hi), (y_lo, y_hi) = b.x_range, b.y_range
            candidates.append(Polygon([(x_lo, y_lo), (x_hi, y_lo), (x_hi, y_hi), (x_lo, y_hi)]))
    if not candidates:
        return 0.0
    covered = foot.intersection(unary_union(candidates))
    return float(covered.area / foot.area)


@dataclass
class ReplanRecord:
    trigger_t: float
    sdb_update_t: float
    latency: float
    stages: dict

    def to_dict(self) -> dict:
        return {
            "trigger_t": self.trigger_t,
            "sdb_update_t": self.sdb_update_t,
            "latency": self.latency,
            "stages": dict(self.stages),
        }


@dataclass
class TouchdownRecord:
    t: float
    footstep: Footstep
    coverage: float

    def to_dict(self) -> dict:
        return {"t": self.t, "coverage": self.coverage, **self.footstep.to_dict()}


@dataclass
class RunReport:
    scenario: str
    seed: int
    success: bool
    failure_reason: str | None
    mean_speed: float
    replan_events: list[ReplanRecord]
    touchdowns: list[TouchdownRecord]
    extras: dict

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "success": self.success,
            "failure_reason": self.failure_reason,
            "mean_speed": self.mean_speed,
            "replan_events": [r.to_dict() for r in self.replan_events],
            "touchdowns": [t.to_dict() for t in self.touchdowns],
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def write_atomic(path: str, text: str) -> None:
    """Write via a temp file and rename so partial runs never corrupt output."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_telemetry(path: str, rows: list[tuple]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(TELEMETRY_COLUMNS)
    writer.writerows(rows)
    write_atomic(path, buf.getvalue())


class _Runner:
    """One scenario execution; see :func:`run`."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.world = World(scenario.terrain)
        self.params = LipmParams(com_height=scenario.com_height)
        self.gains = _gains_for(self.params)
        left0, right0 = scenario.stance_footsteps()
        self.engine = GaitEngine(
            self.params,
            self.gains,
            left0,
            right0,
            step_duration=scenario.walk.step_time,
            dsp_fraction=scenario.walk.dsp_fraction,
            swing_apex=scenario.walk.swing_apex,
            replan_limit=scenario.replan_limit,
        )
        self.scorer = SafetyScorer.for_footprint(scenario.foot_length, scenario.foot_width)
        self.queue: list[tuple[float, int, str, dict]] = []
        self._seq = 0
        self._job_counter = 0
        self.replans: list[ReplanRecord] = []
        self.touchdowns: list[TouchdownRecord] = []
        self.failure: str | None = None
        self.course_complete = False
        self.walk_start_t: float | None = None
        self.start_x = 0.5 * (left0.x + right0.x)
        self._zmp_violation_since: float | None = None
        self._support_poly_key = None
        self._support_poly = None
        self.extras: dict = {"refills": 0, "short_plans": 0, "failed_plans": 0,
                             "retargets_rejected": 0}
        self._pending_phase_triggers = list(
            d for d in scenario.disturbances if d.step_index is not None
        )
        for d in scenario.disturbances:
            if d.time is not None:
                self._push(d.time, "disturb", {"disturbance": d})

    # -- event queue --

    def _push(self, t: float, kind: str, payload: dict) -> None:
        self._seq += 1
        heapq.heappush(self.queue, (t, self._seq, kind, payload))

    _SEED_STREAMS = {"cloud": 1, "ransac": 2, "plan": 3}

    def _child_seed(self, purpose: str) -> int:
        self._job_counter += 1
        ss = np.random.SeedSequence(
            (self.sc.seed, self._SEED_STREAMS[purpose], self._job_counter)
        )
        return int(ss.generate_state(1)[0])

    # -- perception + planning --

    def _perceive(self, snapshot_t: float) -> SteppableGrid:
        feet = self.engine.feet
        origin_x = min(feet[Side.LEFT].x, feet[Side.RIGHT].x) - self.sc.roi_back_margin
        origin_y = 0.5 * (feet[Side.LEFT].y + feet[Side.RIGHT].y)
        # Clip boxes to a margin around the crop region before sampling them;
        # points outside would be discarded anyway.
        margin = 0.05
        x_lo = origin_x - margin
        x_hi = origin_x + self.sc.roi_length + margin
        y_lo = origin_y - 0.5 * self.sc.roi_width - margin
        y_hi = origin_y + 0.5 * self.sc.roi_width + margin
        boxes = []
        for b in self.world.boxes_at(snapshot_t):
            bx_lo = max(b.x_range[0], x_lo)
            bx_hi = min(b.x_range[1], x_hi)
            by_lo = max(b.y_range[0], y_lo)
            by_hi = min(b.y_range[1], y_hi)
            if bx_lo >= bx_hi or by_lo >= by_hi:
                continue
            boxes.append(
                TerrainBox(
                    b.box_id,
                    (0.5 * (bx_lo + bx_hi), 0.5 * (by_lo + by_hi), b.center[2]),
                    (bx_hi - bx_lo, by_hi - by_lo, b.size[2]),
                )
            )
        cloud = generate_synthetic_cloud(
            boxes, self.sc.cloud_sigma, self.sc.cloud_density, self._child_seed("cloud")
        )
        cfg = self.sc.mapping_config(origin_x, origin_y, self._child_seed("ransac"))
        return map_cloud(cloud, cfg)

    def _inflated(self, footstep: Footstep) -> Footstep:
        m = 2.0 * self.sc.planner_margin
        return footstep.replaced(
            length=self.sc.foot_length + m, width=self.sc.foot_width + m
        )

    def _plan_from(self, grid: SteppableGrid, root: Footstep, max_steps: int | None = None):
        cfg = self.sc.planner_config(self._child_seed("plan"))
        if max_steps is not None:
            cfg = PlannerConfig(
                iterations=cfg.iterations,
                max_steps=max_steps,
                min_steps=min(cfg.min_steps, max_steps),
                forward_bias=cfg.forward_bias,
                seed=cfg.seed,
            )
        result = plan(grid, self._inflated(root), self.sc.reach, self.scorer, cfg)
        result.path.steps = [
            s.replaced(length=self.sc.foot_length, width=self.sc.foot_width)
            for s in result.path.steps
        ]
        return result

    # -- event handlers --

    def _handle_refill(self, payload: dict, apply_t: float) -> None:
        engine = self.engine
        active = engine.sdb.active
        if active is None or self.course_complete or self.failure:
            return
        grid = self._perceive(payload["snapshot_t"])
        try:
            result = self._plan_from(grid, active.target)
        except NoFeasiblePath:
            self.extras["failed_plans"] += 1
            return
        if result.short:
            self.extras["short_plans"] += 1
        # Replace the pending chain only when the fresh plan extends the
        # lookahead; a shorter draw must not shrink a coherent longer chain.
        pending = engine.sdb.pending_count
        if len(result.path.steps) < 2 or len(result.path.steps) <= pending:
            return
        engine.apply_update(result.path.steps, engine.sdb.revision, retarget_active=False)
        self.extras["refills"] += 1

    def _handle_disturb(self, payload: dict, t: float) -> None:
        d: Disturbance = payload["disturbance"]
        stone_id = d.stone_id
        if stone_id == ACTIVE_TARGET:
            stone_id = self._stone_under_active_target(t)
            if stone_id is None:
                raise InvalidEvent("no stone under the active landing target")
        apply_disturbance(self.world, t, stone_id, d.dx, d.dy)
        if not self.sc.replan_enabled:
            return
        lat = self.sc.latency
        # First depth frame completing strictly after the change sees it.
        k = math.floor(t / lat.depth_acquire + 1e-12) + 1
        snapshot_t = k * lat.depth_acquire
        apply_t = snapshot_t + lat.post_acquire
        stages = {
            "detect": snapshot_t - t,
            "mapping": lat.mapping,
            "planning": lat.planning,
            "comm": lat.comm,
        }
        self._push(
            apply_t,
            "respond",
            {
                "snapshot_t": snapshot_t,
                "trigger_t": t,
                "dx": d.dx,
                "dy": d.dy,
                "stages": stages,
            },
        )

    def _stone_under_active_target(self, t: float) -> str | None:
        active = self.engine.sdb.active
        if active is None:
            return None
        tgt = active.target
        for b in self.world.boxes_at(t):
            (x_lo, x_hi), (y_lo, y_hi) = b.x_range, b.y_range
            if x_lo <= tgt.x <= x_hi and y_lo <= tgt.y <= y_hi and abs(b.top_z - tgt.z) <= 0.03:
                return b.box_id
        return None

    def _handle_respond(self, payload: dict, apply_t: float) -> None:
        engine = self.engine
        active = engine.sdb.active
        if active is None or self.failure:
            return
        grid = self._perceive(payload["snapshot_t"])
        old = active.target
        followed = old.replaced(x=old.x + payload["dx"], y=old.y + payload["dy"])
        probe = self._inflated(followed)
        new_first = None
        if validity_test(probe, grid):
            followed.z = probe.z
            new_first = followed
        else:
            # The displaced surface is not where the shift says; replan the
            # immediate step from the current support instead.
            support = engine.feet[old.side.opposite]
            try:
                res = self._plan_from(grid, support, max_steps=1)
                new_first = res.path.steps[0]
            except NoFeasiblePath:
                new_first = followed  # last resort: follow the commanded shift
        try:
            tail = self._plan_from(grid, new_first, max_steps=self.sc.max_steps - 1)
            rest = tail.path.steps
        except NoFeasiblePath:
            rest = [e.target for e in engine.sdb.pending()]
        new_steps = [new_first] + list(rest)
        if len(new_steps) < 2:
            new_steps = [new_first] + [e.target for e in engine.sdb.pending()]
        try:
            engine.apply_update(new_steps, engine.sdb.revision, retarget_active=True)
        except ReplanOutOfRange as exc:
            self.failure = "ReplanOutOfRange"
            self.extras["replan_error"] = str(exc)
            return
        except RetargetTooLate:
            self.extras["retargets_rejected"] += 1
            return
        self.replans.append(
            ReplanRecord(
                trigger_t=payload["trigger_t"],
                sdb_update_t=apply_t,
                latency=sum(payload["stages"].values()),
                stages=payload["stages"],
            )
        )

    def _handle_start(self, payload: dict, apply_t: float) -> None:
        grid = self._perceive(payload["snapshot_t"])
        _, right0 = self.sc.stance_footsteps()
        try:
            result = self._plan_from(grid, right0)
        except NoFeasiblePath:
            self.failure = "CourseIncomplete"
            self.extras["replan_error"] = "initial plan found no feasible path"
            return
        if len(result.path.steps) < 2:
            self.failure = "CourseIncomplete"
            self.extras["replan_error"] = "initial plan too short"
            return
        self.engine.start_walking(result.path.steps)
        self.walk_start_t = self.engine.t

    # -- engine event reactions --

    def _on_step_started(self, ev) -> None:
        engine = self.engine
        active = engine.sdb.active
        if active is None:
            return
        dsp = active.dsp_fraction * active.duration
        ssp_start = engine.sdb.active_start + dsp
        swing_duration = active.duration - dsp
        for d in list(self._pending_phase_triggers):
            if d.step_index == ev.step_index:
                self._pending_phase_triggers.remove(d)
                self._push(
                    ssp_start + d.swing_phase * swing_duration, "disturb", {"disturbance": d}
                )
        if not self.course_complete:
            lat = self.sc.latency
            self._push(
                ssp_start + lat.total,
                "refill",
                {"snapshot_t": ssp_start + lat.depth_acquire},
            )

    # Full coverage up to polygon-clipping noise; 1e-4 of the footprint is a
    # sub-square-millimeter sliver.
    FULL_COVERAGE = 1.0 - 1e-4

    def _on_touchdown(self, ev) -> None:
        fs: Footstep = ev.footstep
        coverage = check_touchdown(fs, self.world.boxes_at(ev.t))
        self.touchdowns.append(TouchdownRecord(ev.t, fs, coverage))
        if coverage < self.FULL_COVERAGE and self.failure is None:
            self.failure = "FootOffTerrain"
        if fs.x >= self.sc.course_end_x:
            self.course_complete = True

    # -- fall detection --

    def _support_polygon(self) -> Polygon:
        engine = self.engine
        phase = engine._phase_token()
        left, right = engine.feet[Side.LEFT], engine.feet[Side.RIGHT]
        key = (phase, left.x, left.y, left.yaw, right.x, right.y, right.yaw)
        if key == self._support_poly_key:
            return self._support_poly
        rects = []
        if phase == "ssp_left":
            rects = [left]
        elif phase == "ssp_right":
            rects = [right]
        else:
            rects = [left, right]
        polys = [
            Polygon(rect_corners(f.x, f.y, f.yaw, f.length, f.width)) for f in rects
        ]
        poly = unary_union(polys).convex_hull.buffer(0.01)
        self._support_poly_key = key
        self._support_poly = poly
        return poly

    def _check_balance(self) -> None:
        zmp = self.engine.com.zmp(self.params)
        if self._support_polygon().contains(Point(zmp[0], zmp[1])):
            self._zmp_violation_since = None
            return
        if self._zmp_violation_since is None:
            self._zmp_violation_since = self.engine.t
        elif self.engine.t - self._zmp_violation_since > 0.05 and self.failure is None:
            self.failure = "ZmpOutsideSupport"

    # -- main loop --

    def run(self) -> RunReport:
        lat = self.sc.latency
        self._push(
            lat.total, "start", {"snapshot_t": lat.depth_acquire}
        )
        engine = self.engine
        dt = self.params.dt
        handlers = {
            "refill": self._handle_refill,
            "disturb": self._handle_disturb,
            "respond": self._handle_respond,
            "start": self._handle_start,
        }
        while engine.t < self.sc.max_sim_time:
            while self.queue and self.queue[0][0] <= engine.t + 0.5 * dt:
                ev_t, _, kind, payload = heapq.heappop(self.queue)
                handlers[kind](payload, ev_t)
            engine.tick()
            for ev in engine.pop_events():
                if ev.kind == "touchdown":
                    self._on_touchdown(ev)
                elif ev.kind == "step_started":
                    self._on_step_started(ev)
            self._check_balance()
            if self.failure is not None:
                break
            if self.course_complete and not engine.walking:
                break
            if self.walk_start_t is not None and not engine.walking and not self.course_complete:
                if not self.queue:
                    self.failure = "CourseIncomplete"
                    break

        if self.failure is None and not self.course_complete:
            self.failure = "CourseIncomplete"

        mean_speed = 0.0
        if self.touchdowns and self.walk_start_t is not None:
            last = self.touchdowns[-1]
            elapsed = last.t - self.walk_start_t
            if elapsed > 0:
                mean_speed = (last.footstep.x - self.start_x) / elapsed
        success = self.failure is None and self.course_complete
        self.extras["n_steps"] = len(self.touchdowns)
        self.extras["walk_start_t"] = self.walk_start_t
        self.extras["end_t"] = engine.t
        return RunReport(
            scenario=self.sc.name,
            seed=self.sc.seed,
            success=success,
            failure_reason=self.failure,
            mean_speed=mean_speed,
            replan_events=self.replans,
            touchdowns=self.touchdowns,
            extras=self.extras,
        )


_GAINS_CACHE: dict[tuple, object] = {}

# Tighter control penalty than the library default: the fall criterion
# (commanded ZMP inside the support polygon with 1 cm margin, 50 ms grace)
# leaves little room for the anticipatory ZMP excursion of the optimal law.
_SIM_CONTROL_PENALTY = 1e-8


def _gains_for(params: LipmParams):
    key = (params.com_height, params.gravity, params.dt, params.preview_horizon)
    if key not in _GAINS_CACHE:
        _GAINS_CACHE[key] = preview_gains(params, r=_SIM_CONTROL_PENALTY)
    return _GAINS_CACHE[key]


def run(scenario: Scenario, telemetry_path: str | None = None) -> RunReport:
    """Execute a scenario and return its report.

    Robot falls and planning failures are reported in the result, never
    raised; only configuration problems raise.
    """
    runner = _Runner(scenario)
    report = runner.run()
    if telemetry_path is not None:
        write_telemetry(telemetry_path, runner.engine.telemetry)
        report.extras["telemetry"] = os.path.abspath(telemetry_path)
    return report
