"""Command-line surface: run scenarios, exercise mapping/planning, benchmark.

Exit codes: 0 on success, 1 when a run fails (robot fell or stalled), 2 for
configuration or parse errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time

import numpy as np

from . import scenarios as scenario_data
from .errors import ConfigError, StriderError
from .mapping import (
    MappingConfig,
    RegionOfInterest,
    SteppableGrid,
    TerrainBox,
    generate_synthetic_cloud,
    map_cloud,
    uniform_grid,
)
from .planner import (
    Footstep,
    PlannerConfig,
    ReachabilityModel,
    SafetyScorer,
    Side,
    plan,
)
from .sim import Scenario, run, write_atomic

OUT_ENV = "STRIDER_OUT"


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "out")


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply dotted-key overrides (`planner.max_steps=4`) onto a raw scenario
    dict. Keys must already exist so typos are caught; list elements are
    addressed by numeric index (`disturbances.0.dx=-0.6`)."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value: {item!r}")
        path, raw = item.split("=", 1)
        value = _parse_override_value(raw)
        parts = path.split(".")
        node = doc
        for i, part in enumerate(parts):
            last = i == len(parts) - 1
            if isinstance(node, list):
                if not part.isdigit() or int(part) >= len(node):
                    raise ConfigError(f"unknown key: {path}")
                idx = int(part)
                if last:
                    node[idx] = value
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                if part not in node:
                    raise ConfigError(f"unknown key: {path}")
                if last:
                    node[part] = value
                else:
                    node = node[part]
            else:
                raise ConfigError(f"unknown key: {path}")
    return doc


def _load_scenario(path: str, overrides: list[str]) -> Scenario:
    if not os.path.exists(path) and os.path.sep not in path:
        bundled = scenario_data.path_for(path)
        if bundled is not None:
            path = bundled
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scenario file {path} is not valid JSON: {exc}")
    apply_overrides(doc, overrides)
    return Scenario.from_dict(doc)


def cmd_run(args) -> int:
    scenario = _load_scenario(args.scenario, args.set or [])
    if args.seed is not None:
        import dataclasses

        scenario = dataclasses.replace(scenario, seed=args.seed)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    telemetry_path = os.path.join(out_dir, f"{scenario.name}_telemetry.csv")
    report = run(scenario, telemetry_path=telemetry_path)
    report_path = os.path.join(out_dir, f"{scenario.name}_report.json")
    write_atomic(report_path, report.to_json())
    status = "ok" if report.success else f"failed ({report.failure_reason})"
    print(f"{scenario.name}: {status}  mean_speed={report.mean_speed:.3f} m/s")
    print(f"report: {report_path}")
    print(f"telemetry: {telemetry_path}")
    return 0 if report.success else 1


def _fixture_grid(name: str) -> SteppableGrid:
    if name == "flat":
        return uniform_grid(2.0, 1.0, 0.01)
    if name == "two-stones":
        boxes = [
            TerrainBox("a", (0.28, 0.11, -0.05), (0.36, 0.195, 0.1)),
            TerrainBox("b", (0.53, -0.11, -0.05), (0.36, 0.195, 0.1)),
        ]
        cloud = generate_synthetic_cloud(boxes, 0.0, 200000, seed=0)
        cfg = MappingConfig(roi=RegionOfInterest(length=1.2, width=0.8), seed=0)
        return map_cloud(cloud, cfg)
    raise ConfigError(f"unknown fixture: {name}")


def cmd_plan(args) -> int:
    reach = ReachabilityModel()
    if args.request:
        # Request document: {"grid": <path or inline grid doc>, "q_init":
        # {side, x, y, yaw}, "config": {planner config fields}}.
        with open(args.request) as fh:
            req = json.load(fh)
        grid_ref = req["grid"]
        if isinstance(grid_ref, str):
            with open(grid_ref) as fh:
                grid = SteppableGrid.from_json(fh.read())
        else:
            grid = SteppableGrid.from_json(json.dumps(grid_ref))
        qi = req["q_init"]
        q_init = Footstep(
            Side(qi.get("side", "right")), qi["x"], qi["y"],
            qi.get("z", 0.0), qi.get("yaw", 0.0),
        )
        cfg_doc = req.get("config", {})
        cfg = PlannerConfig(
            iterations=cfg_doc.get("iterations"),
            time_budget=cfg_doc.get("time_budget", 0.005),
            max_steps=cfg_doc.get("max_steps", 4),
            min_steps=cfg_doc.get("min_steps", 2),
            forward_bias=cfg_doc.get("forward_bias", 0.8),
            seed=cfg_doc.get("seed", 0),
        )
    else:
        if args.grid:
            with open(args.grid) as fh:
                grid = SteppableGrid.from_json(fh.read())
        else:
            grid = _fixture_grid(args.fixture)
        sx, sy, syaw = (float(v) for v in args.q_init.split(","))
        q_init = Footstep(Side(args.side), sx, sy, 0.0, math.radians(syaw))
        cfg = PlannerConfig(
            iterations=args.iterations,
            time_budget=args.budget_ms / 1000.0,
            max_steps=args.max_steps,
            seed=args.seed,
        )
    ix, iy = grid.cell_index(q_init.x, q_init.y)
    if grid.in_bounds(ix, iy) and grid.steppable[ix, iy]:
        q_init.z = float(grid.height[ix, iy])
    scorer = SafetyScorer.for_footprint(q_init.length, q_init.width)
    try:
        result = plan(grid, q_init, reach, scorer, cfg)
    except StriderError as exc:
        print(f"planning failed: {exc}", file=sys.stderr)
        return 1
    doc = result.to_dict()
    text = json.dumps(doc, indent=2)
    if args.out:
        write_atomic(args.out, text)
        print(f"plan: {args.out}")
    else:
        print(text)
    return 0


def cmd_map(args) -> int:
    with open(args.scene) as fh:
        doc = json.load(fh)
    boxes = [
        TerrainBox(str(b.get("id", i)), tuple(b["center"]), tuple(b["size"]))
        for i, b in enumerate(doc["terrain"])
    ]
    roi_doc = doc.get("roi", {})
    roi = RegionOfInterest(
        length=roi_doc.get("length", 2.0),
        width=roi_doc.get("width", 1.0),
        origin_x=roi_doc.get("origin_x", 0.0),
        origin_y=roi_doc.get("origin_y", 0.0),
    )
    cfg = MappingConfig(roi=roi, seed=doc.get("seed", 0), **doc.get("mapping", {}))
    cloud = generate_synthetic_cloud(
        boxes, doc.get("sigma", 0.002), doc.get("density", 150000.0), doc.get("seed", 0)
    )
    t0 = time.perf_counter()
    grid = map_cloud(cloud, cfg)
    elapsed_ms = (time.perf_counter() - t0) * 1000.0
    write_atomic(args.out, grid.to_json())
    print(
        f"grid: {args.out} ({grid.n_steppable} steppable cells of "
        f"{grid.nx * grid.ny}, mapped in {elapsed_ms:.0f} ms)"
    )
    return 0


def cmd_bench(args) -> int:
    if args.iterations < 100:
        print("bench needs at least 100 iterations", file=sys.stderr)
        return 2
    from .errors import NoFeasiblePath
    from .planner import warm_up

    grid = uniform_grid(2.0, 1.0, 0.01)
    if args.empty:
        grid.steppable[:] = False
    reach = ReachabilityModel()
    scorer = SafetyScorer.for_footprint(0.24, 0.13)
    budget = args.budget_ms / 1000.0
    warm_up()
    times = []
    samples = []
    for i in range(args.iterations):
        q = Footstep(Side.RIGHT, 0.1, -0.1)
        cfg = PlannerConfig(time_budget=budget, max_steps=4, seed=i)
        t0 = time.perf_counter()
        try:
            result = plan(grid, q, reach, scorer, cfg)
            samples.append(result.iterations)
        except NoFeasiblePath:
            pass  # fast-fail path still gets timed
        times.append(time.perf_counter() - t0)
    times_ms = np.sort(np.array(times) * 1000.0)
    p50 = float(np.percentile(times_ms, 50))
    p95 = float(np.percentile(times_ms, 95))
    worst = float(times_ms[-1])
    gate_ms = args.gate_ms
    passed = p95 <= gate_ms
    per_5ms = float(np.mean(samples) / args.budget_ms * 5.0) if samples else 0.0
    print(f"plan calls: {args.iterations}  budget: {args.budget_ms:.1f} ms")
    print(f"p50={p50:.2f} ms  p95={p95:.2f} ms  max={worst:.2f} ms")
    print(f"sampler throughput: {per_5ms:.0f} validity tests per 5 ms (measured)")
    print(f"budget gate ({gate_ms:.1f} ms p95): {'pass' if passed else 'FAIL'}")
    if args.out:
        write_atomic(
            args.out,
            json.dumps(
                {"iterations": args.iterations, "p50_ms": p50, "p95_ms": p95,
                 "max_ms": worst, "gate_ms": gate_ms, "pass": passed,
                 "samples_per_5ms": per_5ms},
                indent=2,
            ),
        )
    return 0


def _read_telemetry(path: str) -> tuple[list[str], list[list[str]]]:
    with open(path) as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    return header, rows


def _project(header, rows, columns):
    idx = [header.index(c) for c in columns]
    return [[row[i] for i in idx] for row in rows]


def cmd_export(args) -> int:
    out = args.out
    if args.kind == "footsteps":
        with open(args.telemetry) as fh:
            doc = json.load(fh)
        steps = doc.get("steps") or [t for t in doc.get("touchdowns", [])]
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["seq", "side", "x", "y", "z", "yaw"])
        for seq, s in enumerate(steps):
            writer.writerow([seq, s["side"], s["x"], s["y"], s["z"], s["yaw"]])
        write_atomic(out, buf.getvalue())
        print(f"footsteps: {out} ({len(steps)} rows)")
        return 0

    header, rows = _read_telemetry(args.telemetry)
    if args.kind == "zmp":
        cols = ["t", "zmp_ref_x", "zmp_meas_x", "com_x", "zmp_ref_y", "zmp_meas_y", "com_y"]
    else:  # swing
        cols = ["t", "swing_x", "swing_y", "swing_z"]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(cols)
    writer.writerows(_project(header, rows, cols))
    write_atomic(out, buf.getvalue())
    print(f"{args.kind}: {out} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strider",
        description="Terrain mapping, footstep planning, and gait simulation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario end to end")
    p_run.add_argument("scenario", help="scenario JSON path or bundled name")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario key (dotted path)")
    p_run.add_argument("--out", default=_default_out(), help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.set_defaults(func=cmd_run)

    p_plan = sub.add_parser("plan", help="run the footstep planner in isolation")
    p_plan.add_argument("--request", help="plan request JSON (grid + q_init + config)")
    p_plan.add_argument("--grid", help="steppable grid JSON (from `strider map`)")
    p_plan.add_argument("--fixture", default="flat", choices=["flat", "two-stones"])
    p_plan.add_argument("--q-init", default="0.1,-0.1,0", help="x,y,yaw_deg of the support foot")
    p_plan.add_argument("--side", default="right", choices=["left", "right"])
    p_plan.add_argument("--iterations", type=int, default=None)
    p_plan.add_argument("--budget-ms", type=float, default=5.0)
    p_plan.add_argument("--max-steps", type=int, default=4)
    p_plan.add_argument("--seed", type=int, default=0)
    p_plan.add_argument("--out", help="write the plan response JSON here")
    p_plan.set_defaults(func=cmd_plan)

    p_map = sub.add_parser("map", help="map a synthetic scene into a grid")
    p_map.add_argument("scene", help="scene JSON (terrain boxes + sampling params)")
    p_map.add_argument("--out", default="grid.json")
    p_map.set_defaults(func=cmd_map)

    p_bench = sub.add_parser("bench", help="wall-clock benchmark of the planner")
    p_bench.add_argument("--iterations", type=int, default=1000)
    p_bench.add_argument("--budget-ms", type=float, default=5.0)
    p_bench.add_argument("--gate-ms", type=float, default=10.0)
    p_bench.add_argument("--empty", action="store_true",
                         help="benchmark the fast-fail path on an empty grid")
    p_bench.add_argument("--out", help="write the timing report JSON here")
    p_bench.set_defaults(func=cmd_bench)

    p_export = sub.add_parser("export", help="project telemetry into plot-ready files")
    p_export.add_argument("telemetry", help="telemetry CSV (or report/plan JSON for footsteps)")
    p_export.add_argument("--kind", required=True, choices=["zmp", "swing", "footsteps"])
    p_export.add_argument("--out", default="export.csv")
    p_export.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except StriderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
