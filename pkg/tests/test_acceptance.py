"""Acceptance gate: every criterion runs at its stated tolerance and prints
one pass/fail line. Heavy multi-seed suites live here, not in unit tests."""

import dataclasses
import json
import math
import time

import numpy as np

from strider.mapping import (
    MappingConfig,
    PointCloud,
    generate_synthetic_cloud,
    segment_planes,
    crop_roi,
    voxel_downsample,
    build_steppable_grid,
    TerrainBox,
    uniform_grid,
)
from strider.pattern import (
    ComState,
    GaitEngine,
    PreviewController,
    retarget_swing,
    swing_trajectory,
)
from strider.planner import (
    Footstep,
    PlannerConfig,
    ReachabilityModel,
    SafetyScorer,
    Side,
    plan,
    validity_test,
)
from strider.sim import Scenario, run
from strider.stabilize import CompliantLipm, damping_feedback
from strider import scenarios

from conftest import TWO_STONES, TWO_STONES_ROOT


def verdict(num, name, ok, detail=""):
    print(f"ACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


class TestCriterion1PlanningBudget:
    def test_p95_within_10ms(self):
        from strider.planner import warm_up

        grid = uniform_grid(2.0, 1.0, 0.01)  # 200 x 100 cells, 1 cm
        assert grid.nx * grid.ny == 20000
        reach = ReachabilityModel()
        scorer = SafetyScorer.for_footprint(0.24, 0.13)
        warm_up()
        t_suite = time.perf_counter()
        times = []
        for i in range(150):
            cfg = PlannerConfig(time_budget=0.005, max_steps=4, seed=i)
            q = Footstep(Side.RIGHT, 0.1, -0.1)
            t0 = time.perf_counter()
            result = plan(grid, q, reach, scorer, cfg)
            times.append(time.perf_counter() - t0)
            assert len(result.path) == 4
        suite_s = time.perf_counter() - t_suite
        p95_ms = float(np.percentile(np.array(times) * 1000, 95))
        ok = p95_ms <= 10.0 and suite_s < 60.0
        verdict(1, "planning budget", ok, f"p95={p95_ms:.2f} ms, suite={suite_s:.1f} s")


class TestCriterion2StaticStones:
    def test_19_of_20_seeds(self):
        sc0 = Scenario.from_dict(scenarios.load("stones_static"))
        assert sc0.cloud_sigma == 0.002
        t0 = time.perf_counter()
        passed = 0
        speeds = []
        for seed in range(20):
            rep = run(dataclasses.replace(sc0, seed=seed))
            if rep.success and rep.mean_speed >= 0.3:
                passed += 1
                speeds.append(rep.mean_speed)
        elapsed = time.perf_counter() - t0
        ok = passed >= 19 and elapsed <= 120.0
        verdict(
            2, "static stones", ok,
            f"{passed}/20 seeds, mean speed {np.mean(speeds):.2f} m/s, {elapsed:.0f} s",
        )


class TestCriterion3DynamicReplan:
    def test_replan_disable_and_bound(self):
        doc = scenarios.load("stones_dynamic")
        sc = Scenario.from_dict(doc)

        rep = run(sc)
        replanned = rep.success and len(rep.replan_events) == 1
        latency_ok = replanned and all(
            ev.sdb_update_t - ev.trigger_t <= 0.12 for ev in rep.replan_events
        )

        rep_off = run(dataclasses.replace(sc, replan_enabled=False))
        off_ok = (not rep_off.success) and rep_off.failure_reason == "FootOffTerrain"

        doc_far = json.loads(json.dumps(doc))
        doc_far["disturbances"][0]["dx"] = -0.6
        rep_far = run(Scenario.from_dict(doc_far))
        far_ok = (not rep_far.success) and rep_far.failure_reason == "ReplanOutOfRange"

        ok = latency_ok and off_ok and far_ok
        verdict(
            3, "dynamic replan", ok,
            f"latency={rep.replan_events[0].latency if rep.replan_events else None}, "
            f"off={rep_off.failure_reason}, far={rep_far.failure_reason}",
        )


class TestCriterion4NarrowPath:
    def test_18_of_20_seeds(self):
        sc0 = Scenario.from_dict(scenarios.load("narrow_path"))
        assert sc0.mapping["resolution"] == 0.005
        passed = 0
        t0 = time.perf_counter()
        for seed in range(20):
            rep = run(dataclasses.replace(sc0, seed=seed))
            if rep.success and all(t.coverage >= 0.9999 for t in rep.touchdowns):
                passed += 1
        elapsed = time.perf_counter() - t0
        ok = passed >= 18
        verdict(4, "narrow path", ok, f"{passed}/20 seeds, {elapsed:.0f} s")


class TestCriterion5SafetyCentering:
    def test_centering_beats_uniform_valid(self, two_stone_grid):
        reach = ReachabilityModel()
        scorer = SafetyScorer.for_footprint(0.24, 0.13)
        centers = {Side.LEFT: np.array([0.27, 0.115]), Side.RIGHT: np.array([0.54, -0.11])}

        chosen = []
        for seed in range(100):
            cfg = PlannerConfig(iterations=800, max_steps=2, min_steps=2, seed=seed)
            result = plan(two_stone_grid, TWO_STONES_ROOT, reach, scorer, cfg)
            for step in result.path.steps:
                chosen.append(np.hypot(*(step.xy() - centers[step.side])))
        chosen = np.array(chosen)

        rng = np.random.default_rng(12345)
        uniform = []
        boxes = {Side.LEFT: TWO_STONES[0], Side.RIGHT: TWO_STONES[1]}
        while len(uniform) < 200:
            side = Side.LEFT if len(uniform) % 2 == 0 else Side.RIGHT
            x_lo, x_hi, y_lo, y_hi = boxes[side][:4]
            fs = Footstep(
                side,
                rng.uniform(x_lo, x_hi),
                rng.uniform(y_lo, y_hi),
                yaw=rng.uniform(-math.radians(20), math.radians(20)),
            )
            if validity_test(fs, two_stone_grid):
                uniform.append(np.hypot(*(fs.xy() - centers[side])))
        uniform = np.array(uniform)

        observed = chosen.mean() - uniform.mean()
        pooled = np.concatenate([chosen, uniform])
        n = len(chosen)
        perms = 20000
        stats = np.empty(perms)
        for i in range(perms):
            rng.shuffle(pooled)
            stats[i] = pooled[:n].mean() - pooled[n:].mean()
        p_value = float(np.mean(stats <= observed))
        ok = observed < 0 and p_value < 0.01
        verdict(
            5, "safety-score centering", ok,
            f"planner {chosen.mean()*100:.1f} cm vs uniform {uniform.mean()*100:.1f} cm, "
            f"p={p_value:.5f}",
        )


class TestCriterion6ControllerProperties:
    def test_property_bundle(self, lipm_params, gains):
        results = {}

        results["spectral_radius"] = (
            np.max(np.abs(np.linalg.eigvals(gains.closed_loop))) < 1.0
        )

        ctrl = PreviewController(gains)
        state = ComState()
        n = lipm_params.n_preview
        for _ in range(100):
            state = ctrl.tick(state, np.zeros(n + 1), np.zeros(n + 1))
        results["zero_fixed_point"] = (
            state.x == 0.0 and state.vx == 0.0 and state.ax == 0.0
        )

        # CoM continuity across a buffer mutation
        left = Footstep(Side.LEFT, 0.0, 0.13)
        right = Footstep(Side.RIGHT, 0.0, -0.13)
        eng = GaitEngine(lipm_params, gains, left, right)
        eng.tick()
        eng.start_walking(
            [
                Footstep(Side.LEFT, 0.25, 0.13),
                Footstep(Side.RIGHT, 0.5, -0.13),
                Footstep(Side.LEFT, 0.75, 0.13),
                Footstep(Side.RIGHT, 1.0, -0.13),
            ]
        )
        for _ in range(60):
            eng.tick()
        before = (eng.com.x, eng.com.y, eng.com.vx, eng.com.vy)
        moved = [e.target for e in eng.sdb.entries[eng.sdb.cursor:]]
        moved[0] = moved[0].replaced(x=moved[0].x + 0.06)
        eng.apply_update(moved, eng.sdb.revision, retarget_active=True)
        after = (eng.com.x, eng.com.y, eng.com.vx, eng.com.vy)
        results["com_continuity"] = (
            abs(after[0] - before[0]) < 1e-9
            and abs(after[1] - before[1]) < 1e-9
            and abs(after[2] - before[2]) < 1e-6
            and abs(after[3] - before[3]) < 1e-6
        )

        # swing retarget seam C1 by finite differences
        traj = swing_trajectory(
            (0.0, 0.1, 0.0, 0.0), Footstep(Side.LEFT, 0.3, 0.1, 0.0), 0.5, 0.05, t0=0.0
        )
        now = 0.25
        foot_state = traj.evaluate(now)
        new = retarget_swing(traj, now, foot_state, Footstep(Side.LEFT, 0.38, 0.1, 0.0))
        h = 1e-5
        v_seam = (new.evaluate(now + h)[0] - traj.evaluate(now - h)[0]) / (2 * h)
        results["retarget_seam_c1"] = bool(
            np.all(np.abs(v_seam - foot_state[1]) < 1e-6)
        )

        # damping controller settling improvement >= 5x
        import scipy.linalg

        model = CompliantLipm(mass=40.0, stiffness=2000.0,
                              damping=2 * 0.05 * math.sqrt(2000.0 * 40.0))
        ctl = damping_feedback(model, model.omega_n, 0.7)

        def settling(a_mat):
            dt = 0.002
            ad = scipy.linalg.expm(a_mat * dt)
            x = np.array([0.0, 1.0])
            traj_ = [x[0]]
            for _ in range(int(30.0 / dt)):
                x = ad @ x
                traj_.append(x[0])
            traj_ = np.abs(np.array(traj_))
            above = np.nonzero(traj_ > 0.02 * traj_.max())[0]
            return (above[-1] + 1) * dt

        a_open, _ = model.continuous_matrices()
        ratio = settling(a_open) / settling(ctl.closed_loop_matrix(model))
        results["damping_settling_5x"] = ratio >= 5.0

        ok = all(results.values())
        verdict(6, "controller properties", ok, str(results))


class TestCriterion7MappingAccuracy:
    def test_three_planes_wall_and_grid_oracle(self):
        rng = np.random.default_rng(77)
        slabs = [
            TerrainBox("s0", (0.4, 0.0, -0.05), (0.6, 0.9, 0.1)),
            TerrainBox("s1", (1.0, 0.0, 0.0), (0.6, 0.9, 0.1)),
            TerrainBox("s2", (1.6, 0.0, 0.05), (0.6, 0.9, 0.1)),
        ]
        truth = {0.0: slabs[0], 0.05: slabs[1], 0.10: slabs[2]}
        cloud_pts = generate_synthetic_cloud(slabs, 0.002, 150000, seed=7).points
        wall = np.column_stack(
            [rng.uniform(0.1, 1.9, 5000), np.full(5000, 0.46), rng.uniform(0.0, 0.5, 5000)]
        )
        cloud = PointCloud(np.vstack([cloud_pts, wall]))
        cfg = MappingConfig()

        cropped = crop_roi(cloud, cfg.roi)
        planes = segment_planes(voxel_downsample(cropped, cfg.voxel_downsample), cfg)
        heights = sorted(p.mean_height for p in planes)
        heights_ok = len(planes) == 3 and all(
            abs(h - w) < 0.005 for h, w in zip(heights, sorted(truth))
        )
        wall_ok = all(p.tilt_deg() <= cfg.max_tilt_deg for p in planes)

        grid = build_steppable_grid(planes, cropped, cfg)
        res = cfg.resolution
        disagree = 0
        total = grid.nx * grid.ny
        for ix in range(grid.nx):
            for iy in range(grid.ny):
                cx, cy = grid.cell_center(ix, iy)
                inside = any(
                    b.x_range[0] + res <= cx <= b.x_range[1] - res
                    and b.y_range[0] + res <= cy <= b.y_range[1] - res
                    for b in slabs
                )
                outside = all(
                    cx < b.x_range[0] - res
                    or cx > b.x_range[1] + res
                    or cy < b.y_range[0] - res
                    or cy > b.y_range[1] + res
                    for b in slabs
                )
                if inside and not grid.steppable[ix, iy]:
                    disagree += 1
                elif outside and grid.steppable[ix, iy]:
                    disagree += 1
        frac = disagree / total
        ok = heights_ok and wall_ok and frac < 0.01
        verdict(
            7, "mapping accuracy", ok,
            f"heights={[round(h, 4) for h in heights]}, disagreement={frac:.4%}",
        )


class TestCriterion8OracleEquivalences:
    def test_best_path_matches_exhaustive(self, flat_grid):
        from strider.planner import FootstepPath, best_footstep_path, safety_score

        rng = np.random.default_rng(88)
        scorer = SafetyScorer.for_footprint(0.24, 0.13)
        flat_grid.steppable[rng.integers(0, 200, 400), rng.integers(0, 100, 400)] = False
        all_match = True
        for _ in range(20):
            cands = []
            for leaf in range(1, int(rng.integers(3, 15))):
                steps = [
                    Footstep(
                        Side.LEFT if k % 2 == 0 else Side.RIGHT,
                        rng.uniform(0.2, 1.8),
                        rng.uniform(-0.4, 0.4),
                        yaw=rng.uniform(-0.3, 0.3),
                    )
                    for k in range(int(rng.integers(1, 5)))
                ]
                cands.append(FootstepPath(steps, leaf=leaf))
            best = best_footstep_path(list(cands), flat_grid, scorer, PlannerConfig())
            oracle_best = max(
                cands,
                key=lambda c: (len(c), safety_score(c, flat_grid, scorer), -c.leaf),
            )
            all_match &= best is oracle_best

        # candidate enumeration vs independent walk on random trees
        from test_planner import leaves_by_bruteforce, random_tree
        from strider.planner import footstep_path_candidates

        trees_match = True
        for _ in range(100):
            tree = random_tree(rng)
            cands = footstep_path_candidates(tree)
            trees_match &= sorted(c.leaf for c in cands) == sorted(
                leaves_by_bruteforce(tree)
            )

        verdict(
            8, "oracle equivalences (argmax + enumeration)",
            all_match and trees_match,
            f"argmax={all_match}, enumeration={trees_match}",
        )

    def test_two_stone_plan_near_sweep_maximum(self, two_stone_grid):
        reach = ReachabilityModel()
        scorer = SafetyScorer.for_footprint(0.24, 0.13)

        def placements(rect, side):
            x_lo, x_hi, y_lo, y_hi = rect[:4]
            out = []
            for x in np.arange(x_lo + 0.1, x_hi - 0.1 + 1e-9, 0.01):
                for y in np.arange(y_lo + 0.04, y_hi - 0.04 + 1e-9, 0.01):
                    for yaw_deg in range(-20, 21, 5):
                        fs = Footstep(side, round(x, 3), round(y, 3),
                                      yaw=math.radians(yaw_deg))
                        if validity_test(fs, two_stone_grid):
                            out.append(fs)
            return out

        first = placements(TWO_STONES[0], Side.LEFT)
        second = placements(TWO_STONES[1], Side.RIGHT)
        assert first and second
        s1 = scorer.score_many(first, two_stone_grid)
        s2 = scorer.score_many(second, two_stone_grid)

        root = TWO_STONES_ROOT
        sweep_max = -np.inf
        admissible_first = [
            (fs, sc) for fs, sc in zip(first, s1) if reach.admits(root, fs)
        ]
        for fs_a, sc_a in admissible_first:
            for fs_b, sc_b in zip(second, s2):
                if sc_a + sc_b <= sweep_max:
                    continue
                if reach.admits(fs_a, fs_b):
                    sweep_max = sc_a + sc_b

        best_score = -np.inf
        for seed in range(3):
            cfg = PlannerConfig(iterations=3000, max_steps=2, min_steps=2, seed=seed)
            result = plan(two_stone_grid, root, reach, scorer, cfg)
            assert len(result.path) == 2
            best_score = max(best_score, result.path.score)

        ratio = best_score / sweep_max
        ok = ratio >= 0.95
        verdict(
            8, "oracle equivalences (exhaustive sweep)", ok,
            f"planner {best_score:.3f} vs sweep {sweep_max:.3f} ({ratio:.1%})",
        )
