"""Sampling-based footstep planner over a steppable grid.

Footsteps are grown as a tree: pick a random support node, sample a
kinematically reachable next step in its frame, keep it when the whole
footprint lands on a single steppable plane. Root-to-leaf sequences become
path candidates; the best candidate maximizes (step count, safety score)
lexicographically, where the safety score rewards placements whose test
points stay clear of terrain edges.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NoFeasiblePath
from .geometry import cells_overlapping_rect, rot2
from .mapping import SteppableGrid

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def opposite(self) -> "Side":
        return Side.RIGHT if self is Side.LEFT else Side.LEFT

    @property
    def sign(self) -> int:
        """+1 for left, -1 for right; used for lateral offsets."""
        return 1 if self is Side.LEFT else -1


@dataclass
class Footstep:
    side: Side
    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0
    length: float = 0.24
    width: float = 0.13

    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def replaced(self, **kw) -> "Footstep":
        data = dict(
            side=self.side, x=self.x, y=self.y, z=self.z, yaw=self.yaw,
            length=self.length, width=self.width,
        )
        data.update(kw)
        return Footstep(**data)

    def to_dict(self) -> dict:
        return {
            "side": self.side.value,
            "x": self.x,
            "y": self.y,
            "z": self.z,
            "yaw": self.yaw,
        }


@dataclass(frozen=True)
class ReachabilityModel:
    """One-step kinematic envelope expressed in the support-foot frame.

    Lateral bounds are magnitudes toward the swing side; the minimum keeps
    the feet from crossing.
    """

    forward: tuple[float, float] = (-0.05, 0.35)
    lateral: tuple[float, float] = (0.15, 0.30)
    yaw: tuple[float, float] = (-math.radians(20), math.radians(20))
    max_height_delta: float = 0.15

    def __post_init__(self) -> None:
        if self.lateral[0] <= 0:
            raise ValueError("lateral minimum must be positive")
        for lo, hi in (self.forward, self.lateral, self.yaw):
            if lo > hi:
                raise ValueError("range minimum exceeds maximum")

    def offsets_of(self, support: Footstep, candidate: Footstep) -> tuple[float, float, float]:
        """Inverse of sampling: (forward, lateral-toward-swing, dyaw)."""
        delta = candidate.xy() - support.xy()
        local = rot2(support.yaw).T @ delta
        lateral = local[1] * candidate.side.sign
        dyaw = candidate.yaw - support.yaw
        return float(local[0]), float(lateral), float(dyaw)

    def admits(self, support: Footstep, candidate: Footstep) -> bool:
        fwd, lat, dyaw = self.offsets_of(support, candidate)
        tol = 1e-9
        return (
            self.forward[0] - tol <= fwd <= self.forward[1] + tol
            and self.lateral[0] - tol <= lat <= self.lateral[1] + tol
            and self.yaw[0] - tol <= dyaw <= self.yaw[1] + tol
            and abs(candidate.z - support.z) <= self.max_height_delta + tol
        )


@dataclass
class FootstepNode:
    footstep: Footstep
    parent: int | None
    depth: int


class FootstepTree:
    def __init__(self, root: Footstep):
        self.nodes: list[FootstepNode] = [FootstepNode(root, None, 0)]
        self.child_count: list[int] = [0]

    def add(self, footstep: Footstep, parent: int) -> int:
        self.nodes.append(FootstepNode(footstep, parent, self.nodes[parent].depth + 1))
        self.child_count.append(0)
        self.child_count[parent] += 1
        return len(self.nodes) - 1

    def leaves(self) -> list[int]:
        return [i for i, c in enumerate(self.child_count) if c == 0 and i != 0]

    def path_to(self, index: int) -> list[Footstep]:
        steps = []
        node = index
        while node != 0:
            steps.append(self.nodes[node].footstep)
            node = self.nodes[node].parent
        steps.reverse()
        return steps

    def __len__(self) -> int:
        return len(self.nodes)


@dataclass
class FootstepPath:
    steps: list[Footstep]
    score: float = 0.0
    leaf: int = -1

    def __len__(self) -> int:
        return len(self.steps)


class SafetyScorer:
    """Weighted test-point score measuring clearance from terrain edges.

    Test points live in the foot frame; each contributes its RBF weight
    w_k = exp(-|x_k|^2 / (2 sigma^2)) when it lands over a steppable cell and
    nothing otherwise. Interior points reward containment, the margin ring
    outside the footprint rewards distance from edges.
    """

    def __init__(self, test_points: np.ndarray, kernel_sigma: float):
        self.test_points = np.asarray(test_points, dtype=float).reshape(-1, 2)
        if self.test_points.shape[0] < 1:
            raise ValueError("need at least one test point")
        self.kernel_sigma = float(kernel_sigma)
        sq = np.sum(self.test_points**2, axis=1)
        self.weights = np.exp(-sq / (2.0 * kernel_sigma**2))

    @classmethod
    def for_footprint(cls, length: float, width: float, margin: float = 0.02) -> "SafetyScorer":
        """Default layout: 3x3 lattice over the footprint plus 6 ring points
        `margin` outside the boundary; sigma is half the footprint diagonal."""
        a, b = 0.5 * length, 0.5 * width
        xs = [-a, 0.0, a]
        ys = [-b, 0.0, b]
        lattice = [(x, y) for x in xs for y in ys]
        am, bm = a + margin, b + margin
        ring = [(am, 0.0), (-am, 0.0), (am, bm), (am, -bm), (-am, bm), (-am, -bm)]
        sigma = 0.5 * math.hypot(length, width)
        return cls(np.array(lattice + ring), sigma)

    @property
    def max_per_step(self) -> float:
        return float(self.weights.sum())

    def score_footstep(self, footstep: Footstep, grid: SteppableGrid) -> float:
        world = self.test_points @ rot2(footstep.yaw).T + footstep.xy()
        hit = grid.steppable_at(world[:, 0], world[:, 1])
        return float(self.weights[hit].sum())

    def score_many(self, footsteps: list[Footstep], grid: SteppableGrid) -> np.ndarray:
        """Vectorized per-footstep scores for a batch of placements."""
        if not footsteps:
            return np.empty(0)
        cx = np.array([f.x for f in footsteps])
        cy = np.array([f.y for f in footsteps])
        yaw = np.array([f.yaw for f in footsteps])
        c, s = np.cos(yaw), np.sin(yaw)
        px, py = self.test_points[:, 0], self.test_points[:, 1]
        wx = cx[:, None] + c[:, None] * px - s[:, None] * py
        wy = cy[:, None] + s[:, None] * px + c[:, None] * py
        hit = grid.steppable_at(wx.ravel(), wy.ravel()).reshape(wx.shape)
        return hit @ self.weights


@dataclass(frozen=True)
class PlannerConfig:
    time_budget: float = 0.005
    iterations: int | None = None  # set for deterministic budgets
    max_steps: int = 4
    min_steps: int = 2
    forward_bias: float = 0.8
    seed: int = 0
    early_stop_on_full_path: bool = False

    def __post_init__(self) -> None:
        if self.min_steps > self.max_steps:
            raise ValueError("min_steps must not exceed max_steps")
        if self.time_budget <= 0:
            raise ValueError("time budget must be positive")


@dataclass
class PlanResult:
    path: FootstepPath
    iterations: int
    elapsed: float
    n_candidates: int
    short: bool

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.path.steps],
            "score": self.path.score,
            "length": len(self.path),
            "iterations": self.iterations,
            "elapsed_us": int(self.elapsed * 1e6),
            "short": self.short,
        }


def random_support_footstep(
    tree: FootstepTree, rng: np.random.Generator, max_steps: int
) -> int | None:
    """Uniform draw over nodes that can still be extended (depth < max)."""
    eligible = [i for i, node in enumerate(tree.nodes) if node.depth < max_steps]
    if not eligible:
        return None
    return eligible[rng.integers(len(eligible))]


def random_footstep(
    support: Footstep,
    reach: ReachabilityModel,
    bias: float,
    rng: np.random.Generator,
) -> Footstep:
    """Sample a next footstep inside the reachable region of the support.

    Forward offsets come from a Gaussian centered at `bias` of the forward
    range (truncated by resampling) so plans drive forward; lateral offset
    and yaw are uniform.
    """
    f_lo, f_hi = reach.forward
    center = f_lo + bias * (f_hi - f_lo)
    std = 0.25 * (f_hi - f_lo)
    if std == 0.0:
        fwd = center
    else:
        fwd = rng.normal(center, std)
        while not f_lo <= fwd <= f_hi:
            fwd = rng.normal(center, std)
    lat = rng.uniform(reach.lateral[0], reach.lateral[1])
    dyaw = rng.uniform(reach.yaw[0], reach.yaw[1])

    side = support.side.opposite
    local = np.array([fwd, lat * side.sign])
    world = rot2(support.yaw) @ local + support.xy()
    return Footstep(
        side=side,
        x=float(world[0]),
        y=float(world[1]),
        z=support.z,
        yaw=support.yaw + dyaw,
        length=support.length,
        width=support.width,
    )


if _HAVE_NUMBA:

    @njit(cache=True)
    def _validity_kernel(steppable, plane_id, height, x0, y0, res, cx, cy, cos_yaw, sin_yaw, a, b):
        """Separating-axis walk over the footprint's cell bounding box.

        Returns (1, plane height at the center cell) when every overlapped
        cell is steppable and carries one plane id; (0, 0.0) otherwise,
        including when the footprint pokes past the grid.
        """
        nx, ny = steppable.shape
        h = 0.5 * res
        eps = 1e-12
        ac, asn = abs(cos_yaw), abs(sin_yaw)
        ex = a * ac + b * asn
        ey = a * asn + b * ac
        reach = h * (ac + asn)
        ix_lo = int(math.floor((cx - ex - x0) / res))
        ix_hi = int(math.floor((cx + ex - x0) / res))
        iy_lo = int(math.floor((cy - ey - y0) / res))
        iy_hi = int(math.floor((cy + ey - y0) / res))
        pid = -2
        for ix in range(ix_lo, ix_hi + 1):
            dx = x0 + (ix + 0.5) * res - cx
            if abs(dx) >= ex + h - eps:
                continue
            for iy in range(iy_lo, iy_hi + 1):
                dy = y0 + (iy + 0.5) * res - cy
                if abs(dy) >= ey + h - eps:
                    continue
                if abs(dx * cos_yaw + dy * sin_yaw) >= a + reach - eps:
                    continue
                if abs(-dx * sin_yaw + dy * cos_yaw) >= b + reach - eps:
                    continue
                if ix < 0 or ix >= nx or iy < 0 or iy >= ny:
                    return 0, 0.0
                if not steppable[ix, iy]:
                    return 0, 0.0
                p = plane_id[ix, iy]
                if pid == -2:
                    pid = p
                elif p != pid:
                    return 0, 0.0
        if pid == -2:
            return 0, 0.0
        cix = int(math.floor((cx - x0) / res))
        ciy = int(math.floor((cy - y0) / res))
        return 1, height[cix, ciy]


def _validity_numpy(candidate: Footstep, grid: SteppableGrid) -> bool:
    cells, out_of_bounds = cells_overlapping_rect(
        grid.x0,
        grid.y0,
        grid.resolution,
        grid.nx,
        grid.ny,
        candidate.x,
        candidate.y,
        candidate.yaw,
        candidate.length,
        candidate.width,
    )
    if out_of_bounds or cells.size == 0:
        return False
    flat_s = grid.steppable.ravel()
    if not flat_s[cells].all():
        return False
    ids = grid.plane_id.ravel()[cells]
    if ids.min() != ids.max():
        return False
    ix, iy = grid.cell_index(candidate.x, candidate.y)
    candidate.z = float(grid.height[ix, iy])
    return True


def validity_test(candidate: Footstep, grid: SteppableGrid) -> bool:
    """True when every cell under the footprint is steppable and on one plane.

    On success the candidate's height is set to the grid height at its center
    cell. Footprints that poke past the mapped region are invalid.
    """
    if _HAVE_NUMBA:
        ok, z = _validity_kernel(
            grid.steppable,
            grid.plane_id,
            grid.height,
            grid.x0,
            grid.y0,
            grid.resolution,
            candidate.x,
            candidate.y,
            math.cos(candidate.yaw),
            math.sin(candidate.yaw),
            0.5 * candidate.length,
            0.5 * candidate.width,
        )
        if ok:
            candidate.z = float(z)
            return True
        return False
    return _validity_numpy(candidate, grid)


def safety_score(path: FootstepPath, grid: SteppableGrid, scorer: SafetyScorer) -> float:
    if not path.steps:
        raise ValueError("cannot score an empty path")
    return float(scorer.score_many(path.steps, grid).sum())


def footstep_path_candidates(tree: FootstepTree) -> list[FootstepPath]:
    """One candidate per leaf: the root-to-leaf sequence without the root."""
    return [FootstepPath(tree.path_to(leaf), 0.0, leaf) for leaf in tree.leaves()]


def best_footstep_path(
    candidates: list[FootstepPath],
    grid: SteppableGrid,
    scorer: SafetyScorer,
    cfg: PlannerConfig,
) -> FootstepPath:
    """Lexicographic argmax over (length, safety score); among full ties the
    smallest leaf index wins so selection is deterministic."""
    if not candidates:
        raise NoFeasiblePath("no footstep path candidates")
    # Candidates share tree nodes; score each distinct footstep once.
    unique: dict[int, Footstep] = {}
    for cand in candidates:
        for step in cand.steps:
            unique.setdefault(id(step), step)
    steps = list(unique.values())
    scores = scorer.score_many(steps, grid)
    by_id = {id(s): float(v) for s, v in zip(steps, scores)}
    best = None
    best_key = None
    for cand in candidates:
        cand.score = sum(by_id[id(s)] for s in cand.steps)
        key = (len(cand), cand.score, -cand.leaf)
        if best_key is None or key > best_key:
            best, best_key = cand, key
    return best


def warm_up() -> None:
    """Trigger one validity evaluation so JIT compilation (when the numba
    accelerator is present) happens outside any wall-clock plan budget."""
    from .mapping import uniform_grid

    validity_test(Footstep(Side.LEFT, 0.05, 0.0), uniform_grid(0.1, 0.1, 0.01))


def plan(
    grid: SteppableGrid,
    q_init: Footstep,
    reach: ReachabilityModel,
    scorer: SafetyScorer,
    cfg: PlannerConfig,
) -> PlanResult:
    """Grow the footstep tree under the budget and return the best path.

    With `cfg.iterations` set the sample count is fixed and the result is a
    pure function of (grid, q_init, cfg); otherwise the loop runs until the
    wall-clock budget expires.
    """
    rng = np.random.default_rng(cfg.seed)
    tree = FootstepTree(q_init)
    t0 = time.perf_counter()
    iterations = 0
    full_depth_reached = False
    # Incremental copy of what random_support_footstep would enumerate; the
    # planner loop is hot enough that an O(n) rescan per sample matters.
    eligible: list[int] = [0] if cfg.max_steps > 0 else []

    def budget_left() -> bool:
        if cfg.iterations is not None:
            return iterations < cfg.iterations
        return time.perf_counter() - t0 < cfg.time_budget

    while budget_left():
        if cfg.early_stop_on_full_path and full_depth_reached:
            break
        if not eligible:
            break
        support_idx = eligible[rng.integers(len(eligible))]
        iterations += 1
        support = tree.nodes[support_idx].footstep
        candidate = random_footstep(support, reach, cfg.forward_bias, rng)
        if not validity_test(candidate, grid):
            continue
        if abs(candidate.z - support.z) > reach.max_height_delta:
            continue
        new_idx = tree.add(candidate, support_idx)
        if tree.nodes[new_idx].depth >= cfg.max_steps:
            full_depth_reached = True
        else:
            eligible.append(new_idx)

    candidates = footstep_path_candidates(tree)
    best = best_footstep_path(candidates, grid, scorer, cfg)
    elapsed = time.perf_counter() - t0
    return PlanResult(
        path=best,
        iterations=iterations,
        elapsed=elapsed,
        n_candidates=len(candidates),
        short=len(best) < cfg.min_steps,
    )
