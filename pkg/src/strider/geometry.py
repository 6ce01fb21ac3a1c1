"""Small planar-geometry helpers shared by mapping, planning, and simulation."""

from __future__ import annotations

import math

import numpy as np


def rot2(yaw: float) -> np.ndarray:
    """2x2 rotation matrix for a yaw angle in radians."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def rect_corners(cx: float, cy: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners (4, 2) of a rectangle centered at (cx, cy), long axis along yaw."""
    a, b = 0.5 * length, 0.5 * width
    local = np.array([[a, b], [a, -b], [-a, -b], [-a, b]])
    return local @ rot2(yaw).T + np.array([cx, cy])


def cells_overlapping_rect(
    x0: float,
    y0: float,
    resolution: float,
    nx: int,
    ny: int,
    cx: float,
    cy: float,
    yaw: float,
    length: float,
    width: float,
) -> tuple[np.ndarray, bool]:
    """Grid cells whose squares intersect a rotated rectangle.

    Cells are squares of side `resolution` anchored at (x0, y0); the rectangle
    is centered at (cx, cy) with its long axis rotated by `yaw`. Returns the
    flat row-major indices (ix * ny + iy) of the in-bounds overlapped cells and
    a flag that is True when the rectangle also overlaps cells outside the
    grid extent.

    Overlap is decided by a separating-axis test on the four candidate axes
    (two grid axes, two rectangle axes), vectorized over the rectangle's cell
    bounding box.
    """
    c, s = math.cos(yaw), math.sin(yaw)
    a, b = 0.5 * length, 0.5 * width
    h = 0.5 * resolution

    # Reach of the rotated rectangle along the grid axes.
    ex = a * abs(c) + b * abs(s)
    ey = a * abs(s) + b * abs(c)

    ix_lo = math.floor((cx - ex - x0) / resolution)
    ix_hi = math.floor((cx + ex - x0) / resolution)
    iy_lo = math.floor((cy - ey - y0) / resolution)
    iy_hi = math.floor((cy + ey - y0) / resolution)

    ix = np.arange(ix_lo, ix_hi + 1)
    iy = np.arange(iy_lo, iy_hi + 1)
    if ix.size == 0 or iy.size == 0:
        return np.empty(0, dtype=np.intp), False

    # Cell-center offsets from the rectangle center, broadcast to a box grid.
    dx = (x0 + (ix + 0.5) * resolution - cx)[:, None]
    dy = (y0 + (iy + 0.5) * resolution - cy)[None, :]

    # Shrink by a hair so exact edge tangency does not count as overlap.
    eps = 1e-12
    reach_rect = h * (abs(c) + abs(s))
    overlap = (
        (np.abs(dx) < ex + h - eps)
        & (np.abs(dy) < ey + h - eps)
        & (np.abs(dx * c + dy * s) < a + reach_rect - eps)
        & (np.abs(-dx * s + dy * c) < b + reach_rect - eps)
    )

    in_x = (ix >= 0) & (ix < nx)
    in_y = (iy >= 0) & (iy < ny)
    inside = in_x[:, None] & in_y[None, :]

    out_of_bounds = bool(np.any(overlap & ~inside))
    sel = overlap & inside
    sel_ix, sel_iy = np.nonzero(sel)
    flat = (ix[sel_ix] * ny + iy[sel_iy]).astype(np.intp)
    return flat, out_of_bounds


def point_cell_indices(
    x0: float, y0: float, resolution: float, xs: np.ndarray, ys: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Cell indices (ix, iy) for arrays of world coordinates."""
    ix = np.floor((np.asarray(xs) - x0) / resolution).astype(np.intp)
    iy = np.floor((np.asarray(ys) - y0) / resolution).astype(np.intp)
    return ix, iy


def quintic_coefficients(
    p0: float, v0: float, a0: float, p1: float, v1: float, a1: float, duration: float
) -> np.ndarray:
    """Quintic polynomial coefficients (c0..c5) in normalized time.

    The polynomial is evaluated as p(tau) with tau = (t - t_start) / duration,
    so velocity/acceleration boundary values are scaled by the duration here
    and unscaled again at evaluation time. Solving in normalized time keeps
    the system well conditioned for short segments.
    """
    d = duration
    rhs = np.array([p0, v0 * d, a0 * d * d, p1, v1 * d, a1 * d * d])
    return _QUINTIC_INV @ rhs


# Boundary-condition matrix for tau in [0, 1]: rows are p(0), p'(0), p''(0),
# p(1), p'(1), p''(1) applied to coefficients c0..c5.
_QUINTIC_INV = np.linalg.inv(
    np.array(
        [
            [1, 0, 0, 0, 0, 0],
            [0, 1, 0, 0, 0, 0],
            [0, 0, 2, 0, 0, 0],
            [1, 1, 1, 1, 1, 1],
            [0, 1, 2, 3, 4, 5],
            [0, 0, 2, 6, 12, 20],
        ],
        dtype=float,
    )
)


def quintic_eval(coeffs: np.ndarray, tau: float, duration: float) -> tuple[float, float, float]:
    """Position, velocity, acceleration of a normalized-time quintic at tau."""
    c0, c1, c2, c3, c4, c5 = coeffs
    p = c0 + tau * (c1 + tau * (c2 + tau * (c3 + tau * (c4 + tau * c5))))
    v = c1 + tau * (2 * c2 + tau * (3 * c3 + tau * (4 * c4 + tau * 5 * c5)))
    a = 2 * c2 + tau * (6 * c3 + tau * (12 * c4 + tau * 20 * c5))
    return p, v / duration, a / (duration * duration)
