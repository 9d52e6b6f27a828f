"""2D geometry helpers: oriented boxes, convex polygon clipping, IOU.

All boxes are axis-symmetric rectangles described by center (x, y), yaw,
length (along heading) and width. Everything works on plain numpy arrays so
the scenario validator, the metrics suite, and the synthesizer can share one
implementation.
"""

from __future__ import annotations

import numpy as np


def rotation_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s], [s, c]])


def box_corners(x: float, y: float, yaw: float, length: float, width: float) -> np.ndarray:
    """Corners of an oriented rectangle, counter-clockwise, shape (4, 2)."""
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ rotation_matrix(yaw).T + np.array([x, y])


def boxes_corners(states: np.ndarray) -> np.ndarray:
    """Vectorized corners for an (N, 8) state-field array -> (N, 4, 2).

    Column layout follows scene.STATE_FIELDS: x, y, z, yaw, v, length,
    width, height.
    """
    x, y, yaw = states[:, 0], states[:, 1], states[:, 3]
    hl, hw = 0.5 * states[:, 5], 0.5 * states[:, 6]
    c, s = np.cos(yaw), np.sin(yaw)
    # local corner offsets (4, 2) broadcast against per-box half extents
    sx = np.array([1.0, -1.0, -1.0, 1.0])
    sy = np.array([1.0, 1.0, -1.0, -1.0])
    lx = sx[None, :] * hl[:, None]
    ly = sy[None, :] * hw[:, None]
    gx = x[:, None] + c[:, None] * lx - s[:, None] * ly
    gy = y[:, None] + s[:, None] * lx + c[:, None] * ly
    return np.stack([gx, gy], axis=-1)


def polygon_area(points: np.ndarray) -> float:
    """Shoelace area of a simple polygon given as (K, 2); CCW is positive."""
    if len(points) < 3:
        return 0.0
    x, y = points[:, 0], points[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a polygon against a convex CCW clip polygon."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inputs = output
        output = []
        prev = inputs[-1]
        f_prev = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inputs:
            f_cur = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if (f_cur >= 0.0) != (f_prev >= 0.0):
                # edge crossing: interpolate to the zero of the side function
                t = f_prev / (f_prev - f_cur)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            if f_cur >= 0.0:
                output.append(cur)
            prev, f_prev = cur, f_cur
    return np.array(output) if output else np.empty((0, 2))


def oriented_box_iou(box_a: np.ndarray, box_b: np.ndarray) -> float:
    """IOU of two oriented boxes given as (x, y, yaw, length, width) tuples."""
    xa, ya, ha, la, wa = box_a
    xb, yb, hb, lb, wb = box_b
    # cheap circle reject before the polygon clip
    ra = 0.5 * np.hypot(la, wa)
    rb = 0.5 * np.hypot(lb, wb)
    if np.hypot(xb - xa, yb - ya) > ra + rb:
        return 0.0
    ca = box_corners(xa, ya, ha, la, wa)
    cb = box_corners(xb, yb, hb, lb, wb)
    inter = abs(polygon_area(clip_polygon(ca, cb)))
    if inter == 0.0:
        return 0.0
    union = la * wa + lb * wb - inter
    return inter / union if union > 0.0 else 0.0


def state_box(state_row: np.ndarray) -> tuple:
    """(x, y, yaw, length, width) tuple from one STATE_FIELDS row."""
    return (float(state_row[0]), float(state_row[1]), float(state_row[3]),
            float(state_row[5]), float(state_row[6]))
