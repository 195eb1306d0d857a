"""Planar geometry: poses, lane polylines and oriented-box overlap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return w if w.ndim else float(w)


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    heading: float

    def as_array(self):
        return np.array([self.x, self.y, self.heading], dtype=np.float64)


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def to_frame(points, origin, heading):
    """Express world ``points`` (..., 2) in the frame at ``origin`` rotated by ``heading``."""
    d = np.asarray(points, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def from_frame(points, origin, heading):
    p = np.asarray(points, dtype=np.float64)
    c, s = np.cos(heading), np.sin(heading)
    x = c * p[..., 0] - s * p[..., 1] + origin[0]
    y = s * p[..., 0] + c * p[..., 1] + origin[1]
    return np.stack([x, y], axis=-1)


def box_corners(cx, cy, heading, length, width):
    """Corners (4, 2) of an oriented rectangle, counter-clockwise."""
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return np.stack([cx + c * local[:, 0] - s * local[:, 1], cy + s * local[:, 0] + c * local[:, 1]], axis=1)


def boxes_overlap(a, b):
    """Separating-axis test for two oriented boxes given as (cx, cy, heading, length, width).

    Touching boxes count as overlapping.
    """
    return bool(boxes_overlap_batch(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def boxes_overlap_batch(a, b):
    """Vectorised SAT; ``a`` and ``b`` broadcast over leading dims, last dim is 5."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    dx = b[..., 0] - a[..., 0]
    dy = b[..., 1] - a[..., 1]
    ca, sa = np.cos(a[..., 2]), np.sin(a[..., 2])
    cb, sb = np.cos(b[..., 2]), np.sin(b[..., 2])
    hla, hwa = a[..., 3] / 2, a[..., 4] / 2
    hlb, hwb = b[..., 3] / 2, b[..., 4] / 2
    # relative orientation terms: dot products between the axes of a and b
    c_dot = ca * cb + sa * sb          # a.x . b.x  ==  a.y . b.y
    s_dot = ca * sb - sa * cb          # a.x . b.y  == -a.y . b.x
    ac, as_ = np.abs(c_dot), np.abs(s_dot)
    sep = np.zeros(np.broadcast(dx, c_dot).shape, dtype=bool)
    # axes of a
    sep |= np.abs(dx * ca + dy * sa) > hla + hlb * ac + hwb * as_
    sep |= np.abs(-dx * sa + dy * ca) > hwa + hlb * as_ + hwb * ac
    # axes of b
    sep |= np.abs(dx * cb + dy * sb) > hlb + hla * ac + hwa * as_
    sep |= np.abs(-dx * sb + dy * cb) > hwb + hla * as_ + hwa * ac
    return ~sep


def point_in_box(px, py, box):
    """Point-in-rectangle test in the box's local frame (boundary inclusive)."""
    cx, cy, h, length, width = box
    dx, dy = px - cx, py - cy
    c, s = np.cos(h), np.sin(h)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (np.abs(lx) <= length / 2) & (np.abs(ly) <= width / 2)


class Polyline:
    """Arc-length parameterised lane centerline."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise ValueError("centerline needs at least two 2D points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0):
            raise ValueError("consecutive centerline points must be distinct")
        self.points = pts
        self.seg = seg
        self.seg_len = seg_len
        self.arc = np.concatenate([[0.0], np.cumsum(seg_len)])
        self.seg_heading = np.arctan2(seg[:, 1], seg[:, 0])
        self.length = float(self.arc[-1])

    VERTEX_TOL = 1e-9

    def _segment_at(self, s):
        # arcs within VERTEX_TOL of a vertex belong to the segment that starts there,
        # so rounding noise from rigid transforms cannot flip the segment
        i = np.searchsorted(self.arc, s + self.VERTEX_TOL, side="right") - 1
        return np.clip(i, 0, len(self.seg_len) - 1)

    def point_at(self, s):
        """Point(s) at arc length ``s`` (extrapolates linearly past the ends)."""
        s = np.asarray(s, dtype=np.float64)
        i = self._segment_at(s)
        t = (s - self.arc[i]) / self.seg_len[i]
        return self.points[i] + t[..., None] * self.seg[i]

    def heading_at(self, s):
        return self.seg_heading[self._segment_at(np.asarray(s, dtype=np.float64))]

    def frenet_to_world(self, s, d):
        """Lane coordinates (arc, signed left offset) to world xy."""
        p = self.point_at(s)
        h = self.heading_at(s)
        d = np.asarray(d, dtype=np.float64)
        return np.stack([p[..., 0] - d * np.sin(h), p[..., 1] + d * np.cos(h)], axis=-1)

    def project(self, points, lo=0.0, hi=None):
        """Project world points onto the polyline: returns (arc, signed offset).

        ``lo``/``hi`` bound the arc window searched (speeds up local queries).
        """
        pts = np.asarray(points, dtype=np.float64)
        flat = pts.reshape(-1, 2)
        i0 = int(self._segment_at(np.array(lo)))
        i1 = len(self.seg_len) if hi is None else int(self._segment_at(np.array(hi))) + 1
        a = self.points[i0:i1]
        v = self.seg[i0:i1]
        ll = self.seg_len[i0:i1] ** 2
        rel = flat[:, None, :] - a[None, :, :]
        t = np.clip((rel * v[None]).sum(-1) / ll[None], 0.0, 1.0)
        foot = a[None] + t[..., None] * v[None]
        dist2 = ((flat[:, None, :] - foot) ** 2).sum(-1)
        k = np.argmin(dist2, axis=1)
        rows = np.arange(flat.shape[0])
        arc = self.arc[i0:i1][k] + t[rows, k] * self.seg_len[i0:i1][k]
        vk = v[k]
        rk = rel[rows, k]
        cross = vk[:, 0] * rk[:, 1] - vk[:, 1] * rk[:, 0]
        off = np.sign(cross) * np.sqrt(dist2[rows, k])
        return arc.reshape(pts.shape[:-1]), off.reshape(pts.shape[:-1])
