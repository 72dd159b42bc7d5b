"""Reciprocal collision avoidance for 3-D swarms.

For every nearby pair of agents a half-space of permitted velocities is
constructed from the truncated velocity obstacle: each agent takes half
of the minimal relative-velocity correction ``u``, so if both agents of
a pair pick velocities inside their half-spaces the new relative
velocity leaves the obstacle and the pair stays at least the combined
radius apart for the next time horizon.  The agent velocity closest to
the preferred one subject to all half-spaces and a speed cap is found
with an incremental low-dimensional solve (ball -> plane -> line); when
the constraints are jointly infeasible a back-projection pass minimizes
the largest violation instead.

All geometry is float64 and constraint order is deterministic, so the
output is bitwise reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

__all__ = [
    "NavConfig", "HalfSpaceConstraint", "build_orca_halfspace",
    "solve_velocity_lp", "orca_adjust",
]

# Parallelism threshold for squared cross products of unit vectors.
_EPS = 1e-10


@dataclass(frozen=True)
class NavConfig:
    """Collision-avoidance parameters.

    ``kappa`` is the pairwise separation to enforce (each agent
    contributes a radius of kappa/2).  ``tau`` defaults to 10 time steps,
    ``neighbor_radius`` to 4 kappa, and ``v_max`` to twice the largest
    preferred speed of the batch being adjusted, floored at kappa/dt so
    overlapping agents can separate even from an all-zero batch.
    """

    kappa: float
    dt: float
    tau: float | None = None
    v_max: float | None = None
    neighbor_radius: float | None = None

    def __post_init__(self):
        if not self.kappa > 0.0:
            raise ValueError("kappa must be positive")
        if not self.dt > 0.0:
            raise ValueError("dt must be positive")
        if self.tau is not None and self.tau < self.dt:
            raise ValueError("tau must be at least dt")
        if self.v_max is not None and self.v_max < 0.0:
            raise ValueError("v_max must be non-negative")

    @property
    def horizon(self) -> float:
        return self.tau if self.tau is not None else 10.0 * self.dt

    @property
    def culling_radius(self) -> float:
        return (self.neighbor_radius if self.neighbor_radius is not None
                else 4.0 * self.kappa)


@dataclass
class HalfSpaceConstraint:
    """Permitted velocities satisfy (v - point) . normal >= 0."""

    point: np.ndarray
    normal: np.ndarray  # unit length

    def violation(self, v) -> float:
        """Signed violation depth; positive when ``v`` is forbidden."""
        return float(np.dot(self.normal, self.point - v))


def _perpendicular(v: np.ndarray) -> np.ndarray:
    """Deterministic unit vector orthogonal to ``v``.

    Antisymmetric under negation (perp(-v) = -perp(v)) so a pair of
    agents building mirrored constraints from +/-v stays reciprocal.
    """
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(v)))] = 1.0
    w = np.cross(v, axis)
    return w / np.linalg.norm(w)


def build_orca_halfspace(p_self, v_self, p_other, v_other,
                         combined_radius: float, tau: float,
                         dt: float) -> HalfSpaceConstraint:
    """Half-space of velocities for the self agent against one neighbor.

    ``v_self``/``v_other`` are the reference velocities the correction is
    split around; ``tau`` is the avoidance horizon for non-colliding
    pairs, while already-overlapping pairs are pushed apart within one
    ``dt``.  Coincident positions are a degenerate input and raise.
    """
    p_self = np.asarray(p_self, dtype=np.float64)
    v_self = np.asarray(v_self, dtype=np.float64)
    rel_pos = np.asarray(p_other, dtype=np.float64) - p_self
    rel_vel = v_self - np.asarray(v_other, dtype=np.float64)
    dist_sq = float(np.dot(rel_pos, rel_pos))
    radius_sq = combined_radius * combined_radius
    if dist_sq == 0.0:
        raise ValueError("coincident agent positions")

    if dist_sq > radius_sq:
        inv_tau = 1.0 / tau
        w = rel_vel - inv_tau * rel_pos
        w_len_sq = float(np.dot(w, w))
        dot = float(np.dot(w, rel_pos))
        if dot < 0.0 and dot * dot > radius_sq * w_len_sq:
            # Closest exit is through the sphere capping the obstacle.
            w_len = np.sqrt(w_len_sq)
            unit_w = w / w_len
            normal = unit_w
            u = (combined_radius * inv_tau - w_len) * unit_w
        else:
            # Closest exit is through the cone flank.
            a = dist_sq
            b = float(np.dot(rel_pos, rel_vel))
            cr = np.cross(rel_pos, rel_vel)
            c = float(np.dot(rel_vel, rel_vel)) - float(np.dot(cr, cr)) / (dist_sq - radius_sq)
            t = (b + np.sqrt(b * b - a * c)) / a
            w = rel_vel - t * rel_pos
            w_len = float(np.linalg.norm(w))
            if w_len * w_len <= _EPS * max(1.0, t * t * dist_sq):
                # Relative velocity sits exactly on the cone axis (exact
                # head-on): push out sideways along a deterministic,
                # sign-antisymmetric perpendicular.
                unit_w = _perpendicular(rel_pos)
                w_len = 0.0
            else:
                unit_w = w / w_len
            normal = unit_w
            u = (combined_radius * t - w_len) * unit_w
    else:
        # Already overlapping: resolve within a single time step.
        inv_dt = 1.0 / dt
        w = rel_vel - inv_dt * rel_pos
        w_len = float(np.linalg.norm(w))
        if w_len * w_len <= _EPS:
            unit_w = _perpendicular(rel_pos)
            w_len = 0.0
        else:
            unit_w = w / w_len
        normal = unit_w
        u = (combined_radius * inv_dt - w_len) * unit_w

    return HalfSpaceConstraint(point=v_self + 0.5 * u, normal=normal)


# ---------------------------------------------------------------------------
# incremental low-dimensional solve (ball-constrained LP with half-spaces)

def _lp_line(planes, count, line_point, line_dir, radius, opt, direction_opt):
    """Optimum on a line clipped by the speed ball and planes[:count]."""
    dot = float(np.dot(line_point, line_dir))
    disc = dot * dot + radius * radius - float(np.dot(line_point, line_point))
    if disc < 0.0:
        return None  # line misses the ball
    sqrt_disc = np.sqrt(disc)
    t_left = -dot - sqrt_disc
    t_right = -dot + sqrt_disc

    for i in range(count):
        numerator = float(np.dot(planes[i].point - line_point, planes[i].normal))
        denominator = float(np.dot(line_dir, planes[i].normal))
        if denominator * denominator <= _EPS:
            if numerator > 0.0:
                return None  # line parallel to plane i, on the forbidden side
            continue
        t = numerator / denominator
        if denominator >= 0.0:
            t_left = max(t_left, t)
        else:
            t_right = min(t_right, t)
        if t_left > t_right:
            return None

    if direction_opt:
        t = t_right if float(np.dot(opt, line_dir)) > 0.0 else t_left
    else:
        t = float(np.dot(line_dir, opt - line_point))
        t = min(max(t, t_left), t_right)
    return line_point + t * line_dir


def _lp_plane(planes, plane_no, radius, opt, direction_opt):
    """Optimum on planes[plane_no] within the ball, honoring earlier planes."""
    plane = planes[plane_no]
    plane_dist = float(np.dot(plane.point, plane.normal))
    radius_sq = radius * radius
    if plane_dist * plane_dist > radius_sq:
        return None  # plane does not intersect the ball
    disc_radius_sq = radius_sq - plane_dist * plane_dist
    plane_center = plane_dist * plane.normal

    if direction_opt:
        # maximize travel along `opt` within the plane's disc
        in_plane = opt - float(np.dot(opt, plane.normal)) * plane.normal
        in_plane_sq = float(np.dot(in_plane, in_plane))
        if in_plane_sq <= _EPS:
            result = plane_center
        else:
            result = plane_center + np.sqrt(disc_radius_sq / in_plane_sq) * in_plane
    else:
        result = opt + float(np.dot(plane.point - opt, plane.normal)) * plane.normal
        if float(np.dot(result, result)) > radius_sq:
            offset = result - plane_center
            offset_sq = float(np.dot(offset, offset))
            result = plane_center + np.sqrt(disc_radius_sq / offset_sq) * offset

    for i in range(plane_no):
        if planes[i].violation(result) > 0.0:
            cross = np.cross(planes[i].normal, plane.normal)
            if float(np.dot(cross, cross)) <= _EPS:
                return None  # parallel and still violating
            line_dir = cross / np.linalg.norm(cross)
            line_normal = np.cross(line_dir, plane.normal)
            scale = (float(np.dot(planes[i].point - plane.point, planes[i].normal))
                     / float(np.dot(line_normal, planes[i].normal)))
            line_point = plane.point + scale * line_normal
            result = _lp_line(planes, i, line_point, line_dir, radius, opt,
                              direction_opt)
            if result is None:
                return None
    return result


def _lp_full(planes, radius, opt, direction_opt):
    """Incremental solve; returns (first_failing_index_or_len, result)."""
    if direction_opt:
        result = opt * radius  # opt is a unit direction
    elif float(np.dot(opt, opt)) > radius * radius:
        norm = float(np.linalg.norm(opt))
        result = opt * (radius / norm) if norm > 0.0 else np.zeros(3)
    else:
        result = np.asarray(opt, dtype=np.float64).copy()

    for i, plane in enumerate(planes):
        if plane.violation(result) > 0.0:
            attempt = _lp_plane(planes, i, radius, opt, direction_opt)
            if attempt is None:
                return i, result
            result = attempt
    return len(planes), result


def _lp_backproject(planes, begin, radius, result):
    """Infeasible fallback: minimize the largest constraint violation."""
    distance = 0.0
    for i in range(begin, len(planes)):
        if planes[i].violation(result) > distance:
            proj_planes = []
            for j in range(i):
                cross = np.cross(planes[j].normal, planes[i].normal)
                if float(np.dot(cross, cross)) <= _EPS:
                    if float(np.dot(planes[i].normal, planes[j].normal)) > 0.0:
                        continue  # same orientation: j is subsumed
                    point = 0.5 * (planes[i].point + planes[j].point)
                else:
                    line_normal = np.cross(cross, planes[i].normal)
                    scale = (float(np.dot(planes[j].point - planes[i].point,
                                          planes[j].normal))
                             / float(np.dot(line_normal, planes[j].normal)))
                    point = planes[i].point + scale * line_normal
                diff = planes[j].normal - planes[i].normal
                normal = diff / np.linalg.norm(diff)
                proj_planes.append(HalfSpaceConstraint(point, normal))
            fail, attempt = _lp_full(proj_planes, radius, planes[i].normal,
                                     direction_opt=True)
            if fail >= len(proj_planes):
                # By construction the projected program is feasible; keep
                # the previous result if numerics disagree.
                result = attempt
            distance = planes[i].violation(result)
    return result


def solve_velocity_lp(v_pref, constraints, v_max: float) -> np.ndarray:
    """Velocity closest to ``v_pref`` with speed <= v_max satisfying all
    half-spaces; on an empty intersection, the minimax-violation point."""
    v_pref = np.asarray(v_pref, dtype=np.float64)
    fail, result = _lp_full(constraints, float(v_max), v_pref,
                            direction_opt=False)
    if fail < len(constraints):
        result = _lp_backproject(constraints, fail, float(v_max), result)
    return result


def orca_adjust(v_pref, positions, cfg: NavConfig) -> np.ndarray:
    """Collision-free velocities for the whole swarm.

    ``v_pref`` (M, 3) holds the preferred velocities, which also serve as
    the reference velocities the pairwise corrections are split around;
    every agent applies the same convention, preserving reciprocity.
    Agents farther apart than the culling radius ignore each other.
    """
    v_pref = np.asarray(v_pref, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    if v_pref.shape != positions.shape or v_pref.ndim != 2 or v_pref.shape[1] != 3:
        raise ValueError(
            f"expected matching (M, 3) arrays, got {v_pref.shape} and "
            f"{positions.shape}")
    m = positions.shape[0]
    if m == 0:
        return np.zeros((0, 3))

    if cfg.v_max is not None:
        v_max = cfg.v_max
    else:
        # floor at the one-step escape speed so overlapping agents can
        # always separate even when nobody wants to move
        v_max = max(
            2.0 * float(np.max(np.linalg.norm(v_pref, axis=1), initial=0.0)),
            cfg.kappa / cfg.dt)
    tau = cfg.horizon
    cull = cfg.culling_radius

    dist = cdist(positions, positions) if m > 1 else np.zeros((1, 1))
    out = np.empty_like(v_pref)
    for i in range(m):
        planes = []
        for j in range(m):
            if j == i or dist[i, j] >= cull:
                continue
            p_other = positions[j]
            if dist[i, j] == 0.0:
                # Coincident agents: break the tie with a fixed axis,
                # oppositely signed for the two agents of the pair.
                nudge = 1e-9 * cfg.kappa * (1.0 if j > i else -1.0)
                p_other = p_other + np.array([nudge, 0.0, 0.0])
            planes.append(build_orca_halfspace(
                positions[i], v_pref[i], p_other, v_pref[j],
                cfg.kappa, tau, cfg.dt))
        out[i] = solve_velocity_lp(v_pref[i], planes, v_max)
    return out
