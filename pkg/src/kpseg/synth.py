"""Synthetic interchange scenes and a rosette-pattern LiDAR simulator.

Scenes are built from a few analytic primitives (a heightfield terrain with
flattened road strips, oriented boxes, vertical cylinders, ellipsoids). Each
primitive carries its class, so sampled and ray-cast points are labeled by
construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .pccore import LabeledCloud, concatenate

NATURAL, BRIDGE, ROAD, CAR, POLE, GUARDRAIL = range(6)

# ----------------------------------------------------------------------------
# Primitives
# ----------------------------------------------------------------------------


def _segment_distance(xy, polyline):
    """Distance from each 2D point to a polyline."""
    pts = np.asarray(polyline, dtype=np.float64)
    best = np.full(len(xy), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        t = np.clip(((xy - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
        proj = a + t[:, None] * ab
        best = np.minimum(best, np.linalg.norm(xy - proj, axis=1))
    return best


@dataclass
class Terrain:
    """z = h(x, y) over [0, ex] x [0, ey]; flat (z = 0) on road strips.

    Ground off the road sits ``curb`` lower, so road edges show as a step.
    """

    extent: Tuple[float, float]
    amplitude: float
    wavelength: float
    phases: np.ndarray  # (n, 3): kx, ky, phase
    roads: List[Tuple[np.ndarray, float]] = field(default_factory=list)
    blend: float = 3.0
    curb: float = 0.0

    def road_mask(self, xy):
        mask = np.zeros(len(xy), dtype=bool)
        for line, width in self.roads:
            mask |= _segment_distance(xy, line) <= width / 2
        return mask

    def _flatten(self, xy):
        if not self.roads:
            return np.ones(len(xy))
        d = np.full(len(xy), np.inf)
        for line, width in self.roads:
            d = np.minimum(d, _segment_distance(xy, line) - width / 2)
        return np.clip(d / self.blend, 0.0, 1.0)

    def _raw(self, xy):
        if self.amplitude == 0:
            return np.zeros(len(xy))
        k = 2 * np.pi / self.wavelength
        h = np.zeros(len(xy))
        for kx, ky, ph in self.phases:
            h += np.sin(k * (kx * xy[:, 0] + ky * xy[:, 1]) + ph)
        return self.amplitude * h / np.sqrt(len(self.phases))

    def height(self, xy):
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        h = np.zeros(len(xy)) if self.amplitude == 0 else self._raw(xy) * self._flatten(xy)
        if self.curb and self.roads:
            h -= self.curb * ~self.road_mask(xy)
        return h

    def normal(self, xy, h=1e-3):
        dx = (self.height(xy + [h, 0]) - self.height(xy - [h, 0])) / (2 * h)
        dy = (self.height(xy + [0, h]) - self.height(xy - [0, h])) / (2 * h)
        n = np.stack([-dx, -dy, np.ones(len(xy))], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def labels(self, xy):
        return np.where(self.road_mask(xy), ROAD, NATURAL).astype(np.uint8)

    def sample(self, density, rng):
        ex, ey = self.extent
        n = rng.poisson(ex * ey * density)
        xy = rng.uniform([0.0, 0.0], [ex, ey], size=(n, 2))
        pts = np.column_stack([xy, self.height(xy)])
        return pts, self.normal(xy), self.labels(xy)

    def bounds_z(self):
        a = abs(self.amplitude) * 3.0
        return -a - abs(self.curb), a

    def intersect(self, origins, dirs, t_max):
        """Nearest crossing of the surface, by marching then bisection."""
        n = len(origins)
        t_hit = np.full(n, np.inf)
        ex, ey = self.extent
        zlo, zhi = self.bounds_z()
        lo = np.array([0.0, 0.0, zlo - 1e-6])
        hi = np.array([ex, ey, zhi + 1e-6])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (lo - origins) * inv
            t2 = (hi - origins) * inv
        tnear = np.nanmax(np.minimum(t1, t2), axis=1)
        tfar = np.nanmin(np.maximum(t1, t2), axis=1)
        tnear = np.maximum(tnear, 0.0)
        tfar = np.minimum(tfar, t_max)
        live = np.flatnonzero(tfar > tnear)
        if len(live) == 0:
            return t_hit
        step = 0.1 if self.amplitude == 0 else min(0.25, self.wavelength / 40)
        o, d = origins[live], dirs[live]
        t0, t1_ = tnear[live], tfar[live]

        def gap(t, rows):
            p = o[rows] + t[:, None] * d[rows]
            return p[:, 2] - self.height(p[:, :2])

        if self.amplitude == 0:
            # plane z = 0
            with np.errstate(divide="ignore", invalid="ignore"):
                t = -o[:, 2] / d[:, 2]
            ok = np.isfinite(t) & (t >= t0) & (t <= t1_)
            t_hit[live[ok]] = t[ok]
            return t_hit

        found = np.full(len(live), np.inf)
        prev_t = t0.copy()
        prev_g = gap(prev_t, np.arange(len(live)))
        active = np.flatnonzero(prev_g > 0)
        below = np.flatnonzero(prev_g <= 0)
        found[below] = t0[below]  # starts under the surface (origin inside terrain)
        while len(active):
            cur_t = np.minimum(prev_t[active] + step, t1_[active])
            g = gap(cur_t, active)
            crossed = g <= 0
            if crossed.any():
                rows = active[crossed]
                a, b = prev_t[rows], cur_t[crossed]
                for _ in range(40):
                    mid = 0.5 * (a + b)
                    gm = gap(mid, rows)
                    up = gm > 0
                    a = np.where(up, mid, a)
                    b = np.where(up, b, mid)
                found[rows] = b
            done = crossed | (cur_t >= t1_[active])
            prev_t[active] = cur_t
            active = active[~done]
        t_hit[live] = found
        return t_hit


def _yaw_matrix(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Box:
    """Box rotated by ``yaw`` about the vertical axis."""

    center: np.ndarray
    half: np.ndarray
    yaw: float
    label: int
    bottom: bool = True  # whether the bottom face is sampled

    def _to_local(self, p):
        return (p - self.center) @ _yaw_matrix(self.yaw)

    def contains(self, p, tol=1e-6):
        q = self._to_local(p)
        return np.all(np.abs(q) < self.half - tol, axis=1)

    def sample(self, density, rng):
        a, b, c = self.half
        faces = [  # (axis, sign, area)
            (0, 1, 4 * b * c), (0, -1, 4 * b * c),
            (1, 1, 4 * a * c), (1, -1, 4 * a * c),
            (2, 1, 4 * a * b),
        ]
        if self.bottom:
            faces.append((2, -1, 4 * a * b))
        pts, nrm = [], []
        for axis, sign, area in faces:
            n = rng.poisson(area * density)
            q = rng.uniform(-self.half, self.half, size=(n, 3))
            q[:, axis] = sign * self.half[axis]
            nl = np.zeros((n, 3))
            nl[:, axis] = sign
            pts.append(q)
            nrm.append(nl)
        R = _yaw_matrix(self.yaw)
        q = np.vstack(pts)
        return q @ R.T + self.center, np.vstack(nrm) @ R.T

    def intersect(self, origins, dirs):
        R = _yaw_matrix(self.yaw)
        o = (origins - self.center) @ R
        d = dirs @ R
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (-self.half - o) * inv
            t2 = (self.half - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        tn = tmin.max(axis=1)
        tf = tmax.min(axis=1)
        hit = (tf >= tn) & (tf > 0)
        t = np.where(tn > 0, tn, tf)
        t = np.where(hit, t, np.inf)
        axis = np.argmax(tmin, axis=1)
        normal_local = np.zeros_like(o)
        rows = np.arange(len(o))
        normal_local[rows, axis] = -np.sign(d[rows, axis])
        return t, normal_local @ R.T


@dataclass
class Cylinder:
    """Vertical cylinder from ``z0`` to ``z1``."""

    xy: np.ndarray
    radius: float
    z0: float
    z1: float
    label: int

    def contains(self, p, tol=1e-6):
        r = np.linalg.norm(p[:, :2] - self.xy, axis=1)
        return (r < self.radius - tol) & (p[:, 2] > self.z0 + tol) & (p[:, 2] < self.z1 - tol)

    def sample(self, density, rng):
        h = self.z1 - self.z0
        n_side = rng.poisson(2 * np.pi * self.radius * h * density)
        ang = rng.uniform(0, 2 * np.pi, n_side)
        z = rng.uniform(self.z0, self.z1, n_side)
        side = np.column_stack([self.xy[0] + self.radius * np.cos(ang), self.xy[1] + self.radius * np.sin(ang), z])
        ns = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(n_side)])
        n_top = rng.poisson(np.pi * self.radius**2 * density)
        rr = self.radius * np.sqrt(rng.uniform(0, 1, n_top))
        at = rng.uniform(0, 2 * np.pi, n_top)
        top = np.column_stack([self.xy[0] + rr * np.cos(at), self.xy[1] + rr * np.sin(at), np.full(n_top, self.z1)])
        nt = np.tile([0.0, 0.0, 1.0], (n_top, 1))
        return np.vstack([side, top]), np.vstack([ns, nt])

    def intersect(self, origins, dirs):
        o = origins[:, :2] - self.xy
        d = dirs[:, :2]
        a = (d**2).sum(1)
        b = 2 * (o * d).sum(1)
        c = (o**2).sum(1) - self.radius**2
        disc = b * b - 4 * a * c
        t_side = np.full(len(origins), np.inf)
        ok = (disc >= 0) & (a > 1e-15)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
                z = origins[:, 2] + t * dirs[:, 2]
                good = ok & (t > 0) & (z >= self.z0) & (z <= self.z1) & (t < t_side)
                t_side = np.where(good, t, t_side)
            t_cap = (self.z1 - origins[:, 2]) / dirs[:, 2]
        pc = origins[:, :2] + np.where(np.isfinite(t_cap), t_cap, 0.0)[:, None] * d
        cap_ok = np.isfinite(t_cap) & (t_cap > 0) & (np.linalg.norm(pc - self.xy, axis=1) <= self.radius)
        t_cap = np.where(cap_ok, t_cap, np.inf)
        t = np.minimum(t_side, t_cap)
        p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        radial = np.column_stack([p[:, :2] - self.xy, np.zeros(len(p))])
        radial /= np.maximum(np.linalg.norm(radial, axis=1, keepdims=True), 1e-12)
        normal = np.where((t_cap <= t_side)[:, None], [0.0, 0.0, 1.0], radial)
        return t, normal


@dataclass
class Ellipsoid:
    center: np.ndarray
    radii: np.ndarray
    label: int = NATURAL

    def contains(self, p, tol=1e-6):
        q = (p - self.center) / self.radii
        return (q**2).sum(1) < 1 - tol

    def sample(self, density, rng):
        a, b, c = self.radii
        p = 1.6075
        area = 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
        n = rng.poisson(area * density)
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        nrm = u / self.radii
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return self.center + u * self.radii, nrm

    def intersect(self, origins, dirs):
        o = (origins - self.center) / self.radii
        d = dirs / self.radii
        a = (d**2).sum(1)
        b = 2 * (o * d).sum(1)
        c = (o**2).sum(1) - 1
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t0 = (-b - sq) / (2 * a)
        t1 = (-b + sq) / (2 * a)
        t = np.where(t0 > 0, t0, t1)
        t = np.where(ok & (t > 0), t, np.inf)
        p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        n = (p - self.center) / self.radii**2
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
        return t, n


# ----------------------------------------------------------------------------
# Scene specification
# ----------------------------------------------------------------------------


@dataclass
class BridgeSpec:
    deck: list  # polyline [(x, y), ...]
    width: float = 10.0
    elevation: float = 8.0
    thickness: float = 1.2
    pier_spacing: float = 15.0  # 0 disables piers
    pier_radius: float = 0.8
    rail_height: float = 1.0
    rail_thickness: float = 0.2


@dataclass
class RoadSpec:
    line: list
    width: float = 8.0


@dataclass
class SceneSpec:
    extent: tuple = (40.0, 40.0)
    terrain_amplitude: float = 1.5
    terrain_wavelength: float = 15.0
    bridges: list = field(default_factory=list)
    roads: list = field(default_factory=list)
    cars: int = 6
    car_length: tuple = (3.8, 5.0)
    car_width: tuple = (1.7, 2.0)
    car_height: tuple = (1.4, 1.8)
    poles: int = 4
    pole_height: tuple = (6.0, 9.0)
    pole_radius: tuple = (0.1, 0.15)
    trees: int = 6
    tree_radius: tuple = (1.5, 3.0)
    density: float = 750.0
    noise_sigma: float = 0.02
    curb_height: float = 0.2

    def __post_init__(self):
        self.extent = tuple(float(v) for v in self.extent)
        self.bridges = [b if isinstance(b, BridgeSpec) else BridgeSpec(**b) for b in self.bridges]
        self.roads = [r if isinstance(r, RoadSpec) else RoadSpec(**r) for r in self.roads]
        self.validate()

    def validate(self):
        if len(self.extent) != 2 or min(self.extent) <= 0:
            raise ValueError(f"scene extent must be two positive spans, got {self.extent}")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.noise_sigma < 0 or self.terrain_amplitude < 0 or self.terrain_wavelength <= 0 or self.curb_height < 0:
            raise ValueError("noise, terrain amplitude, curb height must be >= 0 and wavelength > 0")
        for b in self.bridges:
            if len(b.deck) < 2 or min(b.width, b.elevation, b.thickness) <= 0 or b.rail_height < 0:
                raise ValueError(f"invalid bridge {b}")
        for r in self.roads:
            if len(r.line) < 2 or r.width <= 0:
                raise ValueError(f"invalid road {r}")
        for name in ("cars", "poles", "trees"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(**d)


@dataclass
class Scene:
    cloud: LabeledCloud
    terrain: Optional[Terrain]
    solids: list
    spec: SceneSpec

    def raycast(self, origins, dirs, t_max=np.inf):
        """Nearest hit per ray: (t, label, normal); t = inf for misses."""
        n = len(origins)
        best = np.full(n, np.inf)
        label = np.full(n, 255, dtype=np.uint8)
        normal = np.zeros((n, 3))
        if self.terrain is not None:
            t = self.terrain.intersect(origins, dirs, t_max)
            ok = t < best
            best[ok] = t[ok]
            p = origins[ok] + t[ok, None] * dirs[ok]
            label[ok] = self.terrain.labels(p[:, :2])
            normal[ok] = self.terrain.normal(p[:, :2])
        for s in self.solids:
            t, nrm = s.intersect(origins, dirs)
            ok = (t < best) & (t <= t_max)
            best[ok] = t[ok]
            label[ok] = s.label
            normal[ok] = nrm[ok]
        best[best > t_max] = np.inf
        return best, label, normal


def _deck_boxes(b: BridgeSpec):
    pts = np.asarray(b.deck, dtype=np.float64)
    boxes, rails = [], []
    for a, c in zip(pts[:-1], pts[1:]):
        seg = c - a
        length = np.linalg.norm(seg)
        if length == 0:
            continue
        yaw = np.arctan2(seg[1], seg[0])
        mid = (a + c) / 2
        # segments overlap by half a width at joints so bends stay closed
        half_len = length / 2 + b.width / 2
        boxes.append(Box(np.array([mid[0], mid[1], b.elevation - b.thickness / 2]),
                         np.array([half_len, b.width / 2, b.thickness / 2]), yaw, BRIDGE))
        if b.rail_height > 0:
            perp = np.array([-np.sin(yaw), np.cos(yaw)])
            for side in (-1, 1):
                off = mid + side * perp * (b.width / 2 - b.rail_thickness / 2)
                rails.append(Box(np.array([off[0], off[1], b.elevation + b.rail_height / 2]),
                                 np.array([length / 2, b.rail_thickness / 2, b.rail_height / 2]), yaw,
                                 GUARDRAIL, bottom=False))
    return boxes, rails


def _polyline_points(line, spacing, skip_ends=0.0):
    pts = np.asarray(line, dtype=np.float64)
    out = []
    for a, c in zip(pts[:-1], pts[1:]):
        length = np.linalg.norm(c - a)
        if length == 0 or spacing <= 0:
            continue
        for s in np.arange(spacing / 2, length, spacing):
            out.append(a + (c - a) * s / length)
    return np.array(out).reshape(-1, 2)


def _random_on_polylines(lines, rng):
    """Uniform point along a random line; returns (xy, yaw, width, elevation)."""
    lengths = np.array([sum(np.linalg.norm(np.diff(np.asarray(l[0]), axis=0), axis=1)) for l in lines])
    i = int(rng.choice(len(lines), p=lengths / lengths.sum()))
    pts = np.asarray(lines[i][0], dtype=np.float64)
    segs = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    j = int(rng.choice(len(segs), p=segs / segs.sum()))
    u = rng.uniform()
    xy = pts[j] + u * (pts[j + 1] - pts[j])
    d = pts[j + 1] - pts[j]
    return xy, np.arctan2(d[1], d[0]), lines[i][1], lines[i][2]


def build_scene(spec: SceneSpec, seed: int = 0) -> Scene:
    """Sample every primitive of ``spec`` at the target density."""
    spec.validate()
    rng = np.random.default_rng(seed)
    ex, ey = spec.extent
    phases = np.column_stack([rng.normal(size=(6, 2)), rng.uniform(0, 2 * np.pi, 6)])
    phases[:, :2] /= np.linalg.norm(phases[:, :2], axis=1, keepdims=True)
    phases[:, :2] *= rng.uniform(0.5, 1.5, size=(6, 1))
    roads = [(np.asarray(r.line, dtype=np.float64), r.width) for r in spec.roads]
    terrain = Terrain((ex, ey), spec.terrain_amplitude, spec.terrain_wavelength, phases, roads, curb=spec.curb_height)

    solids = []
    deck_lines = []
    for b in spec.bridges:
        boxes, rails = _deck_boxes(b)
        solids += boxes + rails
        deck_lines.append((b.deck, b.width, b.elevation))
        for xy in _polyline_points(b.deck, b.pier_spacing):
            ground = float(terrain.height(xy[None])[0])
            solids.append(Cylinder(xy, b.pier_radius, ground - 2.0, b.elevation - b.thickness, BRIDGE))

    lanes = [(r.line, r.width, 0.0) for r in spec.roads] + deck_lines
    if spec.cars and not lanes:
        raise ValueError("cars need a road or a bridge deck to stand on")
    for _ in range(spec.cars):
        xy, yaw, width, elev = _random_on_polylines(lanes, rng)
        length = rng.uniform(*spec.car_length)
        cw = rng.uniform(*spec.car_width)
        ch = rng.uniform(*spec.car_height)
        lateral = rng.uniform(-1, 1) * max(width / 2 - cw, 0.0) * 0.8
        xy = xy + lateral * np.array([-np.sin(yaw), np.cos(yaw)])
        z = elev if elev > 0 else float(terrain.height(xy[None])[0])
        solids.append(Box(np.array([xy[0], xy[1], z + ch / 2]), np.array([length / 2, cw / 2, ch / 2]), yaw,
                          CAR, bottom=False))

    for _ in range(spec.poles):
        h = rng.uniform(*spec.pole_height)
        r = rng.uniform(*spec.pole_radius)
        if lanes:
            xy, yaw, width, elev = _random_on_polylines(lanes, rng)
            side = rng.choice([-1.0, 1.0])
            margin = 0.6 if elev > 0 else 1.0
            xy = xy + side * (width / 2 + (-margin if elev > 0 else margin)) * np.array([-np.sin(yaw), np.cos(yaw)])
        else:
            xy = rng.uniform([0, 0], [ex, ey])
            elev = 0.0
        z0 = elev if elev > 0 else float(terrain.height(xy[None])[0]) - 0.5
        solids.append(Cylinder(np.asarray(xy), r, z0, z0 + h, POLE))

    for _ in range(spec.trees):
        for _attempt in range(20):
            xy = rng.uniform([0, 0], [ex, ey])
            if not terrain.road_mask(xy[None])[0]:
                break
        rad = rng.uniform(*spec.tree_radius)
        radii = np.array([rad, rad * rng.uniform(0.8, 1.2), rad * rng.uniform(0.9, 1.6)])
        z = float(terrain.height(xy[None])[0]) + radii[2] * 0.8
        solids.append(Ellipsoid(np.array([xy[0], xy[1], z]), radii, NATURAL))

    parts = []
    with_terrain = True
    if spec.terrain_amplitude == 0 and not spec.roads and not spec.trees and spec.bridges == [] \
            and spec.cars == 0 and spec.poles == 0:
        with_terrain = False
    sources = []
    if with_terrain:
        pts, nrm, lab = terrain.sample(spec.density, rng)
        sources.append((pts, nrm, lab, None))
    for s in solids:
        pts, nrm = s.sample(spec.density, rng)
        sources.append((pts, nrm, np.full(len(pts), s.label, np.uint8), s))
    for pts, nrm, lab, owner in sources:
        keep = np.ones(len(pts), dtype=bool)
        if owner is not None and len(pts):
            keep &= pts[:, 2] >= terrain.height(pts[:, :2]) - 1e-6
        for other in solids:
            if other is owner or not keep.any():
                continue
            keep[keep] &= ~other.contains(pts[keep])
        # the scene is a crop of the world: drop samples outside the footprint
        keep &= (pts[:, 0] >= 0) & (pts[:, 0] <= ex) & (pts[:, 1] >= 0) & (pts[:, 1] <= ey)
        pts, nrm, lab = pts[keep], nrm[keep], lab[keep]
        if spec.noise_sigma > 0:
            noise = rng.normal(0.0, spec.noise_sigma, size=pts.shape)
            # truncated at 3 sigma so every point stays within a known distance of its surface
            norm = np.linalg.norm(noise, axis=1, keepdims=True)
            cap = 3.0 * spec.noise_sigma
            noise *= np.minimum(1.0, cap / np.maximum(norm, 1e-300))
            pts = pts + noise
        parts.append(LabeledCloud(pts, _lambertian(nrm, np.array([0.0, 0.0, 1.0])), lab))
    cloud = concatenate(parts) if parts else LabeledCloud(np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.uint8))
    return Scene(cloud, terrain if with_terrain else None, solids, spec)


def generate_scene(spec: SceneSpec, seed: int = 0) -> LabeledCloud:
    return build_scene(spec, seed).cloud


def _lambertian(normals, toward):
    toward = np.asarray(toward, dtype=np.float64)
    if toward.ndim == 1:
        toward = np.broadcast_to(toward, normals.shape)
    return np.clip(np.abs((normals * toward).sum(axis=1)), 0.0, 1.0)


def interchange_spec(seed: int, extent=(40.0, 40.0), density: float = 750.0, layers: int = 2) -> SceneSpec:
    """Random multi-level interchange: ground roads, stacked decks crossing above them."""
    rng = np.random.default_rng(seed)
    ex, ey = extent
    center = np.array([ex, ey]) / 2

    def crossing(angle, offset, bend=0.0):
        d = np.array([np.cos(angle), np.sin(angle)])
        n = np.array([-d[1], d[0]])
        half = 0.75 * max(ex, ey)
        mid = center + offset * n
        return [list(mid - half * d), list(mid + bend * n), list(mid + half * d)]

    base = rng.uniform(0, np.pi)
    roads = [RoadSpec(crossing(base, rng.uniform(-0.15, 0.15) * ex), rng.uniform(7.0, 10.0))]
    if rng.uniform() < 0.5:
        roads.append(RoadSpec(crossing(base + rng.uniform(0.9, 2.2), rng.uniform(-0.2, 0.2) * ex),
                              rng.uniform(6.0, 9.0)))
    bridges = []
    for k in range(layers):
        angle = base + np.pi / 2 + rng.uniform(-0.5, 0.5) + k * rng.uniform(0.6, 1.2)
        bridges.append(BridgeSpec(
            crossing(angle, rng.uniform(-0.2, 0.2) * ex, rng.uniform(-3.0, 3.0)),
            width=rng.uniform(8.0, 11.0),
            elevation=6.0 + 5.0 * k + rng.uniform(-0.5, 0.5),
            thickness=rng.uniform(1.0, 1.4),
            pier_spacing=rng.uniform(12.0, 18.0),
            pier_radius=rng.uniform(0.6, 0.9),
            rail_height=rng.uniform(0.9, 1.2),
        ))
    area = ex * ey / 1600.0
    return SceneSpec(
        extent=(ex, ey),
        terrain_amplitude=rng.uniform(1.0, 2.0),
        terrain_wavelength=rng.uniform(12.0, 20.0),
        bridges=bridges,
        roads=roads,
        cars=max(2, int(round(rng.uniform(6, 10) * area))),
        poles=max(3, int(round(rng.uniform(10, 16) * area))),
        trees=max(2, int(round(rng.uniform(5, 9) * area))),
        density=density,
    )


# ----------------------------------------------------------------------------
# Rosette scanning
# ----------------------------------------------------------------------------

# picked by sweeping the frequency pair against the 20 % @ 0.1 s / 93 % @ 1 s coverage figures
_GOLDEN = (1.0 + 5.0**0.5) / 2.0
DEFAULT_F_PETAL = 40.0
DEFAULT_F_SPIN = DEFAULT_F_PETAL / _GOLDEN**2


@dataclass
class RosetteConfig:
    fov: float = 38.4  # degrees, full angle
    rate: float = 100_000.0  # points per second
    f_spin: float = DEFAULT_F_SPIN  # Hz
    f_petal: float = DEFAULT_F_PETAL  # Hz
    range_max: float = 260.0
    range_noise_sigma: float = 0.02

    def __post_init__(self):
        if not 0 < self.fov < 180:
            raise ValueError("fov must be in (0, 180) degrees")
        if self.rate <= 0 or self.range_max <= 0 or self.range_noise_sigma < 0:
            raise ValueError("rate and range_max must be positive, noise non-negative")
        if self.f_spin <= 0 or self.f_petal <= 0:
            raise ValueError("frequencies must be positive")


def rosette_angles(cfg: RosetteConfig, t0: float, t1: float):
    """(t, offset from boresight [rad], azimuth [rad]) for every sample in [t0, t1)."""
    if not t1 > t0:
        raise ValueError("t1 must be greater than t0")
    n = int(round(cfg.rate * (t1 - t0)))
    i0 = int(round(cfg.rate * t0))
    t = (i0 + np.arange(n)) / cfg.rate
    half = np.deg2rad(cfg.fov) / 2
    theta = half * np.abs(np.sin(2 * np.pi * cfg.f_petal * t))
    phi = 2 * np.pi * cfg.f_spin * t
    return t, theta, phi


def rosette_directions(cfg: RosetteConfig, t0: float, t1: float):
    """Unit directions in the sensor frame (boresight = +z) and their timestamps."""
    t, theta, phi = rosette_angles(cfg, t0, t1)
    st = np.sin(theta)
    dirs = np.column_stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)])
    return dirs, t


def fov_coverage(cfg: RosetteConfig, t: float, grid_res: int = 64) -> float:
    """Fraction of FOV-disk raster cells hit by at least one direction in [0, t)."""
    if grid_res < 32:
        raise ValueError("grid_res must be >= 32")
    centers = (np.arange(grid_res) + 0.5) / grid_res * 2 - 1
    cx, cy = np.meshgrid(centers, centers, indexing="ij")
    disk = cx**2 + cy**2 <= 1.0
    if t <= 0:
        return 0.0
    _, theta, phi = rosette_angles(cfg, 0.0, t)
    half = np.deg2rad(cfg.fov) / 2
    # angular-offset plane, normalized so the FOV edge is the unit circle
    u = theta / half * np.cos(phi)
    v = theta / half * np.sin(phi)
    ix = np.clip(np.floor((u + 1) / 2 * grid_res).astype(np.int64), 0, grid_res - 1)
    iy = np.clip(np.floor((v + 1) / 2 * grid_res).astype(np.int64), 0, grid_res - 1)
    hit = np.zeros((grid_res, grid_res), dtype=bool)
    hit[ix, iy] = True
    return float((hit & disk).sum() / disk.sum())


@dataclass
class SensorPose:
    position: np.ndarray
    boresight: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def frame(self):
        z = np.asarray(self.boresight, dtype=np.float64)
        z = z / np.linalg.norm(z)
        up = np.asarray(self.up, dtype=np.float64)
        if abs(up @ z) > 0.999:
            up = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        x = np.cross(up, z)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return np.column_stack([x, y, z])


def rosette_scan(scene: Scene, pose: SensorPose, cfg: RosetteConfig, duration: float, seed: int = 0,
                 t0: float = 0.0) -> LabeledCloud:
    """Cast the rosette rays of [t0, t0 + duration) from ``pose``; points in timestamp order."""
    dirs_local, _ = rosette_directions(cfg, t0, t0 + duration)
    dirs = dirs_local @ pose.frame().T
    origin = np.asarray(pose.position, dtype=np.float64)
    origins = np.broadcast_to(origin, dirs.shape)
    t, label, normal = scene.raycast(origins, dirs, cfg.range_max)
    hit = np.isfinite(t)
    rng = np.random.default_rng(seed)
    rng_noise = rng.normal(0.0, cfg.range_noise_sigma, size=len(t)) if cfg.range_noise_sigma > 0 else np.zeros(len(t))
    r = t[hit] + rng_noise[hit]
    pts = origin + r[:, None] * dirs[hit]
    intensity = _lambertian(normal[hit], -dirs[hit])
    return LabeledCloud(pts, intensity, label[hit])


def flight_poses(scene: Scene, n: int, altitude: float = 18.0, look_down: float = 50.0, seed: int = 0):
    """Poses along a straight pass over the scene, looking down at ``look_down`` degrees below horizontal."""
    rng = np.random.default_rng(seed)
    ex, ey = scene.spec.extent
    heading = rng.uniform(0, 2 * np.pi)
    d = np.array([np.cos(heading), np.sin(heading)])
    side = np.array([-d[1], d[0]])
    poses = []
    for s in np.linspace(-0.4, 0.4, n):
        xy = np.array([ex, ey]) / 2 + s * max(ex, ey) * d - 0.3 * max(ex, ey) * side
        pos = np.array([xy[0], xy[1], altitude])
        elev = np.deg2rad(look_down)
        bore = np.concatenate([side * np.cos(elev), [-np.sin(elev)]])
        poses.append(SensorPose(pos, bore))
    return poses
