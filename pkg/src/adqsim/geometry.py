"""Capsule-chain geometry: writhe, free-end length and procedural knots."""
from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, InvalidGeometryError

KNOT_KINDS = ("loose_overhand", "tight_overhand", "loose_double", "tight_double")

# fraction of the total chain length spent in the knotted core
_CORE_FRACTION = {
    "loose_overhand": 0.62,
    "tight_overhand": 0.46,
    "loose_double": 0.74,
    "tight_double": 0.6,
}
# target strand clearance at the crossings, in capsule radii
_CLEARANCE = {"loose": 2.1, "tight": 1.9}
_MIN_VERTICES = {"overhand": 24, "double": 40}
_DENSE = 3000


@dataclass(frozen=True, eq=False)
class CapsuleChain:
    """Open chain of overlapping capsules held by a pin grasp and a pull grasp."""

    vertices: np.ndarray
    radius: float
    rest_length: np.ndarray
    pin_index: int
    pull_index: int

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise InvalidGeometryError(f"vertices must be (n, 3), got {verts.shape}")
        n = verts.shape[0]
        if n < 8:
            raise InvalidGeometryError(f"a chain needs at least 8 vertices, got {n}")
        if not np.all(np.isfinite(verts)):
            raise InvalidGeometryError("non-finite vertex coordinates")
        rest = np.asarray(self.rest_length, dtype=np.float64)
        if rest.ndim == 0:
            rest = np.full(n - 1, float(rest))
        if rest.shape != (n - 1,):
            raise InvalidGeometryError(f"rest_length must have {n - 1} entries, got {rest.shape}")
        if not np.all(rest > 0):
            raise InvalidGeometryError("every rest_length must be positive")
        if not self.radius > 0:
            raise InvalidGeometryError("radius must be positive")
        pin, pull = int(self.pin_index), int(self.pull_index)
        if not (0 <= pin < n and 0 <= pull < n):
            raise InvalidGeometryError(f"grasp indices ({pin}, {pull}) out of range for {n} vertices")
        if pin == pull:
            raise InvalidGeometryError("pin_index and pull_index must differ")
        verts.flags.writeable = False
        rest.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "rest_length", rest)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "pin_index", pin)
        object.__setattr__(self, "pull_index", pull)

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def total_length(self):
        return float(self.rest_length.sum())

    def with_vertices(self, vertices):
        return CapsuleChain(vertices, self.radius, self.rest_length, self.pin_index, self.pull_index)

    def with_grasps(self, pin_index, pull_index):
        return CapsuleChain(self.vertices, self.radius, self.rest_length, pin_index, pull_index)

    def edge_lengths(self):
        return np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)

    def to_dict(self):
        return {
            "radius": self.radius,
            "rest_length": self.rest_length.tolist(),
            "pin_index": self.pin_index,
            "pull_index": self.pull_index,
            "vertices": self.vertices.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls(
                vertices=doc["vertices"],
                radius=doc["radius"],
                rest_length=doc["rest_length"],
                pin_index=doc["pin_index"],
                pull_index=doc["pull_index"],
            )
        except KeyError as exc:
            raise InvalidGeometryError(f"chain document is missing {exc.args[0]!r}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, CapsuleChain):
            return NotImplemented
        return (
            np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.rest_length, other.rest_length)
            and self.radius == other.radius
            and self.pin_index == other.pin_index
            and self.pull_index == other.pull_index
        )

    __hash__ = None


def _as_points(chain_or_points):
    if isinstance(chain_or_points, CapsuleChain):
        return chain_or_points.vertices
    pts = np.asarray(chain_or_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidGeometryError(f"expected (n, 3) points, got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidGeometryError("non-finite vertex coordinates")
    return pts


def writhe(chain):
    """Discrete writhe of an open polyline.

    Sums the exact signed solid angle of every non-adjacent edge pair, counted
    over ordered pairs and divided by 4*pi. Pairs whose four endpoints are
    coplanar contribute nothing.

    Parameters
    ----------
    chain : CapsuleChain or array_like, shape (n, 3)

    Returns
    -------
    float
    """
    pts = _as_points(chain)
    return float(kernels.writhe_sum(np.ascontiguousarray(pts)))


def mirror(chain, axis=2):
    """Reflect the chain through the plane normal to ``axis``."""
    verts = np.array(chain.vertices)
    verts[:, axis] = -verts[:, axis]
    return chain.with_vertices(verts)


def pull_side_tip(chain):
    """Index of the free tip on the pulling side (the tip whose half holds pull_index)."""
    n = chain.n_vertices
    return 0 if chain.pull_index < (n - 1) / 2.0 else n - 1


def free_end_length(chain, contact_pairs):
    """Arc length from the pull-side tip to the nearest vertex touched by a contact.

    ``contact_pairs`` holds edge-index pairs; edge i spans vertices i and i+1.
    An empty contact set means the entanglement has dissolved and gives 0.
    """
    pairs = np.asarray(contact_pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return 0.0
    touched = np.concatenate((pairs[:, 0], pairs[:, 0] + 1, pairs[:, 1], pairs[:, 1] + 1))
    rest = chain.rest_length
    if pull_side_tip(chain) == 0:
        k = int(touched.min())
        return float(rest[:k].sum())
    k = int(touched.max())
    return float(rest[k:].sum())


def _torus_core(q, a, b, gap, m=_DENSE):
    th = np.linspace(gap, 2.0 * np.pi - gap, m)
    rad = 1.0 + a * np.cos(q * th)
    return np.stack((rad * np.cos(2.0 * th), rad * np.sin(2.0 * th), -b * np.sin(q * th)), axis=1)


def _arc_length(p):
    return float(np.linalg.norm(np.diff(p, axis=0), axis=1).sum())


def _min_separation(p, exclude):
    """Smallest distance between curve points more than ``exclude`` apart in arc length."""
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    s = np.concatenate(([0.0], np.cumsum(seg)))
    step = max(1, p.shape[0] // 400)
    pts, arc = p[::step], s[::step]
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
    far = np.abs(arc[:, None] - arc[None, :]) > exclude
    return float(d[far].min())


@functools.lru_cache(maxsize=64)
def _core_height(q, a, gap, clearance_ratio, core_length_ratio):
    """z amplitude giving the requested crossing clearance (both as fractions of core length)."""
    def clearance(b):
        core = _torus_core(q, a, b, gap, m=800)
        length = _arc_length(core)
        return _min_separation(core, 0.15 * length) / length

    # clearance rises with height, then falls once the curve gets long
    grid = np.linspace(0.05, 1.2, 24)
    values = [clearance(b) for b in grid]
    peak = int(np.argmax(values))
    target = clearance_ratio * core_length_ratio
    if values[peak] <= target:
        return float(grid[peak])
    lo, hi = 0.01, float(grid[peak])
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if clearance(mid) < target:
            lo = mid
        else:
            hi = mid
    return hi


def _equal_chord_resample(dense, n_vertices):
    total = _arc_length(dense)
    lo, hi = total / (n_vertices - 1) * 0.5, total / (n_vertices - 1)
    end = dense[-1]
    pts = None
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        cand, placed = kernels.chord_march(dense, mid, n_vertices)
        if placed < n_vertices:
            hi = mid
            continue
        pts = cand
        if np.linalg.norm(cand[-1] - end) < 1e-12:
            break
        lo = mid
    if pts is None:  # pragma: no cover - only for pathological curves
        raise ConfigurationError("could not resample the knot curve")
    return pts


def _smooth_jitter(rng, m, amplitude):
    """Low-frequency random displacement field along a curve of ``m`` samples."""
    s = np.linspace(0.0, 1.0, m)
    out = np.zeros((m, 3))
    for k in range(1, 4):
        coeff = rng.normal(size=3) * amplitude / k
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        out += coeff * np.sin(2.0 * np.pi * k * s[:, None] + phase)
    return out


def make_knot(kind, n_vertices, scale, seed, radius=None):
    """Build an open procedural knot as an equal-edge capsule chain.

    Overhand knots come from an opened (2, 3) torus curve and double knots from
    an opened (2, 5) curve, each with straight tails. ``scale`` is the total
    chain length in metres; tight variants put less of it into the knotted core.
    The core height is chosen so strands at the crossings sit roughly one
    capsule diameter apart. The result always has non-negative writhe.

    Parameters
    ----------
    kind : {'loose_overhand', 'tight_overhand', 'loose_double', 'tight_double'}
    n_vertices : int
    scale : float
        Total chain length (m).
    seed : int
    radius : float, optional
        Capsule radius; defaults to 0.6 of the edge length.
    """
    if kind not in KNOT_KINDS:
        raise ConfigurationError(f"unknown knot kind {kind!r}; expected one of {KNOT_KINDS}")
    tightness, family = kind.split("_")
    n_vertices = int(n_vertices)
    if n_vertices < _MIN_VERTICES[family]:
        raise ConfigurationError(
            f"{kind} needs at least {_MIN_VERTICES[family]} vertices, got {n_vertices}"
        )
    if not scale > 0:
        raise ConfigurationError("scale must be positive")
    rng = np.random.default_rng(seed)
    edge = scale / (n_vertices - 1)
    if radius is None:
        radius = 0.6 * edge

    q = 3 if family == "overhand" else 5
    frac = _CORE_FRACTION[kind]
    core_len = frac * scale
    a = 0.5
    gap = 0.35 if family == "overhand" else 0.25
    b = _core_height(q, a, gap, round(_CLEARANCE[tightness] * radius / scale, 6), round(scale / core_len, 6))

    core = _torus_core(q, a * (1.0 + 0.05 * rng.uniform(-1, 1)), b * (1.0 + 0.05 * rng.uniform(-1, 1)), gap)
    core = core + _smooth_jitter(rng, core.shape[0], 0.02)
    core *= core_len / _arc_length(core)

    tail_len = 0.5 * (scale - core_len)
    m_tail = 200
    head_dir = core[0] - core[1]
    tail_dir = core[-1] - core[-2]
    head_dir[2] = 0.0
    tail_dir[2] = 0.0
    head_dir /= np.linalg.norm(head_dir)
    tail_dir /= np.linalg.norm(tail_dir)
    ramp = np.linspace(0.0, tail_len, m_tail + 1)[1:, None]
    head = core[0] + ramp * head_dir
    tail = core[-1] + ramp * tail_dir
    dense = np.concatenate((head[::-1], core, tail), axis=0)

    verts = _equal_chord_resample(dense, n_vertices)
    verts -= verts.mean(axis=0)
    rest = np.linalg.norm(np.diff(verts, axis=0), axis=1).mean()
    chain = CapsuleChain(verts, radius, np.full(n_vertices - 1, rest), 0, n_vertices - 1)
    if writhe(chain) < 0.0:
        chain = mirror(chain)
    return chain


def rotate_z(chain, angle):
    """Rigid rotation of the chain about the world z axis through the origin."""
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return chain.with_vertices(chain.vertices @ rot.T)
