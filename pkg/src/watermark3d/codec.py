"""Payload matrices, plate geometry, heightfield rasterisation and STL export.

Plate coordinates are millimetres with the origin at the top-left corner of
the plate outline, x to the right and y downwards.  Row ``i`` of the payload
runs along y and column ``j`` along x.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDimensionError, UnderResolutionError
from .netpbm import write_pnm

BUMP_SHAPES = ("hemisphere", "cube")
# clockwise from top-left
CORNER_NAMES = ("top_left", "top_right", "bottom_right", "bottom_left")
DEFAULT_DOT_COUNTS = (1, 2, 3, 4)


@dataclass(frozen=True, eq=False)
class InformationMatrix:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise InvalidDimensionError(f"matrix must be square, got shape {bits.shape}")
        if bits.shape[0] < 2:
            raise InvalidDimensionError(f"matrix side must be >= 2, got {bits.shape[0]}")
        if not np.isin(bits, (0, 1)).all():
            raise InvalidDimensionError("matrix entries must be 0 or 1")
        bits = bits.astype(np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def m(self):
        return self.bits.shape[0]

    def popcount(self):
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, InformationMatrix):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    def to_text(self):
        return "".join("".join(str(int(b)) for b in row) + "\n" for row in self.bits)

    @classmethod
    def from_text(cls, text):
        rows = [r.strip() for r in text.splitlines() if r.strip()]
        if any(set(r) - {"0", "1"} for r in rows):
            raise InvalidDimensionError("matrix text may only contain '0' and '1'")
        if len({len(r) for r in rows}) > 1:
            raise InvalidDimensionError("matrix rows have unequal length")
        return cls(np.array([[int(c) for c in r] for r in rows], dtype=np.uint8))


def generate_matrix(m, seed):
    """Random m x m payload with i.i.d. fair bits, reproducible from ``seed``."""
    if int(m) != m or m < 2:
        raise InvalidDimensionError(f"m must be an integer >= 2, got {m}")
    rng = np.random.default_rng(seed)
    return InformationMatrix(rng.integers(0, 2, size=(int(m), int(m)), dtype=np.uint8))


@dataclass(frozen=True)
class PlateSpec:
    grid_pitch: float = 4.0
    bump_radius: float = 1.2
    bump_height: float = 1.0
    bump_shape: str = "hemisphere"
    # grid bounding square -> landmark centres, per axis
    margin: float = 3.5
    landmark_radius: float = 0.55
    plate_thickness: float = 2.0
    landmark_spacing: float = 2.0
    # landmark centres -> plate edge
    border: float = 2.5
    landmark_height_fraction: float = 0.2

    def __post_init__(self):
        for name in ("grid_pitch", "bump_radius", "bump_height", "margin",
                     "landmark_radius", "plate_thickness", "landmark_spacing", "border"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.bump_shape not in BUMP_SHAPES:
            raise ValueError(f"bump_shape must be one of {BUMP_SHAPES}")
        if not self.bump_radius < self.grid_pitch / 2:
            raise ValueError("bump_radius must be below grid_pitch / 2")
        if not 0 <= self.landmark_height_fraction <= 1:
            raise ValueError("landmark_height_fraction must lie in [0, 1]")
        if self.landmark_spacing < 2 * self.landmark_radius:
            raise ValueError("landmark dots of one corner would overlap")

    def plate_size(self, m):
        return m * self.grid_pitch + 2 * (self.margin + self.border)

    def grid_origin(self):
        """Plate coordinate of the grid bounding square's top-left corner."""
        return self.margin + self.border

    def node_positions(self, m):
        """(m, m, 2) array of bump centres as (x, y) plate coordinates."""
        c = self.grid_origin() + (np.arange(m) + 0.5) * self.grid_pitch
        xs, ys = np.meshgrid(c, c)
        return np.stack([xs, ys], axis=-1)


def _dot_offsets(count, spacing):
    s = spacing
    if count == 1:
        pts = [(0.0, 0.0)]
    elif count == 2:
        pts = [(-s / 2, 0.0), (s / 2, 0.0)]
    elif count == 3:
        r = s / math.sqrt(3)
        pts = [(r * math.cos(a), r * math.sin(a))
               for a in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
    elif count == 4:
        pts = [(-s / 2, -s / 2), (s / 2, -s / 2), (s / 2, s / 2), (-s / 2, s / 2)]
    else:
        raise ValueError(f"dot count must be 1..4, got {count}")
    return np.array(pts)


@dataclass(frozen=True)
class LandmarkLayout:
    """Corner fiducials: centre positions (plate mm) and their dot counts."""

    corners: tuple
    dot_counts: tuple = DEFAULT_DOT_COUNTS
    spacing: float = 2.0

    def __post_init__(self):
        if sorted(self.dot_counts) != [1, 2, 3, 4]:
            raise ValueError("dot counts must be a permutation of 1..4")
        if len(self.corners) != 4:
            raise ValueError("need exactly four corners")

    @classmethod
    def for_plate(cls, m, spec, dot_counts=DEFAULT_DOT_COUNTS):
        lo = spec.border
        hi = spec.plate_size(m) - spec.border
        corners = ((lo, lo), (hi, lo), (hi, hi), (lo, hi))
        return cls(corners=corners, dot_counts=tuple(dot_counts), spacing=spec.landmark_spacing)

    def corner_for_count(self, count):
        return np.array(self.corners[self.dot_counts.index(count)], dtype=float)

    def dots(self):
        """List of (corner_index, (N, 2) dot centres)."""
        return [(k, np.asarray(c) + _dot_offsets(n, self.spacing))
                for k, (c, n) in enumerate(zip(self.corners, self.dot_counts))]


@dataclass(eq=False)
class HeightField:
    elevation: np.ndarray
    landmark_mask: np.ndarray
    bump_mask: np.ndarray
    resolution: float  # pixels per mm
    meta: dict = field(default_factory=dict)

    @property
    def height(self):
        return self.elevation.shape[0]

    @property
    def width(self):
        return self.elevation.shape[1]


def _bump_profile(dx, dy, spec):
    if spec.bump_shape == "hemisphere":
        r2 = (dx * dx + dy * dy) / spec.bump_radius ** 2
        return spec.bump_height * np.sqrt(np.clip(1.0 - r2, 0.0, None))
    inside = (np.abs(dx) <= spec.bump_radius) & (np.abs(dy) <= spec.bump_radius)
    return np.where(inside, spec.bump_height, 0.0)


def rasterize_plate(M, spec, layout, resolution):
    """Sample the plate surface on a regular grid of ``resolution`` px/mm.

    Sample (u, v) sits at the plate point (u / r, v / r), so the samples span
    the whole plate including both edges.
    """
    if spec.bump_radius * resolution < 2:
        raise UnderResolutionError(
            f"bump radius {spec.bump_radius} mm spans only {spec.bump_radius * resolution:.2f}"
            " px; need >= 2"
        )
    m = M.m
    size = spec.plate_size(m)
    n = int(math.floor(size * resolution + 1e-9)) + 1
    coords = np.arange(n) / resolution
    X, Y = np.meshgrid(coords, coords)
    elev = np.zeros((n, n))
    bump_mask = np.zeros((n, n), dtype=bool)

    nodes = spec.node_positions(m)
    half = int(math.ceil(spec.bump_radius * resolution)) + 1
    for i, j in zip(*np.nonzero(M.bits)):
        cx, cy = nodes[i, j]
        u0, v0 = int(round(cx * resolution)), int(round(cy * resolution))
        sl = (slice(max(v0 - half, 0), v0 + half + 1), slice(max(u0 - half, 0), u0 + half + 1))
        prof = _bump_profile(X[sl] - cx, Y[sl] - cy, spec)
        elev[sl] = np.maximum(elev[sl], prof)
        bump_mask[sl] |= prof > 0

    lm_mask = np.zeros((n, n), dtype=bool)
    for _, dots in layout.dots():
        for dx, dy in dots:
            lm_mask |= (X - dx) ** 2 + (Y - dy) ** 2 <= spec.landmark_radius ** 2
    elev[lm_mask] = spec.landmark_height_fraction * spec.bump_height
    return HeightField(elevation=elev, landmark_mask=lm_mask, bump_mask=bump_mask,
                       resolution=float(resolution),
                       meta={"m": m, "plate_size_mm": size})


def mesh_triangles(hf, spec, step=1):
    """Closed triangle soup (T, 3, 3) for the heightfield solid, outward CCW."""
    elev = hf.elevation[::step, ::step]
    h, w = elev.shape
    if h < 2 or w < 2:
        raise ValueError("heightfield must have at least 2x2 samples")
    px = step / hf.resolution
    xs = np.arange(w) * px
    ys = np.arange(h) * px
    X, Y = np.meshgrid(xs, ys)
    # plate y grows downwards; flip so the solid is right-handed with +z up
    top = np.stack([X, -Y, spec.plate_thickness + elev], axis=-1)
    bot = np.stack([X, -Y, np.zeros_like(elev)], axis=-1)

    def grid_tris(P, upward):
        a, b = P[:-1, :-1], P[:-1, 1:]
        c, d = P[1:, :-1], P[1:, 1:]
        if upward:
            t1, t2 = (a, c, b), (b, c, d)
        else:
            t1, t2 = (a, b, c), (b, d, c)
        return np.concatenate([np.stack(t1, axis=-2).reshape(-1, 3, 3),
                               np.stack(t2, axis=-2).reshape(-1, 3, 3)])

    tris = [grid_tris(top, True), grid_tris(bot, False)]
    # boundary loop, clockwise in (x, y-down) == counterclockwise seen from +z
    loop = np.concatenate([
        np.stack([np.zeros(w - 1, int), np.arange(w - 1)], 1),
        np.stack([np.arange(h - 1), np.full(h - 1, w - 1)], 1),
        np.stack([np.full(w - 1, h - 1), np.arange(w - 1, 0, -1)], 1),
        np.stack([np.arange(h - 1, 0, -1), np.zeros(h - 1, int)], 1),
    ])
    nxt = np.roll(loop, -1, axis=0)
    ta, tb = top[loop[:, 0], loop[:, 1]], top[nxt[:, 0], nxt[:, 1]]
    ba, bb = bot[loop[:, 0], loop[:, 1]], bot[nxt[:, 0], nxt[:, 1]]
    tris.append(np.stack([ta, bb, ba], axis=1))
    tris.append(np.stack([ta, tb, bb], axis=1))
    return np.concatenate(tris)


def export_stl(hf, spec, step=1, name="watermark_plate"):
    """ASCII STL of the watertight plate solid. Returns bytes."""
    tris = mesh_triangles(hf, spec, step)
    n = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    lines = [f"solid {name}"]
    for normal, tri in zip(n, tris):
        lines.append("  facet normal %.6e %.6e %.6e" % tuple(normal))
        lines.append("    outer loop")
        for v in tri:
            lines.append("      vertex %.6e %.6e %.6e" % tuple(v))
        lines.append("    endloop")
        lines.append("  endfacet")
    lines.append(f"endsolid {name}")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_heightfield(path, hf, spec):
    """16-bit PGM of elevations plus a ``.json`` sidecar describing the scaling."""
    path = str(path)
    maxval = 65535
    samples = np.round(hf.elevation / spec.bump_height * maxval).astype(np.uint16)
    write_pnm(path, samples, maxval)
    sidecar = {
        "maxval": maxval,
        "mm_per_unit": spec.bump_height / maxval,
        "resolution_px_per_mm": hf.resolution,
        "width": hf.width,
        "height": hf.height,
        "landmark_pixels": int(hf.landmark_mask.sum()),
    }
    with open(path.rsplit(".", 1)[0] + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return sidecar


def cell_center(i, j, m, registered_size):
    """Centre (x, y) of cell (i, j) in a registered square of side ``registered_size``."""
    if not (0 <= i < m and 0 <= j < m):
        raise IndexError(f"cell ({i}, {j}) outside {m}x{m} grid")
    cell = registered_size / m
    return ((j + 0.5) * cell, (i + 0.5) * cell)


def nearest_cell(x, y, m, registered_size):
    cell = registered_size / m
    j = int(np.clip(np.floor(x / cell), 0, m - 1))
    i = int(np.clip(np.floor(y / cell), 0, m - 1))
    return i, j
