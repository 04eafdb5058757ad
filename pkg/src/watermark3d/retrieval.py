"""From confidence map to payload: landmarks, registration, thresholding, decoding."""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.cluster.hierarchy import fcluster, linkage

from .codec import InformationMatrix, LandmarkLayout, PlateSpec
from .errors import (DegenerateHistogramError, LandmarkDetectionError, OrientationAmbiguityError,
                     PipelineStageError, ShapeMismatchError, SingularSystemError)
from .render import MAP_SCALE, image_to_map, project

log = logging.getLogger(__name__)

DEFAULT_SIDE = 480
DEFAULT_BETA = 0.35
EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


# -- landmarks ---------------------------------------------------------------

@dataclass
class LandmarkDetection:
    """Corner points (image pixels) ordered by dot count 1..4."""

    points: np.ndarray
    dot_counts: tuple = (1, 2, 3, 4)
    confidence: tuple = (1.0, 1.0, 1.0, 1.0)
    dots: list = field(default_factory=list)

    def point_for_count(self, count):
        return self.points[self.dot_counts.index(count)]


def landmark_mask(image, min_level=0.06, max_green_ratio=0.45, balance=0.45):
    """Pixels whose colour is close in hue to the magenta landmark ink."""
    r, g, b = image[..., 0], image[..., 1], image[..., 2]
    lo = np.minimum(r, b)
    hi = np.maximum(r, b)
    return ((lo > min_level)
            & (g < max_green_ratio * lo)
            & (lo > balance * hi))


def detect_landmarks(image, min_dot_area=None):
    """Find the four corner fiducials and read their dot counts.

    Dots are the 8-connected blobs of the landmark-colour mask; blobs much
    smaller than the typical dot are treated as noise.  Dots are grouped into
    four corners by single-linkage clustering and each corner point is the mean
    of its dots.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError("landmark detection needs an RGB image")
    mask = ndimage.binary_opening(landmark_mask(image))
    labels, n = ndimage.label(mask, structure=EIGHT_CONNECTED)
    if n == 0:
        raise LandmarkDetectionError("no landmark-coloured pixels found")
    idx = np.arange(1, n + 1)
    areas = ndimage.sum_labels(mask, labels, idx)
    if min_dot_area is None:
        # the ten largest blobs should be the dots
        top = np.sort(areas)[::-1][:10]
        min_dot_area = max(4.0, 0.25 * float(np.median(top)))
    keep = idx[areas >= min_dot_area]
    if len(keep) < 4:
        raise LandmarkDetectionError(f"found only {len(keep)} landmark dots")
    cents = np.array(ndimage.center_of_mass(mask, labels, keep))[:, ::-1]  # (x, y)
    groups = fcluster(linkage(cents, method="single"), t=4, criterion="maxclust")
    if len(set(groups)) != 4:
        raise LandmarkDetectionError(f"dots form {len(set(groups))} corner groups, not 4")
    counts, points, dots = [], [], []
    for gid in sorted(set(groups)):
        members = cents[groups == gid]
        counts.append(len(members))
        points.append(members.mean(axis=0))
        dots.append(members)
    if sorted(counts) != [1, 2, 3, 4]:
        if max(counts) > 4:
            raise LandmarkDetectionError(f"corner dot counts {counts} exceed 4")
        raise OrientationAmbiguityError(f"corner dot counts {counts} are not 1, 2, 3, 4")
    order = np.argsort(counts)
    spread = [float(np.ptp(d, axis=0).max()) if len(d) > 1 else 0.0 for d in dots]
    typical = max(np.median([s for s in spread if s > 0] or [1.0]), 1e-6)
    conf = tuple(float(1.0 / (1.0 + abs(spread[k] - typical) / typical)) if counts[k] > 1 else 1.0
                 for k in order)
    return LandmarkDetection(points=np.array([points[k] for k in order]),
                             dot_counts=(1, 2, 3, 4), confidence=conf,
                             dots=[dots[k] for k in order])


# -- homography --------------------------------------------------------------

def estimate_homography(src, dst):
    """Exact 4-point homography (h33 = 1) solving the 8x8 linear system."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ShapeMismatchError("need exactly four 2-D point pairs")
    for pts, name in ((src, "source"), (dst, "destination")):
        for k in range(4):
            a, b, c = np.delete(pts, k, axis=0)
            area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
            scale = max(np.ptp(pts, axis=0).max(), 1e-300) ** 2
            if area <= 1e-12 * scale:
                raise SingularSystemError(f"three {name} points are collinear")
    # equilibrate so the solve is well-conditioned for pixel-sized inputs
    s_src = max(np.abs(src).max(), 1.0)
    s_dst = max(np.abs(dst).max(), 1.0)
    T = np.diag([s_src, s_src, 1.0])
    D = np.diag([1 / s_dst, 1 / s_dst, 1.0])
    An = np.zeros((8, 8))
    rn = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src / s_src, dst / s_dst)):
        An[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        An[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rn[2 * k], rn[2 * k + 1] = u, v
    try:
        h = np.linalg.solve(An, rn)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from None
    Hn = np.append(h, 1.0).reshape(3, 3)
    H = np.linalg.inv(D) @ Hn @ np.linalg.inv(T)
    H = H / H[2, 2]
    if not np.all(np.isfinite(H)) or abs(np.linalg.det(H)) < 1e-300:
        raise SingularSystemError("degenerate homography")
    return H


# -- registration ------------------------------------------------------------

def registered_targets(m, spec=PlateSpec(), side=DEFAULT_SIDE, layout=None):
    """Where each landmark (by dot count 1..4) lands in the registered square.

    The registered square covers exactly the grid's bounding square, so cell
    (i, j) is centred at ``cell_center(i, j, m, side)``.
    """
    layout = layout or LandmarkLayout.for_plate(m, spec)
    scale = side / (m * spec.grid_pitch)
    origin = spec.grid_origin()
    return np.array([(layout.corner_for_count(c) - origin) * scale for c in (1, 2, 3, 4)])


def warp_to_square(conf_map, H_map_to_reg, side):
    """Inverse-warp with bilinear sampling; samples outside the map read 0.

    Registered pixel k samples the continuous registered coordinate k + 0.5.
    """
    Hinv = np.linalg.inv(H_map_to_reg)
    ys, xs = np.mgrid[0:side, 0:side].astype(float) + 0.5
    pts = project(Hinv, np.stack([xs, ys], axis=-1))
    return np.maximum(ndimage.map_coordinates(np.asarray(conf_map, dtype=float),
                                              [pts[..., 1], pts[..., 0]],
                                              order=1, mode="constant", cval=0.0), 0.0)


def register(conf_map, landmarks, m, spec=PlateSpec(), side=DEFAULT_SIDE, scale=MAP_SCALE,
             layout=None):
    """Warp the confidence map onto the canonical S x S grid square.

    Landmark points are in image pixels and are carried into map pixels
    first.  Correspondences are by dot count, so the 1-dot corner always
    ends up top-left.  Returns (registered map, map->registered homography).
    """
    src = image_to_map(np.array([landmarks.point_for_count(c) for c in (1, 2, 3, 4)]), scale)
    dst = registered_targets(m, spec, side, layout)
    H = estimate_homography(src, dst)
    return warp_to_square(conf_map, H, side), H


# -- thresholding and components --------------------------------------------

def _otsu_scan(values, bins=256):
    values = np.asarray(values, dtype=float).ravel()
    lo, hi = float(values.min()), float(values.max())
    if not hi > lo:
        raise DegenerateHistogramError("all values are equal")
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    p = hist / hist.sum()
    mids = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    mu = np.cumsum(p * mids)
    mu_t = mu[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu) ** 2 / (w0 * w1)
    between = np.where((w0 > 0) & (w1 > 0), between, 0.0)
    return between, edges


def otsu_threshold(values, bins=256):
    """Upper edge of the bin maximising between-class variance (lowest on ties)."""
    between, edges = _otsu_scan(values, bins)
    k = int(np.argmax(between))
    if between[k] <= 0:
        raise DegenerateHistogramError("histogram has a single populated class")
    return float(edges[k + 1])


def between_class_variance(values, bins=256):
    """Between-class variance for every candidate split (diagnostics and tests)."""
    return _otsu_scan(values, bins)


def binarize(reg_map, beta=DEFAULT_BETA):
    """1 where the map exceeds beta times its OTSU threshold; returns (binary, t)."""
    t = beta * otsu_threshold(reg_map)
    return (np.asarray(reg_map) > t).astype(np.uint8), t


@dataclass(frozen=True)
class ComponentStats:
    centroid: tuple      # (x, y) in pixel-index coordinates
    semi_axes: tuple     # (a, b), a >= b
    area: int
    bbox: tuple          # (x0, y0, x1, y1) inclusive
    orientation: float   # major axis angle from +x, radians


def connected_components(binary):
    """8-connected regions with centroid and equivalent-ellipse semi-axes.

    Second central moments include the 1/12 term of a unit pixel, so a single
    pixel has semi-axes of about 0.58.
    """
    binary = np.asarray(binary) > 0
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    stats = []
    if n == 0:
        return stats
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = np.nonzero(labels[sl] == lab)
        ys = ys + sl[0].start
        xs = xs + sl[1].start
        cx, cy = xs.mean(), ys.mean()
        dx, dy = xs - cx, ys - cy
        cov = np.array([[np.mean(dx * dx) + 1 / 12, np.mean(dx * dy)],
                        [np.mean(dx * dy), np.mean(dy * dy) + 1 / 12]])
        evals, evecs = np.linalg.eigh(cov)
        lam2, lam1 = np.clip(evals, 0, None)
        major = evecs[:, 1]
        stats.append(ComponentStats(
            centroid=(float(cx), float(cy)),
            semi_axes=(float(2 * np.sqrt(lam1)), float(2 * np.sqrt(lam2))),
            area=int(len(xs)),
            bbox=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
            orientation=float(np.arctan2(major[1], major[0])),
        ))
    return stats


def default_min_axis_sum(side, m):
    return 0.25 * side / m


def filter_components(stats, min_axis_sum):
    """Centroids of regions whose semi-axes sum to at least ``min_axis_sum``."""
    return [s.centroid for s in stats if s.semi_axes[0] + s.semi_axes[1] >= min_axis_sum]


# -- decoding ----------------------------------------------------------------

def kmeans_1d(values, centers, max_iter=50):
    """Lloyd iterations in one dimension. Returns (sorted centres, labels).

    Points equidistant from two centres go to the lower one; empty clusters
    keep their previous centre.
    """
    values = np.asarray(values, dtype=float)
    centers = np.sort(np.asarray(centers, dtype=float))
    labels = np.zeros(len(values), dtype=int)
    for _ in range(max_iter):
        d = np.abs(values[:, None] - centers[None, :])
        new_labels = np.argmin(d, axis=1)  # first minimum == lower centre
        new_centers = centers.copy()
        for k in range(len(centers)):
            sel = new_labels == k
            if sel.any():
                new_centers[k] = values[sel].mean()
        order = np.argsort(new_centers, kind="stable")
        new_centers = new_centers[order]
        new_labels = np.argsort(order)[new_labels]
        if np.array_equal(new_labels, labels) and np.array_equal(new_centers, centers):
            break
        centers, labels = new_centers, new_labels
    return centers, labels


def quantile_init(values, k):
    values = np.sort(np.asarray(values, dtype=float))
    return np.quantile(values, (np.arange(k) + 0.5) / k)


def kmeans_decode(centroids, m, side=None, max_iter=50):
    """Cluster x and y coordinates separately into m groups and rank them.

    With ``side`` (the registered square size) the clusters start at the cell
    centres, which keeps rows/columns with no detections from shifting the
    ranks; without it they start at the m quantiles of the coordinates.
    Centroids are (x, y) in pixel-index coordinates.
    """
    bits = np.zeros((m, m), dtype=np.uint8)
    pts = np.asarray(centroids, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        warnings.warn("no centroids to decode; returning an all-zero matrix")
        return InformationMatrix(bits)
    assign = []
    for axis in (1, 0):  # rows from y, columns from x
        vals = pts[:, axis]
        if side is not None:
            init = (np.arange(m) + 0.5) * side / m - 0.5
        else:
            if len(np.unique(np.round(vals, 6))) < m:
                warnings.warn(f"fewer than {m} distinct coordinates on an axis; ranks may shift")
            init = quantile_init(vals, m)
        _, labels = kmeans_1d(vals, init, max_iter)
        assign.append(labels)
    bits[assign[0], assign[1]] = 1
    return InformationMatrix(bits)


def snap_decode(centroids, m, side):
    """Nearest-cell assignment; the reference decoder for registered maps."""
    bits = np.zeros((m, m), dtype=np.uint8)
    cell = side / m
    for x, y in np.asarray(centroids, dtype=float).reshape(-1, 2):
        j = int(np.clip(np.floor((x + 0.5) / cell), 0, m - 1))
        i = int(np.clip(np.floor((y + 0.5) / cell), 0, m - 1))
        bits[i, j] = 1
    return InformationMatrix(bits)


# -- full pipeline -----------------------------------------------------------

@dataclass(frozen=True)
class RetrievalConfig:
    m: int = 10
    side: int = DEFAULT_SIDE
    beta: float = DEFAULT_BETA
    min_axis_sum: float = None
    map_scale: int = MAP_SCALE
    spec: PlateSpec = PlateSpec()


@dataclass
class Diagnostics:
    confidence_map: np.ndarray = None
    landmarks: LandmarkDetection = None
    homography: np.ndarray = None
    registered: np.ndarray = None
    threshold: float = None
    binary: np.ndarray = None
    components: list = None
    centroids: list = None
    matrix: InformationMatrix = None


def decode_confidence_map(conf_map, image, config, diag=None, landmarks=None):
    """Everything after the network: landmarks -> register -> threshold -> decode."""
    diag = diag if diag is not None else Diagnostics()
    diag.confidence_map = conf_map
    try:
        diag.landmarks = landmarks if landmarks is not None else detect_landmarks(image)
    except Exception as exc:
        raise PipelineStageError("landmarks", exc) from exc
    try:
        diag.registered, diag.homography = register(conf_map, diag.landmarks, config.m,
                                                    config.spec, config.side, config.map_scale)
    except Exception as exc:
        raise PipelineStageError("register", exc) from exc
    try:
        diag.binary, diag.threshold = binarize(diag.registered, config.beta)
    except Exception as exc:
        raise PipelineStageError("binarize", exc) from exc
    diag.components = connected_components(diag.binary)
    min_sum = config.min_axis_sum
    if min_sum is None:
        min_sum = default_min_axis_sum(config.side, config.m)
    diag.centroids = filter_components(diag.components, min_sum)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        diag.matrix = kmeans_decode(diag.centroids, config.m, side=config.side)
    return diag.matrix, diag


def retrieve(image, model, config=RetrievalConfig()):
    """Decode the payload from a photograph. Returns (matrix, diagnostics)."""
    from .model import forward

    diag = Diagnostics()
    try:
        conf = forward(model, image)
    except Exception as exc:
        raise PipelineStageError("forward", exc) from exc
    return decode_confidence_map(conf, image, config, diag)


def majority_vote(matrices):
    """Per-bit majority. Returns (matrix, tie flags); ties resolve to 0."""
    if not matrices:
        raise ValueError("need at least one matrix")
    m = matrices[0].m
    if any(M.m != m for M in matrices):
        raise ShapeMismatchError("matrices differ in size")
    votes = np.sum([M.bits.astype(int) for M in matrices], axis=0)
    n = len(matrices)
    ties = 2 * votes == n
    return InformationMatrix((2 * votes > n).astype(np.uint8)), ties
