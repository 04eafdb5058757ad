"""Synthetic photographs of watermark plates, annotations and target maps.

The renderer shades the plate heightfield with a fixed directional light,
maps it into the image through a plate->image homography, applies an
image-space illumination field, a printed infill texture and sensor noise.
Homographies map plate millimetres to image pixel-index coordinates (pixel
``x`` has its centre at ``x``).
"""

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .codec import LandmarkLayout, PlateSpec, generate_matrix, rasterize_plate
from .errors import DegenerateWarpError, ManifestError
from .netpbm import to_uint8, write_pnm

log = logging.getLogger(__name__)

LANDMARK_ALBEDO = (1.0, 0.0, 1.0)
ILLUMINATIONS = ("natural", "extreme_artificial")
# light from the upper left, 45 degrees above the plate
LIGHT_DIR = np.array([-0.5, -0.5, math.sqrt(0.5)])
AMBIENT, DIFFUSE = 0.35, 0.65
MAP_SCALE = 4
DEFAULT_SIGMA = 1.5
MANIFEST_SCHEMA = 1


@dataclass(frozen=True)
class Material:
    name: str
    albedo: tuple
    relief_contrast: float = 1.0
    infill_amplitude: float = 0.04
    roughness: float = 0.03


# nine filament colours; transparent purple is the deliberately hard one
PALETTE = {
    "green": Material("green", (0.25, 0.62, 0.28)),
    "dark_brown": Material("dark_brown", (0.36, 0.24, 0.16), infill_amplitude=0.05),
    "blue": Material("blue", (0.18, 0.35, 0.75)),
    "dark_green": Material("dark_green", (0.10, 0.30, 0.16), infill_amplitude=0.06, roughness=0.05),
    "wooden": Material("wooden", (0.70, 0.55, 0.38), infill_amplitude=0.07, roughness=0.05),
    "luminous_red": Material("luminous_red", (0.90, 0.22, 0.15)),
    "skin": Material("skin", (0.90, 0.74, 0.62), relief_contrast=0.8, infill_amplitude=0.05),
    "bronze": Material("bronze", (0.60, 0.45, 0.22), infill_amplitude=0.05),
    "transparent_purple": Material("transparent_purple", (0.42, 0.28, 0.55),
                                   relief_contrast=0.3, infill_amplitude=0.09, roughness=0.06),
}


@dataclass(frozen=True)
class IlluminationParams:
    gradient_angle: float = 0.0       # radians, image frame
    gradient_strength: float = 0.0    # relative gain change across half the frame
    spot_center: tuple = None         # normalised (x, y) in [0, 1]
    spot_gain: float = 1.0
    spot_radius: float = 0.3          # fraction of the frame size
    spot_floor: float = 1.0
    # direction of a lamp shading the relief; None keeps the diffuse sky light
    light_azimuth: float = None       # radians
    light_elevation: float = None     # radians above the plate
    specular: float = 0.0


@dataclass(frozen=True, eq=False)
class RenderCondition:
    homography: np.ndarray
    illumination: str = "natural"
    illum_params: IlluminationParams = field(default_factory=IlluminationParams)
    material_albedo: tuple = (0.5, 0.5, 0.5)
    noise_sigma: float = 0.0
    infill_amplitude: float = 0.0
    infill_period: float = 12.0       # heightfield pixels
    infill_angle: float = 0.0
    relief_contrast: float = 1.0
    roughness: float = 0.0
    background: tuple = (0.45, 0.45, 0.45)
    exposure: float = 1.0
    texture_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        H = np.asarray(self.homography, dtype=float)
        if H.shape != (3, 3) or not np.all(np.isfinite(H)):
            raise DegenerateWarpError("homography must be a finite 3x3 matrix")
        if abs(np.linalg.det(H)) <= 1e-9:
            raise DegenerateWarpError("homography is singular")
        object.__setattr__(self, "homography", H)
        if self.illumination not in ILLUMINATIONS:
            raise ValueError(f"illumination must be one of {ILLUMINATIONS}")
        if self.noise_sigma < 0 or self.infill_amplitude < 0:
            raise ValueError("noise_sigma and infill_amplitude must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["homography"] = [float(v) for v in self.homography.ravel()]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["homography"] = np.array(d["homography"], dtype=float).reshape(3, 3)
        ip = dict(d.get("illum_params", {}))
        if ip.get("spot_center") is not None:
            ip["spot_center"] = tuple(ip["spot_center"])
        d["illum_params"] = IlluminationParams(**ip)
        for key in ("material_albedo", "background"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def project(H, pts):
    """Apply homography ``H`` to an (..., 2) array of points."""
    pts = np.asarray(pts, dtype=float)
    hom = pts @ H[:, :2].T + H[:, 2]
    return hom[..., :2] / hom[..., 2:3]


def image_to_map(pts, scale=MAP_SCALE):
    """Image pixel coordinates -> confidence-map pixel coordinates."""
    return (np.asarray(pts, dtype=float) - (scale - 1) / 2.0) / scale


def map_to_image(pts, scale=MAP_SCALE):
    return np.asarray(pts, dtype=float) * scale + (scale - 1) / 2.0


def _plate_texture(hf, cond):
    """Per-sample RGB reflectance of the plate, before image-space lighting."""
    r = hf.resolution
    ip = cond.illum_params
    light = LIGHT_DIR
    if ip.light_azimuth is not None:
        el = ip.light_elevation if ip.light_elevation is not None else math.pi / 4
        light = np.array([math.cos(ip.light_azimuth) * math.cos(el),
                          math.sin(ip.light_azimuth) * math.cos(el), math.sin(el)])
    gy, gx = np.gradient(hf.elevation, 1.0 / r)
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    ndotl = (-gx * light[0] - gy * light[1] + light[2]) / norm
    shade = (AMBIENT + DIFFUSE * np.clip(ndotl, 0.0, None)) / (AMBIENT + DIFFUSE * light[2])
    shade = 1.0 + cond.relief_contrast * (shade - 1.0)
    if ip.specular > 0:
        half = light + np.array([0.0, 0.0, 1.0])
        half /= np.linalg.norm(half)
        ndoth = np.clip((-gx * half[0] - gy * half[1] + half[2]) / norm, 0.0, None)
        glint = ip.specular * (ndoth ** 40 - half[2] ** 40)
    else:
        glint = 0.0

    mod = np.ones_like(shade)
    if cond.infill_amplitude > 0:
        v, u = np.mgrid[0:hf.height, 0:hf.width]
        phase = (u * math.cos(cond.infill_angle) + v * math.sin(cond.infill_angle))
        mod += cond.infill_amplitude * np.sin(2 * math.pi * phase / cond.infill_period)
    if cond.roughness > 0:
        trng = np.random.default_rng(cond.texture_seed)
        noise = ndimage.gaussian_filter(trng.standard_normal(shade.shape), 1.5)
        noise /= noise.std() + 1e-12
        mod += cond.roughness * noise

    albedo = np.empty(shade.shape + (3,))
    albedo[:] = cond.material_albedo
    albedo[hf.landmark_mask] = LANDMARK_ALBEDO
    return albedo * (shade * mod)[..., None] + np.asarray(glint)[..., None]


def illumination_field(cond, shape):
    h, w = shape
    ys = (np.arange(h) + 0.5) / h
    xs = (np.arange(w) + 0.5) / w
    X, Y = np.meshgrid(xs, ys)
    p = cond.illum_params
    proj = (X - 0.5) * math.cos(p.gradient_angle) + (Y - 0.5) * math.sin(p.gradient_angle)
    gain = 1.0 + 2.0 * p.gradient_strength * np.clip(proj, -0.5, 0.5)
    if p.spot_center is not None:
        d2 = (X - p.spot_center[0]) ** 2 + (Y - p.spot_center[1]) ** 2
        gain = gain * (p.spot_floor + (p.spot_gain - p.spot_floor)
                       * np.exp(-d2 / (2 * p.spot_radius ** 2)))
    return gain * cond.exposure


def render(hf, cond, out_size):
    """Photograph-like float32 RGB image of shape (out_size, out_size, 3)."""
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    h, w = out_size
    Hinv = np.linalg.inv(cond.homography)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    hom = Hinv[:, 0, None, None] * xs + Hinv[:, 1, None, None] * ys + Hinv[:, 2, None, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = hom[0] / hom[2] * hf.resolution
        v = hom[1] / hom[2] * hf.resolution
    inside = (hom[2] > 0) & (u >= 0) & (u <= hf.width - 1) & (v >= 0) & (v <= hf.height - 1)

    tex = _plate_texture(hf, cond)
    img = np.empty((h, w, 3))
    img[:] = cond.background
    uu, vv = u[inside], v[inside]
    for c in range(3):
        img[..., c][inside] = ndimage.map_coordinates(tex[..., c], [vv, uu], order=1)
    img *= illumination_field(cond, (h, w))[..., None]
    if cond.noise_sigma > 0:
        rng = np.random.default_rng(cond.seed)
        img += rng.normal(0.0, cond.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def annotation_points(M, spec, H):
    """Image coordinates of the bump centres of every 1-bit, in row-major order."""
    nodes = spec.node_positions(M.m)[M.bits.astype(bool)]
    return project(H, nodes)


def make_annotation(M, spec, cond, map_size, scale=MAP_SCALE):
    """Binary annotation image at confidence-map resolution: one pixel per bump."""
    if isinstance(map_size, int):
        map_size = (map_size, map_size)
    A = np.zeros(map_size, dtype=np.uint8)
    pts = np.rint(image_to_map(annotation_points(M, spec, cond.homography), scale)).astype(int)
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < map_size[1]) & (pts[:, 1] >= 0) & (pts[:, 1] < map_size[0])
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} bump centre(s) outside the frame were dropped")
    A[pts[ok, 1], pts[ok, 0]] = 1
    return A


def gaussian_kernel(sigma, radius=None):
    """Normalised 2-D Gaussian truncated at ``ceil(3 sigma)``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if radius is None:
        radius = int(math.ceil(3 * sigma))
    t = np.arange(-radius, radius + 1, dtype=float)
    g = np.exp(-t * t / (2 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_ground_truth(A, sigma):
    """Target confidence map: the annotation image convolved with the kernel."""
    k = gaussian_kernel(sigma)
    return ndimage.convolve(np.asarray(A, dtype=float), k, mode="constant", cval=0.0)


def kernel_peak(sigma):
    k = gaussian_kernel(sigma)
    return float(k[k.shape[0] // 2, k.shape[1] // 2])


# -- viewpoints and condition sampling ---------------------------------------

def camera_homography(spec, m, out_size, tilt_x, tilt_y, roll, fill, shift=(0.0, 0.0),
                      focal=1.5):
    """Pinhole view of the plate; angles in radians, ``fill`` = fronto width fraction."""
    size = spec.plate_size(m)
    f = focal * out_size
    d = f * size / (fill * out_size)
    cx, cy = out_size / 2.0 - 0.5, out_size / 2.0 - 0.5
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    ca, sa = math.cos(tilt_x), math.sin(tilt_x)
    cb, sb = math.cos(tilt_y), math.sin(tilt_y)
    cr, sr = math.cos(roll), math.sin(roll)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    R = Rz @ Ry @ Rx
    t = np.array([shift[0] * d / f * out_size, shift[1] * d / f * out_size, d])
    centre = np.array([[1, 0, -size / 2], [0, 1, -size / 2], [0, 0, 1.0]])
    H = K @ np.column_stack([R[:, 0], R[:, 1], t]) @ centre
    return H / H[2, 2]


@dataclass(frozen=True)
class ConditionRanges:
    out_size: int = 1024
    tilt_max_deg: float = 40.0
    fill: tuple = (0.72, 0.88)
    shift_max: float = 0.04
    noise_sigma: tuple = (0.005, 0.025)
    natural_gradient: tuple = (0.0, 0.15)
    exposure: tuple = (0.85, 1.1)
    artificial_gradient: tuple = (0.1, 0.3)
    spot_gain: tuple = (2.0, 3.0)
    spot_radius: tuple = (0.25, 0.45)
    spot_floor: float = 0.2
    lamp_elevation_deg: tuple = (55.0, 80.0)
    specular: tuple = (0.1, 0.35)
    infill_period: tuple = (8.0, 20.0)
    background_level: tuple = (0.3, 0.6)


def sample_view(rng, spec, m, ranges=ConditionRanges()):
    """Random in-frame homography: tilts within the range, any in-plane roll."""
    n = ranges.out_size
    t = math.radians(ranges.tilt_max_deg)
    tx, ty = rng.uniform(-t, t, size=2)
    roll = rng.uniform(-math.pi, math.pi)
    fill = rng.uniform(*ranges.fill)
    shift = rng.uniform(-ranges.shift_max, ranges.shift_max, size=2)
    size = spec.plate_size(m)
    corners = np.array([[0, 0], [size, 0], [size, size], [0, size]], dtype=float)
    for _ in range(50):
        H = camera_homography(spec, m, n, tx, ty, roll, fill, shift)
        p = project(H, corners)
        if p.min() >= 0.02 * n and p.max() <= 0.98 * n - 1:
            return H
        fill *= 0.95
    raise DegenerateWarpError("could not fit the plate into the frame")


def sample_condition(rng, spec, m, material, illumination, texture_seed, infill,
                     ranges=ConditionRanges()):
    H = sample_view(rng, spec, m, ranges)
    grad_angle = rng.uniform(-math.pi, math.pi)
    if illumination == "natural":
        ip = IlluminationParams(gradient_angle=grad_angle,
                                gradient_strength=rng.uniform(*ranges.natural_gradient))
    else:
        ip = IlluminationParams(
            gradient_angle=grad_angle,
            gradient_strength=rng.uniform(*ranges.artificial_gradient),
            spot_center=tuple(float(v) for v in rng.uniform(0.2, 0.8, size=2)),
            spot_gain=rng.uniform(*ranges.spot_gain),
            spot_radius=rng.uniform(*ranges.spot_radius),
            spot_floor=ranges.spot_floor,
            light_azimuth=rng.uniform(-math.pi, math.pi),
            light_elevation=math.radians(rng.uniform(*ranges.lamp_elevation_deg)),
            specular=rng.uniform(*ranges.specular),
        )
    bg = rng.uniform(*ranges.background_level) * rng.uniform(0.85, 1.15, size=3)
    return RenderCondition(
        homography=H,
        illumination=illumination,
        illum_params=ip,
        material_albedo=tuple(material.albedo),
        noise_sigma=rng.uniform(*ranges.noise_sigma),
        infill_amplitude=material.infill_amplitude,
        infill_period=infill[0],
        infill_angle=infill[1],
        relief_contrast=material.relief_contrast,
        roughness=material.roughness,
        background=tuple(float(v) for v in np.clip(bg, 0, 1)),
        exposure=rng.uniform(*ranges.exposure) if illumination == "natural" else 1.0,
        texture_seed=texture_seed,
        seed=int(rng.integers(0, 2**31 - 1)),
    )


# -- dataset generation ------------------------------------------------------

@dataclass(frozen=True)
class ObjectPlan:
    object_id: int
    material: str
    n_natural: int
    n_artificial: int
    split: str = "train"


def default_materials(n_objects):
    """Material per object, pairing colours the way the printed set does."""
    order = ["green", "green", "dark_brown", "dark_brown", "blue", "blue",
             "dark_green", "dark_green", "wooden", "wooden", "luminous_red",
             "luminous_red", "skin", "skin", "bronze", "transparent_purple"]
    return [order[k % len(order)] for k in range(n_objects)]


def _object_rng(seed, object_id, *extra):
    return np.random.default_rng(np.random.SeedSequence([seed, object_id, *extra]))


def render_object_images(plan, m, seed, spec=PlateSpec(), ranges=ConditionRanges(),
                         resolution=16.0):
    """Yield (index, matrix, condition, image) for every image of one object.

    Object ``k`` draws its payload and print texture from
    ``SeedSequence([seed, k])`` and image ``i`` its view and lighting from
    ``SeedSequence([seed, k, i])``.
    """
    orng = _object_rng(seed, plan.object_id)
    M = generate_matrix(m, int(orng.integers(0, 2**31 - 1)))
    texture_seed = int(orng.integers(0, 2**31 - 1))
    infill = (orng.uniform(*ranges.infill_period), orng.uniform(0, math.pi))
    material = PALETTE[plan.material]
    layout = LandmarkLayout.for_plate(m, spec)
    hf = rasterize_plate(M, spec, layout, resolution)
    tags = ["natural"] * plan.n_natural + ["extreme_artificial"] * plan.n_artificial
    for idx, illum in enumerate(tags):
        irng = _object_rng(seed, plan.object_id, idx)
        cond = sample_condition(irng, spec, m, material, illum, texture_seed, infill, ranges)
        yield idx, M, cond, render(hf, cond, ranges.out_size)


def generate_objects(out_dir, plans, m, seed, spec=PlateSpec(), ranges=ConditionRanges(),
                     sigma=DEFAULT_SIGMA, manifest_name="manifest.jsonl"):
    """Render every planned object, write image/annotation/map files and a manifest."""
    out_dir = os.fspath(out_dir)
    for sub in ("images", "annotations", "gt", "matrices"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    map_size = ranges.out_size // MAP_SCALE
    gt_scale = kernel_peak(sigma)
    records = []
    for plan in plans:
        for idx, M, cond, img in render_object_images(plan, m, seed, spec, ranges):
            rid = f"obj{plan.object_id:03d}_{idx:02d}"
            matrix_file = f"matrices/obj{plan.object_id:03d}.txt"
            if idx == 0:
                with open(os.path.join(out_dir, matrix_file), "w") as fh:
                    fh.write(M.to_text())
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                A = make_annotation(M, spec, cond, map_size)
            Y = gaussian_ground_truth(A, sigma)
            files = {
                "image_file": f"images/{rid}.ppm",
                "annotation_file": f"annotations/{rid}.pgm",
                "gt_map_file": f"gt/{rid}.pgm",
            }
            write_pnm(os.path.join(out_dir, files["image_file"]), to_uint8(img))
            write_pnm(os.path.join(out_dir, files["annotation_file"]), A * np.uint8(255))
            write_pnm(os.path.join(out_dir, files["gt_map_file"]),
                      np.round(np.clip(Y / gt_scale, 0, 1) * 65535).astype(np.uint16), 65535)
            records.append({
                "id": rid,
                "object_id": plan.object_id,
                "material": plan.material,
                "illumination": cond.illumination,
                "matrix_file": matrix_file,
                **files,
                "homography": [float(v) for v in cond.homography.ravel()],
                "split": plan.split,
                "gt_scale": gt_scale,
                "sigma": sigma,
                "m": m,
                "schema": MANIFEST_SCHEMA,
                "condition": cond.to_dict(),
            })
            log.debug("rendered %s", rid)
    write_manifest(os.path.join(out_dir, manifest_name), records)
    # read back so returned records resolve their files like loaded ones
    return read_manifest(os.path.join(out_dir, manifest_name))


def generate_dataset(out_dir, count, m, seed, ranges=ConditionRanges(), spec=PlateSpec(),
                     images_per_object=15, natural_per_object=10, sigma=DEFAULT_SIGMA,
                     materials=None, split="train"):
    """Render ``count`` images grouped into objects of ``images_per_object`` views.

    The first ``natural_per_object`` views of each object are lit naturally and
    the rest by the extreme artificial light.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    n_objects = -(-count // images_per_object)
    materials = materials or default_materials(n_objects)
    plans = []
    left = count
    for k in range(n_objects):
        n = min(images_per_object, left)
        nat = min(natural_per_object, n)
        plans.append(ObjectPlan(k + 1, materials[k % len(materials)], nat, n - nat, split))
        left -= n
    return generate_objects(out_dir, plans, m, seed, spec, ranges, sigma)


def write_manifest(path, records):
    try:
        with open(path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise ManifestError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path, check_files=True):
    """Load a JSON-lines manifest; record paths are resolved against its directory."""
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{n}: {exc}") from None
            missing = {"id", "object_id", "image_file", "matrix_file"} - rec.keys()
            if missing:
                raise ManifestError(f"{path}:{n}: missing fields {sorted(missing)}")
            rec["_base"] = base
            records.append(rec)
    ids = [r["id"] for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate record ids")
    if check_files:
        for rec in records:
            for key in ("image_file", "annotation_file", "gt_map_file", "matrix_file"):
                if key in rec and not os.path.exists(os.path.join(base, rec[key])):
                    raise ManifestError(f"{path}: {rec['id']} references missing {rec[key]}")
    return records
