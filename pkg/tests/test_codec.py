import io
import json
import os
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from stl import mesh as stl_mesh

from watermark3d.codec import (HeightField, InformationMatrix, LandmarkLayout, PlateSpec,
                               cell_center, export_stl, generate_matrix, mesh_triangles,
                               nearest_cell, rasterize_plate, save_heightfield)
from watermark3d.errors import InvalidDimensionError, UnderResolutionError
from watermark3d.netpbm import decode_pnm

DATA = os.path.join(os.path.dirname(__file__), "data")
SPEC = PlateSpec()


def plate(M, spec=SPEC, resolution=4.0):
    return rasterize_plate(M, spec, LandmarkLayout.for_plate(M.m, spec), resolution)


# -- InformationMatrix / generate_matrix -------------------------------------

def test_generate_matrix_golden():
    with open(os.path.join(DATA, "matrix_m20_seed7.txt")) as fh:
        golden = fh.read()
    M = generate_matrix(20, 7)
    assert M.m == 20
    assert M.to_text() == golden
    assert generate_matrix(20, 7) == M


def test_generate_matrix_small():
    M = generate_matrix(2, 0)
    assert M.bits.shape == (2, 2)
    assert set(np.unique(M.bits)) <= {0, 1}


@pytest.mark.parametrize("m", [1, 0, -3])
def test_generate_matrix_rejects_small(m):
    with pytest.raises(InvalidDimensionError):
        generate_matrix(m, 0)


def test_generate_matrix_is_roughly_fair():
    bits = np.concatenate([generate_matrix(20, s).bits.ravel() for s in range(20)])
    assert abs(bits.mean() - 0.5) < 0.03


@pytest.mark.parametrize("bad", [np.zeros((2, 3)), np.zeros((1, 1)), np.full((2, 2), 2)])
def test_information_matrix_invariants(bad):
    with pytest.raises(InvalidDimensionError):
        InformationMatrix(bad)


def test_matrix_text_round_trip():
    M = generate_matrix(7, 3)
    text = M.to_text()
    assert text.count("\n") == 7 and all(len(r) == 7 for r in text.split())
    assert InformationMatrix.from_text(text) == M


def test_matrix_bits_are_read_only():
    M = generate_matrix(3, 0)
    with pytest.raises(ValueError):
        M.bits[0, 0] = 1


# -- PlateSpec / layout ------------------------------------------------------

def test_platespec_validation():
    with pytest.raises(ValueError):
        PlateSpec(bump_radius=2.0, grid_pitch=4.0)
    with pytest.raises(ValueError):
        PlateSpec(bump_height=0.0)
    with pytest.raises(ValueError):
        PlateSpec(bump_shape="cone")


@settings(max_examples=50, deadline=None)
@given(pitch=st.floats(1.0, 10.0), frac=st.floats(0.05, 0.49), m=st.integers(2, 12))
def test_bump_supports_disjoint(pitch, frac, m):
    spec = PlateSpec(grid_pitch=pitch, bump_radius=frac * pitch)
    nodes = spec.node_positions(m).reshape(-1, 2)
    d = np.hypot(*(nodes[:, None] - nodes[None]).transpose(2, 0, 1))
    d = d[~np.eye(len(nodes), dtype=bool)]
    assert d.min() >= pitch - 1e-9 > 2 * spec.bump_radius - 1e-9


def test_layout_corners_contain_grid():
    layout = LandmarkLayout.for_plate(10, SPEC)
    c = np.array(layout.corners)
    nodes = SPEC.node_positions(10).reshape(-1, 2)
    assert (nodes.min(0) > c.min(0)).all() and (nodes.max(0) < c.max(0)).all()
    side = np.diff(np.vstack([c, c[:1]]), axis=0)
    assert np.allclose(np.hypot(*side.T), np.hypot(*side.T)[0])


def test_layout_dot_counts():
    layout = LandmarkLayout.for_plate(10, SPEC)
    assert [len(d) for _, d in layout.dots()] == [1, 2, 3, 4]
    with pytest.raises(ValueError):
        LandmarkLayout(corners=layout.corners, dot_counts=(1, 1, 3, 4))


# -- rasterization -----------------------------------------------------------

def test_all_zero_matrix_is_flat_except_landmarks():
    hf = plate(InformationMatrix(np.zeros((4, 4))))
    assert not hf.bump_mask.any()
    assert np.all(hf.elevation[~hf.landmark_mask] == 0)
    assert hf.landmark_mask.any()


def test_all_ones_has_m_squared_bumps():
    from scipy import ndimage

    hf = plate(InformationMatrix(np.ones((5, 5))))
    _, n = ndimage.label(hf.bump_mask)
    assert n == 25


def test_single_bump_at_node_zero():
    bits = np.zeros((4, 4))
    bits[0, 0] = 1
    r = 4.0
    hf = plate(InformationMatrix(bits), resolution=r)
    x, y = SPEC.node_positions(4)[0, 0]
    v, u = int(round(y * r)), int(round(x * r))
    assert hf.elevation[v, u] == pytest.approx(SPEC.bump_height)
    assert hf.elevation.max() == pytest.approx(SPEC.bump_height)
    vv, uu = np.nonzero(hf.bump_mask)
    assert np.allclose([uu.mean() / r, vv.mean() / r], [x, y], atol=0.5 / r)


def test_cube_bump_profile():
    spec = PlateSpec(bump_shape="cube")
    bits = np.zeros((3, 3))
    bits[1, 1] = 1
    hf = plate(InformationMatrix(bits), spec, resolution=5.0)
    vals = np.unique(hf.elevation[hf.bump_mask])
    assert np.allclose(vals, [spec.bump_height])


def test_heightfield_invariants():
    hf = plate(generate_matrix(6, 1))
    assert hf.elevation.min() >= 0 and hf.elevation.max() <= SPEC.bump_height
    assert not (hf.landmark_mask & hf.bump_mask).any()


def test_under_resolution():
    with pytest.raises(UnderResolutionError):
        plate(generate_matrix(3, 0), resolution=1.0)


def test_rasterize_deterministic():
    a = plate(generate_matrix(5, 2))
    b = plate(generate_matrix(5, 2))
    assert a.elevation.tobytes() == b.elevation.tobytes()


# -- STL -----------------------------------------------------------------------

def flat_hf(n):
    z = np.zeros((n, n))
    return HeightField(z, np.zeros_like(z, bool), np.zeros_like(z, bool), resolution=1.0)


def test_flat_2x2_triangle_count():
    tris = mesh_triangles(flat_hf(2), SPEC)
    assert len(tris) == 2 + 8 + 2
    data = export_stl(flat_hf(2), SPEC)
    parsed = stl_mesh.Mesh.from_file("flat.stl", fh=io.BytesIO(data))
    assert len(parsed.vectors) == 12
    stored = np.array([[float(v) for v in line.split()[2:]]
                       for line in data.decode().splitlines() if "facet normal" in line])
    assert np.allclose(np.linalg.norm(stored, axis=1), 1.0, atol=1e-6)
    # stored normals agree with the winding the reader recomputes
    recomputed = parsed.normals / np.linalg.norm(parsed.normals, axis=1, keepdims=True)
    assert np.allclose(stored, recomputed, atol=1e-6)


def edge_counts(tris):
    keys = Counter()
    for t in np.round(tris, 9):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            keys[tuple(sorted((tuple(t[a]), tuple(t[b]))))] += 1
    return keys


def directed_edges(tris):
    out = Counter()
    for t in np.round(tris, 9):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            out[(tuple(t[a]), tuple(t[b]))] += 1
    return out


def test_stl_watertight_and_outward():
    hf = plate(generate_matrix(3, 4), resolution=2.0)
    data = export_stl(hf, SPEC)
    assert data.startswith(b"solid ") and data.rstrip().endswith(b"endsolid watermark_plate")
    parsed = stl_mesh.Mesh.from_file("plate.stl", fh=io.BytesIO(data))
    tris = parsed.vectors.astype(np.float64)
    assert set(edge_counts(tris).values()) == {2}
    # consistent orientation: each directed edge appears once, its reverse once
    assert set(directed_edges(tris).values()) == {1}
    volume, _, _ = parsed.get_mass_properties()
    assert volume > 0
    size = SPEC.plate_size(3)
    assert volume > SPEC.plate_thickness * (size - 1) ** 2 * 0.95


def test_stl_signed_volume_matches_heightfield():
    hf = plate(generate_matrix(2, 0), resolution=2.0)
    tris = mesh_triangles(hf, SPEC)
    signed = np.einsum("ij,ij->i", tris[:, 0], np.cross(tris[:, 1], tris[:, 2])).sum() / 6
    span = (hf.width - 1) / hf.resolution
    expected_min = SPEC.plate_thickness * span * span
    assert signed >= expected_min - 1e-9


def test_stl_deterministic():
    hf = plate(generate_matrix(2, 5), resolution=2.0)
    assert export_stl(hf, SPEC) == export_stl(hf, SPEC)


def test_save_heightfield(tmp_path):
    hf = plate(generate_matrix(3, 0), resolution=2.0)
    side = save_heightfield(tmp_path / "h.pgm", hf, SPEC)
    arr, maxval = decode_pnm((tmp_path / "h.pgm").read_bytes())
    assert maxval == 65535 and arr.shape == hf.elevation.shape
    meta = json.loads((tmp_path / "h.json").read_text())
    assert meta == side
    np.testing.assert_allclose(arr * meta["mm_per_unit"], hf.elevation, atol=meta["mm_per_unit"])


# -- cell centres --------------------------------------------------------------

@pytest.mark.parametrize("ij,expected", [((0, 0), (25, 25)), ((1, 1), (75, 75)), ((0, 1), (75, 25))])
def test_cell_center_examples(ij, expected):
    assert cell_center(*ij, 2, 100) == pytest.approx(expected)


def test_cell_center_out_of_range():
    with pytest.raises(IndexError):
        cell_center(2, 0, 2, 100)


@settings(max_examples=100, deadline=None)
@given(m=st.integers(2, 30), size=st.integers(40, 1000), data=st.data())
def test_cell_round_trip(m, size, data):
    i = data.draw(st.integers(0, m - 1))
    j = data.draw(st.integers(0, m - 1))
    assert nearest_cell(*cell_center(i, j, m, size), m, size) == (i, j)
