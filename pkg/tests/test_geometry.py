"""Tests for geometry module."""

import logging

import numpy as np
import pytest

from sbsm_fit.errors import MeshError, ObjParseError, SymmetryError
from sbsm_fit.geometry import (
    MIRROR,
    Mesh,
    compute_normals,
    face_areas,
    has_consistent_winding,
    icosphere,
    load_obj,
    merge,
    mirror_pairs,
    orient_faces,
    save_obj,
    symmetrize,
    weld,
)


class TestMesh:
    """Test mesh construction and validation."""

    def test_rejects_out_of_range_face(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, 3]]))

    def test_rejects_negative_face(self):
        with pytest.raises(MeshError):
            Mesh(np.zeros((3, 3)), np.array([[0, 1, -1]]))

    def test_rejects_nan_vertex(self):
        vertices = np.zeros((3, 3))
        vertices[1, 2] = np.nan
        with pytest.raises(MeshError, match="vertex 1"):
            Mesh(vertices, np.array([[0, 1, 2]]))

    def test_counts(self, cube):
        assert cube.n_vertices == 14
        assert cube.n_faces == 24

    def test_with_vertices_keeps_faces(self, cube):
        moved = cube.with_vertices(cube.vertices * 2.0)
        assert np.array_equal(moved.faces, cube.faces)
        assert np.allclose(moved.extent(), [4.0, 4.0, 4.0])

    def test_merge_offsets_faces(self, cube):
        both = merge(cube, cube)
        assert both.n_vertices == 28
        assert both.faces.max() == 27

    def test_icosphere_sizes(self):
        assert icosphere(0).n_vertices == 12
        assert icosphere(1).n_vertices == 42
        assert icosphere(1).n_faces == 80

    def test_cube_is_closed_and_consistent(self, cube):
        assert has_consistent_winding(cube)
        assert abs(face_areas(cube).sum() - 24.0) < 1e-12


class TestNormals:
    """Test area-weighted vertex normals."""

    def test_single_triangle(self):
        mesh = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
        assert np.allclose(compute_normals(mesh), [[0, 0, 1]] * 3)

    def test_cube_corners_along_diagonals(self, cube):
        normals = compute_normals(cube)
        corners = np.all(np.abs(cube.vertices) == 1.0, axis=1)
        assert corners.sum() == 8
        expected = np.sign(cube.vertices[corners]) / np.sqrt(3.0)
        assert np.allclose(normals[corners], expected, atol=1e-12)

    def test_cube_face_centers_along_axes(self, cube):
        normals = compute_normals(cube)
        centers = np.count_nonzero(cube.vertices, axis=1) == 1
        assert np.allclose(normals[centers], cube.vertices[centers], atol=1e-12)

    def test_icosahedron_is_radial(self):
        ico = icosphere(0)
        assert np.allclose(compute_normals(ico), ico.vertices, atol=1e-9)

    def test_subdivided_sphere_nearly_radial(self, sphere):
        dots = np.sum(compute_normals(sphere) * sphere.vertices, axis=1)
        assert dots.min() > 0.999

    def test_unit_length(self, sphere):
        lengths = np.linalg.norm(compute_normals(sphere), axis=1)
        assert np.allclose(lengths, 1.0)

    def test_scale_invariant(self, sphere):
        scaled = sphere.with_vertices(sphere.vertices * 3.0)
        assert np.allclose(compute_normals(scaled), compute_normals(sphere))

    def test_isolated_vertex_flagged(self, caplog):
        vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]])
        mesh = Mesh(vertices, np.array([[0, 1, 2], [0, 1, 1]]))
        with caplog.at_level(logging.WARNING, logger="sbsm_fit.geometry"):
            normals, flags = compute_normals(mesh, return_flags=True)
        assert flags.tolist() == [False, False, False, True]
        assert np.allclose(normals[3], [0, 1, 0])
        assert np.allclose(normals[:3], [[0, 0, 1]] * 3)
        assert "no nondegenerate incident face" in caplog.text


class TestSymmetry:
    """Test mirror pairing and symmetrization."""

    def test_pairs_are_involution(self, cube):
        partner = mirror_pairs(cube.vertices)
        assert np.array_equal(partner[partner], np.arange(cube.n_vertices))
        assert np.allclose(cube.vertices[partner], cube.vertices * MIRROR)

    def test_pair_average(self, cube):
        i = int(np.flatnonzero(np.all(cube.vertices == [1.0, 1.0, 1.0], axis=1))[0])
        j = int(np.flatnonzero(np.all(cube.vertices == [-1.0, 1.0, 1.0], axis=1))[0])
        field = np.zeros((cube.n_vertices, 3))
        field[i] = [1.0, 0.0, 0.0]
        out = symmetrize(field, cube)
        assert np.allclose(out[i], [0.5, 0.0, 0.0])
        assert np.allclose(out[j], [-0.5, 0.0, 0.0])

    def test_on_plane_vertex_loses_x(self, cube):
        i = int(np.flatnonzero(np.all(cube.vertices == [0.0, 1.0, 0.0], axis=1))[0])
        field = np.zeros((cube.n_vertices, 3))
        field[i] = [0.3, 0.1, 0.2]
        out = symmetrize(field, cube)
        assert np.allclose(out[i], [0.0, 0.1, 0.2])

    def test_idempotent(self, cube):
        field = np.random.default_rng(3).standard_normal((cube.n_vertices, 3))
        once = symmetrize(field, cube)
        assert np.allclose(symmetrize(once, cube), once, atol=1e-15)

    def test_output_is_mirror_symmetric(self, cube):
        field = np.random.default_rng(4).standard_normal((cube.n_vertices, 3))
        out = symmetrize(field, cube)
        assert np.allclose(out[cube.mirror_partner], out * MIRROR)

    def test_wide_fields_are_averaged(self, cube):
        field = np.random.default_rng(5).standard_normal((cube.n_vertices, 16))
        out = symmetrize(field, cube)
        assert np.allclose(out[cube.mirror_partner], out)

    def test_unpaired_vertex_raises(self):
        vertices = np.array([[0.5, 0.0, 0.0], [0.0, 1.0, 0.0]])
        with pytest.raises(SymmetryError) as excinfo:
            mirror_pairs(vertices)
        assert excinfo.value.vertex == 0

    def test_length_mismatch_raises(self, cube):
        with pytest.raises(MeshError):
            symmetrize(np.zeros((3, 3)), cube)


class TestWeld:
    """Test vertex welding."""

    def test_merges_duplicates(self):
        vertices = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]])
        mesh = weld(Mesh(vertices, np.array([[0, 1, 2], [3, 4, 2]])))
        assert mesh.n_vertices == 4
        assert mesh.faces.tolist() == [[0, 1, 2], [1, 3, 2]]

    def test_drops_collapsed_faces(self):
        vertices = np.array([[0.0, 0, 0], [1, 0, 0], [1, 0, 0]])
        mesh = weld(Mesh(vertices, np.array([[0, 1, 2]])))
        assert mesh.n_faces == 0


class TestObj:
    """Test Wavefront OBJ reading and writing."""

    def test_round_trip(self, tmp_path):
        mesh = icosphere(1, radius=1.3)
        path = tmp_path / "mesh.obj"
        save_obj(mesh, path)
        loaded = load_obj(path)
        assert np.abs(loaded.vertices - mesh.vertices).max() <= 1e-6
        assert np.array_equal(loaded.faces, mesh.faces)

    def test_quad_is_fan_triangulated(self, tmp_path):
        path = tmp_path / "quad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
        mesh = load_obj(path)
        assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]

    def test_slashes_comments_and_ignored_records(self, tmp_path):
        path = tmp_path / "tri.obj"
        path.write_text(
            "# a triangle\no tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\n"
            "vt 0 0\nf 1/1/1 2/2/1 3//1  # trailing comment\n"
        )
        mesh = load_obj(path)
        assert mesh.faces.tolist() == [[0, 1, 2]]

    def test_negative_indices_are_relative(self, tmp_path):
        path = tmp_path / "neg.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n")
        assert load_obj(path).faces.tolist() == [[0, 1, 2]]

    def test_index_zero_names_line(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
        with pytest.raises(ObjParseError) as excinfo:
            load_obj(path)
        assert excinfo.value.line_number == 4
        assert "line 4" in str(excinfo.value)

    def test_index_past_end(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nv 1 0 0\nf 1 2 3\n")
        with pytest.raises(ObjParseError):
            load_obj(path)

    def test_unknown_record(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0 0\nbogus 1 2\n")
        with pytest.raises(ObjParseError) as excinfo:
            load_obj(path)
        assert excinfo.value.line_number == 2

    def test_short_vertex(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("v 0 0\n")
        with pytest.raises(ObjParseError):
            load_obj(path)

    def test_parse_error_is_mesh_error(self, tmp_path):
        path = tmp_path / "bad.obj"
        path.write_text("f 1 2 3\n")
        with pytest.raises(MeshError):
            load_obj(path)


def _mobius(n: int = 6) -> Mesh:
    """Twisted strip of n quads; its last quad joins the first with top and bottom swapped."""
    angles = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    top = np.column_stack([np.cos(angles), np.sin(angles), np.full(n, 0.2)])
    bottom = np.column_stack([np.cos(angles), np.sin(angles), np.full(n, -0.2)]) * 1.1
    vertices = np.concatenate([top, bottom])
    faces = []
    for i in range(n - 1):
        t0, b0, b1, t1 = i, n + i, n + i + 1, i + 1
        faces += [(t0, b0, b1), (t0, b1, t1)]
    faces += [(n - 1, 2 * n - 1, 0), (n - 1, 0, n)]
    return Mesh(vertices, np.array(faces))


class TestOrientation:
    """Test face reorientation on load."""

    def test_reversed_face_is_fixed(self, cube, tmp_path):
        faces = cube.faces.copy()
        faces[0] = faces[0][::-1]
        path = tmp_path / "flipped.obj"
        save_obj(Mesh(cube.vertices, faces), path)
        loaded = load_obj(path)
        assert has_consistent_winding(loaded)
        assert np.allclose(compute_normals(loaded), compute_normals(cube))

    def test_inside_out_mesh_is_turned_outward(self, sphere, tmp_path):
        path = tmp_path / "inside_out.obj"
        save_obj(Mesh(sphere.vertices, sphere.faces[:, ::-1]), path)
        loaded = load_obj(path)
        assert has_consistent_winding(loaded)
        normals = compute_normals(loaded)
        assert np.all(np.sum(normals * loaded.vertices, axis=1) > 0.0)

    def test_consistent_mesh_is_untouched(self, cube):
        assert orient_faces(cube) is cube

    def test_open_surface_keeps_majority(self):
        quad = Mesh(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [2, 0, 0]], float),
                    np.array([[0, 1, 2], [2, 0, 3], [1, 4, 2]]))
        oriented = orient_faces(quad)
        assert has_consistent_winding(oriented)
        assert np.array_equal(oriented.faces[[0, 2]], quad.faces[[0, 2]])

    def test_separate_components(self, cube, sphere):
        moved = sphere.with_vertices(sphere.vertices + [5.0, 0.0, 0.0])
        inverted = Mesh(moved.vertices, moved.faces[:, ::-1])
        both = orient_faces(merge(cube, inverted))
        assert np.array_equal(both.faces[: cube.n_faces], cube.faces)
        normals = compute_normals(both)[cube.n_vertices:]
        assert np.all(np.sum(normals * sphere.vertices, axis=1) > 0.0)

    def test_non_orientable_raises(self):
        with pytest.raises(MeshError, match="orientable"):
            orient_faces(_mobius())
