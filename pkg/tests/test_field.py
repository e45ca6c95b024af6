import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from planesplat.field import (CameraView, FieldError, GaussianPrimitive, GtPlane, Scene, covariance_of,
                              load_cameras, load_field, load_gt_planes, matrix_to_quaternion,
                              quaternion_to_matrix, save_cameras, save_field, save_gt_planes)

from conftest import fronto_view, make_scene


def prim(scale=(1, 1, 1), rot=(1, 0, 0, 0), **kw):
    args = dict(center=[0, 0, 0], scale=scale, rotation=rot, opacity=0.5, color=[0.1, 0.2, 0.3],
                normal=[0, 0, 1], descriptor=[1, 0, 0])
    args.update(kw)
    return GaussianPrimitive(**args)


def test_covariance_identity():
    np.testing.assert_allclose(covariance_of(prim()), np.eye(3), atol=1e-12)


def test_covariance_diagonal_scaling():
    np.testing.assert_allclose(covariance_of(prim(scale=(2, 1, 1))), np.diag([4.0, 1, 1]), atol=1e-12)


def test_covariance_rotated_about_z():
    c = np.sqrt(0.5)
    R = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])  # 90 degrees about z
    oracle = R @ np.diag([4.0, 1, 1]) @ R.T
    got = covariance_of(prim(scale=(2, 1, 1), rot=(c, 0, 0, c)))
    np.testing.assert_allclose(got, oracle, atol=1e-12)
    np.testing.assert_allclose(got, np.diag([1.0, 4, 1]), atol=1e-12)


quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)
scales = arrays(np.float64, 3, elements=st.floats(1e-3, 10))


@settings(max_examples=200, deadline=None)
@given(quats, scales)
def test_covariance_spectrum_is_squared_scales(q, s):
    q = q / np.linalg.norm(q)
    cov = covariance_of(prim(scale=s, rot=q))
    np.testing.assert_allclose(cov, cov.T, atol=1e-9 * s.max() ** 2)
    ev = np.linalg.eigvalsh(cov)
    assert ev.min() > 0
    np.testing.assert_allclose(np.sort(ev), np.sort(s ** 2), rtol=1e-7, atol=1e-9 * s.max() ** 2)


@settings(max_examples=100, deadline=None)
@given(quats)
def test_quaternion_matrix_round_trip(q):
    q = q / np.linalg.norm(q)
    R = quaternion_to_matrix(q)
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(quaternion_to_matrix(matrix_to_quaternion(R)), R, atol=1e-9)


@pytest.mark.parametrize("kw", [dict(opacity=1.5), dict(scale=(1, 0, 1)), dict(normal=[0, 0, 2]),
                                dict(descriptor=[1, 1, 0]), dict(rot=(2, 0, 0, 0))])
def test_primitive_invariants_enforced(kw):
    with pytest.raises(FieldError):
        prim(**kw)


def test_camera_rejects_non_rigid_pose():
    pose = np.eye(4)
    pose[0, 0] = 2.0
    with pytest.raises(FieldError):
        CameraView(50, 50, 16, 16, 32, 32, pose)
    with pytest.raises(FieldError):
        CameraView(0, 50, 16, 16, 32, 32, np.eye(4))


def three_primitives(rng):
    return make_scene(rng.normal(size=(3, 3)), scales=rng.uniform(0.01, 0.1, (3, 3)), opacities=[0.2, 0.5, 0.9],
                      plane_ids=np.array([0, -1, 2]), rng=rng,
                      normals=np.array([[0, 0, 1.0], [1, 0, 0], [0, 1, 0]]))


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, rng, binary):
    scene = three_primitives(rng)
    path = tmp_path / "f.ply"
    save_field(scene, path, binary=binary)
    back = load_field(path)
    for name in ("centers", "scales", "rotations", "opacities", "colors", "normals", "descriptors"):
        np.testing.assert_allclose(getattr(back, name), getattr(scene, name), atol=1e-6)
    np.testing.assert_array_equal(back.plane_ids, scene.plane_ids)


def _minimal_ply(tmp_path, rows, extra_props=()):
    props = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
             "opacity", "red", "green", "blue", *extra_props]
    head = ["ply", "format ascii 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {p}" for p in props] + ["end_header"]
    path = tmp_path / "m.ply"
    path.write_text("\n".join(head + [" ".join(map(str, r)) for r in rows]) + "\n")
    return path


ROW = [0, 0, 1, 0.1, 0.1, 0.01, 1, 0, 0, 0, 0.5, 0.2, 0.3, 0.4]


def test_missing_descriptors_get_seeded_unit_vectors(tmp_path):
    path = _minimal_ply(tmp_path, [ROW, ROW])
    a, b = load_field(path, seed=7), load_field(path, seed=7)
    assert a.descriptors.shape == (2, 3)
    np.testing.assert_allclose(np.linalg.norm(a.descriptors, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(a.descriptors, b.descriptors)
    assert not np.array_equal(a.descriptors, load_field(path, seed=8).descriptors)
    np.testing.assert_array_equal(a.plane_ids, [-1, -1])


def test_nan_opacity_names_record(tmp_path):
    bad = list(ROW)
    bad[10] = "nan"
    path = _minimal_ply(tmp_path, [ROW, ROW, bad])
    with pytest.raises(FieldError, match="record 2"):
        load_field(path)


def test_malformed_header_and_missing_property(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("not a ply\n")
    with pytest.raises(FieldError):
        load_field(p)
    head = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n"
    p.write_text(head)
    with pytest.raises(FieldError, match="missing"):
        load_field(p)


def test_short_ascii_record_reports_line(tmp_path):
    path = _minimal_ply(tmp_path, [ROW, ROW[:-1]])
    with pytest.raises(FieldError, match="record 1"):
        load_field(path)


def test_camera_and_gt_json_round_trip(tmp_path):
    views = [fronto_view(), CameraView.look_at([1, 2, 1], [0, 0, 0], 60, 60, 40, 30)]
    save_cameras(views, tmp_path / "c.json")
    back = load_cameras(tmp_path / "c.json")
    for a, b in zip(views, back):
        np.testing.assert_allclose(a.world_to_camera, b.world_to_camera, atol=1e-12)
        assert (a.fx, a.fy, a.u0, a.v0, a.width, a.height) == (b.fx, b.fy, b.u0, b.v0, b.width, b.height)
    obj = json.loads((tmp_path / "c.json").read_text())
    assert len(obj[0]["world_to_camera"]) == 16
    planes = [GtPlane(0, np.array([0, 0, 1.0]), -1.0, np.array([[0, 0, 1.0], [1, 0, 1], [1, 1, 1]]))]
    save_gt_planes(planes, tmp_path / "g.json")
    g = load_gt_planes(tmp_path / "g.json")[0]
    assert g.id == 0 and g.offset == -1.0
    np.testing.assert_allclose(g.polygon, planes[0].polygon)


def test_scene_primitive_view_matches_columns(rng):
    scene = three_primitives(rng)
    rebuilt = Scene.from_primitives(scene.primitives)
    np.testing.assert_allclose(rebuilt.centers, scene.centers)
    np.testing.assert_allclose(rebuilt.covariances()[1], covariance_of(scene.primitive(1)))
