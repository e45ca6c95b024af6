import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planesplat.gmt import (GaussianNode, NotSPDError, PlaneSet, assign_primitives, bhattacharyya,
                            bhattacharyya_params, build_tree, fit_plane_params, leaves_for_view, log_densities,
                            merge_nodes,
                            save_plane_set)
from planesplat.render import render

from conftest import coefficient_1d, fronto_view, make_scene, plane_scene


def node(mean, cov=1.0, desc=(1, 0, 0), view=0, normal=(0, 0, 1)):
    cov = np.eye(3) * cov if np.isscalar(cov) else np.asarray(cov, float)
    d = np.asarray(desc, float)
    return GaussianNode(np.asarray(mean, float), cov, np.asarray(normal, float), d / np.linalg.norm(d),
                        source=(view, 0))


def test_identical_gaussians_have_zero_distance():
    assert bhattacharyya(node([1, 2, 3], 0.3), node([1, 2, 3], 0.3)) == pytest.approx(0.0, abs=1e-12)


def test_unit_gaussians_two_apart():
    d = bhattacharyya(node([0, 0, 0]), node([2, 0, 0]))
    # axis-aligned isotropic Gaussians factorise, so the coefficient is a product of 1D integrals
    oracle = -math.log(coefficient_1d(0, 1, 2, 1) * coefficient_1d(0, 1, 0, 1) ** 2)
    assert d == pytest.approx(0.5, abs=1e-9)
    assert d == pytest.approx(oracle, abs=1e-9)


def test_equal_means_unit_and_four():
    d = bhattacharyya(node([0, 0, 0], 1.0), node([0, 0, 0], 4.0))
    oracle = -3 * math.log(coefficient_1d(0, 1, 0, 2))
    assert d == pytest.approx(0.5 * math.log(15.625 / 8), abs=1e-9)
    assert d == pytest.approx(oracle, abs=1e-9)
    assert d == pytest.approx(0.3347, abs=5e-5)


def test_non_spd_rejected():
    with pytest.raises(NotSPDError):
        bhattacharyya_params(np.zeros(3), np.diag([1.0, 1, -1]), np.zeros(3), np.eye(3))


def random_spd(rng, scale=1.0):
    A = rng.normal(size=(3, 3))
    return scale * (A @ A.T + 0.05 * np.eye(3))


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_distance_is_symmetric_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    mi, mj = rng.normal(size=(2, 3))
    ci, cj = random_spd(rng), random_spd(rng)
    a, b = bhattacharyya_params(mi, ci, mj, cj), bhattacharyya_params(mj, cj, mi, ci)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(a))
    assert a >= -1e-12
    assert abs(bhattacharyya_params(mi, ci, mi, ci)) <= 1e-9


def test_merge_of_unit_gaussians():
    p = merge_nodes(node([0, 0, 0]), node([2, 4, 0]))
    np.testing.assert_allclose(p.cov, 0.5 * np.eye(3), atol=1e-15)
    np.testing.assert_allclose(p.mean, [1, 2, 0], atol=1e-15)
    assert p.leaf_count == 2


def test_tighter_node_dominates_merged_mean():
    p = merge_nodes(node([0, 0, 0], 1.0), node([1, 0, 0], 100.0))
    np.testing.assert_allclose(p.mean, [1 / 101, 0, 0], atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_merge_is_symmetric_and_shrinks(seed):
    rng = np.random.default_rng(seed)
    a = node(rng.normal(size=3), random_spd(rng), rng.normal(size=3), normal=rng.normal(size=3))
    b = node(rng.normal(size=3), random_spd(rng, 3.0), rng.normal(size=3), normal=rng.normal(size=3))
    ab, ba = merge_nodes(a, b), merge_nodes(b, a)
    for name in ("mean", "cov", "normal", "descriptor"):
        np.testing.assert_array_equal(getattr(ab, name), getattr(ba, name))
    assert [c.id for c in ab.children] == [c.id for c in ba.children]
    for parent in (a, b):
        assert np.linalg.eigvalsh(parent.cov - ab.cov).min() >= -1e-9


def test_scalar_merge_is_harmonic():
    si, sj = 0.7, 2.9
    p = merge_nodes(node([0, 0, 0], si), node([0, 0, 0], sj))
    np.testing.assert_allclose(np.diag(p.cov), si * sj / (si + sj), rtol=1e-14)


def test_orthogonal_descriptors_never_merge():
    leaves = [node([0, 0, 0], 1.0, d) for d in np.eye(3)]
    assert len(build_tree(leaves)) == 3


def test_coplanar_leaves_with_same_descriptor_merge():
    planes = build_tree([node([0, 0, 0]), node([0.5, 0, 0])])
    assert len(planes) == 1 and planes.nodes[0].leaf_count == 2
    np.testing.assert_allclose(planes.weights, [1.0])


def test_empty_tree_rejected():
    with pytest.raises(ValueError):
        build_tree([])


def cluster_leaves(rng, n=40):
    centres = rng.normal(0, 4, (4, 3))
    descs = np.eye(4)[:, :3] + [0, 0, 0.001]
    return [node(centres[k] + rng.normal(0, 0.1, 3), rng.uniform(0.5, 2.0), descs[k % 3] + rng.normal(0, 0.05, 3),
                 view=i % 9) for i, k in enumerate(rng.integers(0, 4, n))]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_tree_weights_and_leaf_ownership(seed):
    leaves = cluster_leaves(np.random.default_rng(seed))
    planes = build_tree(leaves)
    assert abs(planes.weights.sum() - 1.0) <= 1e-12
    owned = [leaf.id for p in planes.nodes for leaf in p.leaves()]
    assert sorted(owned) == sorted(leaf.id for leaf in leaves)


def test_tree_is_deterministic(rng):
    leaves = cluster_leaves(rng)
    a, b = build_tree(leaves), build_tree(leaves)
    assert len(a) == len(b)
    for x, y in zip(a.nodes, b.nodes):
        np.testing.assert_array_equal(x.mean, y.mean)
        np.testing.assert_array_equal(x.cov, y.cov)
        assert [l.id for l in x.leaves()] == [l.id for l in y.leaves()]


def test_view_support_floor_moves_children_to_rejected():
    leaves = [node([0, 0, 0], view=v) for v in range(8)] + [node([50, 0, 0], view=0)]
    planes = build_tree(leaves, min_views=8)
    assert len(planes) == 1 and len(planes.rejected) == 1
    assert planes.nodes[0].view_support == 8
    with pytest.raises(ValueError):
        build_tree(leaves[-1:], min_views=8)


def two_planes():
    a = node([0, 0, 0], np.diag([1.0, 1.0, 1e-4]), (1, 0, 0))
    b = node([0, 0, 2], np.diag([1.0, 1.0, 1e-4]), (0, 1, 0))
    return PlaneSet([a, b], np.array([0.5, 0.5]))


def test_primitive_at_plane_mean_is_assigned_to_it():
    planes = two_planes()
    scene = make_scene([[0, 0, 0], [0, 0, 2]], descriptors=np.array([[1.0, 0, 0], [0, 1, 0]]))
    assert assign_primitives(scene, planes).tolist() == [0, 1]


def test_descriptor_gate_decides_between_equidistant_planes():
    planes = two_planes()
    scene = make_scene([[0, 0, 1], [0, 0, 1]], descriptors=np.array([[0.0, 1, 0], [1.0, 0, 0]]))
    scores = log_densities(scene.centers, planes)
    assert scores[0, 0] == scores[0, 1]   # geometry alone cannot decide
    assert assign_primitives(scene, planes).tolist() == [1, 0]


def test_far_outlier_with_foreign_descriptor_is_unassigned():
    planes = two_planes()
    scene = make_scene([[5, 5, 5]], descriptors=np.array([[0.0, 0, 1]]))
    assert assign_primitives(scene, planes, theta_assign=0.5).tolist() == [-1]


def test_fronto_segment_leaf_is_flat():
    view = fronto_view(40, 40, f=40.0)
    maps = render(plane_scene([0, 0, -1], 2.0, half=1.6, spacing=0.015), view)
    merged = np.zeros((40, 40), dtype=int)
    merged[10:30, 8:32] = 1
    merged[2:5, 2:5] = 2                     # 9 px, below P_min
    leaves = leaves_for_view(view, merged, maps, p_min=50, eps=1e-6)
    assert len(leaves) == 1
    evals, evecs = np.linalg.eigh(leaves[0].cov)
    assert evals[0] <= 1e-6 + 1e-9
    assert abs(evecs[:, 0] @ [0, 0, 1]) >= 1 - 1e-9


def test_fit_plane_params(rng):
    uv = rng.uniform(-1, 1, (200, 2))
    n = np.array([0.2, -0.3, 0.9])
    n /= np.linalg.norm(n)
    basis = np.linalg.svd(n[None])[2][1:]
    pts = uv @ basis + 0.7 * n
    labels = np.r_[np.zeros(198, int), 1, 1]
    params = fit_plane_params(pts, np.tile(n, (200, 1)), labels, 2)
    assert list(params) == [0]
    nn, d = params[0]
    assert np.abs(pts[:198] @ nn + d).max() <= 1e-9
    np.testing.assert_allclose(nn, n, atol=1e-9)
    noisy = pts + rng.normal(0, 0.01, pts.shape)
    nn, _ = fit_plane_params(noisy, np.tile(n, (200, 1)), labels, 1)[0]
    assert math.degrees(math.acos(min(1.0, nn @ n))) <= 1.0


def test_plane_set_json(tmp_path):
    planes = two_planes()
    planes.params[0] = (np.array([0, 0, 1.0]), -0.0)
    save_plane_set(planes, tmp_path / "p.json", "labels.ply")
    obj = json.loads((tmp_path / "p.json").read_text())
    assert [p["id"] for p in obj["planes"]] == [0, 1]
    assert obj["planes"][1]["normal"] is None and obj["labels_ply"] == "labels.ply"
    assert sum(p["pi"] for p in obj["planes"]) == pytest.approx(1.0, abs=1e-12)
    assert len(obj["planes"][0]["cov"]) == 9
