#!/usr/bin/env python3
"""
Tests for synthetic rooms, label transfer and augmentation
"""

import time

import numpy as np
import pytest

from errors import EmptyCloud, EmptySpec
from scene_model import GaussianScene, LabeledPointCloud, covariance_3d
from scene_tools import (
    AugmentConfig, RoomSpec, SpatialHash, augment, flip_scene, look_at, rotate_scene, synth_cameras,
    synth_dense_target, synth_scene, synth_vocabulary, transfer_labels,
)


def bare_scene(positions):
    n = len(positions)
    return GaussianScene(
        positions=positions,
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        scales=np.full((n, 3), 0.05),
        opacities=np.full(n, 0.5),
        colors=np.full((n, 3), 0.5),
    )


def test_synth_scene_counts_and_labels():
    spec = RoomSpec(classes=["floor", "wall", "chair"], gaussians_per_class=50)
    scene, cloud = synth_scene(spec, seed=3)
    assert scene.count == 150
    assert cloud.count == 150 * spec.cloud_density
    assert np.bincount(scene.labels).tolist() == [50, 50, 50]
    assert scene.has_labels and not scene.has_semantics
    scene.validate()
    floor = scene.positions[scene.labels == 0]
    np.testing.assert_allclose(floor[:, 2], 0.0)


def test_synth_scene_is_deterministic():
    spec = RoomSpec(classes=["floor", "table"], gaussians_per_class=20)
    a, _ = synth_scene(spec, seed=11)
    b, _ = synth_scene(spec, seed=11)
    c, _ = synth_scene(spec, seed=12)
    np.testing.assert_array_equal(a.positions, b.positions)
    assert not np.array_equal(a.positions, c.positions)


def test_synth_scene_rejects_empty_specs():
    with pytest.raises(EmptySpec):
        synth_scene(RoomSpec(classes=[]), seed=0)
    with pytest.raises(EmptySpec):
        synth_scene(RoomSpec(gaussians_per_class=0), seed=0)
    with pytest.raises(EmptySpec):
        synth_scene(RoomSpec(extent=(1.0, 0.0, 1.0)), seed=0)


def test_transfer_matches_brute_force_nearest_neighbour():
    rng = np.random.default_rng(2024)
    for case in range(20):
        k = int(rng.integers(1, 300))
        n = int(rng.integers(1, 80))
        points = rng.uniform(-3, 3, (k, 3)) * rng.uniform(0.1, 1.0, 3)
        cloud = LabeledPointCloud(points, rng.integers(0, 20, k), rng.integers(0, 5, k))
        queries = rng.uniform(-4, 4, (n, 3))
        labeled = transfer_labels(bare_scene(queries), cloud)

        d2 = ((queries[:, None, :] - cloud.points[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argmin(d2, axis=1)
        np.testing.assert_array_equal(labeled.labels, cloud.labels[nearest], err_msg=f"case {case}")
        np.testing.assert_array_equal(labeled.instances, cloud.instances[nearest])
        assert labeled.has_labels


def test_transfer_breaks_ties_towards_lowest_index():
    points = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    cloud = LabeledPointCloud(points, [4, 5, 6])
    labeled = transfer_labels(bare_scene(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])), cloud)
    assert labeled.labels.tolist() == [4, 4]


def test_far_away_gaussian_is_labeled_quickly():
    rng = np.random.default_rng(7)
    points = rng.uniform(0.0, 1.0, (2000, 3))
    cloud = LabeledPointCloud(points, rng.integers(0, 9, 2000))
    queries = np.array([[6.0, 0.5, 0.5], [0.5, -4.0, 0.2], [0.3, 0.4, 0.5]])
    start = time.perf_counter()
    labeled = transfer_labels(bare_scene(queries), cloud)
    assert time.perf_counter() - start < 5.0
    nearest = np.argmin(((queries[:, None, :] - points[None, :, :]) ** 2).sum(axis=2), axis=1)
    np.testing.assert_array_equal(labeled.labels, cloud.labels[nearest])


def test_hash_shell_covers_exactly_the_cube_surface():
    grid = SpatialHash(np.array([[0.0, 0.0, 0.0]]), 1.0)
    grid.buckets = {(x, y, z): np.array([0]) for x in range(-3, 4) for y in range(-3, 4) for z in range(-3, 4)}
    for r in range(4):
        visited = sum(1 for _ in grid._shell(np.zeros(3, dtype=np.int64), r))
        assert visited == (1 if r == 0 else 24 * r * r + 2)


def test_transfer_from_empty_cloud_fails():
    with pytest.raises(EmptyCloud):
        transfer_labels(bare_scene(np.zeros((2, 3))), LabeledPointCloud(np.zeros((0, 3)), []))


def test_rotation_and_flip_keep_covariances_consistent():
    rng = np.random.default_rng(5)
    q = rng.normal(size=(6, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scene = bare_scene(rng.normal(size=(6, 3))).replace(rotations=q, scales=rng.uniform(0.01, 0.3, (6, 3)))
    cov = covariance_3d(scene.rotations, scene.scales)

    theta = 0.7
    c, s = np.cos(theta), np.sin(theta)
    Rz = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    rotated = rotate_scene(scene, theta)
    np.testing.assert_allclose(rotated.positions, scene.positions @ Rz.T, atol=1e-12)
    np.testing.assert_allclose(covariance_3d(rotated.rotations, rotated.scales), Rz @ cov @ Rz.T, atol=1e-12)

    for axis in (0, 1):
        F = np.eye(3)
        F[axis, axis] = -1.0
        flipped = flip_scene(scene, axis)
        np.testing.assert_allclose(covariance_3d(flipped.rotations, flipped.scales), F @ cov @ F, atol=1e-12)
        np.testing.assert_allclose(flipped.positions, scene.positions @ F, atol=1e-12)


def test_augment_is_seeded_and_keeps_attributes():
    scene, _ = synth_scene(RoomSpec(classes=["floor", "lamp"], gaussians_per_class=30), seed=1)
    a = augment(scene, seed=9)
    b = augment(scene, seed=9)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.labels, scene.labels)
    np.testing.assert_array_equal(a.colors, scene.colors)
    np.testing.assert_array_equal(a.opacities, scene.opacities)

    # a similarity transform scales every pairwise distance by the same factor
    d0 = np.linalg.norm(scene.positions[1:] - scene.positions[0], axis=1)
    d1 = np.linalg.norm(a.positions[1:] - a.positions[0], axis=1)
    ratio = d1 / d0
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-9)
    assert 0.9 - 1e-12 <= ratio[0] <= 1.1 + 1e-12


def test_identity_augment_changes_nothing():
    scene, _ = synth_scene(RoomSpec(gaussians_per_class=10), seed=4)
    out = augment(scene, seed=123, config=AugmentConfig.identity())
    np.testing.assert_array_equal(out.positions, scene.positions)
    np.testing.assert_array_equal(out.rotations, scene.rotations)


def test_synth_vocabulary_is_orthonormal():
    vocab = synth_vocabulary(["a", "b", "c", "d"], dim=32, seed=0, unseen=["d"])
    np.testing.assert_allclose(vocab.embeddings @ vocab.embeddings.T, np.eye(4), atol=1e-12)
    assert vocab.unseen_ids.tolist() == [3]
    with pytest.raises(EmptySpec):
        synth_vocabulary(["a", "b", "c"], dim=2)


def test_look_at_puts_target_on_the_optical_axis():
    w2c = look_at([1.0, 2.0, 1.5], [3.0, 1.0, 1.0])
    p = w2c @ np.array([3.0, 1.0, 1.0, 1.0])
    np.testing.assert_allclose(p[:2], 0.0, atol=1e-12)
    assert p[2] > 0
    cams = synth_cameras((4.0, 3.0, 2.5), 5, 32, 24, seed=0)
    assert len(cams) == 5 and all(c.width == 32 and c.height == 24 for c in cams)


def test_dense_target_follows_labels():
    vocab = synth_vocabulary(["a", "b"], dim=8)
    labels = np.array([[0, 1], [65535, 1]], dtype=np.uint16)
    target = synth_dense_target(labels, vocab)
    np.testing.assert_allclose(target.data[0, 0], vocab.embeddings[0], atol=1e-6)
    assert not target.data[1, 0].any()
