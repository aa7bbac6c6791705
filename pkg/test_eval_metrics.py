#!/usr/bin/env python3
"""
Tests for text-query classification, the confusion matrix and protocol evaluation
"""

import json
import math

import numpy as np
import pytest

import autodiff as ad
from ccl_losses import LossConfig, decoder_shapes
from errors import EmptySplit, LengthMismatch, MissingSemantics, UnknownMode
from eval_metrics import (
    PROTOCOLS, ConfusionMatrix, classify_gaussians, classify_pixels, evaluate, miou, report_from_confusion,
    without_rows,
)
from gsr_net import GsrConfig, predict_semantics
from scene_model import IGNORE_LABEL, load_scene
from scene_tools import synth_vocabulary
from trainer import SceneSet, TrainConfig, checkpoint_entries, init_all_params, load_manifest, resolve_vocabulary


def eval_config():
    return TrainConfig(gsr=GsrConfig(voxel_size=0.5, adapter_hidden=12), loss=LossConfig(decoder_hidden=12))


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    from trainer import build_toy_fixture

    out = tmp_path_factory.mktemp("eval_toy")
    manifest = build_toy_fixture(out, seed=2, n_train=2, n_val=1, n_cross=1, gaussians_per_class=16, views=1,
                                 novel_views=1, width=16, height=12, embedding_dim=16)
    checkpoint = out / "init.sck"
    ad.save_checkpoint(checkpoint_entries(init_all_params(eval_config(), 16)), checkpoint)
    return manifest, checkpoint


def test_miou_small_example():
    report = miou([0, 0, 1, 1, 2], [0, 1, 1, 1, 2], 3)
    np.testing.assert_allclose(report.iou, [0.5, 2.0 / 3.0, 1.0])
    assert report.miou == pytest.approx((0.5 + 2.0 / 3.0 + 1.0) / 3.0)
    assert report.accuracy == pytest.approx(0.8)


def test_perfect_prediction_scores_one():
    labels = np.random.default_rng(0).integers(0, 6, 200)
    assert miou(labels, labels, 6).miou == 1.0


def test_confusion_matrix_matches_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n_class = int(rng.integers(1, 8))
        n = int(rng.integers(0, 60))
        labels = rng.integers(-1, n_class + 1, n)
        preds = rng.integers(-1, n_class + 1, n)
        expected = np.zeros((n_class, n_class + 1), dtype=np.int64)
        for p, g in zip(preds, labels):
            if 0 <= g < n_class:
                expected[g, p if 0 <= p < n_class else n_class] += 1
        cm = ConfusionMatrix(n_class)
        cm.add_batch(preds, labels)
        np.testing.assert_array_equal(cm.matrix, expected)


def test_ignore_label_rows_are_skipped():
    gt = np.array([0, 1, IGNORE_LABEL, IGNORE_LABEL])
    report = miou([0, 1, 0, 1], gt, 2)
    assert report.miou == 1.0
    assert int(report.tp.sum() + report.fn.sum()) == 2


def test_missing_predictions_count_as_false_negatives():
    cm = ConfusionMatrix(2)
    cm.add_batch(np.array([0, IGNORE_LABEL, 1]), np.array([0, 0, 1]))
    tp, fp, fn = cm.counts()
    assert tp.tolist() == [1, 1] and fp.tolist() == [0, 0] and fn.tolist() == [1, 0]
    assert report_from_confusion(cm).iou[0] == 0.5


def test_zero_support_rules():
    # class 2 never appears; class 3 is only ever predicted
    report = miou([0, 1, 3, 1], [0, 1, 1, 1], 4)
    assert math.isnan(report.iou[2])
    assert report.iou[3] == 0.0
    assert report.scored == [0, 1, 3]
    assert report.miou == pytest.approx((1.0 + 2.0 / 3.0 + 0.0) / 3.0)


def test_subset_mean_ignores_classes_outside_the_subset():
    cm = ConfusionMatrix(3)
    cm.add_batch([0, 1, 2, 2], [0, 2, 2, 1])
    full = report_from_confusion(cm)
    only = report_from_confusion(cm, classes=[0, 2])
    assert only.scored == [0, 2]
    assert only.miou == pytest.approx((full.iou[0] + full.iou[2]) / 2.0)


def test_seen_class_score_ignores_unseen_ground_truth():
    # every unseen (class 2) position was predicted as class 0
    cm = ConfusionMatrix(3)
    cm.add_batch([0, 1, 0, 0, 0], [0, 1, 2, 2, 2])
    assert report_from_confusion(cm, classes=[0, 1]).iou[0] == pytest.approx(0.25)
    seen = report_from_confusion(without_rows(cm, [2]), classes=[0, 1])
    assert seen.iou.tolist()[:2] == [1.0, 1.0] and seen.miou == 1.0
    assert cm.matrix[2].sum() == 3


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        miou([0, 1], [0, 1, 1], 2)
    with pytest.raises(LengthMismatch):
        ConfusionMatrix(2).generate(np.zeros(3), np.zeros(2))


def test_ties_resolve_to_the_lowest_class_id():
    vocab = synth_vocabulary(["a", "b", "c"], dim=8, seed=0)
    zero = {k: np.zeros(s) for k, s in decoder_shapes(16, 4, 8).items()}
    semantic_map = np.random.default_rng(2).normal(size=(2, 3, 16))
    assert not classify_pixels(semantic_map, vocab, zero).any()


def test_pixels_below_alpha_threshold_get_no_label():
    vocab = synth_vocabulary(["a", "b"], dim=8, seed=1)
    params = {k: np.zeros(s) for k, s in decoder_shapes(16, 4, 8).items()}
    params["phi.b2"] = vocab.embeddings[1].copy()
    alpha = np.array([[0.9, 0.2], [0.5, 0.49]])
    labels = classify_pixels(np.zeros((2, 2, 16)), vocab, params, alpha=alpha, alpha_min=0.5)
    assert labels.tolist() == [[1, IGNORE_LABEL], [1, IGNORE_LABEL]]


def test_classify_gaussians_needs_semantics(toy):
    manifest, _ = toy
    scene = load_scene(load_manifest(manifest).split("val")[0].scene)
    vocab = resolve_vocabulary(load_manifest(manifest))
    with pytest.raises(MissingSemantics):
        classify_gaussians(scene.replace(has_semantics=False), vocab, init_all_params(eval_config(), 16))


def test_csa3d_matches_direct_classification(toy):
    manifest_path, checkpoint = toy
    config = eval_config()
    report = evaluate(checkpoint, manifest_path, "CSA3D", config)

    manifest = load_manifest(manifest_path)
    vocab = resolve_vocabulary(manifest)
    params = init_all_params(config, 16)
    scene = SceneSet(manifest.split("val")).scenes[0]
    pred = classify_gaussians(predict_semantics(scene, params, config.gsr), vocab, params)
    direct = miou(pred, scene.labels, vocab.size)
    assert report.protocol == "CSA3D"
    np.testing.assert_array_equal(report.tp, direct.tp)
    assert report.miou == direct.miou or (math.isnan(report.miou) and math.isnan(direct.miou))


def test_ova_scores_unseen_classes_only(toy):
    manifest_path, checkpoint = toy
    vocab = resolve_vocabulary(load_manifest(manifest_path), unseen=["lamp"])
    report = evaluate(checkpoint, manifest_path, "OVA3D", eval_config(), vocab)
    assert set(report.scored) <= {4}
    assert "seen_miou" in report.extra
    with pytest.raises(EmptySplit):
        evaluate(checkpoint, manifest_path, "OVA3D", eval_config())


def test_pixel_protocols_run_on_their_splits(toy):
    manifest_path, checkpoint = toy
    for protocol in ("CSA2D", "NVA", "CDA2D"):
        report = evaluate(checkpoint, manifest_path, protocol, eval_config())
        assert report.protocol == protocol
        assert int(report.tp.sum() + report.fn.sum()) > 0


def test_cda_restricts_to_training_labels(toy):
    manifest_path, checkpoint = toy
    report = evaluate(checkpoint, manifest_path, "CDA3D", eval_config())
    train_labels = set()
    for scene in SceneSet(load_manifest(manifest_path).split("train")).scenes:
        train_labels.update(int(v) for v in np.unique(scene.labels))
    assert set(report.scored) <= train_labels


def test_unknown_protocol(toy):
    manifest_path, checkpoint = toy
    assert "CSA3D" in PROTOCOLS
    with pytest.raises(UnknownMode):
        evaluate(checkpoint, manifest_path, "XYZ", eval_config())


def test_report_json_and_table(tmp_path):
    report = miou([0, 1, 3, 1], [0, 1, 1, 1], 4, names=["floor", "wall", "chair", "table"], protocol="CSA3D")
    report.to_json(tmp_path / "report.json")
    data = json.loads((tmp_path / "report.json").read_text())
    assert data["protocol"] == "CSA3D"
    assert data["per_class"][2]["iou"] is None and data["per_class"][2]["scored"] is False
    assert data["per_class"][3]["name"] == "table"
    table = report.table()
    assert list(table.index) == [0, 1, 2, 3]
    assert "wall" in report.format_table()


def test_dominated_pixels_agree_with_the_gaussian_across_views():
    from ccl_losses import init_decoders
    from rasterizer import render
    from scene_model import Camera, GaussianScene
    from scene_tools import look_at

    rng = np.random.default_rng(5)
    vocab = synth_vocabulary(["a", "b", "c", "d", "e"], dim=8, seed=3)
    params = init_decoders(4, hidden=12, embedding_dim=8)
    params["phi.b1"] = rng.normal(scale=0.2, size=params["phi.b1"].shape)
    params["phi.b2"] = rng.normal(scale=0.2, size=params["phi.b2"].shape)

    def label_of(rows):
        return classify_pixels(np.asarray(rows)[:, None, :], vocab, params)[:, 0]

    # keep vectors whose label survives any blend with weight >= 0.5 on themselves
    weights = [(a, b) for a in np.linspace(0.5, 1.0, 11) for b in np.linspace(0.0, 1.0 - a, 6)]

    def decisive(candidate, others):
        own = label_of([candidate])[0]
        for other in [np.zeros_like(candidate)] + others:
            if (label_of([a * candidate + b * other for a, b in weights]) != own).any():
                return False
        return True

    semantics = []
    for _ in range(2000):
        candidate = rng.normal(scale=3.0, size=16)
        if decisive(candidate, semantics) and all(decisive(s, [candidate]) for s in semantics):
            semantics.append(candidate)
        if len(semantics) == 12:
            break
    assert len(semantics) == 12
    grid = np.stack(np.meshgrid([-1.0, 0.0, 1.0], [-0.5, 0.5], [-0.5, 0.5], indexing="ij"), -1).reshape(-1, 3)
    scene = GaussianScene(
        positions=grid + rng.uniform(-0.15, 0.15, size=grid.shape),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (12, 1)),
        scales=np.full((12, 3), 0.15),
        opacities=np.full(12, 0.95),
        colors=np.full((12, 3), 0.5),
        semantics=np.array(semantics),
        has_semantics=True,
    )
    expected = classify_gaussians(scene, vocab, params)
    assert np.unique(expected).size >= 2

    checked = 0
    for _ in range(8):
        direction = rng.normal(size=3)
        eye = 6.0 * direction / np.linalg.norm(direction)
        cam = Camera(60.0, 60.0, 24.0, 18.0, 48, 36, look_at(eye, [0.0, 0.0, 0.0]))
        out = render(scene, cam, channels=("semantic", "alpha"))
        labels = classify_pixels(out.semantic_map, vocab, params, alpha=out.alpha, alpha_min=0.5).reshape(-1)
        dominant = out.contrib.weight >= 0.5
        pixels = out.contrib.pixel[dominant]
        owners = out.contrib.gaussian[dominant]
        np.testing.assert_array_equal(labels[pixels], expected[owners])
        checked += pixels.size
    assert checked > 0
