#!/usr/bin/env python3
"""
Tests for the decoders and the three consistency terms
"""

import math

import numpy as np
import pytest

import autodiff as ad
from ccl_losses import (
    LossConfig, compute_losses, decode, decoder_shapes, init_decoders, loss_2d_to_text, loss_3d_to_text,
    loss_cosine, text_logits, total_loss,
)
from errors import DimensionMismatch, IndexOutOfRange, NonFinite, NoValidTargets
from scene_model import IGNORE_LABEL, DenseTargetMap
from scene_tools import synth_vocabulary

DIM = 8


def vocab(names=("floor", "wall", "chair", "table", "lamp"), unseen=()):
    return synth_vocabulary(list(names), dim=DIM, seed=0, unseen=unseen)


def zero_decoders(hidden=4):
    return {k: np.zeros(s) for k, s in decoder_shapes(16, hidden, DIM).items()}


def constant_psi(vector, hidden=4):
    params = zero_decoders(hidden)
    params["psi.b2"] = np.asarray(vector, dtype=np.float64)
    return params


def test_zero_decoder_gives_log_m():
    v = vocab()
    feats = np.random.default_rng(0).normal(size=(6, 16))
    loss = loss_3d_to_text(feats, [0, 1, 2, 3, 4, 0], v, zero_decoders())
    assert loss.item() == pytest.approx(math.log(5))


def test_unseen_classes_shrink_the_softmax_and_drop_their_rows():
    v = vocab(unseen=("lamp", "table"))
    feats = np.random.default_rng(1).normal(size=(5, 16))
    loss = loss_3d_to_text(feats, [0, 1, 2, 3, 4], v, zero_decoders())
    assert loss.item() == pytest.approx(math.log(3))


def test_cross_entropy_matches_numpy_oracle():
    v = vocab()
    params = init_decoders(3, hidden=12, embedding_dim=DIM)
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(7, 16))
    labels = np.array([0, 4, IGNORE_LABEL, 2, 2, 1, 3])
    config = LossConfig(temperature=0.5)

    hidden = np.maximum(feats @ params["phi.w1"] + params["phi.b1"], 0.0)
    z = hidden @ params["phi.w2"] + params["phi.b2"]
    logits = z @ v.embeddings.T / 0.5
    keep = labels != IGNORE_LABEL
    lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) + logits.max(axis=1)
    expected = (lse - logits[np.arange(7), np.where(keep, labels, 0)])[keep].mean()

    assert loss_3d_to_text(feats, labels, v, params, config).item() == pytest.approx(expected, rel=1e-12)
    summed = loss_3d_to_text(feats, labels, v, params, LossConfig(temperature=0.5, reduction="sum"))
    assert summed.item() == pytest.approx(expected * keep.sum(), rel=1e-12)


def test_pixel_term_equals_gaussian_term_on_the_same_rows():
    v = vocab()
    params = init_decoders(4, hidden=12, embedding_dim=DIM)
    rng = np.random.default_rng(3)
    semantic_map = rng.normal(size=(3, 4, 16))
    label_map = rng.integers(0, 5, (3, 4)).astype(np.uint16)
    label_map[0, 0] = IGNORE_LABEL
    two_d = loss_2d_to_text(semantic_map, label_map, v, params).item()
    three_d = loss_3d_to_text(semantic_map.reshape(12, 16), label_map.reshape(-1), v, params).item()
    assert two_d == three_d


def test_no_valid_targets_is_an_error_for_the_bare_term():
    v = vocab(unseen=("lamp",))
    with pytest.raises(NoValidTargets):
        loss_3d_to_text(np.zeros((3, 16)), [IGNORE_LABEL, 4, 4], v, zero_decoders())
    with pytest.raises(IndexOutOfRange):
        loss_3d_to_text(np.zeros((2, 16)), [0, 9], v, zero_decoders())


def test_cosine_term_extremes():
    v = vocab()
    e = v.embeddings[2]
    aligned = DenseTargetMap(np.tile(e, (2, 3, 1)))
    semantic_map = np.random.default_rng(4).normal(size=(2, 3, 16))
    assert loss_cosine(semantic_map, aligned, constant_psi(e)).item() == pytest.approx(-1.0)
    assert loss_cosine(semantic_map, aligned, constant_psi(-e)).item() == pytest.approx(1.0)
    orthogonal = constant_psi(v.embeddings[0])
    assert loss_cosine(semantic_map, aligned, orthogonal).item() == pytest.approx(0.0, abs=1e-6)


def test_cosine_term_ignores_target_scale_and_empty_pixels():
    v = vocab()
    params = init_decoders(5, hidden=12, embedding_dim=DIM)
    rng = np.random.default_rng(5)
    semantic_map = rng.normal(size=(3, 3, 16))
    target = rng.normal(size=(3, 3, DIM))
    base = loss_cosine(semantic_map, DenseTargetMap(target), params).item()
    scaled = loss_cosine(semantic_map, DenseTargetMap(target * 7.0), params).item()
    assert scaled == pytest.approx(base, rel=1e-6)

    holes = target.copy()
    holes[0, :] = 0.0
    partial = loss_cosine(semantic_map, DenseTargetMap(holes), params).item()
    only_rows = loss_cosine(semantic_map[1:], DenseTargetMap(target[1:]), params).item()
    assert partial == pytest.approx(only_rows, rel=1e-6)

    empty = loss_cosine(semantic_map, DenseTargetMap(np.zeros((3, 3, DIM))), params)
    assert empty.item() == 0.0


def test_cosine_term_checks_dimensions():
    params = init_decoders(6, hidden=4, embedding_dim=DIM)
    with pytest.raises(DimensionMismatch):
        loss_cosine(np.zeros((2, 2, 16)), DenseTargetMap(np.ones((2, 2, DIM + 1))), params)
    with pytest.raises(DimensionMismatch):
        loss_cosine(np.zeros((2, 2, 16)), DenseTargetMap(np.ones((3, 2, DIM))), params)


def test_total_is_the_plain_sum():
    parts = {"l_3d_text": ad.constant(1.25), "l_2d_text": ad.constant(0.5), "l_cosine": ad.constant(-0.75)}
    breakdown = total_loss(parts)
    assert breakdown.total == 1.0
    assert breakdown.as_row() == {"l3d": 1.25, "l2d": 0.5, "lcos": -0.75, "total": 1.0}
    assert total_loss({"l_3d_text": 2.0}).total == 2.0


def test_total_refuses_non_finite_terms():
    with pytest.raises(NonFinite) as info:
        total_loss({"l_3d_text": float("nan"), "l_2d_text": 1.0}, {"gaussians": 3})
    assert info.value.diagnostics["counts"] == {"gaussians": 3}


def test_compute_losses_turns_missing_targets_into_zero():
    v = vocab(unseen=("lamp",))
    params = init_decoders(7, hidden=8, embedding_dim=DIM)
    rng = np.random.default_rng(6)
    sem = ad.constant(rng.normal(size=(4, 16)))
    smap = ad.constant(rng.normal(size=(6, 16)))
    breakdown = compute_losses(sem, smap, np.array([4, 4, IGNORE_LABEL, 4]), np.full(6, IGNORE_LABEL), None,
                               v, params)
    assert breakdown.total == 0.0
    assert breakdown.counts == {"gaussians": 0, "pixels": 0, "cosine_pixels": 0}


def test_compute_losses_respects_switches_and_differentiates():
    v = vocab()
    params = ad.as_parameters(init_decoders(8, hidden=8, embedding_dim=DIM))
    rng = np.random.default_rng(7)
    sem = ad.parameter(rng.normal(size=(5, 16)), name="sem")
    smap = ad.constant(rng.normal(size=(6, 16)))
    labels = np.array([0, 1, 2, 3, 4])
    label_map = np.array([0, 0, 1, 1, 2, IGNORE_LABEL])
    target = DenseTargetMap(rng.normal(size=(2, 3, DIM)))

    full = compute_losses(sem, smap, labels, label_map, target, v, params)
    assert full.counts == {"gaussians": 5, "pixels": 5, "cosine_pixels": 6}
    assert full.total == pytest.approx(full.l_3d_text + full.l_2d_text + full.l_cosine)
    grads = ad.backward(full.total_tensor)
    assert np.abs(grads.of(sem)).sum() > 0
    assert np.abs(grads.of(params["psi.w2"])).sum() > 0

    only_3d = compute_losses(sem, smap, labels, label_map, target, v, params,
                             LossConfig(use_2d_text=False, use_cosine=False))
    assert only_3d.l_2d_text == 0.0 and only_3d.l_cosine == 0.0
    assert only_3d.l_3d_text == pytest.approx(full.l_3d_text)


def test_loss_gradients_pass_grad_check():
    v = vocab()
    decoders = ad.as_parameters(init_decoders(9, hidden=6, embedding_dim=DIM))
    rng = np.random.default_rng(8)
    sem = ad.parameter(rng.normal(size=(4, 16)), name="sem")
    target = DenseTargetMap(rng.normal(size=(2, 2, DIM)))
    labels = np.array([0, 3, 1, 1])
    names = list(decoders)

    def f(sem, *tensors):
        params = dict(zip(names, tensors))
        parts = {
            "l_3d_text": loss_3d_to_text(sem, labels, v, params),
            "l_cosine": loss_cosine(sem, target, params),
        }
        return total_loss(parts).total_tensor

    report = ad.grad_check(f, [sem] + [decoders[n] for n in names], h=1e-6, tol=1e-4, max_coords=10, seed=1)
    assert report.passed, str(report)
    assert report.checked > 0


def test_text_logits_checks_width():
    v = vocab()
    with pytest.raises(DimensionMismatch):
        text_logits(ad.constant(np.zeros((2, DIM + 2))), v)
    z = decode(init_decoders(0, hidden=4, embedding_dim=DIM), "phi", np.zeros((2, 16)))
    assert text_logits(z, v, class_rows=np.array([1, 3])).shape == (2, 2)
