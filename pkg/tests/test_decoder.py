import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from densernet import decoder
from densernet.errors import ShapeError


def loop_scores(A):
    """Per-pixel loops straight from the definition."""
    h, w, n = A.shape
    s = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            k = max(range(n), key=lambda c: (A[i, j, c], -c))
            denom = 0.0
            for ii in range(max(0, i - 1), min(h, i + 2)):
                for jj in range(max(0, j - 1), min(w, j + 2)):
                    denom += math.exp(A[ii, jj, k])
            s[i, j] = math.exp(A[i, j, k]) / denom
    return s / s.sum()


def t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


# -- attention -------------------------------------------------------------

def test_identity_attention_passes_nonnegative_features(rng):
    F = rng.random((3, 4, 5))
    assert np.allclose(decoder.apply_attention(t(F), torch.eye(5, dtype=torch.float64)).numpy(), F)


def test_negative_identity_zeroes_positive_features(rng):
    F = rng.random((3, 4, 5)) + 0.1
    assert not decoder.apply_attention(t(F), -torch.eye(5, dtype=torch.float64)).any()


def test_attention_matches_cell_loop(rng):
    F = rng.standard_normal((2, 2, 2))
    theta = np.array([[1.0, -2.0], [0.5, 3.0]])
    out = decoder.apply_attention(t(F), t(theta)).numpy()
    for i in range(2):
        for j in range(2):
            assert np.allclose(out[i, j], np.maximum(theta @ F[i, j], 0))


def test_attention_shape_mismatch():
    with pytest.raises(ShapeError):
        decoder.apply_attention(torch.zeros(2, 2, 3), torch.eye(4))


# -- descriptors -------------------------------------------------------------

def test_three_four_five():
    d = decoder.extract_descriptors(t([[[3.0, 4.0]]]))
    assert np.allclose(d.descriptors.numpy()[0, 0], [0.6, 0.8])
    assert not d.degenerate.any()


def test_zero_cell_is_flagged():
    d = decoder.extract_descriptors(t([[[0.0, 0.0], [1.0, 0.0]]]))
    assert d.degenerate.tolist() == [[True, False]]
    assert not d.descriptors[0, 0].any()


def test_random_descriptors_unit_norm(rng):
    d = decoder.extract_descriptors(t(rng.random((4, 4, 8))))
    assert np.allclose(np.linalg.norm(d.descriptors.numpy(), axis=-1), 1, atol=1e-6)


# -- detection -----------------------------------------------------------

def test_uniform_map_fractions():
    field = decoder.detection_scores(torch.ones(3, 3, 1, dtype=torch.float64))
    assert np.allclose(field.local.numpy(), [[1 / 4, 1 / 6, 1 / 4], [1 / 6, 1 / 9, 1 / 6], [1 / 4, 1 / 6, 1 / 4]])
    expect = [[9 / 64, 3 / 32, 9 / 64], [3 / 32, 1 / 16, 3 / 32], [9 / 64, 3 / 32, 9 / 64]]
    assert np.allclose(field.scores.numpy(), expect, rtol=0, atol=1e-15)


def test_single_pixel():
    field = decoder.detection_scores(torch.tensor([[[0.3, 2.0]]], dtype=torch.float64))
    assert field.local.item() == 1.0 and field.scores.item() == 1.0 and field.k_star.item() == 1


def test_random_5x5x3_matches_loop(rng):
    A = rng.standard_normal((5, 5, 3))
    assert np.allclose(decoder.detection_scores(t(A)).scores.numpy(), loop_scores(A), rtol=0, atol=1e-10)


def test_argmax_ties_pick_lowest_channel():
    A = np.zeros((2, 2, 4))
    A[..., 1] = A[..., 3] = 1.0
    assert (decoder.detection_scores(t(A)).k_star == 1).all()


def test_max_subtraction_survives_large_values(rng):
    A = rng.standard_normal((4, 4, 2)) + 1000.0
    s = decoder.detection_scores(t(A)).scores.numpy()
    assert np.isfinite(s).all()
    assert np.allclose(s, loop_scores(A - 1000.0), atol=1e-10)


def test_channel_permutation(rng):
    A = rng.standard_normal((4, 5, 6))
    perm = rng.permutation(6)
    a = decoder.detection_scores(t(A))
    b = decoder.detection_scores(t(A[..., perm]))
    assert np.array_equal(perm[b.k_star.numpy()], a.k_star.numpy())
    assert np.allclose(a.scores.numpy(), b.scores.numpy(), atol=1e-14)


def test_batched_equals_per_image(rng):
    A = rng.standard_normal((3, 4, 4, 5))
    batched = decoder.detection_scores(t(A)).scores.numpy()
    for b in range(3):
        assert np.allclose(batched[b], decoder.detection_scores(t(A[b])).scores.numpy(), atol=1e-15)


def test_empty_map_rejected():
    with pytest.raises(ShapeError):
        decoder.detection_scores(torch.zeros(0, 3, 2))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4)),
              elements=st.floats(-10, 10)))
def test_scores_properties(A):
    f = decoder.detection_scores(t(A))
    s, local = f.scores.numpy(), f.local.numpy()
    assert abs(s.sum() - 1) < 1e-6
    assert (local > 0).all() and (local <= 1 + 1e-12).all()
    if A.shape[0] * A.shape[1] > 1:
        # every window holds at least one other positive term
        assert (local < 1).all()
    assert np.allclose(s, loop_scores(A), atol=1e-10)


# -- keypoints -------------------------------------------------------------

def _fields(scores, n=3):
    s = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    h, w = s.shape
    desc = torch.nn.functional.normalize(torch.ones(h, w, n, dtype=torch.float64), dim=-1)
    return (decoder.DetectionField(s, s, torch.zeros(h, w, dtype=torch.long)),
            decoder.DescriptorField(desc, torch.zeros(h, w, dtype=torch.bool)))


def test_single_spike():
    s = np.full((5, 6), 0.01)
    s[2, 3] = 0.5
    kps = decoder.select_keypoints(*_fields(s), max_count=10, nms_radius=1, stride=4)
    assert [k.grid for k in kps] == [(2, 3)]
    assert kps[0].pixel == (14.0, 10.0)


def test_uniform_field_has_no_strict_maxima():
    assert decoder.select_keypoints(*_fields(np.full((4, 4), 1 / 16)), max_count=5, nms_radius=1) == []


def test_keypoints_match_brute_force(rng):
    s = rng.random((7, 9))
    kps = decoder.select_keypoints(*_fields(s), max_count=10, nms_radius=1)
    brute = []
    for i in range(7):
        for j in range(9):
            others = [s[a, b] for a in range(max(0, i - 1), min(7, i + 2))
                      for b in range(max(0, j - 1), min(9, j + 2)) if (a, b) != (i, j)]
            if all(s[i, j] > o for o in others):
                brute.append((-s[i, j], i, j))
    assert [k.grid for k in kps] == [(i, j) for _, i, j in sorted(brute)[:10]]


def test_equal_score_ties_order_by_position():
    s = np.zeros((5, 5))
    s[3, 1] = s[1, 3] = s[1, 1] = 0.3
    kps = decoder.select_keypoints(*_fields(s), max_count=3, nms_radius=1)
    assert [k.grid for k in kps] == [(1, 1), (1, 3), (3, 1)]


def test_keypoint_selection_deterministic(rng):
    f = _fields(rng.random((6, 6)))
    a = decoder.select_keypoints(*f, max_count=5, nms_radius=2)
    b = decoder.select_keypoints(*f, max_count=5, nms_radius=2)
    assert [(k.grid, k.score) for k in a] == [(k.grid, k.score) for k in b]


def test_keypoint_args_validated():
    with pytest.raises(ValueError):
        decoder.select_keypoints(*_fields(np.ones((2, 2))), max_count=0, nms_radius=1)


# -- global descriptor -------------------------------------------------------

def test_single_pixel_global_descriptor():
    f = torch.tensor([[[0.6, 0.8]]], dtype=torch.float64)
    descs = decoder.extract_descriptors(f)
    field = decoder.detection_scores(f)
    P = torch.zeros(4, 2, dtype=torch.float64)
    P[:2] = torch.eye(2)
    g = decoder.global_descriptor(descs, field, P)
    assert np.allclose(g.vector.numpy(), [0.6, 0.8, 0, 0])


def test_opposite_descriptors_cancel():
    descs = decoder.DescriptorField(torch.tensor([[[1.0, 0.0], [-1.0, 0.0]]], dtype=torch.float64),
                                    torch.zeros(1, 2, dtype=torch.bool))
    s = torch.full((1, 2), 0.5, dtype=torch.float64)
    g = decoder.global_descriptor(descs, decoder.DetectionField(s, s, torch.zeros(1, 2, dtype=torch.long)),
                                  torch.eye(2, dtype=torch.float64))
    assert bool(g.degenerate) and not g.vector.any()


def test_global_descriptor_matches_loop(rng):
    A = rng.random((4, 4, 6))
    P = rng.standard_normal((8, 6))
    descs = decoder.extract_descriptors(t(A))
    field = decoder.detection_scores(t(A))
    g = decoder.global_descriptor(descs, field, t(P)).vector.numpy()
    s, f = field.scores.numpy(), descs.descriptors.numpy()
    pooled = np.zeros(6)
    for i in range(4):
        for j in range(4):
            pooled += s[i, j] * f[i, j]
    ref = P @ pooled
    assert np.allclose(g, ref / np.linalg.norm(ref), atol=1e-10)
    assert abs(np.linalg.norm(g) - 1) < 1e-6


def test_projection_shape_checked():
    descs = decoder.extract_descriptors(torch.ones(2, 2, 3))
    with pytest.raises(ShapeError):
        decoder.global_descriptor(descs, decoder.detection_scores(torch.ones(2, 2, 3)), torch.eye(4))
