import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from densernet import decoder
from densernet.data import ManifestEntry, Triplet
from densernet.errors import NumericalError, ShapeError, ValidationError
from densernet.model import DenserNet, PixelDecoder, images_to_batch
from densernet.network import NetworkConfig
from densernet.objective import (CorrespondenceSet, TrainConfig, TrainingData, build_correspondences, gradcheck,
                                 hinge, homography_correspondences, mutual_nn_correspondences, repeatability_term,
                                 repeatability_weights, train, triplet_loss)


def decoded(scores, descs, stride=4, image_id="x"):
    s = torch.as_tensor(np.asarray(scores, dtype=np.float64))
    f = torch.as_tensor(np.asarray(descs, dtype=np.float64))
    h, w = s.shape
    return decoder.DecodedImage(
        image_id, stride,
        decoder.DescriptorField(f, torch.zeros(h, w, dtype=torch.bool)),
        decoder.DetectionField(s, s, torch.zeros(h, w, dtype=torch.long)),
        decoder.GlobalDescriptor(torch.zeros(4, dtype=torch.float64), torch.tensor(True)),
    )


def random_decoded(rng, h=4, w=4, n=8, image_id="x"):
    A = torch.as_tensor(rng.random((h, w, n)))
    return decoder.DecodedImage(image_id, 4, decoder.extract_descriptors(A), decoder.detection_scores(A),
                                decoder.GlobalDescriptor(torch.zeros(4, dtype=torch.float64), torch.tensor(True)))


def corr(rows):
    return CorrespondenceSet(np.asarray(rows, dtype=np.int64).reshape(-1, 4), "homography")


# -- correspondences ---------------------------------------------------------

def test_identity_homography_maps_cells_to_themselves():
    P = homography_correspondences((4, 5), (4, 5), 8, np.eye(3))
    assert len(P) == 20
    assert np.array_equal(P.pairs[:, :2], P.pairs[:, 2:])


def test_translation_by_one_cell():
    H = np.array([[1, 0, 8.0], [0, 1, 0], [0, 0, 1]])
    P = homography_correspondences((3, 3), (3, 3), 8, H)
    assert sorted(map(tuple, P.pairs)) == [(i, j, i, j + 1) for i in range(3) for j in range(2)]


def test_half_cell_shift_drops_off_grid_points():
    # a 0.6-cell shift lands 0.4 from the nearest centre: kept; 0.5 diagonal offset exceeds the radius
    H = np.array([[1, 0, 0.6 * 8], [0, 1, 0], [0, 0, 1]])
    assert len(homography_correspondences((2, 2), (2, 2), 8, H)) == 2
    H = np.array([[1, 0, 4.0], [0, 1, 4.0], [0, 0, 1]])
    assert len(homography_correspondences((2, 2), (2, 2), 8, H)) == 0


def test_homography_oracle_loop(rng):
    H = np.array([[1.05, 0.02, 3.0], [-0.03, 0.97, 5.0], [1e-4, -2e-4, 1.0]])
    P = homography_correspondences((6, 7), (5, 8), 4, H)
    expect = set()
    for i in range(6):
        for j in range(7):
            p = H @ np.array([(j + 0.5) * 4, (i + 0.5) * 4, 1.0])
            u, v = p[0] / p[2] / 4 - 0.5, p[1] / p[2] / 4 - 0.5
            ci, cj = math.floor(v + 0.5), math.floor(u + 0.5)
            if 0 <= ci < 5 and 0 <= cj < 8 and (u - cj) ** 2 + (v - ci) ** 2 <= 0.25:
                expect.add((i, j, ci, cj))
    assert set(map(tuple, P.pairs)) == expect
    assert len(set(map(tuple, P.pairs[:, :2]))) == len(P)


def test_identical_fields_match_their_twins(rng):
    d = random_decoded(rng)
    P = mutual_nn_correspondences(d.descriptors.descriptors, d.descriptors.descriptors)
    assert len(P) == 16 and np.array_equal(P.pairs[:, :2], P.pairs[:, 2:])


def test_mutual_nn_equals_brute_force(rng):
    a = torch.nn.functional.normalize(torch.as_tensor(rng.standard_normal((4, 4, 8))), dim=-1)
    b = torch.nn.functional.normalize(torch.as_tensor(rng.standard_normal((4, 4, 8))), dim=-1)
    P = mutual_nn_correspondences(a, b)
    A, B = a.reshape(16, 8).numpy(), b.reshape(16, 8).numpy()
    D = [[np.linalg.norm(A[x] - B[y]) for y in range(16)] for x in range(16)]
    expect = set()
    for x in range(16):
        y = min(range(16), key=lambda k: D[x][k])
        if min(range(16), key=lambda k: D[k][y]) == x:
            expect.add((x // 4, x % 4, y // 4, y % 4))
    assert set(map(tuple, P.pairs)) == expect


def test_stride_mismatch_rejected(rng):
    a, b = random_decoded(rng), random_decoded(rng)
    b.stride = 8
    with pytest.raises(ShapeError):
        build_correspondences(a, b)


# -- repeatability term -----------------------------------------------------

def test_orthogonal_single_correspondence_is_sqrt2():
    a = decoded([[1.0]], [[[1.0, 0.0]]])
    b = decoded([[1.0]], [[[0.0, 1.0]]])
    r = repeatability_term(corr([0, 0, 0, 0]), a, b)
    assert abs(r.value.item() - math.sqrt(2)) < 1e-9 and not r.degenerate


def test_identical_images_give_zero(rng):
    d = random_decoded(rng)
    P = corr([[i, j, i, j] for i in range(4) for j in range(4)])
    assert repeatability_term(P, d, d).value.item() == 0.0


def test_hand_weighted_example():
    # products 0.09 and 0.01; distances 1 and 2
    u = [1.0, 0.0]
    far = [-1.0, 0.0]
    mid = [0.5, math.sqrt(3) / 2]  # distance 1 from u
    a = decoded([[0.3, 0.1]], [[u, u]])
    b = decoded([[0.3, 0.1]], [[mid, far]])
    r = repeatability_term(corr([[0, 0, 0, 0], [0, 1, 0, 1]]), a, b)
    assert abs(r.value.item() - 1.1) < 1e-12


def test_empty_and_zero_weight_are_degenerate(rng):
    d = random_decoded(rng)
    r = repeatability_term(corr([]), d, d)
    assert r.degenerate and r.value.item() == 0.0
    z = decoded(np.zeros((2, 2)), np.ones((2, 2, 2)) / math.sqrt(2))
    r = repeatability_term(corr([0, 0, 1, 1]), z, z)
    assert r.degenerate and r.value.item() == 0.0


def test_common_score_scaling_leaves_r_unchanged(rng):
    a, b = random_decoded(rng), random_decoded(rng)
    P = mutual_nn_correspondences(a.descriptors.descriptors, b.descriptors.descriptors)
    r1 = repeatability_term(P, a, b).value.item()
    a.detection.scores = a.detection.scores * 7.5
    b.detection.scores = b.detection.scores * 7.5
    assert abs(repeatability_term(P, a, b).value.item() - r1) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16))
def test_weights_and_range(seed, k):
    rng = np.random.default_rng(seed)
    a, b = random_decoded(rng), random_decoded(rng)
    rows = rng.integers(0, 4, size=(k, 4))
    P = corr(rows)
    w = repeatability_weights(P, a, b)
    assert (w >= 0).all() and abs(w.sum().item() - 1) < 1e-10
    r = repeatability_term(P, a, b).value.item()
    assert 0 <= r <= 2


def test_r_is_differentiable_in_both_fields(rng):
    A1 = torch.as_tensor(rng.random((3, 3, 4)), dtype=torch.float64).requires_grad_()
    A2 = torch.as_tensor(rng.random((3, 3, 4)), dtype=torch.float64).requires_grad_()

    def dec(A):
        return decoder.DecodedImage("x", 4, decoder.extract_descriptors(A), decoder.detection_scores(A),
                                    decoder.GlobalDescriptor(torch.zeros(1), torch.tensor(True)))

    P = corr([[0, 0, 1, 1], [2, 2, 0, 1], [1, 2, 2, 2]])
    assert torch.autograd.gradcheck(lambda x, y: repeatability_term(P, dec(x), dec(y)).value, (A1, A2))


# -- hinge -----------------------------------------------------------------

def test_hinge_cases():
    assert hinge(0.1, torch.tensor(0.2), torch.tensor(0.5)).item() == 0.0
    assert abs(hinge(0.1, torch.tensor(0.5, dtype=torch.float64),
                     torch.tensor(0.2, dtype=torch.float64)).item() - 0.4) < 1e-15
    assert hinge(0.1, torch.tensor(0.0), torch.tensor(0.1)).item() == 0.0


def test_query_equal_to_positive(rng):
    q = random_decoded(rng, image_id="q")
    n = random_decoded(rng, image_id="n")
    res = triplet_loss(q, q, n, 0.1, pos_homography=np.eye(3))
    assert res.r_pos.item() == 0.0
    if res.r_neg.item() >= 0.1:
        assert res.loss.item() == 0.0


def test_loss_monotone_in_margin(rng):
    q, p, n = (random_decoded(rng, image_id=c) for c in "qpn")
    vals = [triplet_loss(q, p, n, m).loss.item() for m in np.linspace(0, 2, 9)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_negative_margin_rejected(rng):
    q = random_decoded(rng)
    with pytest.raises(ValidationError):
        triplet_loss(q, q, q, -0.1)


# -- training --------------------------------------------------------------

def test_lr_schedule():
    cfg = TrainConfig()
    expect = [1e-3] * 6 + [5e-4] * 6 + [2.5e-4] * 6 + [1.25e-4] * 6 + [6.25e-5] * 6
    assert [cfg.lr_at(e) for e in range(30)] == expect


def test_train_config_validation():
    for bad in (dict(margin=-1), dict(learning_rate=0), dict(batch_triplets=0), dict(adam_beta1=1.0)):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)
    with pytest.raises(ValidationError):
        TrainConfig.from_dict({"momentum": 0.9})


def _toy_data(small_city, n_triplets=4):
    images = {k: v.astype(np.float32) / 255 for k, v in small_city.images.items()}
    trip = [Triplet("b000_v00", "b000_v01", "b001_v00"), Triplet("b001_v00", "b001_v02", "b002_v01"),
            Triplet("b002_v00", "b002_v03", "b003_v00"), Triplet("b003_v01", "b003_v02", "b000_v03")][:n_triplets]
    manifest = [ManifestEntry(e.id, e.image_path, e.lat, e.lon, 0.0, s) for e, s in
                zip([e for e in small_city.manifest if e.id.endswith(("v00", "v01"))], ["db", "val"] * 4)]
    return TrainingData.build(images, trip, small_city.pairs, manifest)


def test_zero_epochs_leave_model_unchanged(small_city):
    m = DenserNet(NetworkConfig.tiny())
    before = {k: v.clone() for k, v in m.state_dict().items()}
    m, log = train(m, _toy_data(small_city), TrainConfig(epochs=0))
    assert log.epochs == []
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


def test_training_log_and_selection(small_city, tmp_path):
    m = DenserNet(NetworkConfig.tiny())
    m, log = train(m, _toy_data(small_city), TrainConfig(epochs=3, lr_halving_period=2), checkpoint_dir=tmp_path)
    assert [r.learning_rate for r in log.epochs] == [1e-3, 1e-3, 5e-4]
    best = max(r.val_recall_at_5 for r in log.epochs)
    sel = [r for r in log.epochs if r.selected]
    assert len(sel) == 1 and sel[0].val_recall_at_5 == best
    assert (tmp_path / "selected.ckpt").exists() and (tmp_path / "epoch_002.ckpt").exists()
    lines = log.to_jsonl().splitlines()
    assert len(lines) == 3 and '"schema_version": 1' in lines[0]


def test_training_bit_reproducible_in_float64(small_city):
    runs = []
    for _ in range(2):
        m = DenserNet(NetworkConfig.tiny()).double()
        m, log = train(m, _toy_data(small_city), TrainConfig(epochs=2))
        runs.append((log.to_jsonl(), [v.clone() for v in m.state_dict().values()]))
    assert runs[0][0] == runs[1][0]
    assert all(torch.equal(a, b) for a, b in zip(runs[0][1], runs[1][1]))


def test_single_triplet_overfit_halves_the_loss(small_city):
    data = _toy_data(small_city, 1)
    data.val_queries, data.database = (), ()
    m = DenserNet(NetworkConfig.tiny())
    cfg = TrainConfig(epochs=50, augment=False, weight_decay=0.0, margin=0.5)
    m, log = train(m, data, cfg)
    losses = [r.mean_loss for r in log.epochs]
    assert losses[0] > 0
    assert min(losses[1:]) <= 0.5 * losses[0]


def test_non_finite_loss_names_the_triplet(small_city):
    m = DenserNet(NetworkConfig.tiny())
    with torch.no_grad():
        m.theta.fill_(float("nan"))
    with pytest.raises(NumericalError, match=r"triplet \(b00\d_v\d\d, b00\d_v\d\d, b00\d_v\d\d\)"):
        train(m, _toy_data(small_city), TrainConfig(epochs=1))


# -- gradient check ------------------------------------------------------------

def _continuous_triplets(rng, size=32):
    while True:
        q = rng.random((size, size, 3))
        yield q, np.clip(q + 0.01 * rng.standard_normal(q.shape), 0, 1), rng.random((size, size, 3)), np.eye(3)


def test_gradcheck_linear_decoder(rng):
    res = gradcheck(PixelDecoder(theta_noise=0.0), _continuous_triplets(rng), margin=1.0)
    assert res.n_checked >= 200 and res.max_rel_error < 1e-7


def test_gradcheck_inactive_hinge_resamples_then_reports(rng):
    def inactive():
        while True:
            q = rng.random((32, 32, 3))
            yield q, q, 1 - q, np.eye(3)

    with pytest.raises(NumericalError, match="inactive"):
        gradcheck(PixelDecoder(), inactive(), margin=0.0)


def test_gradcheck_inactive_then_active(rng):
    q, other = rng.random((32, 32, 3)), rng.random((32, 32, 3))
    # zero margin: (q, q, q) sits exactly on the hinge, (q, other, q) is strictly active
    cands = iter([(q, q, q, np.eye(3)), (q, other, q, np.eye(3))])
    res = gradcheck(PixelDecoder(), cands, margin=0.0, n_params=20)
    assert res.resamples == 1 and res.max_rel_error < 1e-6


def test_gradcheck_requires_float64():
    with pytest.raises(ValidationError):
        gradcheck(DenserNet(NetworkConfig.tiny()), iter([]))
