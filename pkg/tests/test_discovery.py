"""Tests for clustering: exemplar propagation, mixture fit, refine and merge."""

import numpy as np
import pytest

from ccdkit.discovery import (
    APConfig,
    affinity_propagation,
    calibrate_merge_threshold,
    fine_discovery,
    gmm_fit,
    joint_discover,
    merge_classes,
)
from ccdkit.evaluation import clustering_accuracy
from ccdkit.numerics import make_rng


def gaussian_blobs(rng, centers, n_per, std):
    centers = np.asarray(centers, dtype=np.float64)
    X = np.concatenate([
        c + std * rng.normal(size=(n_per, centers.shape[1])) for c in centers
    ])
    y = np.repeat(np.arange(len(centers)), n_per)
    return X, y


def test_ap_three_tight_blobs():
    rng = make_rng(0)
    X, _ = gaussian_blobs(rng, [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 30, 0.05)
    res = affinity_propagation(X, APConfig(preference="median"))
    assert len(res.exemplars) == 3


def test_ap_degenerate_identical_points():
    X = np.ones((12, 3))
    res = affinity_propagation(X)
    assert len(res.exemplars) == 1
    assert np.all(res.labels == res.labels[0])


def test_ap_two_blob_assignment_agreement():
    rng = make_rng(1)
    X, y = gaussian_blobs(rng, [[0.0, 0.0], [3.0, 0.0]], 30, 0.1)
    res = affinity_propagation(X, APConfig(preference="median"))
    # relabel by majority vote inside each found cluster
    agreement = clustering_accuracy(y, res.labels)
    assert agreement >= 0.98


def test_ap_labels_point_to_exemplars():
    rng = make_rng(2)
    X, _ = gaussian_blobs(rng, [[0.0, 0.0], [2.0, 2.0]], 20, 0.1)
    res = affinity_propagation(X)
    assert set(res.labels.tolist()) == set(range(len(res.exemplars)))
    for i, ex in enumerate(res.exemplars):
        assert res.labels[ex] == i


def test_ap_quantile_preference_controls_granularity():
    rng = make_rng(3)
    X, _ = gaussian_blobs(rng, [[0.0, 0.0], [1.5, 0.0], [0.0, 1.5]], 25, 0.08)
    low = affinity_propagation(X, APConfig(preference_quantile=0.0))
    high = affinity_propagation(X, APConfig(preference_quantile=0.9))
    assert len(low.exemplars) <= len(high.exemplars)


def test_ap_rejects_empty_input():
    with pytest.raises(ValueError):
        affinity_propagation(np.zeros((0, 2)))


def test_gmm_two_far_blobs_confident_responsibilities():
    rng = make_rng(4)
    std = 0.1
    X, y = gaussian_blobs(rng, [[0.0, 0.0], [1.0, 0.0]], 40, std)  # 10 std apart
    model, resp, hist = gmm_fit(X, K=2, rng=make_rng(5))
    own = resp[np.arange(len(X)), np.argmax(resp, axis=1)]
    assert np.all(own >= 0.99)
    # each blob maps to one component
    hard = np.argmax(resp, axis=1)
    assert clustering_accuracy(y, hard) == 1.0


def test_gmm_single_component_closed_form():
    rng = make_rng(6)
    X = rng.normal(size=(50, 3)) * 2.0 + 1.0
    model, resp, _ = gmm_fit(X, K=1, rng=make_rng(7))
    assert np.allclose(model.means[0], X.mean(axis=0), atol=1e-9)
    assert np.allclose(model.variances[0], X.var(axis=0), atol=1e-9)
    assert np.allclose(resp, 1.0)
    assert model.weights[0] == pytest.approx(1.0, abs=1e-12)


def test_gmm_loglik_non_decreasing():
    for seed in range(5):
        rng = make_rng(100 + seed)
        X, _ = gaussian_blobs(rng, [[0.0, 0.0], [0.8, 0.3], [0.1, 1.0]], 25, 0.2)
        _, _, hist = gmm_fit(X, K=3, rng=make_rng(200 + seed))
        diffs = np.diff(np.asarray(hist))
        assert np.all(diffs >= -1e-9)


def test_gmm_means_init_respected():
    rng = make_rng(8)
    X, _ = gaussian_blobs(rng, [[0.0, 0.0], [5.0, 0.0]], 30, 0.1)
    init = np.array([[0.1, 0.0], [4.9, 0.0]])
    model, _, _ = gmm_fit(X, K=2, rng=make_rng(9), means_init=init)
    order = np.argsort(model.means[:, 0])
    assert np.allclose(model.means[order][0], [0.0, 0.0], atol=0.1)
    assert np.allclose(model.means[order][1], [5.0, 0.0], atol=0.1)


def test_fine_keeps_nearest_to_initial_mean():
    X = np.array([[0.0], [1.0], [5.0]])
    labels = np.array([0, 0, 0])
    # initial mean 2.0: distances 2, 1, 3 so the k=2 keepers are {0, 1}
    out, means = fine_discovery(X, labels, k=2)
    assert out.tolist() == [0, 0, -1]
    assert means[0][0] == pytest.approx(0.5, abs=1e-12)


def test_fine_small_cluster_untouched():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    labels = np.array([3, 3])
    out, means = fine_discovery(X, labels, k=2)
    assert out.tolist() == [3, 3]
    assert np.allclose(means[3], [0.5, 0.5])


def test_fine_matches_brute_force():
    for trial in range(20):
        rng = make_rng(300 + trial)
        X = rng.normal(size=(25, 3))
        labels = np.zeros(25, dtype=np.int64)
        k = 8
        out, _ = fine_discovery(X, labels, k=k)
        mean = X.mean(axis=0)
        order = np.argsort(np.linalg.norm(X - mean, axis=1), kind="stable")
        expect = set(order[:k].tolist())
        assert set(np.flatnonzero(out == 0).tolist()) == expect


def test_fine_ignores_discarded_entries():
    X = np.array([[0.0], [1.0], [9.0]])
    labels = np.array([0, 0, -1])
    out, means = fine_discovery(X, labels, k=5)
    assert out.tolist() == [0, 0, -1]
    assert means[0][0] == pytest.approx(0.5)
    with pytest.raises(ValueError):
        fine_discovery(X, labels, k=0)


def test_merge_two_close_clusters():
    X = np.array([[0.0], [0.0], [0.5], [0.5]])
    labels = np.array([0, 0, 1, 1])
    out, means = merge_classes(X, labels, lam=1.0)
    assert len(set(out.tolist())) == 1
    assert means[0][0] == pytest.approx(0.25)


def test_merge_zero_threshold_is_identity():
    X = np.array([[0.0], [0.5]])
    labels = np.array([0, 1])
    out, _ = merge_classes(X, labels, lam=0.0)
    assert out.tolist() == [0, 1]


def test_merge_chain_transitive_closure():
    # chain a-b-c: 0.9 and 0.9 apart, endpoints 1.8 apart; threshold 1
    # merges all three through the middle cluster
    X = np.array([[0.0], [0.9], [1.8]])
    labels = np.array([0, 1, 2])
    out, means = merge_classes(X, labels, lam=1.0)
    assert len(set(out.tolist())) == 1
    assert means[0][0] == pytest.approx(0.9)


def test_merge_idempotent():
    rng = make_rng(10)
    X = np.concatenate([rng.normal(size=(20, 2)) * 0.1,
                        rng.normal(size=(20, 2)) * 0.1 + 5.0])
    labels = np.repeat([0, 1], 20)
    once, _ = merge_classes(X, labels, lam=1.0)
    twice, _ = merge_classes(X, once, lam=1.0)
    assert np.array_equal(once, twice)


def test_merge_count_non_increasing_in_threshold():
    rng = make_rng(11)
    X = rng.normal(size=(40, 2)) * 2.0
    labels = make_rng(12).integers(0, 8, size=40)
    counts = []
    for lam in np.linspace(0.0, 6.0, 15):
        out, _ = merge_classes(X, labels, lam=float(lam))
        counts.append(len(set(out.tolist())))
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    with pytest.raises(ValueError):
        merge_classes(X, labels, lam=-1.0)


def test_calibration_recovers_known_class_count():
    rng = make_rng(13)
    centers = make_rng(14).normal(size=(6, 4)) * 3.0
    X = np.concatenate([c + 0.1 * rng.normal(size=(20, 4)) for c in centers])
    lam = calibrate_merge_threshold(X, known_class_count=6, k=10,
                                    confidence_cut=0.0, rng=make_rng(15))
    res = joint_discover(X, lam=lam, k=10, confidence_cut=0.0, rng=make_rng(16))
    assert res.cluster_count == 6


def test_calibration_zero_grid_means_no_merge():
    rng = make_rng(17)
    X = rng.normal(size=(30, 2))
    lam = calibrate_merge_threshold(X, known_class_count=3, k=5,
                                    confidence_cut=0.0, rng=make_rng(18),
                                    grid=np.array([0.0]))
    assert lam == 0.0


def test_joint_discover_four_separated_classes():
    rng = make_rng(19)
    centers = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [4.0, 4.0]])
    X = np.concatenate([c + 0.15 * rng.normal(size=(40, 2)) for c in centers])
    truth = np.repeat(np.arange(4), 40)
    res = joint_discover(X, lam=1.0, k=40, confidence_cut=0.0, rng=make_rng(20))
    assert res.cluster_count == 4
    kept = res.pseudo_labels >= 0
    assert clustering_accuracy(truth[kept], res.pseudo_labels[kept]) >= 0.95


def test_joint_discover_single_class_collapses_to_one():
    rng = make_rng(21)
    X = rng.normal(size=(50, 3)) * 0.2
    res = joint_discover(X, lam=1.5, k=50, confidence_cut=0.0, rng=make_rng(22))
    assert res.cluster_count == 1


def test_joint_discover_tiny_pool_discovers_nothing():
    res = joint_discover(np.zeros((1, 4)), lam=1.0, k=5, confidence_cut=0.0,
                         rng=make_rng(23))
    assert res.cluster_count == 0
    assert res.pseudo_labels.tolist() == [-1]


def test_joint_discover_min_cluster_size_prunes():
    rng = make_rng(24)
    big = rng.normal(size=(40, 2)) * 0.1
    small = rng.normal(size=(3, 2)) * 0.1 + 8.0
    X = np.concatenate([big, small])
    res = joint_discover(X, lam=1.0, k=60, confidence_cut=0.0, rng=make_rng(25),
                         min_cluster_size=5)
    assert res.cluster_count == 1
    assert np.all(res.pseudo_labels[-3:] == -1)


def test_joint_discover_class_means_match_labels():
    rng = make_rng(26)
    X, _ = gaussian_blobs(rng, [[0.0, 0.0], [5.0, 5.0]], 30, 0.1)
    res = joint_discover(X, lam=1.0, k=30, confidence_cut=0.0, rng=make_rng(27))
    for cid, mean in res.class_means.items():
        members = X[res.pseudo_labels == cid]
        assert np.allclose(mean, members.mean(axis=0), atol=1e-9)
