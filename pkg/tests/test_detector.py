import numpy as np
import pytest

from streamwsl.detector import (
    BoxRefiner,
    DetectorModel,
    MinibootstrapParams,
    apply_deltas,
    box_deltas,
    detect,
    fit_refiner_arrays,
    gaussian_kernel,
    load_model,
    median_heuristic,
    minibootstrap_train,
    nystrom_fit,
    rls_fit_refiner,
    save_model,
)
from streamwsl.errors import InvalidInputError, TrainingError
from streamwsl.frames import Frame, RegionFeature
from streamwsl.geometry import BoundingBox, iou

from oracles import dense_krr_scores, gauss_kernel


# --- Nystrom ----------------------------------------------------------------

def test_two_point_example():
    clf = nystrom_fit(np.array([[0.0], [1.0]]), [1, -1], M=2, sigma=0.5, lam=1e-6)
    assert clf.score(np.array([[0.0]]))[0] > 0 > clf.score(np.array([[1.0]]))[0]


def test_all_positive_labels_give_positive_scores():
    X = np.random.default_rng(0).normal(size=(30, 3))
    clf = nystrom_fit(X, np.ones(30), M=30, sigma=1.0, lam=1e-6)
    assert np.all(clf.score(X) > 0)


def test_ridge_limit():
    X = np.random.default_rng(1).normal(size=(20, 2))
    clf = nystrom_fit(X, np.sign(X[:, 0]), M=10, sigma=1.0, lam=1e8)
    assert np.max(np.abs(clf.score(X))) < 1e-6


def test_full_rank_matches_dense_krr():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 51))
        X = rng.normal(size=(n, 4))
        y = np.sign(rng.normal(size=n))
        Xq = rng.normal(size=(25, 4))
        clf = nystrom_fit(X, y, M=n, sigma=2.0, lam=1e-2)
        ref = dense_krr_scores(X, y, 2.0, 1e-2, Xq)
        assert np.linalg.norm(clf.score(Xq) - ref) <= 1e-6 * np.linalg.norm(ref)


def test_nystrom_errors_and_determinism():
    X = np.random.default_rng(3).normal(size=(10, 2))
    with pytest.raises(InvalidInputError):
        nystrom_fit(X, np.ones(9), 5, 1.0, 1e-3)
    with pytest.raises(InvalidInputError):
        nystrom_fit(X, np.ones(10), 11, 1.0, 1e-3)
    a = nystrom_fit(X, np.ones(10), 5, 1.0, 1e-3, rng_seed=7)
    b = nystrom_fit(X, np.ones(10), 5, 1.0, 1e-3, rng_seed=7)
    assert np.array_equal(a.coefficients, b.coefficients) and np.array_equal(a.centers, b.centers)


def test_singular_system_raises_training_error():
    # a NaN label makes every factorization attempt useless
    X = np.zeros((4, 2))
    with pytest.raises(TrainingError):
        nystrom_fit(X, [1, -1, 1, np.nan], 4, 1.0, 1e-3)


def test_kernel_and_median_heuristic():
    rng = np.random.default_rng(4)
    A, C = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
    assert np.allclose(gaussian_kernel(A, C, 1.3), gauss_kernel(A, C, 1.3))
    X = rng.normal(size=(100, 2))
    s = median_heuristic(X, np.random.default_rng(0))
    d = np.linalg.norm(X[:, None] - X[None], axis=2)[np.triu_indices(100, 1)]
    assert s == pytest.approx(np.median(d))


# --- refiner ----------------------------------------------------------------

def test_refiner_recovers_constant_offset():
    # equal-size proposals, so a +2 px shift is one constant delta vector
    rng = np.random.default_rng(5)
    P = np.column_stack([rng.uniform(0, 100, 40), rng.uniform(0, 100, 40)])
    P = np.column_stack([P, P + 25.0])
    G = P + np.array([2.0, 2.0, 2.0, 2.0])
    X = rng.normal(size=(40, 6))
    ref = fit_refiner_arrays(X, P, G, ridge=1e-8)
    assert np.max(np.abs(ref.refine(P, X) - G)) < 1e-6


def test_refiner_identity_cases():
    P = np.array([[0.0, 0, 10, 10], [5, 5, 20, 30]])
    X = np.array([[1.0, 2.0], [3.0, -1.0]])
    ref = fit_refiner_arrays(X, P, P, ridge=1e-10)
    assert np.allclose(ref.predict_deltas(X), 0, atol=1e-8)
    pair = [(RegionFeature(X[0], BoundingBox(*P[0]), 0), BoundingBox(1, 1, 12, 11))]
    big = rls_fit_refiner(pair, ridge=1e12)
    assert np.allclose(big.refine(P[:1], X[:1]), P[:1], atol=1e-6)


def test_delta_roundtrip():
    P = np.array([[0.0, 0, 10, 20], [3, 4, 50, 9]])
    G = np.array([[1.0, -2, 12, 18], [0, 4, 40, 19]])
    assert np.allclose(apply_deltas(P, box_deltas(P, G)), G)


# --- minibootstrap ----------------------------------------------------------

def two_class_data(seed=0, n_pos=40, n_neg=400, d=4):
    rng = np.random.default_rng(seed)
    pos = [rng.normal(4, 0.5, size=(n_pos, d)), rng.normal(-4, 0.5, size=(n_pos, d))]
    neg = rng.normal(0, 0.5, size=(n_neg, d)) + np.array([0, 6] + [0] * (d - 2))
    return pos, neg


def test_separable_training_accuracy():
    pos, neg = two_class_data()
    model = minibootstrap_train(pos, neg, MinibootstrapParams(batch_size=100, max_negatives_kept=200))
    for c, p in enumerate(pos):
        m = model.margins(p)
        assert np.all(np.argmax(m, axis=1) == c) and np.all(m[:, c] > 0)
    assert np.all(model.margins(neg).max(axis=1) < 0)


def test_training_size_bound_and_determinism():
    pos, neg = two_class_data(1)
    params = MinibootstrapParams(n_batches=3, batch_size=50, max_negatives_kept=60, hard_negative_score_min=-1.0)
    a = minibootstrap_train(pos, neg, params)
    b = minibootstrap_train(pos, neg, params)
    for c in range(2):
        assert a.train_info["train_size"][c] <= len(pos[c]) + params.max_negatives_kept
        assert np.array_equal(a.classifiers[c].coefficients, b.classifiers[c].coefficients)


def test_single_batch_is_one_filtered_fit():
    pos, neg = two_class_data(2)
    params = MinibootstrapParams(n_batches=1, batch_size=100, max_negatives_kept=100, n_centers=50)
    model = minibootstrap_train(pos, neg, params)
    # reproduce by hand for class 0
    sigma = model.train_info["sigma"]
    pool = np.vstack([neg, pos[1]])
    chunk = np.random.default_rng([params.seed, 0]).permutation(len(pool))[:100]

    def fit(idx, it):
        X = np.vstack([pos[0], pool[idx]])
        y = np.r_[np.ones(len(pos[0])), -np.ones(len(idx))]
        return nystrom_fit(X, y, min(50, len(X)), sigma, params.lam, [params.seed, 0, it])

    first = fit(chunk, 0)
    hard = chunk[first.score(pool[chunk]) >= 0.0]
    expected = fit(hard, 1)
    assert np.array_equal(model.classifiers[0].coefficients, expected.coefficients)


def test_negatives_identical_to_positive_saturate_cap():
    # With every candidate counted as hard, the retained set fills up to the cap.
    rng = np.random.default_rng(3)
    p = rng.normal(size=(5, 3))
    neg = np.repeat(p[:1], 300, axis=0)
    params = MinibootstrapParams(n_batches=3, batch_size=100, max_negatives_kept=150, n_centers=20,
                                 hard_negative_score_min=-np.inf)
    model = minibootstrap_train([p], neg, params)
    assert model.train_info["retained"][0] == 150


def test_identical_negatives_become_easy_after_first_fit():
    # The first fit sees the copies as negatives, so its score there is the
    # label mean (below zero) and the default threshold drops them; retention
    # then alternates instead of saturating.
    rng = np.random.default_rng(3)
    p = rng.normal(size=(5, 3))
    neg = np.repeat(p[:1], 300, axis=0)
    params = MinibootstrapParams(n_batches=3, batch_size=100, max_negatives_kept=150, n_centers=20)
    model = minibootstrap_train([p], neg, params)
    assert model.train_info["retained"][0] == 100
    assert model.margins(p[:1])[0, 0] < 0


def test_missing_class_and_empty_pool():
    pos, neg = two_class_data()
    with pytest.raises(TrainingError, match="class 1"):
        minibootstrap_train([pos[0], np.zeros((0, 4))], neg)
    with pytest.raises(InvalidInputError):
        minibootstrap_train(pos, np.zeros((0, 4)))
    with pytest.raises(InvalidInputError):
        MinibootstrapParams(batch_size=100, max_negatives_kept=50)


# --- detect -----------------------------------------------------------------

@pytest.fixture(scope="module")
def model():
    pos, neg = two_class_data()
    return minibootstrap_train(pos, neg, MinibootstrapParams(batch_size=100, max_negatives_kept=200))


def frame_with(features, boxes=None):
    features = np.asarray(features, dtype=float)
    if boxes is None:
        boxes = np.array([[10.0 * i, 0, 10.0 * i + 8, 8] for i in range(len(features))])
    return Frame(0, 0, boxes, features)


def test_detect_examples(model):
    assert detect(model, Frame(0, 0, np.zeros((0, 4)), np.zeros((0, 4)))) == []
    dets = detect(model, frame_with([[4, 4, 4, 4], [-4, -4, -4, -4], [0, 6, 0, 0]]))
    assert sorted(d.class_id for d in dets) == [0, 1]
    assert detect(model.with_thresholds(confidence_threshold=1.0), frame_with([[4, 4, 4, 4]])) == []
    with pytest.raises(InvalidInputError):
        detect(model, frame_with([[1.0, 2.0]]))


def test_detect_respects_nms(model):
    boxes = np.array([[0, 0, 10, 10], [0, 0, 10, 11], [30, 30, 40, 40]], dtype=float)
    dets = detect(model, frame_with([[4, 4, 4, 4], [4.1, 4, 4, 4], [4, 4.1, 4, 4]], boxes))
    assert len(dets) == 2
    assert iou(dets[0].box, dets[1].box) <= model.nms_threshold
    assert dets[0].confidence >= dets[1].confidence


def test_model_roundtrip(tmp_path, model):
    path = tmp_path / "m.json"
    save_model(model, path)
    back = load_model(path)
    X = np.random.default_rng(0).normal(size=(10, 4))
    assert np.array_equal(back.margins(X), model.margins(X))
    assert back.confidence_threshold == model.confidence_threshold
    assert back.nms_threshold == model.nms_threshold


def test_confidence_is_monotone_and_below_one(model):
    m = np.linspace(-100, 100, 101)
    c = model.confidence(m)
    assert np.all(np.diff(c) >= 0) and c.max() < 1.0 and c.min() > 0.0
    assert model.confidence(0.0) == 0.5


def test_identity_refiner_leaves_boxes():
    ref = BoxRefiner.identity(3, 1.0)
    P = np.array([[1.0, 2, 30, 40]])
    assert np.array_equal(ref.refine(P, np.ones((1, 3))), P)
