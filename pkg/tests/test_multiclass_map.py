import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rvsm.data_io import ClassDictionary, ClassInfo, LabeledPointCloud, SyntheticSceneSpec, generate_scene, load_cloud
from rvsm.errors import ClassNotPresentError, InvalidInputError, TwoClassRequiredError
from rvsm.kernel import KernelSpec
from rvsm.metrics import auc
from rvsm.multiclass_map import (UNTRAINABLE_FLOOR, SemanticMapModel, class_seed, downsample_per_class, query_map,
                                 split_one_vs_rest, train_map)
from rvsm.sparse_bayes import BinaryRvmModel, TrainConfig, TrainingSet, train_binary


def test_split_one_vs_rest():
    cloud = LabeledPointCloud(np.arange(9.0).reshape(3, 3), [4, 8, 4])
    np.testing.assert_array_equal(split_one_vs_rest(cloud, 4).targets, [1, 0, 1])
    np.testing.assert_array_equal(split_one_vs_rest(cloud, 8).targets, [0, 1, 0])
    np.testing.assert_array_equal(split_one_vs_rest(cloud, 8).inputs, cloud.points)
    with pytest.raises(ClassNotPresentError):
        split_one_vs_rest(cloud, 5)
    with pytest.raises(TwoClassRequiredError):
        split_one_vs_rest(LabeledPointCloud(np.zeros((2, 3)), [1, 1]), 1)


@given(arrays(np.int64, st.integers(2, 40), elements=st.integers(0, 4)))
def test_split_partitions(labels):
    cloud = LabeledPointCloud(np.zeros((len(labels), 3)), labels)
    if len(cloud.classes) < 2:
        return
    for k in cloud.classes:
        t = split_one_vs_rest(cloud, k).targets
        assert t.sum() + (1 - t).sum() == len(labels)
        assert t.sum() == np.sum(labels == k)


def test_per_class_models_separate_held_out(small_scene, small_map):
    _, test, _ = small_scene
    assert len(small_map.binary_models) == 3
    for m in small_map.binary_models:
        assert auc(m.predict_proba(test.points), test.labels == m.class_id) > 0.99
    rep = small_map.reports
    assert [r["class_id"] for r in rep] == [0, 1, 2]
    assert all(r["n_positive"] + r["n_negative"] == 180 for r in rep)


def test_query_deep_class_points(small_map):
    centers = {0: (0, 0, 0), 1: (1.5, 0, 0), 2: (0, 1.5, 0)}
    post = query_map(small_map, list(centers.values()))
    for i, k in enumerate(centers):
        assert post.hard_labels[i] == k
        assert post.class_probs[i, k] > 1 / 3 + 0.2


def test_query_empty(small_map):
    post = query_map(small_map, np.zeros((0, 3)))
    assert post.class_probs.shape == (0, 3) and len(post.hard_labels) == 0


@given(arrays(float, st.tuples(st.integers(1, 30), st.just(3)), elements=st.floats(-50, 50)))
def test_posterior_rows_normalized(small_map, pts):
    post = query_map(small_map, pts)
    np.testing.assert_allclose(post.class_probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((post.class_probs >= 0) & (post.class_probs <= 1))
    np.testing.assert_array_equal(post.hard_labels, np.array(post.class_ids)[post.class_probs.argmax(axis=1)])


def test_query_rejects_non_finite(small_map):
    with pytest.raises(InvalidInputError):
        query_map(small_map, [[0, np.inf, 0]])


def test_query_matches_normalized_binary_probabilities(small_map, rng):
    q = rng.normal(0.5, 1.0, (40, 3))
    raw = np.column_stack([m.predict_proba(q) for m in small_map.binary_models])
    post = query_map(small_map, q)
    np.testing.assert_allclose(post.class_probs, raw / raw.sum(axis=1, keepdims=True), rtol=1e-12)


def test_chunking_does_not_change_results(small_map, rng):
    q = rng.normal(0.5, 1.0, (2500, 3))
    a = query_map(small_map, q)
    b = query_map(small_map, q, chunk=7)
    np.testing.assert_array_equal(a.class_probs, b.class_probs)


def test_ties_go_to_lowest_class_index():
    kernel = KernelSpec()
    models = tuple(BinaryRvmModel(c, kernel, [[0, 0, 0]], [0.0, 0.0], np.eye(2)) for c in (5, 3, 9))
    d = ClassDictionary.default([5, 3, 9])
    post = query_map(SemanticMapModel(models, d, kernel), [[1, 2, 3]])
    np.testing.assert_allclose(post.class_probs, [[1 / 3] * 3])
    assert post.hard_labels[0] == 5


def test_two_class_map_equals_thresholded_binary():
    train, test, _ = generate_scene(SyntheticSceneSpec(
        (((0, (0, 0, 0), 0.6, 40)), ((1, (0.8, 0, 0), 0.6, 40))), 0.1, 3))
    kernel, cfg = KernelSpec(), TrainConfig(rng_seed=2)
    m = train_map(train, ClassDictionary.default([0, 1]), kernel, cfg)
    p1 = m.binary_models[1].predict_proba(test.points)
    p0 = m.binary_models[0].predict_proba(test.points)
    post = query_map(m, test.points)
    np.testing.assert_array_equal(post.hard_labels == 1, p1 / (p0 + p1) > 0.5)
    # the class-1 model alone, trained with the same seed, gives the same model
    solo, _ = train_binary(split_one_vs_rest(train, 1), kernel,
                           TrainConfig(rng_seed=class_seed(cfg.rng_seed, 1)), class_id=1)
    np.testing.assert_array_equal(solo.weights, m.binary_models[1].weights)


def test_absent_class_is_untrainable_and_floored(small_scene):
    train, _, _ = small_scene
    sub = train.subset(train.labels != 2)
    d = ClassDictionary.default([0, 1, 2])
    m = train_map(sub, d, KernelSpec(), TrainConfig())
    assert [bm.trained for bm in m.binary_models] == [True, True, False]
    assert m.reports[2]["trained"] is False and "no points" in m.reports[2]["reason"]
    post = query_map(m, [[0, 0, 0], [0, 1.5, 0], [50, 50, 50]])
    assert np.all(post.hard_labels != 2)
    p = np.column_stack([bm.predict_proba(post.points) for bm in m.binary_models[:2]])
    expected = UNTRAINABLE_FLOOR / (p.sum(axis=1) + UNTRAINABLE_FLOOR)
    np.testing.assert_allclose(post.class_probs[:, 2], expected, rtol=1e-9)


def test_map_input_validation(small_scene):
    train, _, _ = small_scene
    d = ClassDictionary.default([0, 1, 2])
    with pytest.raises(TwoClassRequiredError):
        train_map(train.subset(train.labels == 0), d, KernelSpec())
    with pytest.raises(InvalidInputError):
        train_map(train, ClassDictionary.default([0, 1]), KernelSpec())
    with pytest.raises(InvalidInputError):
        train_map(train.subset(np.zeros(0, dtype=int)), d, KernelSpec())


def test_model_kernel_consistency(small_map):
    other = KernelSpec(length_scale=1.0)
    with pytest.raises(InvalidInputError):
        SemanticMapModel(small_map.binary_models, small_map.dictionary, other)
    with pytest.raises(InvalidInputError):
        SemanticMapModel(small_map.binary_models[::-1], small_map.dictionary, small_map.kernel)


def test_training_deterministic_and_jobs_independent(small_scene, small_map):
    train, _, _ = small_scene
    again = train_map(train, ClassDictionary.default([0, 1, 2]), KernelSpec(), TrainConfig(rng_seed=7), jobs=1)
    assert again.dumps() == small_map.dumps()


def test_class_permutation_equivariance(small_scene, small_map, rng):
    train, _, _ = small_scene
    d = small_map.dictionary
    perm = [2, 0, 1]
    d2 = ClassDictionary(tuple(d.classes[i] for i in perm))
    m2 = train_map(train, d2, KernelSpec(), TrainConfig(rng_seed=7))
    q = rng.normal(0.5, 1.0, (100, 3))
    a, b = query_map(small_map, q), query_map(m2, q)
    np.testing.assert_allclose(b.class_probs, a.class_probs[:, perm], rtol=1e-12)
    np.testing.assert_array_equal(a.hard_labels, b.hard_labels)


def test_class_seed_keyed_on_id():
    assert class_seed(0, 3) == class_seed(0, 3)
    assert class_seed(0, 3) != class_seed(0, 4)
    assert class_seed(0, 3) != class_seed(1, 3)
    assert class_seed(0, -3) != class_seed(0, 3)


def test_bundle_round_trip(tmp_path, small_map, rng):
    path = tmp_path / "map.json"
    small_map.save(path)
    back = SemanticMapModel.load(path)
    assert back.dumps() == small_map.dumps()
    q = rng.normal(size=(30, 3))
    np.testing.assert_array_equal(query_map(back, q).class_probs, query_map(small_map, q).class_probs)
    prov = back.provenance
    assert set(prov) == {"seed", "config_hash", "source_digest", "train_config"}
    assert prov["seed"] == 7


def test_posterior_exports(tmp_path, small_map):
    post = query_map(small_map, [[0, 0, 0], [1.5, 0, 0]])
    post.to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "x,y,z,p_0,p_1,p_2,label"
    assert len(lines) == 3 and lines[2].endswith(",1")
    post.to_ply(tmp_path / "p.ply", small_map.dictionary)
    back = load_cloud(tmp_path / "p.ply")
    np.testing.assert_array_equal(back.labels, post.hard_labels)
    np.testing.assert_array_equal(back.points, post.points)


def test_continuity_on_finer_grid(small_map):
    coarse = np.column_stack([np.arange(-0.6, 2.1, 0.1), np.zeros(27), np.zeros(27)])
    fine = np.column_stack([np.arange(-0.6, 2.05, 0.05), np.zeros(53), np.zeros(53)])
    pc = query_map(small_map, coarse).class_probs
    pf = query_map(small_map, fine).class_probs
    assert np.abs(np.diff(pf, axis=0)).max() <= np.abs(np.diff(pc, axis=0)).max() + 0.1


# ---------------------------------------------------------------- downsampling


def test_downsample_identity_at_one(small_scene):
    train = small_scene[0]
    assert downsample_per_class(train, 1.0) == train


def test_downsample_ceiling():
    cloud = LabeledPointCloud(np.random.default_rng(0).random((203, 3)), [0] * 200 + [1] * 3)
    sub = downsample_per_class(cloud, 0.01, seed=3)
    assert np.sum(sub.labels == 0) == 2
    assert np.sum(sub.labels == 1) == 1


@given(st.lists(st.integers(1, 300), min_size=1, max_size=5), st.floats(0.001, 1.0), st.integers(0, 99))
def test_downsample_counts_and_order(counts, fraction, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    order = np.random.default_rng(seed).permutation(len(labels))
    cloud = LabeledPointCloud(np.arange(3 * len(labels), dtype=float).reshape(-1, 3)[order], labels[order])
    sub = downsample_per_class(cloud, fraction, seed)
    for k, n in enumerate(counts):
        kept = np.sum(sub.labels == k)
        assert kept == max(1, math.ceil(fraction * n - 1e-9))
        assert kept >= fraction * n - 1e-9
    # retained points keep their original relative order
    pos = [int(np.flatnonzero((cloud.points == p).all(axis=1))[0]) for p in sub.points]
    assert pos == sorted(pos)
    assert sub == downsample_per_class(cloud, fraction, seed)


def test_downsample_validation(small_scene):
    with pytest.raises(InvalidInputError):
        downsample_per_class(small_scene[0], 0.0)
    with pytest.raises(InvalidInputError):
        downsample_per_class(small_scene[0], 1.5)


def test_dictionary_names_survive_bundle(small_scene):
    train = small_scene[0]
    d = ClassDictionary((ClassInfo(0, "floor", (1, 2, 3)), ClassInfo(1, "wall", (4, 5, 6)),
                         ClassInfo(2, "chair", (7, 8, 9))))
    m = train_map(train.subset(np.arange(0, 180, 3)), d, KernelSpec(), TrainConfig(max_iterations=3))
    assert SemanticMapModel.from_dict(m.to_dict()).dictionary == d
