import numpy as np
import pytest

from streamwsl.errors import ConfigError, InvalidInputError
from streamwsl.frames import read_frames, write_frames
from streamwsl.geometry import iou_matrix
from streamwsl.harness import WorldConfig, generate_world, shift_report, subsample
from streamwsl.pipeline import evaluate, supervised_phase


def ids(frames):
    return [f.frame_id for f in frames]


def test_generation_is_deterministic(small_world):
    again = generate_world(small_world.config)
    for a, b in zip(small_world.target_frames, again.target_frames):
        assert a.frame_id == b.frame_id
        assert np.array_equal(a.features, b.features) and np.array_equal(a.boxes, b.boxes)
        assert a.hidden_gt == b.hidden_gt
    other = generate_world(WorldConfig(n_labeled=20, n_unlabeled=20, n_test=10, seed=12))
    assert not np.array_equal(other.target_frames[0].features, small_world.target_frames[0].features)


def test_splits_have_disjoint_ids_and_sizes(small_world):
    src, stream, test = ids(small_world.source.frames), ids(small_world.target_frames), ids(small_world.target_test.frames)
    assert (len(src), len(stream), len(test)) == (200, 150, 100)
    assert not (set(src) & set(stream) or set(src) & set(test) or set(stream) & set(test))
    assert [f.position for f in small_world.target_frames] == list(range(150))


def test_every_object_has_a_matching_proposal(small_world):
    for f in small_world.source.frames + small_world.target_frames:
        if f.hidden_gt:
            assert np.all(iou_matrix(f.boxes, f.gt_boxes()).max(axis=0) >= 0.5)


def world(**kw):
    base = dict(n_labeled=400, n_unlabeled=0, n_test=400, seed=3)
    base.update(kw)
    return generate_world(WorldConfig(**base))


def test_shift_report_near_zero_without_shift():
    w = world()
    assert shift_report(w.source, w.target_test) < 0.5 * w.config.noise_scale


def test_shift_report_scales_linearly():
    # about 2 objects per frame over 5 classes: 1500 frames give > 500 instances per class
    a = world(shift_magnitude=6.0, n_labeled=1500, n_test=1500)
    b = world(shift_magnitude=12.0, n_labeled=1500, n_test=1500)
    for split in (a.source, a.target_test):
        assert np.bincount([g.class_id for f in split.frames for g in f.hidden_gt]).min() >= 500
    ratio = shift_report(b.source, b.target_test) / shift_report(a.source, a.target_test)
    assert 1.8 <= ratio <= 2.2


def test_single_class_single_mode_shift_matches_vector():
    w = world(num_classes=1, shift_magnitude=8.0, shift_modes=1)
    v = w.target_domain.class_shift[0, 0]
    assert np.linalg.norm(v) == pytest.approx(8.0)
    assert shift_report(w.source, w.target_test) == pytest.approx(np.linalg.norm(v), rel=0.1)


def test_shift_directions_avoid_source_means():
    w = world(shift_magnitude=5.0)
    means = np.vstack([w.source_domain.class_means, w.source_domain.background_means])
    dirs = w.target_domain.class_shift.reshape(-1, w.config.feature_dim)
    # orthogonal to every source mean
    assert np.max(np.abs(dirs @ means.T)) < 1e-8


def test_source_is_separable(small_world, seed_model):
    assert evaluate(seed_model, small_world.source).mean_ap >= 0.9


def test_runs_make_the_stream_redundant():
    w = generate_world(WorldConfig(n_labeled=0, n_unlabeled=200, n_test=0, run_length=10, seed=5))
    feats = np.array([f.image_feature() for f in w.target_frames])
    d = np.linalg.norm(np.diff(feats, axis=0), axis=1)
    boundary = np.arange(1, 200) % 10 == 0   # diff i compares frames i-1 and i
    assert d[~boundary].mean() < 0.5 * d[boundary].mean()


def test_config_errors():
    with pytest.raises(ConfigError):
        WorldConfig(run_length=0)
    with pytest.raises(ConfigError):
        WorldConfig(shift_magnitude=-1.0)
    with pytest.raises(ConfigError):
        WorldConfig(objects_per_frame=(3, 1))
    with pytest.raises(ConfigError):
        WorldConfig(object_size=(60.0, 500.0))
    with pytest.raises(ConfigError):
        WorldConfig.from_dict({"n_labeled": 3, "colour": "red"})
    assert WorldConfig.from_dict(WorldConfig(seed=4).to_dict()) == WorldConfig(seed=4)


def test_subsample_is_seeded_ordered_subset(small_world):
    a = subsample(small_world.source, 50, seed=1)
    b = subsample(small_world.source, 50, seed=1)
    assert ids(a.frames) == ids(b.frames) == sorted(ids(a.frames))
    assert set(ids(a.frames)) <= set(ids(small_world.source.frames))
    assert len(subsample(small_world.source, 10_000)) == len(small_world.source)


@pytest.mark.parametrize("name", ["frames.jsonl", "frames.jsonl.gz"])
def test_jsonl_roundtrip(tmp_path, small_world, name):
    frames = small_world.target_frames[:20]
    write_frames(tmp_path / name, frames, 5, split="stream")
    header, back = read_frames(tmp_path / name)
    assert header["num_classes"] == 5 and header["feature_dim"] == 16
    for a, b in zip(frames, back):
        assert a.frame_id == b.frame_id and a.hidden_gt == b.hidden_gt
        assert np.array_equal(a.features, b.features) and np.array_equal(a.boxes, b.boxes)
    write_frames(tmp_path / "nogt.jsonl", frames, 5, include_gt=False)
    assert all(not f.hidden_gt for f in read_frames(tmp_path / "nogt.jsonl")[1])


def test_bad_dataset_files(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    with pytest.raises(InvalidInputError):
        read_frames(tmp_path / "empty.jsonl")
    (tmp_path / "other.jsonl").write_text('{"format": "something-else"}\n')
    with pytest.raises(InvalidInputError):
        read_frames(tmp_path / "other.jsonl")


def test_trained_seed_is_worse_on_shifted_target():
    w = world(shift_magnitude=20.0, n_labeled=200, n_test=150)
    m = supervised_phase(w.source, w.config.num_classes)
    assert evaluate(m, w.target_test).mean_ap < evaluate(m, w.source).mean_ap - 0.1
