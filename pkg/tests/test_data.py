import json

import numpy as np
import pytest

from vqla.data import (PAD, UNK, ClassMap, DataError, SyntheticTaskConfig, VqlaSample, build_vocab, collate,
                       combined_target_box, generate_synthetic_dataset, load_annotations, location_answer,
                       make_batches, read_features, read_ppm, tokenize, validate_sample, write_annotations,
                       write_features, write_ppm)


def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


@pytest.fixture
def feature_file(tmp_path):
    write_features(tmp_path / "f0.vqlf", np.arange(12, dtype=np.float32).reshape(4, 3))
    return "f0.vqlf"


def record(**kw):
    base = {"frame_id": "seq_1_frame000", "width": 1280, "height": 1024, "features": "f0.vqlf",
            "question": "what is the state of monopolar curved scissors", "answer": "Cutting",
            "bbox": [10, 20, 200, 180]}
    base.update(kw)
    return base


# -- annotations -------------------------------------------------------------------

def test_empty_file(tmp_path):
    (tmp_path / "a.jsonl").write_text("")
    assert load_annotations(tmp_path / "a.jsonl") == []


def test_one_valid_line(tmp_path, feature_file):
    write_lines(tmp_path / "a.jsonl", [record(extra_field=1)])
    (s,) = load_annotations(tmp_path / "a.jsonl")
    assert s.target_box == (10, 20, 200, 180)
    assert s.frame_size == (1280, 1024)
    assert s.answer_class == 0
    assert s.features.shape == (4, 3)
    np.testing.assert_allclose(s.normalized_box(), [10 / 1280, 20 / 1024, 200 / 1280, 180 / 1024])


def test_invariant_violation_names_field(tmp_path, feature_file):
    write_lines(tmp_path / "a.jsonl", [record(bbox=[300, 20, 200, 180])])
    with pytest.raises(DataError, match="x_min"):
        load_annotations(tmp_path / "a.jsonl")


def test_malformed_line_reports_line_number(tmp_path, feature_file):
    (tmp_path / "a.jsonl").write_text(json.dumps(record()) + "\n{not json\n")
    with pytest.raises(DataError, match=":2:"):
        load_annotations(tmp_path / "a.jsonl")


def test_class_map_first_seen_then_frozen(tmp_path, feature_file):
    write_lines(tmp_path / "t.jsonl", [record(answer="b"), record(answer="a"), record(answer="b")])
    cm = ClassMap()
    samples = load_annotations(tmp_path / "t.jsonl", cm)
    assert cm.labels == ["b", "a"]
    assert [s.answer_class for s in samples] == [0, 1, 0]
    cm.freeze()
    write_lines(tmp_path / "v.jsonl", [record(answer="c")])
    with pytest.raises(DataError, match="'c'"):
        load_annotations(tmp_path / "v.jsonl", cm)


def test_feature_file_layout(tmp_path):
    f = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    write_features(tmp_path / "x.vqlf", f)
    raw = (tmp_path / "x.vqlf").read_bytes()
    assert raw[:4] == b"VQLF"
    assert int.from_bytes(raw[4:8], "little") == 5 and int.from_bytes(raw[8:12], "little") == 7
    np.testing.assert_array_equal(read_features(tmp_path / "x.vqlf"), f)
    (tmp_path / "bad.vqlf").write_bytes(raw[:-4])
    with pytest.raises(DataError):
        read_features(tmp_path / "bad.vqlf")


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(6, 9, 3), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", img)
    assert (tmp_path / "x.ppm").read_bytes().startswith(b"P6")
    np.testing.assert_array_equal(read_ppm(tmp_path / "x.ppm"), img)


# -- vocabulary ----------------------------------------------------------------------

def test_vocab_frequency_order():
    v = build_vocab(["what is a", "what is b"])
    assert {v.id("what"), v.id("is")} == {2, 3}
    assert v.id("is") == 2  # tie broken lexicographically
    assert len(v) == 4 + 2


def test_vocab_round_trip_and_reserved():
    v = build_vocab(["Where is the grasper?", "where, is the tissue"])
    for i in range(2, len(v)):
        assert v.id(v.token(i)) == i
    assert v.token(PAD) == "<pad>" and v.token(UNK) == "<unk>"
    assert v.id("<pad>") == PAD


def test_tokenize():
    v = build_vocab(["what is x", "what is y"])
    assert tokenize("zzz qqq", v, 4) == [UNK, UNK, PAD, PAD]
    assert tokenize("what is x y what is", v, 3) == [v.id("what"), v.id("is"), v.id("x")]
    assert tokenize("What is x?", v, 5) == [v.id("what"), v.id("is"), v.id("x"), 0, 0]
    with pytest.raises(ValueError):
        tokenize("x", v, 0)


def test_tokenize_ids_in_range():
    v = build_vocab(["a b c"])
    for q in ("a", "d e f g h i", "", "c c c"):
        ids = tokenize(q, v, 5)
        assert len(ids) == 5 and max(ids) < len(v)


# -- targets and synthetic data ---------------------------------------------------------

def test_combined_target_box():
    assert combined_target_box([10, 10, 50, 50], [40, 30, 80, 60]) == (10, 10, 80, 60)
    assert combined_target_box([10, 10, 50, 50], [20, 20, 30, 30]) == (10, 10, 50, 50)
    assert combined_target_box([1, 2, 3, 4], [1, 2, 3, 4]) == (1, 2, 3, 4)


def test_synthetic_determinism():
    cfg = SyntheticTaskConfig(n_train=20, n_val=5, seed=7)
    a, b = generate_synthetic_dataset(cfg), generate_synthetic_dataset(cfg)
    for x, y in zip(a[0] + a[1], b[0] + b[1]):
        assert x.question == y.question and x.target_box == y.target_box
        assert x.image.tobytes() == y.image.tobytes()


def test_synthetic_samples_valid_and_classes_complete():
    cfg = SyntheticTaskConfig(n_train=200, n_val=10)
    train, val, cm = generate_synthetic_dataset(cfg)
    assert len(cm) == cfg.num_classes == 12
    for s in train + val:
        validate_sample(s, cfg.num_classes)
        assert cm[s.answer_class] == s.answer
    assert {s.answer for s in train} == set(cm.labels)


def test_interaction_box_contains_both_shapes():
    train, _, _ = generate_synthetic_dataset(SyntheticTaskConfig(n_train=60, n_val=0))
    seen = 0
    for s in train:
        if "relative to" not in s.question:
            continue
        seen += 1
        mask = s.image.any(axis=2)
        ys, xs = np.nonzero(mask)
        x0, y0, x1, y1 = s.target_box
        # every painted pixel lies inside the combined target
        assert xs.min() >= x0 and xs.max() < x1 and ys.min() >= y0 and ys.max() < y1
    assert seen > 0


def test_location_buckets():
    assert location_answer((2, 24, 18, 40), 64, 64) == "left"
    assert location_answer((46, 24, 62, 40), 64, 64) == "right"
    assert location_answer((24, 0, 40, 10), 64, 64) == "top"
    assert location_answer((24, 50, 40, 64), 64, 64) == "bottom"
    # equal displacement: left beats top, right beats bottom
    assert location_answer((0, 0, 10, 10), 64, 64) == "left"
    assert location_answer((54, 54, 64, 64), 64, 64) == "right"


def test_impossible_config_fails():
    with pytest.raises(ValueError, match="could not place"):
        generate_synthetic_dataset(SyntheticTaskConfig(canvas=40, min_size=30, max_size=40, n_train=50, max_tries=20))
    with pytest.raises(ValueError, match="num_classes"):
        generate_synthetic_dataset(SyntheticTaskConfig(num_classes=18))


def test_synthetic_export_round_trip(tmp_path):
    train, _, _ = generate_synthetic_dataset(SyntheticTaskConfig(n_train=5, n_val=0))
    write_annotations(tmp_path / "train.jsonl", train)
    cm = ClassMap(SyntheticTaskConfig().answer_labels())
    back = load_annotations(tmp_path / "train.jsonl", cm)
    for a, b in zip(train, back):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.target_box == b.target_box and a.answer_class == b.answer_class


# -- batching --------------------------------------------------------------------------

def _dummy(n, shape=(4, 3)):
    return [VqlaSample(f"f{i}", "q", "a", 0, (0, 0, 1, 1), (2, 2), features=np.zeros(shape, np.float32))
            for i in range(n)]


def test_batch_sizes():
    assert [len(b) for b in make_batches(_dummy(130), 64)] == [64, 64, 2]


def test_batch_order():
    samples = _dummy(10)
    assert [s.frame_id for b in make_batches(samples, 4) for s in b] == [s.frame_id for s in samples]
    a = [[s.frame_id for s in b] for b in make_batches(samples, 4, shuffle_seed=3)]
    b = [[s.frame_id for s in b] for b in make_batches(samples, 4, shuffle_seed=3)]
    assert a == b
    assert sorted(sum(a, [])) == sorted(s.frame_id for s in samples)


def test_heterogeneous_visuals_rejected():
    with pytest.raises(DataError, match="heterogeneous"):
        make_batches(_dummy(2) + _dummy(1, (5, 3)), 4)
    with pytest.raises(DataError):
        make_batches([], 4)


def test_collate_shapes():
    train, _, _ = generate_synthetic_dataset(SyntheticTaskConfig(n_train=6, n_val=0))
    v = build_vocab(s.question for s in train)
    b = collate(train, v, 16)
    assert b.tokens.shape == (6, 16) and b.visual.shape == (6, 64, 64, 3)
    assert b.visual.max() <= 1.0
    np.testing.assert_allclose(b.boxes_xyxy(), [s.normalized_box() for s in train])
