import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cxrnet.data import (LABELS, NO_FINDING, PATHOLOGIES, AgeScaler, AugmentParams, Motif, RecordDataset, SplitPlan,
                         SynthSpec, apply_augment, augment_train, corpus_stats, decode_labels, encode_labels,
                         make_splits, meta_matrix, official_split, parse_entry_csv, preprocess_eval, resize_bilinear,
                         sample_crop, synth_dataset, write_corpus, write_entry_csv)
from cxrnet.errors import DataFormatError, LabelError, SplitError, StateError

HEADER = "Image Index,Finding Labels,Follow-up #,Patient ID,Patient Age,Patient Gender,View Position\n"


# labels

def test_encode_orders_labels_and_marks_no_finding():
    y = encode_labels("Edema|Cardiomegaly")
    assert decode_labels(y) == "Cardiomegaly|Edema"
    assert decode_labels(encode_labels("")) == NO_FINDING
    assert decode_labels(encode_labels(NO_FINDING)) == NO_FINDING


def test_encode_rejects_unknown_and_contradictory_labels():
    with pytest.raises(LabelError):
        encode_labels("Fracture")
    with pytest.raises(LabelError):
        encode_labels("No Finding|Mass")


@settings(max_examples=200, deadline=None)
@given(st.sets(st.sampled_from(PATHOLOGIES)))
def test_any_pathology_subset_roundtrips(subset):
    y = encode_labels(sorted(subset))
    assert y.sum() == max(len(subset), 1)
    assert bool(y[-1]) == (not subset)
    np.testing.assert_array_equal(encode_labels(decode_labels(y)), y)


# records

def _csv(tmp_path, *rows):
    p = tmp_path / "entries.csv"
    p.write_text(HEADER + "".join(r + "\n" for r in rows))
    return p


def test_parse_maps_gender_view_and_clamps_age(tmp_path):
    p = _csv(tmp_path, "a.png,Mass|Edema,0,00001,58,M,AP", "b.png,No Finding,1,00001,414,F,PA",
             "c.png,,0,00002,006M,F,PA")
    a, b, c = parse_entry_csv(p)
    assert (a.gender, a.view, a.age_years) == (1, 1, 58.0)
    assert (b.gender, b.view, b.age_years, b.age_flagged) == (0, 0, 120.0, True)
    assert c.age_years == pytest.approx(0.5) and c.labels[-1] == 1
    assert corpus_stats([a, b, c]).flagged_ages == 1


def test_parse_errors_name_the_line(tmp_path):
    with pytest.raises(LabelError, match=":3:"):
        parse_entry_csv(_csv(tmp_path, "a.png,Mass,0,1,5,M,AP", "b.png,Fracture,0,1,5,M,AP"))
    with pytest.raises(DataFormatError, match=":2:"):
        parse_entry_csv(_csv(tmp_path, "a.png,Mass,0,1,5,X,AP"))
    (tmp_path / "bad.csv").write_text("Image Index,Patient ID\n")
    with pytest.raises(DataFormatError, match="missing column"):
        parse_entry_csv(tmp_path / "bad.csv")
    with pytest.raises(DataFormatError):
        parse_entry_csv(tmp_path / "absent.csv")


def test_entry_csv_roundtrip_and_stats(tmp_path):
    corpus = synth_dataset(SynthSpec(n_patients=10, background_rate=0.2), seed=3)
    write_entry_csv(corpus.records, tmp_path / "e.csv")
    back = parse_entry_csv(tmp_path / "e.csv")
    assert [r.image_ref for r in back] == [r.image_ref for r in corpus.records]
    assert all(np.array_equal(a.labels, b.labels) for a, b in zip(back, corpus.records))
    s = corpus_stats(back)
    assert s.n_records == 20 and s.n_patients == 10
    assert s.female + s.male == 20 and s.pa + s.ap == 20
    assert sum(s.positives[n] for n in LABELS) >= 20
    assert "Cardiomegaly" in s.disease_table() and "View Position" in s.meta_table()


# splits

def _skewed(n_patients, seed=0):
    return synth_dataset(SynthSpec(n_patients=n_patients, images_per_patient=4, skewed_patients=True,
                                   image_size=8), seed).records


def _check_plan(records, plan):
    for r in range(plan.n_resamples):
        groups = {s: {rec.patient_id for rec in records if plan.subset_of(rec, r) == s}
                  for s in ("train", "val", "test")}
        assert not groups["train"] & groups["val"] and not groups["train"] & groups["test"]
        assert not groups["val"] & groups["test"]
        counts = plan.counts(records, r)
        assert sum(c["images"] for c in counts.values()) == len(records)
        for s, frac in zip(("train", "val", "test"), (0.7, 0.1, 0.2)):
            assert abs(counts[s]["images"] / len(records) - frac) <= 0.015


def test_skewed_thousand_patient_splits_hold_quotas():
    records = _skewed(1000)
    plan = make_splits(records, seed=7)
    assert plan.n_resamples == 5
    _check_plan(records, plan)
    assert make_splits(records, seed=7).to_json() == plan.to_json()
    assert make_splits(records, seed=8).to_json() != plan.to_json()


def test_one_image_per_patient_splits_exactly():
    records = synth_dataset(SynthSpec(n_patients=100, images_per_patient=1, image_size=8), 0).records
    plan = make_splits(records, seed=0)
    for r in range(5):
        assert [c["images"] for c in plan.counts(records, r).values()] == [70, 10, 20]


def test_too_few_patients_or_a_dominant_patient_is_an_error():
    records = synth_dataset(SynthSpec(n_patients=1, images_per_patient=5, image_size=8), 0).records
    with pytest.raises(SplitError, match="at least 3 patients"):
        make_splits(records, 0)
    records = synth_dataset(SynthSpec(n_patients=3, images_per_patient=10, image_size=8), 0).records
    with pytest.raises(SplitError, match="tolerance"):
        make_splits(records, 0)


def test_split_plan_json_roundtrip(tmp_path):
    records = _skewed(50)
    plan = make_splits(records, seed=1)
    plan.save(tmp_path / "s.json")
    back = SplitPlan.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.indices(records, 2, "val"), plan.indices(records, 2, "val"))


def test_official_split_holds_out_whole_patients():
    records = _skewed(40)
    refs = [r.image_ref for r in records]
    plan = official_split(records, refs[:-10], refs[-10:])
    val_patients = {r.patient_id for r in records if plan.subset_of(r, 0) == "val"}
    train_patients = {r.patient_id for r in records if plan.subset_of(r, 0) == "train"}
    assert val_patients and not val_patients & train_patients
    with pytest.raises(SplitError):
        official_split(records, ["nope.png"], [])


# transforms

def test_identity_augment_only_rescales():
    img = np.random.default_rng(0).integers(0, 256, (32, 32)).astype(np.uint8)
    out = apply_augment(img, AugmentParams(0.0, 0, 0, 32, 32, False), 32)
    np.testing.assert_allclose(out[0], img / 255.0, atol=1e-6)
    flipped = apply_augment(img, AugmentParams(0.0, 0, 0, 32, 32, True), 32)
    np.testing.assert_allclose(flipped[0], img[:, ::-1] / 255.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 255), st.integers(0, 2**32 - 1))
def test_constant_image_stays_constant(value, seed):
    out = augment_train(np.full((40, 50), value, np.uint8), np.random.default_rng(seed), 24)
    np.testing.assert_allclose(out, value / 255.0, atol=1e-5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(8, 80), st.integers(8, 80))
def test_crops_fit_and_augmented_pixels_stay_in_unit_range(seed, h, w):
    rng = np.random.default_rng(seed)
    top, left, ch, cw = sample_crop(rng, h, w)
    assert 0 <= top and top + ch <= h and 0 <= left and left + cw <= w
    img = rng.integers(0, 256, (h, w)).astype(np.uint8)
    out = augment_train(img, rng, 16, channels=3)
    assert out.shape == (3, 16, 16) and out.min() >= 0 and out.max() <= 1


def test_augmentation_is_deterministic_per_seed():
    img = np.random.default_rng(0).integers(0, 256, (48, 48)).astype(np.uint8)
    a = augment_train(img, np.random.default_rng(5), 32)
    np.testing.assert_array_equal(a, augment_train(img, np.random.default_rng(5), 32))


def test_eval_preprocessing_crops_the_centre_of_a_256_resize():
    img = np.random.default_rng(1).integers(0, 256, (1024, 1024)).astype(np.uint8)
    out = preprocess_eval(img, 224)
    ref = resize_bilinear(img, 256, 256)[16:240, 16:240] / 255.0
    assert out.shape == (1, 224, 224)
    np.testing.assert_allclose(out[0], ref, atol=1e-6)


def test_age_scaler():
    s = AgeScaler.fit([20, 60, 100])
    assert s(20) == 0 and s(100) == 1 and s(60) == pytest.approx(0.5)
    ages = np.linspace(0, 130, 50)
    scaled = s(ages)
    assert np.all(np.diff(scaled) >= 0) and scaled.min() == 0 and scaled.max() == 1
    with pytest.raises(StateError):
        AgeScaler()(50)


# synthetic corpus and dataset

def test_synthetic_corpus_is_deterministic_and_boxes_match_labels():
    spec = SynthSpec(n_patients=8, motifs=(Motif(0, radius=6),), meta_labels=((3, "view"),))
    a, b = synth_dataset(spec, 4), synth_dataset(spec, 4)
    np.testing.assert_array_equal(a.images, b.images)
    for i, r in enumerate(a.records):
        assert (a.box(i, 0) is not None) == bool(r.labels[0])
        assert r.labels[3] == r.view
        if a.box(i, 0):
            t, l, bt, rt = a.box(i, 0)
            assert a.images[i, t:bt, l:rt].max() > a.images[i].mean()


def test_record_dataset_reads_written_corpus(tmp_path):
    corpus = synth_dataset(SynthSpec(n_patients=4, image_size=40), 0)
    records = parse_entry_csv(write_corpus(corpus, tmp_path))
    scaler = AgeScaler.fit([r.age_years for r in records])
    ds = RecordDataset(records, 32, scaler, image_dir=tmp_path / "images", use_meta=True)
    imgs, meta, labels = ds.batch([0, 3])
    assert imgs.shape == (2, 1, 32, 32) and meta.shape == (2, 3) and labels.shape == (2, 15)
    np.testing.assert_array_equal(meta, meta_matrix([records[0], records[3]], scaler))
    train = ds.subset([1, 2], train=True)
    x1 = train.batch([0, 1], np.random.default_rng(0))[0]
    np.testing.assert_array_equal(x1, train.batch([0, 1], np.random.default_rng(0))[0])
    missing = RecordDataset(records, 32, image_dir=tmp_path / "nowhere")
    with pytest.raises(OSError, match="nowhere"):
        missing.raw(0)
