import numpy as np
import numpy.testing as npt
import pytest

from patternforge import data
from patternforge.data import CorruptionSpec


def _zero_spec(seed=0):
    return CorruptionSpec(noise_std=0.0, drift_amp=0.0, shift_max=0,
                          split_prob=0.0, amp_jitter=0.0, seed=seed)


def test_gen_ideal_deterministic():
    a = data.gen_ideal(3, 5, 64, seed=7)
    b = data.gen_ideal(3, 5, 64, seed=7)
    npt.assert_array_equal(a.values(), b.values())
    npt.assert_array_equal(a.labels(), b.labels())
    c = data.gen_ideal(3, 5, 64, seed=8)
    assert not np.array_equal(a.values(), c.values())


def test_gen_ideal_ranges_and_labels():
    ds = data.gen_ideal(4, 10, 96, seed=1)
    vals = ds.values()
    assert vals.shape == (40, 96)
    assert np.all(vals >= 0.0) and np.all(vals <= 1.0)
    assert set(ds.labels().tolist()) == {0, 1, 2, 3}


def test_class_templates_pairwise_distinct():
    templates = data.class_templates(7, 256, template_seed=0)
    l1_min = min(np.abs(templates[i] - templates[j]).sum()
                 for i in range(7) for j in range(i + 1, 7))
    assert l1_min > 0.0


def test_nearest_template_classifier_perfect_at_zero_jitter():
    classes, length = 5, 128
    ds = data.gen_ideal(classes, 4, length, seed=3, jitter=0.0, template_seed=9)
    templates = data.class_templates(classes, length, template_seed=9)
    values, labels = ds.values(), ds.labels()
    predictions = np.array([
        int(np.argmin([np.abs(v - t).sum() for t in templates])) for v in values
    ])
    npt.assert_array_equal(predictions, labels)


def test_shared_templates_across_sample_seeds():
    a = data.gen_ideal(3, 2, 64, seed=1, jitter=0.0, template_seed=4)
    b = data.gen_ideal(3, 2, 64, seed=2, jitter=0.0, template_seed=4)
    npt.assert_array_equal(a.values(), b.values())  # zero jitter: templates only
    c = data.gen_ideal(3, 2, 64, seed=1, jitter=0.0, template_seed=5)
    assert not np.array_equal(a.values(), c.values())


def test_gen_ideal_validation():
    with pytest.raises(ValueError, match="classes"):
        data.gen_ideal(1, 5, 64, seed=0)
    with pytest.raises(ValueError, match="length"):
        data.gen_ideal(3, 5, 32, seed=0)


def test_corrupt_zero_spec_is_identity_with_pairing():
    ideal = data.gen_ideal(3, 4, 64, seed=2)
    out = data.corrupt(ideal, _zero_spec())
    imp = out.values(data.ROLE_IMPERFECT)
    gt = out.values(data.ROLE_GROUND_TRUTH)
    npt.assert_array_equal(imp, ideal.values())
    npt.assert_array_equal(gt, ideal.values())
    assert out.pairing == {i: 12 + i for i in range(12)}
    npt.assert_array_equal(out.paired_ground_truth(), imp)


def test_corrupt_preserves_labels_and_length():
    ideal = data.gen_ideal(3, 6, 64, seed=4)
    out = data.corrupt(ideal, CorruptionSpec(seed=4))
    assert out.length == 64
    npt.assert_array_equal(out.labels(data.ROLE_IMPERFECT), ideal.labels())
    npt.assert_array_equal(out.labels(data.ROLE_GROUND_TRUTH), ideal.labels())
    vals = out.values(data.ROLE_IMPERFECT)
    assert np.all(vals >= 0.0) and np.all(vals <= 1.0)


def test_corrupt_noise_only_statistics():
    # noise-only corruption: mean l2 distance to source is close to std*sqrt(d)
    std, length = 0.02, 256
    ideal = data.gen_ideal(4, 30, length, seed=5)
    spec = CorruptionSpec(noise_std=std, drift_amp=0.0, shift_max=0,
                          split_prob=0.0, amp_jitter=0.0, seed=5)
    out = data.corrupt(ideal, spec)
    diffs = out.values(data.ROLE_IMPERFECT) - out.paired_ground_truth()
    mean_l2 = np.sqrt((diffs ** 2).sum(axis=1)).mean()
    expected = std * np.sqrt(length)
    assert abs(mean_l2 - expected) / expected < 0.10


def test_corrupt_deterministic_per_seed():
    ideal = data.gen_ideal(3, 4, 64, seed=6)
    a = data.corrupt(ideal, CorruptionSpec(seed=9))
    b = data.corrupt(ideal, CorruptionSpec(seed=9))
    npt.assert_array_equal(a.values(), b.values())


def test_corruption_spec_validation():
    with pytest.raises(ValueError, match="non-negative"):
        CorruptionSpec(noise_std=-0.1)
    with pytest.raises(ValueError, match="probability"):
        CorruptionSpec(split_prob=1.5)


def test_split_counts_and_disjointness():
    ideal = data.gen_ideal(3, 100, 64, seed=10)
    train, test = data.split(ideal, 0.8, seed=11)
    for k in range(3):
        assert (train.labels() == k).sum() == 80
        assert (test.labels() == k).sum() == 20
    # disjoint by content: no train pattern appears in the test set
    test_rows = {r.tobytes() for r in test.values()}
    assert not any(r.tobytes() in test_rows for r in train.values())


def test_split_deterministic():
    ideal = data.gen_ideal(3, 10, 64, seed=12)
    a_train, a_test = data.split(ideal, 0.7, seed=13)
    b_train, b_test = data.split(ideal, 0.7, seed=13)
    npt.assert_array_equal(a_train.values(), b_train.values())
    npt.assert_array_equal(a_test.values(), b_test.values())


def test_split_preserves_pairing():
    ideal = data.gen_ideal(3, 10, 64, seed=14)
    imperfect = data.corrupt(ideal, CorruptionSpec(seed=14))
    train, test = data.split(imperfect, 0.5, seed=15)
    for side in (train, test):
        imp = side.indices(data.ROLE_IMPERFECT)
        assert len(imp) == 15
        assert set(side.pairing.keys()) == set(imp)
        gt = side.paired_ground_truth()
        assert gt.shape == (15, 64)
        npt.assert_array_equal(side.labels(data.ROLE_IMPERFECT),
                               side.labels(data.ROLE_GROUND_TRUTH))


def test_split_class_too_small():
    ideal = data.gen_ideal(2, 1, 64, seed=16)
    with pytest.raises(ValueError, match="cannot be split"):
        data.split(ideal, 0.5, seed=17)


def test_save_load_roundtrip(tmp_path):
    ideal = data.gen_ideal(3, 5, 64, seed=18)
    ds = data.corrupt(ideal, CorruptionSpec(seed=18))
    path = tmp_path / "ds.pfds"
    data.save_dataset(path, ds)
    loaded = data.load_dataset(path)
    npt.assert_array_equal(loaded.values(), ds.values())
    npt.assert_array_equal(loaded.labels(), ds.labels())
    assert [p.role for p in loaded.patterns] == [p.role for p in ds.patterns]
    assert loaded.pairing == ds.pairing
    assert loaded.manifest == ds.manifest
    # byte-identical on re-save
    path2 = tmp_path / "ds2.pfds"
    data.save_dataset(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_corrupted_tail(tmp_path):
    ds = data.gen_ideal(2, 3, 64, seed=19)
    path = tmp_path / "ds.pfds"
    data.save_dataset(path, ds)
    raw = bytearray(path.read_bytes())
    raw[-6] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(data.DatasetFormatError, match="checksum"):
        data.load_dataset(path)


def test_load_rejects_wrong_magic(tmp_path):
    path = tmp_path / "model.pfck"
    path.write_bytes(b"PFCK" + b"\x00" * 64)
    with pytest.raises(data.DatasetFormatError, match="magic"):
        data.load_dataset(path)


def test_export_csv(tmp_path):
    ds = data.gen_ideal(2, 2, 64, seed=20)
    path = tmp_path / "ds.csv"
    data.export_csv(path, ds)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 4
    first = lines[0].split(",")
    assert first[0] == "0"
    assert len(first) == 65
    npt.assert_allclose(np.array(first[1:], dtype=float), ds.patterns[0].values)
