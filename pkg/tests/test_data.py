import json
import os

import numpy as np
import pytest

from gmdg import data


def test_phantoms_are_deterministic_and_seed_dependent():
    spec = data.PhantomSpec(size=(32, 32), seed=4)
    a1, b1, l1 = data.generate_phantom_pair(spec)
    a2, b2, l2 = data.generate_phantom_pair(spec)
    np.testing.assert_array_equal(a1.image, a2.image)
    np.testing.assert_array_equal(l1, l2)
    _, _, l3 = data.generate_phantom_pair(spec.with_seed(5))
    assert not np.array_equal(l1, l3)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_structure_count_sets_classes(n):
    spec = data.PhantomSpec(size=(40, 40), num_structures=n, seed=1)
    _, _, labels = data.generate_phantom_pair(spec)
    assert set(np.unique(labels)) == set(range(n + 1))


def test_ring_encloses_inner_disc():
    _, _, labels = data.generate_phantom_pair(data.PhantomSpec(size=(48, 48), seed=2))
    inner = labels[0] == 2
    # every inner pixel's 4-neighbours are inner or ring
    ys, xs = np.nonzero(inner)
    for dy, dx in ((0, 1), (1, 0), (0, -1), (-1, 0)):
        assert set(np.unique(labels[0][ys + dy, xs + dx])) <= {1, 2}


def test_multislice_volumes_shrink():
    _, _, labels = data.generate_phantom_pair(data.PhantomSpec(size=(40, 40), n_slices=3, seed=3))
    areas = [(s > 0).sum() for s in labels]
    assert labels.shape == (3, 40, 40) and areas[0] > areas[-1]


def test_lesion_lives_inside_its_class():
    spec = data.PhantomSpec(size=(48, 48), seed=6, lesion={"class": 1, "radius_frac": 0.8, "delta": -0.35})
    labels = data.phantom_labels(spec)
    mask = data.lesion_mask(spec, labels)
    assert mask.any() and np.all(labels[mask] == 1)


def test_spec_validation():
    with pytest.raises(ValueError):
        data.PhantomSpec(num_structures=4)
    with pytest.raises(ValueError):
        data.PhantomSpec(num_structures=1, lesion={"class": 2})
    with pytest.raises(ValueError):
        data.PhantomSpec(intensities={"A": [0, 1], "B": [0, 1]})
    spec = data.PhantomSpec(size=(20, 24), seed=3)
    assert data.PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_case_record_checks():
    with pytest.raises(data.DatasetError):
        data.CaseRecord("c", "", np.zeros((4, 4)))
    with pytest.raises(data.DatasetError):
        data.CaseRecord("c", "A", np.zeros((4, 4)), np.zeros((4, 5)))
    assert data.CaseRecord("c", "A", np.zeros((4, 4))).image.shape == (1, 4, 4)


def test_center_crop_pads_small_inputs():
    out = data.center_crop(np.ones((1, 100, 140)))
    assert out.shape == (1, 128, 128)
    assert out[0, 13, 20] == 0 and out[0, 14, 20] == 1 and out[0, 113, 20] == 1


def test_cardiac_resizes_to_source_shape_first():
    img = np.random.default_rng(0).random((1, 200, 200))
    lab = (img > 0.5).astype(np.int64)
    out, lab_out = data.preprocess_volume(img, lab, "cardiac", target_shape=(150, 150))
    assert out.shape == lab_out.shape == (1, 128, 128)
    assert set(np.unique(lab_out)) <= {0, 1}


def test_resize_identity_and_corners():
    a = np.random.default_rng(1).random((7, 9))
    np.testing.assert_array_equal(data.resize2d(a, (7, 9)), a)
    r = data.resize2d(a, (13, 17))
    assert r[0, 0] == a[0, 0] and r[-1, -1] == a[-1, -1]


def test_manifest_tags_and_errors():
    tagged = [{"case_id": "x", "split": "test"}, {"case_id": "y", "split": "train"}]
    assert data.split_manifest(tagged) == [("x", "test"), ("y", "train")]
    with pytest.raises(data.DatasetError):
        data.split_manifest([{"case_id": "x", "split": "val"}])
    assert [s for _, s in data.split_manifest(["a", "b", "c"])] == ["train", "train", "test"]
    ids = [str(i) for i in range(25)]
    assert sum(s == "test" for _, s in data.split_manifest(ids)) == 2


def test_nifti_round_trip(tmp_path):
    vol = np.random.default_rng(2).normal(size=(3, 10, 12))
    p = os.path.join(tmp_path, "v.nii.gz")
    data.write_volume(p, vol, spacing=(1.5, 1.5, 4.0))
    back, spacing = data.read_volume(p)
    np.testing.assert_array_equal(back, vol)
    assert spacing == (1.5, 1.5, 4.0)
    lab = np.random.default_rng(3).integers(0, 4, (3, 10, 12))
    data.write_volume(p, lab)
    np.testing.assert_array_equal(data.read_volume(p)[0], lab)


def test_phantom_set_on_disk(tmp_path):
    spec = data.PhantomSpec(size=(24, 24))
    pairs = data.generate_phantom_set(spec, 10)
    data.save_phantom_set(tmp_path, pairs)
    test = data.load_nifti_dataset(tmp_path, "B", split="test", require_labels=True)
    assert [r.case_id for r in test] == [pairs[-1][1].case_id]
    np.testing.assert_array_equal(test[0].image, pairs[-1][1].image)
    np.testing.assert_array_equal(test[0].label, pairs[-1][2])
    train = data.load_nifti_dataset(tmp_path, "A", split="train")
    assert len(train) == 9 and all(r.split == "train" for r in train)
    X, y = data.stack_slices(train)
    assert X.shape == y.shape == (9, 24, 24)
    with pytest.raises(data.DatasetError):
        data.load_nifti_dataset(tmp_path, "C")
    os.remove(os.path.join(tmp_path, f"{pairs[0][0].case_id}_label.nii.gz"))
    with pytest.raises(data.DatasetError):
        data.load_nifti_dataset(tmp_path, "A", require_labels=True)


def test_loading_with_preprocessing(tmp_path):
    pairs = data.generate_phantom_set(data.PhantomSpec(size=(40, 40)), 2)
    data.save_phantom_set(tmp_path, pairs)
    recs = data.load_nifti_dataset(tmp_path, "B", profile="brain", out_shape=(32, 32))
    assert all(r.image.shape == (1, 32, 32) for r in recs)
