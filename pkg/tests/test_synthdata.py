import numpy as np
import pytest

from attention_focus import synthdata as sd


@pytest.fixture(scope="module")
def data():
    return sd.generate(sd.SynthSpec(samples_per_class=10))


def test_layout(data):
    spec = data.spec
    assert data.patches.shape == (80, 16, 64)
    assert data.images.shape == (80, 32, 32, 1)
    assert (data.object_masks.sum(axis=1) == spec.object_patch_count).all()
    # only known classes carry labels, half of each
    assert set(data.labels[data.labeled]) == {0, 1, 2, 3}
    assert data.labeled.sum() == 4 * 5
    assert (data.is_old == (data.labels < 4)).all()
    assert len(data.unlabeled_indices) == 60


def test_deterministic_in_spec(data):
    again = sd.generate(data.spec)
    np.testing.assert_array_equal(again.patches, data.patches)
    other = sd.generate(sd.SynthSpec(samples_per_class=10, seed=1))
    assert not np.array_equal(other.patches, data.patches)


def test_samples_independent_of_dataset_size(data):
    bigger = sd.generate(sd.SynthSpec(samples_per_class=20))
    # sample i draws from its own stream; class 0 occupies the first rows in both
    np.testing.assert_array_equal(bigger.patches[:10], data.patches[:10])


def test_background_correlation(data):
    full = sd.generate(sd.SynthSpec(samples_per_class=10, background_correlation=1.0))
    assert (full.scenes == full.labels).all()
    none = sd.generate(sd.SynthSpec(samples_per_class=50, background_correlation=0.0))
    assert abs((none.scenes == none.labels).mean() - 1 / 8) < 0.06


def test_image_patch_round_trip(data):
    np.testing.assert_array_equal(sd.images_to_patches(data.images, data.spec), data.patches)


def test_zero_jitter_keeps_background(data):
    spec = sd.SynthSpec(samples_per_class=10, labeled_bg_jitter=0.0, unlabeled_bg_jitter=0.0, object_jitter=0.0)
    d = sd.generate(spec)
    view = sd.augment_patches(d, np.arange(8), np.random.default_rng(0))
    np.testing.assert_allclose(view, d.patches[:8], atol=1e-12)


def test_labeled_background_resampled_unlabeled_kept(data):
    rng = np.random.default_rng(0)
    lab, unl = np.flatnonzero(data.labeled)[:5], data.unlabeled_indices[:5]
    vl = sd.augment_patches(data, lab, rng)
    vu = sd.augment_patches(data, unl, rng)
    bg_l, bg_u = ~data.object_masks[lab], ~data.object_masks[unl]
    drift_l = np.abs(vl - data.patches[lab])[bg_l].mean()
    drift_u = np.abs(vu - data.patches[unl])[bg_u].mean()
    assert drift_u < 0.3 * drift_l


def test_augment_single_image(data):
    img = sd.augment(3, data, np.random.default_rng(0))
    assert img.shape == (32, 32, 1)


def test_pruning_precision():
    mask = np.array([2, 5])
    assert sd.pruning_precision([], mask) == 1.0
    assert sd.pruning_precision([0, 2, 7, 9], mask) == 0.75
    keep = np.array([[True, False, False, True], [False, True, True, True]])
    objects = np.array([[False, True, False, False], [False, False, False, False]])
    assert sd.pruning_precision_batch(keep, objects) == (2 / 3, 3)
    assert sd.pruning_precision_batch(np.ones((1, 4), bool), objects[:1]) == (1.0, 0)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(known_classes=8),
        dict(num_patches=15),
        dict(background_correlation=1.5),
        dict(object_patch_count=16),
        dict(labeled_bg_jitter=0.1, unlabeled_bg_jitter=0.5),
    ],
)
def test_spec_validation(kwargs):
    with pytest.raises(sd.SpecError):
        sd.SynthSpec(**kwargs)


def test_spec_json_round_trip():
    spec = sd.SynthSpec(seed=4, background_correlation=0.7)
    assert sd.SynthSpec.from_json(spec.to_json()) == spec


def test_dataset_dump_round_trip(data, tmp_path):
    path = tmp_path / "d.afds"
    sd.save_dataset(data, path)
    back = sd.load_dataset(path)
    assert back.spec == data.spec
    np.testing.assert_array_equal(back.patches, data.patches)
    for name in ("labels", "labeled", "is_old", "scenes", "object_masks"):
        np.testing.assert_array_equal(getattr(back, name), getattr(data, name))
    raw = path.read_bytes()
    assert raw[:4] == b"AFDS" and int.from_bytes(raw[8:12], "little") == 80
    assert sd.sidecar_path(path).name == "d.afds.json"


def test_dump_rejects_foreign(tmp_path, data):
    path = tmp_path / "x.afds"
    sd.save_dataset(data, path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        sd.load_dataset(path)


def test_precision_accepts_prune_outcome():
    from attention_focus.pruning import PruneOutcome

    out = PruneOutcome([0, 1], [2, 3], 0.1, "adaptive")
    assert sd.pruning_precision(out, np.array([3])) == 0.5


def test_random_half_pruning_precision_is_background_fraction():
    rng = np.random.default_rng(0)
    mask = np.array([1, 6, 11, 12])
    vals = [sd.pruning_precision(rng.choice(16, 8, replace=False), mask) for _ in range(1000)]
    assert abs(np.mean(vals) - 12 / 16) < 0.01


def test_uncorrelated_background_carries_no_class_information():
    d = sd.generate(sd.SynthSpec(samples_per_class=100, background_correlation=0.0))
    # scenes are drawn independently of the class: the joint table factorizes
    joint = np.zeros((8, 8))
    np.add.at(joint, (d.labels, d.scenes), 1)
    joint /= joint.sum()
    indep = joint.sum(1, keepdims=True) * joint.sum(0, keepdims=True)
    mi = float((joint[joint > 0] * np.log(joint[joint > 0] / indep[joint > 0])).sum())
    # plug-in MI of 800 independent draws on an 8x8 table is biased by ~49/(2*800)
    assert mi < 0.06


def test_background_probe_with_full_correlation():
    spec = sd.SynthSpec(
        num_classes=4, known_classes=2, samples_per_class=100, background_correlation=1.0,
        object_signal=0.0, objectness=0.0,
    )
    d = sd.generate(spec)
    bg = np.stack([d.patches[i][~d.object_masks[i]].mean(axis=0) for i in range(len(d))])
    onehot = np.eye(4)[d.labels]
    train = np.arange(len(d)) % 2 == 0
    x = np.hstack([bg, np.ones((len(d), 1))])
    w, *_ = np.linalg.lstsq(x[train], onehot[train], rcond=None)
    acc = (np.argmax(x[~train] @ w, axis=1) == d.labels[~train]).mean()
    assert acc >= 0.95


def test_view_differences_monte_carlo(data):
    rng = np.random.default_rng(5)
    lab, unl = np.flatnonzero(data.labeled)[0], data.unlabeled_indices[0]

    def bg_and_obj_change(i):
        a = sd.augment_patches(data, np.array([i]), rng)[0]
        b = sd.augment_patches(data, np.array([i]), rng)[0]
        diff = np.linalg.norm(a - b, axis=1)
        return diff[~data.object_masks[i]].mean(), diff[data.object_masks[i]].mean()

    lab_bg, lab_obj = np.mean([bg_and_obj_change(lab) for _ in range(100)], axis=0)
    unl_bg, _ = np.mean([bg_and_obj_change(unl) for _ in range(100)], axis=0)
    assert lab_bg > unl_bg
    assert lab_obj < lab_bg


def test_object_statistics_ignore_background_shuffle():
    spec = sd.SynthSpec(samples_per_class=50, background_correlation=0.0)
    d = sd.generate(spec)
    obj = d.patches[d.object_masks]
    shuffled = d.patches.copy()
    perm = np.random.default_rng(1).permutation(len(d))
    shuffled[~d.object_masks] = d.patches[perm][~d.object_masks[perm]]  # equal per-sample counts keep shapes aligned
    obj_after = shuffled[d.object_masks]
    np.testing.assert_array_equal(obj_after.mean(axis=0), obj.mean(axis=0))
    np.testing.assert_array_equal(obj_after.var(axis=0), obj.var(axis=0))


def test_split_sizes_follow_protocol(data):
    per_class = np.bincount(data.labels)
    assert (per_class == 10).all()
    assert data.labeled[data.labels >= 4].sum() == 0
    assert data.labeled[data.labels < 4].mean() == 0.5
