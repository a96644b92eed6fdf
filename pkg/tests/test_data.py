import math
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tskd.data import (
    AugmentationSpec,
    AugmentedDataset,
    ConfigError,
    GenerationError,
    LabeledDataset,
    MixerSpec,
    ParseError,
    SamplingError,
    TaskSpec,
    apply_augmentation,
    build_dsd,
    dsd_from_samples,
    export_synthetic,
    generate_task,
    ingest_external_synthetic,
    mixup,
    nearest_centroid_accuracy,
    sample_batch,
)
from tskd.models import EncoderSpec, build_encoder

SMALL = TaskSpec(d_in=8, latent_dim=4, n_super=2, classes_per_super=2, pretrain_per_super=50, warp_width=8)


def toy_train(n_per_class=5, k=2, d=3, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n_per_class)
    return LabeledDataset(rng.normal(size=(labels.size, d)), labels, k)


def test_generation_is_deterministic_and_seed_sensitive():
    a, b, c = generate_task(SMALL, 3), generate_task(SMALL, 3), generate_task(SMALL, 4)
    for split in ("train", "val", "test"):
        assert np.array_equal(getattr(a.splits, split).features, getattr(b.splits, split).features)
    assert np.array_equal(a.pretrain.features, b.pretrain.features)
    assert not np.array_equal(a.splits.train.features, c.splits.train.features)


def test_split_sizes_and_label_ranges():
    g = generate_task(SMALL, 0)
    k = SMALL.num_classes
    assert len(g.splits.train) == k * SMALL.train_per_class
    assert len(g.splits.test) == k * SMALL.test_per_class
    assert g.splits.train.labels.max() == k - 1
    assert g.pretrain.num_classes == SMALL.n_super * SMALL.pretrain_classes_per_super
    sup = generate_task(replace(SMALL, pretrain_labels="super"), 0).pretrain
    assert sup.num_classes == SMALL.n_super


def test_fewer_than_two_classes_is_a_config_error():
    with pytest.raises(ConfigError):
        generate_task(replace(SMALL, n_super=1, classes_per_super=1), 0)


def _two_class(noise):
    return TaskSpec(
        d_in=2,
        latent_dim=2,
        n_super=1,
        classes_per_super=2,
        train_per_class=5000,
        val_per_class=1,
        test_per_class=5000,
        pretrain_per_super=10,
        pretrain_labels="super",
        noise=noise,
        obs_noise=0.0,
        warp="none",
    )


def test_zero_noise_is_perfectly_separable():
    g = generate_task(_two_class(0.0), 0)
    assert nearest_centroid_accuracy(g.splits.train, g.splits.test) == 1.0


def test_nearest_centroid_matches_gaussian_cdf():
    centers = generate_task(_two_class(1.0), 5).class_centers
    mu = np.linalg.norm(centers[0] - centers[1]) / 2
    sigma = mu  # mu / sigma = 1
    g = generate_task(_two_class(sigma), 5)
    assert np.allclose(g.class_centers, centers)
    oracle = 0.5 * (1 + math.erf((mu / sigma) / math.sqrt(2)))
    assert abs(nearest_centroid_accuracy(g.splits.train, g.splits.test) - oracle) < 0.03


def test_multiplier_zero_is_plain_training_set():
    train = toy_train()
    dsd = build_dsd(train, MixerSpec(), 0, seed=0)
    assert dsd.n_synthetic == 0 and dsd.originals is train


def test_dsd_size_and_provenance():
    train = toy_train()
    dsd = build_dsd(train, MixerSpec(), 3, seed=0)
    assert dsd.n_synthetic == 3 * len(train)
    assert all(s.provenance == "synthetic" and s.label is None and s.source_ids for s in dsd.synthetics)


def test_fixed_lambda_one_reproduces_first_source():
    train = toy_train()
    dsd = build_dsd(train, MixerSpec(fixed_lambda=1.0), 2, seed=1)
    assert np.array_equal(dsd.synthetic_features, train.features[dsd.source_ids[:, 0]])


def test_convex_mix_lies_on_segment():
    train = toy_train()
    dsd = build_dsd(train, MixerSpec(fixed_lambda=0.25), 1, seed=1)
    a, b = train.features[dsd.source_ids[:, 0]], train.features[dsd.source_ids[:, 1]]
    assert np.allclose(dsd.synthetic_features, 0.25 * a + 0.75 * b, rtol=0, atol=1e-15)


def test_inter_class_pair_histogram_is_uniform():
    train = toy_train(n_per_class=5)
    dsd = build_dsd(train, MixerSpec(fixed_lambda=0.5), 10_000, seed=2)
    counts = Counter(map(tuple, dsd.source_ids))
    assert len(counts) == 90 and all(a != b for a, b in counts)
    expected = 100_000 / 90
    assert all(abs(c - expected) <= 0.2 * expected for c in counts.values())


def test_intra_class_pairs_share_labels_and_visit_proportionally():
    rng = np.random.default_rng(3)
    labels = np.array([0] * 2 + [1] * 6 + [2] * 12)
    train = LabeledDataset(rng.normal(size=(20, 3)), labels, 3)
    dsd = build_dsd(train, MixerSpec(kind="intra-class"), 500, seed=3)
    src = labels[dsd.source_ids]
    assert np.array_equal(src[:, 0], src[:, 1])
    assert np.all(dsd.source_ids[:, 0] != dsd.source_ids[:, 1])
    assert np.array_equal(dsd.synthetic_labels, src[:, 0])
    freq = np.bincount(src[:, 0], minlength=3) / len(src)
    assert np.allclose(freq, [0.1, 0.3, 0.6], atol=0.01)


def test_intra_class_singleton_class_names_the_class():
    train = LabeledDataset(np.zeros((3, 2)), [0, 0, 1], 2)
    with pytest.raises(GenerationError, match="class 1"):
        build_dsd(train, MixerSpec(kind="intra-class"), 1, seed=0)


def test_encoder_latent_with_unit_lambda_returns_first_source():
    train = toy_train(d=4)
    enc = build_encoder(EncoderSpec(4, [6], 3), 0)
    dsd = build_dsd(train, MixerSpec(interpolation="encoder-latent", fixed_lambda=1.0), 2, seed=4, encoder=enc)
    assert np.allclose(dsd.synthetic_features, train.features[dsd.source_ids[:, 0]], rtol=0, atol=1e-15)
    with pytest.raises(ConfigError):
        build_dsd(train, MixerSpec(interpolation="encoder-latent"), 1, seed=0)


def test_encoder_latent_blends_nearest_neighbour_with_pixel_mix():
    train = toy_train(d=4)
    enc = build_encoder(EncoderSpec(4, [6], 3), 0)
    mixer = MixerSpec(interpolation="encoder-latent", fixed_lambda=0.3)
    dsd = build_dsd(train, mixer, 1, seed=5, encoder=enc)
    pixel = build_dsd(train, replace(mixer, interpolation="convex-pixel"), 1, seed=5)
    residual = 2 * dsd.synthetic_features - pixel.synthetic_features
    # the residual must be an actual training sample
    d = ((residual[:, None, :] - train.features[None]) ** 2).sum(-1)
    assert np.all(d.min(axis=1) < 1e-24)


def test_sampler_without_synthetics_is_all_original():
    dsd = build_dsd(toy_train(), MixerSpec(), 2, seed=0)
    batch = sample_batch(dsd, 32, False, np.random.default_rng(0))
    assert set(batch.provenance) == {"original"}


def test_sampler_synthetic_fraction():
    dsd = build_dsd(toy_train(), MixerSpec(), 2, seed=0)
    rng = np.random.default_rng(1)
    flags = np.concatenate([sample_batch(dsd, 100, True, rng).synthetic for _ in range(1000)])
    assert flags.size == 100_000
    assert 0.49 <= flags.mean() <= 0.51


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 33), st.integers(0, 2**32 - 1))
def test_strict_sampler_counts(b, seed):
    dsd = build_dsd(toy_train(), MixerSpec(), 1, seed=0)
    batch = sample_batch(dsd, b, True, np.random.default_rng(seed), strict=True)
    assert int((~batch.synthetic).sum()) == math.ceil(b / 2)
    assert int(batch.synthetic.sum()) == b // 2


def test_sampler_empty_pool_errors():
    with pytest.raises(SamplingError):
        sample_batch(AugmentedDataset.plain(toy_train()), 64, True, np.random.default_rng(0))


def test_sampled_rows_come_from_their_pools():
    dsd = build_dsd(toy_train(), MixerSpec(), 2, seed=0)
    batch = sample_batch(dsd, 64, True, np.random.default_rng(2))
    for row in range(64):
        pool = dsd.synthetic_features if batch.synthetic[row] else dsd.originals.features
        assert np.array_equal(batch.features[row], pool[batch.index[row]])
    assert np.all(batch.labels[batch.synthetic] == -1)


def test_identity_augmentation_leaves_batch_unchanged():
    dsd = build_dsd(toy_train(), MixerSpec(), 1, seed=0)
    batch = sample_batch(dsd, 16, True, np.random.default_rng(3))
    aug = apply_augmentation(batch, AugmentationSpec.identity(), np.random.default_rng(4), 2)
    assert np.array_equal(aug.features, batch.features)
    assert np.all(aug.mixup_partner == -1)
    assert np.array_equal(aug.targets[~batch.synthetic].argmax(1), batch.labels[~batch.synthetic])
    assert not aug.targets[batch.synthetic].any()


def test_mixup_with_unit_lambda_is_identity():
    x, t = np.arange(6.0).reshape(3, 2), np.eye(3)
    mx, mt = mixup(x, t, 1.0, [1, 2, 0])
    assert np.array_equal(mx, x) and np.array_equal(mt, t)
    mx, mt = mixup(x, t, 0.7, [1, -1, 0])
    assert np.allclose(mx[0], 0.7 * x[0] + 0.3 * x[1]) and np.array_equal(mx[1], x[1])
    assert np.allclose(mt.sum(1), 1.0)


def test_mixup_never_touches_synthetic_rows():
    dsd = build_dsd(toy_train(), MixerSpec(), 2, seed=0)
    rng = np.random.default_rng(5)
    spec = AugmentationSpec(mixup_alpha=0.2)
    violations = 0
    for _ in range(10_000):
        batch = sample_batch(dsd, 8, True, rng)
        aug = apply_augmentation(batch, spec, rng, 2)
        p = aug.mixup_partner
        violations += int(np.sum(batch.synthetic & (p >= 0)))
        violations += int(np.sum((p >= 0) & batch.synthetic[np.maximum(p, 0)]))
        assert np.array_equal(aug.features[batch.synthetic], batch.features[batch.synthetic])
    assert violations == 0


def test_crop_and_flip_are_feature_space_transforms():
    batch = sample_batch(AugmentedDataset.plain(toy_train(d=10)), 50, False, np.random.default_rng(6))
    crop = apply_augmentation(batch, AugmentationSpec(crop_fraction=0.3, mixup_alpha=0), np.random.default_rng(7), 2)
    kept = (crop.features != 0).sum(axis=1)
    assert np.all(kept <= 3)
    flip = apply_augmentation(batch, AugmentationSpec(flip=True, mixup_alpha=0), np.random.default_rng(8), 2)
    for row, orig in zip(flip.features, batch.features):
        assert np.array_equal(row, orig) or np.array_equal(row, orig[::-1])
    with pytest.raises(ConfigError):
        AugmentationSpec(crop_fraction=0.0).validate()


def test_external_format_round_trip(tmp_path):
    dsd = build_dsd(toy_train(), MixerSpec(), 2, seed=9)
    path = export_synthetic(tmp_path / "syn.txt", dsd.synthetics)
    back = ingest_external_synthetic(path, d_in=3)
    assert np.array_equal(np.array([s.features for s in back]), dsd.synthetic_features)
    assert [s.source_ids for s in back] == [tuple(map(int, p)) for p in dsd.source_ids]
    assert all(s.label is None and s.provenance == "synthetic" for s in back)
    again = dsd_from_samples(dsd.originals, back)
    assert np.array_equal(again.synthetic_features, dsd.synthetic_features)


def test_external_empty_and_malformed(tmp_path):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert ingest_external_synthetic(empty, d_in=3) == []
    short = tmp_path / "short.txt"
    short.write_text("1,2,3\n1,2\n")
    with pytest.raises(ParseError, match="record 1"):
        ingest_external_synthetic(short, d_in=3)
    bad = tmp_path / "bad.txt"
    bad.write_text("1,x,3\n")
    with pytest.raises(ParseError, match="record 0"):
        ingest_external_synthetic(bad)
