import logging
import os
from collections import Counter

import numpy as np
import pytest
from PIL import Image

from cgct.data import (
    SOURCE_DOMAIN_ID,
    DomainDataset,
    EpochSampler,
    MTDATask,
    PairedBatchSampler,
    Sample,
    SyntheticSpec,
    build_folder_task,
    circle_centroids,
    generate_synthetic_task,
    load_image_folder,
    shift_centroids,
    split_dataset,
)
from cgct.errors import ConfigurationError, ContractViolation, DatasetError


def make_sample(uid, label=0, domain_id=0, d=4):
    return Sample(np.zeros(d, dtype=np.float32), label, domain_id, uid)


def write_image(path, color):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    Image.new("RGB", (8, 8), color).save(path)


def test_synthetic_task_shapes():
    """Default spec: labeled source, three unlabeled targets, eval split for every domain."""
    task = generate_synthetic_task(SyntheticSpec())
    assert task.n_c == 4
    assert len(task.source) == 400
    assert task.source.is_labeled
    assert [t.name for t in task.targets] == ["target_0", "target_1", "target_2"]
    assert task.target_ids == (1, 2, 3)
    for target in task.targets:
        assert len(target) == 400
        assert not any(s.is_labeled for s in target)
    assert sorted(task.held_out_eval) == [0, 1, 2, 3]
    assert all(len(split) == 200 for split in task.held_out_eval.values())
    assert task.source.samples[0].features.shape == (16,)


def test_synthetic_task_is_deterministic():
    a = generate_synthetic_task(SyntheticSpec(seed=3))
    b = generate_synthetic_task(SyntheticSpec(seed=3))
    c = generate_synthetic_task(SyntheticSpec(seed=4))
    assert np.array_equal(a.targets[1].samples[7].features, b.targets[1].samples[7].features)
    assert not np.array_equal(a.source.samples[0].features, c.source.samples[0].features)


def test_zero_shift_keeps_centroids():
    rng = np.random.default_rng(0)
    centroids = rng.normal(size=(4, 6))
    plane, _ = np.linalg.qr(rng.normal(size=(6, 2)))
    direction = np.ones(6) / np.sqrt(6)
    assert np.allclose(shift_centroids(centroids, 0.0, plane, direction, 2.0), centroids)
    moved = shift_centroids(centroids, 0.5, plane, direction, 2.0)
    # a rotation inside the plane keeps pairwise distances
    d_before = np.linalg.norm(centroids[0] - centroids[1])
    d_after = np.linalg.norm(moved[0] - moved[1])
    assert d_after == pytest.approx(d_before)


def test_hardness_ranking_and_validation():
    assert SyntheticSpec(shift_magnitudes=(1.2, 0.2, 0.6)).hardness_ranking == (1, 2, 0)
    with pytest.raises(ConfigurationError):
        generate_synthetic_task(SyntheticSpec(shift_magnitudes=(0.2, -0.1)))
    with pytest.raises(ConfigurationError):
        generate_synthetic_task(SyntheticSpec(shift_magnitudes=(0.2, 4.0)))
    with pytest.raises(ConfigurationError):
        generate_synthetic_task(SyntheticSpec(n_c=1))


def class_means(dataset, n_c):
    features = np.stack([s.features for s in dataset])
    labels = np.array([s.label for s in dataset])
    return np.stack([features[labels == c].mean(axis=0) for c in range(n_c)])


def test_centroid_displacement_grows_with_shift():
    for seed in range(5):
        spec = SyntheticSpec(
            samples_per_class_per_domain=5, eval_samples_per_class=400,
            shift_magnitudes=(0.2, 0.6, 0.9), seed=seed,
        )
        task = generate_synthetic_task(spec)
        source = class_means(task.held_out_eval[0], spec.n_c)
        displacement = [
            float(np.linalg.norm(class_means(task.held_out_eval[d], spec.n_c) - source, axis=1).mean())
            for d in task.target_ids
        ]
        assert displacement == sorted(displacement), (seed, displacement)


def test_full_class_step_rotation_lands_on_the_neighbour():
    rng = np.random.default_rng(0)
    basis, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    plane, direction = basis[:, :2], basis[:, 2]
    centroids = circle_centroids(4, 3.0, plane, phase=0.3)
    assert np.allclose(np.linalg.norm(centroids, axis=1), 3.0)
    rotated = shift_centroids(centroids, 2 * np.pi / 4, plane, direction, 0.0)
    assert np.allclose(rotated, np.roll(centroids, -1, axis=0))
    # the translation leaves the in-plane geometry alone
    moved = shift_centroids(centroids, 0.7, plane, direction, 0.5)
    in_plane = shift_centroids(centroids, 0.7, plane, direction, 0.0)
    assert np.allclose(moved @ plane, in_plane @ plane)
    assert np.allclose((moved - in_plane) @ direction, 0.35)


def nearest_mean_accuracy(task, domain_id):
    means = class_means(task.source, task.n_c)
    split = task.held_out_eval[domain_id]
    features = np.stack([s.features for s in split])
    predicted = np.argmin(((features[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1)
    return float(np.mean(predicted == np.array([s.label for s in split])))


def test_source_classifier_prefers_the_smaller_shift():
    accuracies = []
    for seed in range(5):
        task = generate_synthetic_task(SyntheticSpec(shift_magnitudes=(0.2, 1.0), seed=seed))
        accuracies.append([nearest_mean_accuracy(task, d) for d in task.target_ids])
    near, far = np.mean(accuracies, axis=0)
    assert near > far + 0.3


def test_default_task_is_moderately_hard_for_a_source_classifier():
    averages = []
    for seed in range(5):
        task = generate_synthetic_task(SyntheticSpec(seed=seed))
        averages.append(np.mean([nearest_mean_accuracy(task, d) for d in task.target_ids]))
    assert 0.55 <= np.mean(averages) <= 0.75


def test_sample_rejects_non_finite_features():
    with pytest.raises(ConfigurationError):
        Sample(np.array([1.0, np.nan], dtype=np.float32), 0, 0, "bad")


def test_task_validation():
    source = DomainDataset("s", 0, [make_sample("s0"), make_sample("s1", label=1)])
    target = DomainDataset("t", 1, [make_sample("t0", label=None, domain_id=1)])
    task = MTDATask(source, (target,), n_c=2)
    assert task.domain_name(1) == "t"

    labeled_target = DomainDataset("t", 1, [make_sample("t0", label=1, domain_id=1)])
    with pytest.raises(ConfigurationError):
        MTDATask(source, (labeled_target,), n_c=2)
    with pytest.raises(ConfigurationError):
        MTDATask(source, (), n_c=2)
    same_id = DomainDataset("t", 0, [make_sample("t0", label=None, domain_id=0)])
    with pytest.raises(ConfigurationError):
        MTDATask(source, (same_id,), n_c=2)
    with pytest.raises(ConfigurationError):
        MTDATask(source, (target,), n_c=2, held_out_eval={1: DomainDataset("t", 1, [make_sample("t0", 1, 1)])})
    with pytest.raises(DatasetError):
        DomainDataset("s", 0, [])


def test_epoch_sampler_visits_every_sample_once_per_epoch():
    pool = [make_sample(f"p{i}") for i in range(10)]
    sampler = EpochSampler(pool, np.random.default_rng(0))
    drawn = sampler.draw(4) + sampler.draw(6)
    assert sorted(s.uid for s in drawn) == sorted(s.uid for s in pool)


def test_epoch_sampler_small_pool_warns_once(caplog):
    pool = [make_sample("a"), make_sample("b")]
    sampler = EpochSampler(pool, np.random.default_rng(0), "tiny pool")
    with caplog.at_level(logging.WARNING, logger="cgct.data"):
        assert len(sampler.draw(5)) == 5
        sampler.draw(5)
    assert sum("tiny pool" in r.getMessage() for r in caplog.records) == 1


def test_paired_batch_sampler():
    source = [make_sample(f"s{i}", label=i % 2) for i in range(20)]
    targets = [make_sample(f"t{d}_{i}", None, d) for d in (1, 2, 3) for i in range(10)]
    batch = PairedBatchSampler(source, targets, 8, np.random.default_rng(0)).sample_minibatch()
    assert batch.size == 8
    assert len(batch.samples) == 16
    assert all(s.is_labeled for s in batch.source_half)

    stratified = PairedBatchSampler(source, targets, 7, np.random.default_rng(0), stratify_targets=True)
    counts = {1: 0, 2: 0, 3: 0}
    for _ in range(3):
        for s in stratified.sample_minibatch().target_half:
            counts[s.domain_id] += 1
    assert counts == {1: 7, 2: 7, 3: 7}

    with pytest.raises(ConfigurationError):
        PairedBatchSampler(source, targets, 1, np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        PairedBatchSampler(targets, targets, 4, np.random.default_rng(0))


def test_load_image_folder_labeled_and_flat(tmp_path, caplog):
    for i in range(3):
        write_image(str(tmp_path / "art" / "cat" / f"{i}.png"), (255, 0, 0))
        write_image(str(tmp_path / "art" / "dog" / f"{i}.png"), (0, 0, 255))
        write_image(str(tmp_path / "clip" / f"{i}.png"), (0, 255, 0))
    (tmp_path / "clip" / "broken.png").write_bytes(b"not an image")

    labeled = load_image_folder(str(tmp_path / "art"))
    assert labeled.is_labeled
    assert labeled.class_names == ("cat", "dog")
    assert [s.label for s in labeled] == [0, 0, 0, 1, 1, 1]
    assert labeled.samples[0].features.shape == (3, 8, 8)
    assert labeled.samples[0].features[0].max() == pytest.approx(1.0)

    with caplog.at_level(logging.WARNING, logger="cgct.data"):
        flat = load_image_folder(str(tmp_path / "clip"), domain_id=2, image_size=4)
    assert len(flat) == 3
    assert not any(s.is_labeled for s in flat)
    assert flat.samples[0].features.shape == (3, 4, 4)
    assert any("broken.png" in r.getMessage() for r in caplog.records)

    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetError):
        load_image_folder(str(tmp_path / "empty"))


def test_split_and_folder_task(tmp_path):
    for domain in ("real", "sketch"):
        for cls in ("a", "b"):
            for i in range(5):
                write_image(str(tmp_path / domain / cls / f"{i}.png"), (i * 40, 0, 0))
    dataset = load_image_folder(str(tmp_path / "real"))
    train, held = split_dataset(dataset, 0.2, np.random.default_rng(0))
    assert len(train) == 8 and len(held) == 2

    task = build_folder_task(str(tmp_path), "real", ["sketch"], eval_fraction=0.2, seed=1)
    assert task.n_c == 2
    assert task.source.domain_id == SOURCE_DOMAIN_ID
    assert not any(s.is_labeled for s in task.targets[0])
    assert task.held_out_eval[1].is_labeled
    assert len(task.targets[0]) + len(task.held_out_eval[1]) == 10


def test_epoch_sampler_draws_every_sample_once_per_epoch_over_ten_epochs():
    pool = [make_sample(f"p{i}") for i in range(12)]
    sampler = EpochSampler(pool, np.random.default_rng(3))
    counts = Counter()
    # 15 draws of 8 cover exactly 10 epochs, crossing epoch boundaries mid-draw
    for _ in range(15):
        counts.update(s.uid for s in sampler.draw(8))
    assert counts == {s.uid: 10 for s in pool}


def test_samplers_repeat_for_a_fixed_seed():
    pool = [make_sample(f"p{i}") for i in range(12)]

    def epoch_sequence(seed):
        sampler = EpochSampler(pool, np.random.default_rng(seed))
        return [[s.uid for s in sampler.draw(5)] for _ in range(10)]

    assert epoch_sequence(7) == epoch_sequence(7)
    assert epoch_sequence(7) != epoch_sequence(8)

    source = [make_sample(f"s{i}", label=i % 2) for i in range(20)]
    targets = [make_sample(f"t{d}_{i}", None, d) for d in (1, 2) for i in range(10)]

    def batch_sequence(seed):
        sampler = PairedBatchSampler(source, targets, 6, np.random.default_rng(seed), stratify_targets=True)
        return [[s.uid for s in sampler.sample_minibatch().samples] for _ in range(8)]

    assert batch_sequence(1) == batch_sequence(1)
