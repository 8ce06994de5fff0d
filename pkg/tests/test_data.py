import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from rsjoint.config import AugmentationPolicy, Normalization, SyntheticCorpusSpec
from rsjoint.data import (
    BatchPrefetcher,
    SamplerState,
    aload_labeled_dataset,
    aload_unlabeled_dataset,
    encode_png,
    export_corpus,
    generate_scene_benchmark,
    generate_synthetic_corpus,
    load_labeled_dataset,
    load_unlabeled_dataset,
    next_dual_batch,
    standardize,
)
from rsjoint.errors import DatasetError


def write_png(path: Path, value: float = 0.5, size: int = 4) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_png(np.full((size, size, 3), value, dtype=np.float32)))


# --------------------------------------------------------------------------
# Directory loading
# --------------------------------------------------------------------------


def test_labeled_classes_are_lexicographic(tmp_path):
    for name in ("dog", "cat"):
        for i in range(2):
            write_png(tmp_path / name / f"{i}.png")
    dataset = load_labeled_dataset(tmp_path)
    assert dataset.n_classes == 2
    assert len(dataset) == 4
    assert dataset.class_names == ("cat", "dog")
    assert dataset.labels == (0, 0, 1, 1)


def test_empty_class_directory_is_named(tmp_path):
    write_png(tmp_path / "cat" / "0.png")
    (tmp_path / "dog").mkdir()
    with pytest.raises(DatasetError, match="dog"):
        load_labeled_dataset(tmp_path)


def test_missing_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_labeled_dataset(tmp_path / "nope")
    with pytest.raises(DatasetError):
        load_unlabeled_dataset(tmp_path / "nope")


def test_unlabeled_sorted_and_recursive(tmp_path):
    write_png(tmp_path / "b.png", 0.2)
    write_png(tmp_path / "a.png", 0.4)
    write_png(tmp_path / "c.png", 0.6)
    dataset = load_unlabeled_dataset(tmp_path)
    assert len(dataset) == 3
    assert [round(float(img.mean()), 1) for img in dataset.images] == [0.4, 0.2, 0.6]

    nested = tmp_path / "nested"
    for sub in ("x", "y"):
        for i in range(2):
            write_png(nested / sub / f"{i}.png")
    assert len(load_unlabeled_dataset(nested)) == 4


def test_hidden_files_are_skipped(tmp_path):
    write_png(tmp_path / "a.png")
    (tmp_path / ".DS_Store").write_bytes(b"junk")
    assert len(load_unlabeled_dataset(tmp_path)) == 1


def test_non_image_file_is_named(tmp_path):
    write_png(tmp_path / "a.png")
    (tmp_path / "notes.txt").write_text("not an image")
    with pytest.raises(DatasetError) as excinfo:
        load_unlabeled_dataset(tmp_path)
    assert excinfo.value.path == tmp_path / "notes.txt"
    assert "notes.txt" in str(excinfo.value)


def test_empty_unlabeled_directory(tmp_path):
    with pytest.raises(DatasetError):
        load_unlabeled_dataset(tmp_path)


# --------------------------------------------------------------------------
# Synthetic corpora
# --------------------------------------------------------------------------


def test_synthetic_corpus_is_deterministic(tiny_corpus_spec):
    a_lab, a_rs = generate_synthetic_corpus(tiny_corpus_spec)
    b_lab, b_rs = generate_synthetic_corpus(tiny_corpus_spec)
    assert all(np.array_equal(x, y) for x, y in zip(a_lab.images, b_lab.images))
    assert all(np.array_equal(x, y) for x, y in zip(a_rs.images, b_rs.images))
    assert a_lab.labels == b_lab.labels


def test_synthetic_corpus_counts_and_labels():
    spec = SyntheticCorpusSpec(n_natural=500, n_rs=20, n_scenes=20, k_classes=10, seed=1)
    labeled, unlabeled = generate_synthetic_corpus(spec)
    assert len(labeled) == 500 and len(unlabeled) == 20
    counts = np.bincount(labeled.label_array(), minlength=10)
    assert counts.tolist() == [50] * 10
    assert max(labeled.labels) < 10
    assert labeled.images[0].shape == (32, 32, 3)


def test_class_centroids_are_separated():
    spec = SyntheticCorpusSpec(n_natural=500, n_rs=10, n_scenes=10, k_classes=10, seed=7)
    labeled, _ = generate_synthetic_corpus(spec)
    labels = labeled.label_array()
    means = np.stack([img.reshape(-1, 3).mean(axis=0) for img in labeled.images])
    centroids = np.stack([means[labels == c].mean(axis=0) for c in range(10)])
    for i in range(10):
        for j in range(i + 1, 10):
            assert np.linalg.norm(centroids[i] - centroids[j]) >= 0.1, (i, j)


def test_scene_benchmark_is_labeled_by_scene(tiny_corpus_spec):
    scenes = generate_scene_benchmark(tiny_corpus_spec)
    assert len(scenes) == tiny_corpus_spec.n_scenes
    assert scenes.n_classes == tiny_corpus_spec.k_classes
    assert scenes.class_names[0] == "scene_00"


@pytest.mark.asyncio
async def test_export_round_trip_is_bitwise(tmp_path, tiny_corpus_spec):
    manifest = await export_corpus(tmp_path, tiny_corpus_spec, concurrency=4)
    labeled, unlabeled = generate_synthetic_corpus(tiny_corpus_spec)

    reloaded = await aload_labeled_dataset(tmp_path / "natural")
    # files are grouped by class directory, numbered by generation index inside each
    order = sorted(range(len(labeled)), key=lambda i: (labeled.labels[i], i))
    assert reloaded.class_names == labeled.class_names
    assert list(reloaded.labels) == [labeled.labels[i] for i in order]
    assert all(np.array_equal(reloaded.images[j], labeled.images[i]) for j, i in enumerate(order))
    rs = await aload_unlabeled_dataset(tmp_path / "rs")
    assert all(np.array_equal(a, b) for a, b in zip(rs.images, unlabeled.images))

    on_disk = json.loads((tmp_path / "corpus.json").read_text())
    assert on_disk["counts"] == manifest["counts"] == {"natural": 24, "rs": 24, "scenes": 12}
    for relative, digest in on_disk["sha256"].items():
        assert hashlib.sha256((tmp_path / relative).read_bytes()).hexdigest() == digest


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def test_dual_batch_shapes(tiny_corpus):
    labeled, unlabeled = tiny_corpus
    state = SamplerState.create(0, len(labeled), len(unlabeled))
    batch, _ = next_dual_batch(state, labeled, unlabeled, AugmentationPolicy(out_size=8), 4)
    assert batch.natural_images.shape == (4, 3, 8, 8)
    assert batch.rs_view_q.shape == batch.rs_view_k.shape == (4, 3, 8, 8)
    assert batch.natural_labels.shape == (4,)
    assert batch.natural_labels.dtype == torch.long
    assert [labeled.labels[i] for i in batch.natural_indices] == batch.natural_labels.tolist()


def test_identity_policy_views_equal_standardized_source(tiny_corpus):
    labeled, unlabeled = tiny_corpus
    state = SamplerState.create(0, len(labeled), len(unlabeled))
    batch, _ = next_dual_batch(state, labeled, unlabeled, AugmentationPolicy.identity(8), 4)
    assert torch.equal(batch.rs_view_q, batch.rs_view_k)
    sources = torch.stack([torch.from_numpy(np.array(unlabeled.images[i])).permute(2, 0, 1) for i in batch.rs_indices])
    assert torch.allclose(batch.rs_view_q, standardize(sources, Normalization()), atol=1e-5)


def test_epoch_covers_every_labeled_sample_once(tiny_corpus):
    labeled, unlabeled = tiny_corpus
    state = SamplerState.create(3, len(labeled), len(unlabeled))
    seen = []
    for _ in range(len(labeled) // 4):
        batch, state = next_dual_batch(state, labeled, unlabeled, AugmentationPolicy.identity(8), 4)
        seen.extend(batch.natural_indices.tolist())
    assert sorted(seen) == list(range(len(labeled)))


def test_batch_larger_than_dataset_wraps(tiny_corpus):
    labeled, unlabeled = tiny_corpus
    state = SamplerState.create(0, len(labeled), len(unlabeled))
    batch, state = next_dual_batch(state, labeled, unlabeled, AugmentationPolicy.identity(8), 30)
    assert batch.batch_size == 30
    assert state.epoch == 1


def batch_digest(batch) -> str:
    h = hashlib.sha256()
    for t in (batch.natural_images, batch.natural_labels, batch.rs_view_q, batch.rs_view_k):
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def test_batch_stream_is_reproducible(tiny_corpus):
    labeled, unlabeled = tiny_corpus
    policy = AugmentationPolicy(out_size=8)

    def stream():
        state = SamplerState.create(11, len(labeled), len(unlabeled))
        return [batch_digest(next_dual_batch(state, labeled, unlabeled, policy, 4)[0]) for _ in range(5)]

    assert stream() == stream()


def test_prefetcher_matches_single_threaded_stream(tiny_corpus):
    labeled, unlabeled = tiny_corpus
    policy = AugmentationPolicy(out_size=8)
    state = SamplerState.create(5, len(labeled), len(unlabeled))
    expected = [batch_digest(next_dual_batch(state, labeled, unlabeled, policy, 4)[0]) for _ in range(6)]

    prefetch_state = SamplerState.create(5, len(labeled), len(unlabeled))
    with BatchPrefetcher(prefetch_state, labeled, unlabeled, policy, 4, Normalization(), depth=2) as batches:
        got = [batch_digest(next(batches)) for _ in range(6)]
    assert got == expected


def test_prefetcher_forwards_errors(tiny_corpus):
    labeled, unlabeled = tiny_corpus
    wrong = SamplerState.create(0, len(labeled) + 1, len(unlabeled))
    with BatchPrefetcher(wrong, labeled, unlabeled, AugmentationPolicy(out_size=8), 4, Normalization()) as batches:
        with pytest.raises(DatasetError):
            next(batches)
