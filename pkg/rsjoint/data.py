"""
Datasets, synthetic corpora and dual-batch sampling
===================================================

Directory layouts
-----------------
- labeled (natural) corpus: ``root/<class>/<image>``; classes sorted
  lexicographically define label ids ``0..K-1``
- unlabeled (RS) corpus: any image below ``root`` (recursive), sorted by path

Every non-hidden file is decoded; a file that does not decode is an error
naming the file. Files are read concurrently through ``aiofiles`` and
decoded with Pillow into ``H x W x 3`` float32 arrays in ``[0, 1]``.

Synthetic corpus
----------------
``generate_synthetic_corpus`` replaces ImageNet + Million-AID at desk scale:
class-conditioned textures (base hue, oriented sinusoid, noise) for the
natural side and overhead-style mosaics (field patches, roof blocks, road
grids) from ``k`` latent scene types for the RS side. Pixels are quantized to
8 bits on generation so a PNG export reloads bitwise-identically.

Sampling
--------
``next_dual_batch`` draws ``B`` natural and ``B`` RS images per call. Each
corpus keeps its own epoch cursor (sampling without replacement, reshuffled
from the seeded stream on exhaustion); the reported epoch follows the RS
corpus.
"""

import asyncio
import colorsys
import hashlib
import io
import json
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import aiofiles
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .augment import augment_tensor, pair_tensors, to_tensor
from .config import AugmentationPolicy, Normalization, SyntheticCorpusSpec
from .errors import DatasetError
from .logs import worker_count

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _freeze(image: np.ndarray) -> np.ndarray:
    image.setflags(write=False)
    return image


@dataclass(frozen=True)
class LabeledDataset:
    """Images with integer class labels; immutable after construction."""

    images: Tuple[np.ndarray, ...]
    labels: Tuple[int, ...]
    class_names: Tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        k = len(self.class_names)
        for label in self.labels:
            if not 0 <= label < k:
                raise DatasetError(f"label {label} outside [0, {k})")
        for image in self.images:
            if image.ndim != 3 or image.shape[2] != 3:
                raise DatasetError(f"expected H x W x 3 images, got shape {image.shape}")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)


@dataclass(frozen=True)
class UnlabeledDataset:
    images: Tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if not self.images:
            raise DatasetError("unlabeled dataset is empty")
        for image in self.images:
            if image.ndim != 3 or image.shape[2] != 3:
                raise DatasetError(f"expected H x W x 3 images, got shape {image.shape}")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class DualBatch:
    """Paired sub-batches, laid out ``N x 3 x S x S`` and standardized."""

    natural_images: torch.Tensor
    natural_labels: torch.Tensor
    rs_view_q: torch.Tensor
    rs_view_k: torch.Tensor
    natural_indices: np.ndarray
    rs_indices: np.ndarray

    def __post_init__(self) -> None:
        sizes = {
            self.natural_images.shape[0],
            self.natural_labels.shape[0],
            self.rs_view_q.shape[0],
            self.rs_view_k.shape[0],
        }
        if len(sizes) != 1:
            raise DatasetError(f"dual batch sub-batches disagree in size: {sorted(sizes)}")

    @property
    def batch_size(self) -> int:
        return int(self.natural_images.shape[0])

    def to(self, dtype: torch.dtype) -> "DualBatch":
        return DualBatch(
            self.natural_images.to(dtype),
            self.natural_labels,
            self.rs_view_q.to(dtype),
            self.rs_view_k.to(dtype),
            self.natural_indices,
            self.rs_indices,
        )


# --------------------------------------------------------------------------
# Decoding and directory loading
# --------------------------------------------------------------------------


def to_unit_float(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def decode_image(data: bytes, path: PathLike) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image file {path}: {exc}", path) from exc
    return _freeze(to_unit_float(pixels))


def encode_png(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(to_uint8(image)).save(buffer, format="PNG")
    return buffer.getvalue()


def _visible(path: Path, root: Path) -> bool:
    return not any(part.startswith(".") for part in path.relative_to(root).parts)


async def _read_images(paths: Sequence[Path], concurrency: Optional[int] = None) -> List[np.ndarray]:
    semaphore = asyncio.Semaphore(concurrency or worker_count())

    async def read(path: Path) -> np.ndarray:
        async with semaphore:
            async with aiofiles.open(path, "rb") as f:
                data = await f.read()
        return decode_image(data, path)

    return list(await asyncio.gather(*(read(p) for p in paths)))


def _require_dir(root: Path) -> None:
    if not root.exists():
        raise DatasetError(f"dataset directory {root} does not exist", root)
    if not root.is_dir():
        raise DatasetError(f"dataset path {root} is not a directory", root)


async def aload_labeled_dataset(root_dir: PathLike) -> LabeledDataset:
    root = Path(root_dir)
    _require_dir(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DatasetError(f"no class subdirectories found in {root}", root)

    paths: List[Path] = []
    labels: List[int] = []
    for label, class_dir in enumerate(class_dirs):
        files = sorted(p for p in class_dir.iterdir() if p.is_file() and not p.name.startswith("."))
        if not files:
            raise DatasetError(f"class directory '{class_dir.name}' contains no images", class_dir)
        paths.extend(files)
        labels.extend([label] * len(files))

    images = await _read_images(paths)
    logger.info("📚 Loaded %d labeled images in %d classes from %s", len(images), len(class_dirs), root)
    return LabeledDataset(tuple(images), tuple(labels), tuple(d.name for d in class_dirs))


async def aload_unlabeled_dataset(root_dir: PathLike) -> UnlabeledDataset:
    root = Path(root_dir)
    _require_dir(root)
    paths = sorted(p for p in root.rglob("*") if p.is_file() and _visible(p, root))
    if not paths:
        raise DatasetError(f"no images found under {root}", root)
    images = await _read_images(paths)
    logger.info("🛰️  Loaded %d unlabeled images from %s", len(images), root)
    return UnlabeledDataset(tuple(images))


def load_labeled_dataset(root_dir: PathLike) -> LabeledDataset:
    """Load ``root/<class>/<image>``; classes sorted lexicographically."""
    return asyncio.run(aload_labeled_dataset(root_dir))


def load_unlabeled_dataset(root_dir: PathLike) -> UnlabeledDataset:
    """Load every image below ``root_dir`` in sorted-path order."""
    return asyncio.run(aload_unlabeled_dataset(root_dir))


# --------------------------------------------------------------------------
# Synthetic corpora
# --------------------------------------------------------------------------


def _name_width(k: int) -> int:
    return max(2, len(str(k - 1)))


def class_names_for(k: int, prefix: str) -> Tuple[str, ...]:
    width = _name_width(k)
    return tuple(f"{prefix}_{c:0{width}d}" for c in range(k))


def _corpus_streams(seed: int) -> List[np.random.Generator]:
    # natural, rs, scene benchmark
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.asarray(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def _texture(label: int, k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    base = _hsv(label / k, 0.65, 0.85)
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    theta = np.pi * label / k
    frequency = 1 + label % 4
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * frequency * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    gain = 1.0 + rng.uniform(-0.05, 0.05)
    image = base * gain * (0.8 + 0.15 * wave)[..., None]
    image = image + rng.normal(0.0, 0.03, size=(size, size, 3))
    return to_unit_float(to_uint8(image))


def _mosaic(scene: int, k: int, size: int, rng: np.random.Generator) -> np.ndarray:
    ground = _hsv(0.05 + 0.55 * scene / k, 0.3 + 0.4 * ((scene * 7) % k) / k, 0.35 + 0.45 * ((scene * 3) % k) / k)
    roof = _hsv(0.6 + 0.37 * scene / k, 0.5, 0.75)
    road = np.array([0.55, 0.55, 0.55])
    scale = size / 32.0

    image = np.empty((size, size, 3))
    image[:] = ground * rng.uniform(0.9, 1.1)
    image += rng.normal(0.0, 0.04, size=image.shape)

    lo, hi = max(1, size // 8), max(2, size // 3)
    for _ in range(1 + (scene * 5) % 7):
        h, w = rng.integers(lo, hi + 1, size=2)
        top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        image[top : top + h, left : left + w] = roof * rng.uniform(0.85, 1.15)

    width = max(1, size // 16)
    period = max(width + 2, int(round((4, 6, 8, 12, 16)[scene % 5] * scale)))
    offset = int(rng.integers(0, period))
    orientation = scene % 3
    if orientation in (0, 2):
        for row in range(offset, size, period):
            image[row : row + width, :] = road
    if orientation in (1, 2):
        for col in range(offset, size, period):
            image[:, col : col + width] = road
    return to_unit_float(to_uint8(image))


def _mosaics(count: int, spec: SyntheticCorpusSpec, rng: np.random.Generator) -> Tuple[List[np.ndarray], List[int]]:
    scenes = [i % spec.k_classes for i in range(count)]
    images = [_freeze(_mosaic(s, spec.k_classes, spec.image_size, rng)) for s in scenes]
    return images, scenes


def generate_synthetic_corpus(spec: SyntheticCorpusSpec) -> Tuple[LabeledDataset, UnlabeledDataset]:
    """Deterministic labeled textures and unlabeled overhead mosaics for ``spec.seed``."""
    natural_rng, rs_rng, _ = _corpus_streams(spec.seed)
    labels = [i % spec.k_classes for i in range(spec.n_natural)]
    natural = [_freeze(_texture(c, spec.k_classes, spec.image_size, natural_rng)) for c in labels]
    rs_images, _ = _mosaics(spec.n_rs, spec, rs_rng)
    labeled = LabeledDataset(tuple(natural), tuple(labels), class_names_for(spec.k_classes, "class"))
    return labeled, UnlabeledDataset(tuple(rs_images))


def generate_scene_benchmark(spec: SyntheticCorpusSpec) -> LabeledDataset:
    """Labeled overhead mosaics, one class per latent scene type."""
    _, _, scene_rng = _corpus_streams(spec.seed)
    images, scenes = _mosaics(spec.n_scenes, spec, scene_rng)
    return LabeledDataset(tuple(images), tuple(scenes), class_names_for(spec.k_classes, "scene"))


async def export_corpus(out_dir: PathLike, spec: SyntheticCorpusSpec, concurrency: Optional[int] = None) -> Dict[str, Any]:
    """Write ``natural/``, ``rs/``, ``scenes/`` as PNG plus a ``corpus.json`` manifest."""
    root = Path(out_dir)
    labeled, unlabeled = generate_synthetic_corpus(spec)
    scenes = generate_scene_benchmark(spec)
    width = max(6, len(str(max(spec.n_natural, spec.n_rs, spec.n_scenes))))

    jobs: List[Tuple[str, np.ndarray]] = []
    for i, (image, label) in enumerate(zip(labeled.images, labeled.labels)):
        jobs.append((f"natural/{labeled.class_names[label]}/{i:0{width}d}.png", image))
    for i, image in enumerate(unlabeled.images):
        jobs.append((f"rs/{i:0{width}d}.png", image))
    for i, (image, label) in enumerate(zip(scenes.images, scenes.labels)):
        jobs.append((f"scenes/{scenes.class_names[label]}/{i:0{width}d}.png", image))

    semaphore = asyncio.Semaphore(concurrency or worker_count())

    async def write(relative: str, image: np.ndarray) -> Tuple[str, str]:
        payload = encode_png(image)
        target = root / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        async with semaphore:
            async with aiofiles.open(target, "wb") as f:
                await f.write(payload)
        return relative, hashlib.sha256(payload).hexdigest()

    checksums = dict(await asyncio.gather(*(write(rel, img) for rel, img in jobs)))
    manifest = {
        "spec": spec.model_dump(),
        "counts": {"natural": len(labeled), "rs": len(unlabeled), "scenes": len(scenes)},
        "class_names": list(labeled.class_names),
        "scene_names": list(scenes.class_names),
        "sha256": dict(sorted(checksums.items())),
    }
    async with aiofiles.open(root / "corpus.json", "w") as f:
        await f.write(json.dumps(manifest, indent=2) + "\n")
    logger.info("✅ Wrote %d images and corpus.json to %s", len(jobs), root)
    return manifest


def write_corpus(out_dir: PathLike, spec: SyntheticCorpusSpec, concurrency: Optional[int] = None) -> Dict[str, Any]:
    return asyncio.run(export_corpus(out_dir, spec, concurrency))


# --------------------------------------------------------------------------
# Standardization
# --------------------------------------------------------------------------


def standardize(images: torch.Tensor, normalization: Normalization) -> torch.Tensor:
    """Per-channel ``(x - mean) / std`` on an ``N x 3 x H x W`` batch."""
    mean = torch.tensor(normalization.mean, dtype=images.dtype).view(1, 3, 1, 1)
    std = torch.tensor(normalization.std, dtype=images.dtype).view(1, 3, 1, 1)
    return (images - mean) / std


def resize_and_standardize(images: Sequence[np.ndarray], size: int, normalization: Normalization) -> torch.Tensor:
    """Plain bilinear resize to ``size`` then standardize (evaluation pre-processing)."""
    resized = [
        F.interpolate(to_tensor(img).unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False)
        for img in images
    ]
    return standardize(torch.cat(resized).clamp(0.0, 1.0), normalization)


# --------------------------------------------------------------------------
# Dual-batch sampling
# --------------------------------------------------------------------------


@dataclass
class EpochCursor:
    size: int
    order: np.ndarray
    position: int = 0
    epoch: int = 0

    def take(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Next ``count`` indices, reshuffling (and wrapping) on exhaustion."""
        chunks = []
        while count > 0:
            if self.position >= self.size:
                self.order = rng.permutation(self.size)
                self.position = 0
                self.epoch += 1
            n = min(count, self.size - self.position)
            chunks.append(self.order[self.position : self.position + n])
            self.position += n
            count -= n
        return np.concatenate(chunks)


@dataclass
class SamplerState:
    rng: np.random.Generator
    natural: EpochCursor
    rs: EpochCursor
    batches: int = 0

    @classmethod
    def create(cls, seed: int, n_natural: int, n_rs: int) -> "SamplerState":
        rng = np.random.default_rng(seed)
        natural = EpochCursor(n_natural, rng.permutation(n_natural))
        rs = EpochCursor(n_rs, rng.permutation(n_rs))
        return cls(rng, natural, rs)

    @property
    def epoch(self) -> int:
        return self.rs.epoch


def next_dual_batch(
    state: SamplerState,
    labeled: LabeledDataset,
    unlabeled: UnlabeledDataset,
    policy: AugmentationPolicy,
    batch_size: int,
    normalization: Optional[Normalization] = None,
) -> Tuple[DualBatch, SamplerState]:
    """Draw ``batch_size`` natural images (one view) and RS images (two views).

    ``state`` is advanced in place and returned.
    """
    if not len(labeled) or not len(unlabeled):
        raise DatasetError("dual batch sampling needs non-empty labeled and unlabeled datasets")
    if state.natural.size != len(labeled) or state.rs.size != len(unlabeled):
        raise DatasetError("sampler state was created for datasets of a different size")
    normalization = normalization or Normalization()

    natural_idx = state.natural.take(batch_size, state.rng)
    rs_idx = state.rs.take(batch_size, state.rng)
    (stream,) = state.rng.spawn(1)

    natural = [augment_tensor(to_tensor(labeled.images[i]), policy, stream)[0] for i in natural_idx]
    views = [pair_tensors(to_tensor(unlabeled.images[i]), policy, stream) for i in rs_idx]
    state.batches += 1

    batch = DualBatch(
        natural_images=standardize(torch.stack(natural), normalization),
        natural_labels=torch.as_tensor([labeled.labels[i] for i in natural_idx], dtype=torch.long),
        rs_view_q=standardize(torch.stack([q for q, _ in views]), normalization),
        rs_view_k=standardize(torch.stack([k for _, k in views]), normalization),
        natural_indices=natural_idx,
        rs_indices=rs_idx,
    )
    return batch, state


@dataclass
class BatchPrefetcher:
    """Produce dual batches on a background thread in single-threaded order."""

    state: SamplerState
    labeled: LabeledDataset
    unlabeled: UnlabeledDataset
    policy: AugmentationPolicy
    batch_size: int
    normalization: Normalization
    depth: int = 2
    _queue: "queue.Queue[Any]" = field(init=False)
    _stop: threading.Event = field(init=False, default_factory=threading.Event)
    _thread: Optional[threading.Thread] = field(init=False, default=None)

    def __post_init__(self) -> None:
        self._queue = queue.Queue(maxsize=max(1, self.depth))

    def start(self) -> "BatchPrefetcher":
        self._thread = threading.Thread(target=self._produce, name="rsjoint-prefetch", daemon=True)
        self._thread.start()
        return self

    def _produce(self) -> None:
        while not self._stop.is_set():
            try:
                item: Any = next_dual_batch(
                    self.state, self.labeled, self.unlabeled, self.policy, self.batch_size, self.normalization
                )[0]
            except Exception as exc:  # forwarded to the consumer
                item = exc
            while not self._stop.is_set():
                try:
                    self._queue.put(item, timeout=0.1)
                    break
                except queue.Full:
                    continue
            if isinstance(item, Exception):
                return

    def __iter__(self) -> Iterator[DualBatch]:
        return self

    def __next__(self) -> DualBatch:
        item = self._queue.get()
        if isinstance(item, Exception):
            raise item
        return item

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    def __enter__(self) -> "BatchPrefetcher":
        return self.start()

    def __exit__(self, *_exc: Any) -> None:
        self.close()
