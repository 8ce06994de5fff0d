"""
Strong augmentation pipeline
============================

Order of operations for one draw:

1. random area-ratio crop resized (bilinear) to ``out_size``
2. color jitter (brightness/contrast/saturation/hue in a random order)
3. grayscale conversion (torchvision luma weights 0.2989/0.587/0.114; the
   0.0001 gap to 0.299 on red moves a pixel by at most 1e-4)
4. horizontal flip
5. Gaussian blur with reflective padding

followed by a clamp to ``[0, 1]``. All randomness comes from an explicit
``numpy.random.Generator`` so the same stream always yields the same output;
the pixel work itself is done by ``torchvision.transforms.functional``.

Images cross the public API as ``H x W x 3`` float arrays; the internal
``augment_tensor`` works on ``3 x H x W`` tensors.
"""

import math
from typing import List, NamedTuple, Optional, Tuple

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .config import AugmentationPolicy
from .errors import AugmentationError


class CropBox(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    def area_ratio(self, source_height: int, source_width: int) -> float:
        return (self.height * self.width) / float(source_height * source_width)


class ContrastivePair(NamedTuple):
    view_q: np.ndarray
    view_k: np.ndarray
    source_index: Optional[int]


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """``H x W x 3`` array to a ``3 x H x W`` float32 tensor."""
    # dataset arrays are read-only; copy before handing them to torch
    return torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1).contiguous()


def to_array(tensor: torch.Tensor) -> np.ndarray:
    return tensor.permute(1, 2, 0).contiguous().numpy()


def validate_image(image: torch.Tensor) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise AugmentationError(f"expected a 3-channel image, got shape {tuple(image.shape)}")
    if image.shape[1] < 2 or image.shape[2] < 2:
        raise AugmentationError(f"image must be at least 2x2, got {image.shape[1]}x{image.shape[2]}")
    if torch.isnan(image).any():
        raise AugmentationError("image contains NaN pixels")


def sample_crop_box(height: int, width: int, policy: AugmentationPolicy, rng: np.random.Generator) -> CropBox:
    """Random crop whose area ratio lies in ``[crop_ratio_min, crop_ratio_max]``."""
    if policy.crop_ratio_min >= 1.0:
        return CropBox(0, 0, height, width)
    area = height * width
    log_ratio = (math.log(policy.aspect_ratio_min), math.log(policy.aspect_ratio_max))
    for _ in range(10):
        target_area = area * rng.uniform(policy.crop_ratio_min, policy.crop_ratio_max)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = int(round(math.sqrt(target_area * aspect)))
        h = int(round(math.sqrt(target_area / aspect)))
        # rounding can push small crops out of the ratio range
        if 0 < w <= width and 0 < h <= height and _ratio_in_range(h * w / area, policy):
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return CropBox(top, left, h, w)

    h, w = _fallback_size(height, width, policy)
    return CropBox((height - h) // 2, (width - w) // 2, h, w)


def _ratio_in_range(ratio: float, policy: AugmentationPolicy) -> bool:
    return policy.crop_ratio_min <= ratio <= policy.crop_ratio_max


def _fallback_size(height: int, width: int, policy: AugmentationPolicy) -> Tuple[int, int]:
    """Central-crop size: in range if any integer size is, then closest aspect, then largest."""
    area = height * width
    aspect = min(max(width / height, policy.aspect_ratio_min), policy.aspect_ratio_max)

    def score(h: int, w: int) -> Tuple[float, float, int]:
        ratio = h * w / area
        miss = max(policy.crop_ratio_min - ratio, ratio - policy.crop_ratio_max, 0.0)
        return miss, abs(math.log(w / h) - math.log(aspect)), -h * w

    candidates: List[Tuple[int, int]] = []
    for h in range(1, height + 1):
        w_low = min(width, max(1, math.ceil(policy.crop_ratio_min * area / h)))
        w_high = min(width, max(1, math.floor(policy.crop_ratio_max * area / h)))
        preferred = min(max(int(round(h * aspect)), min(w_low, w_high)), max(w_low, w_high))
        candidates.extend((h, w) for w in {w_low, w_high, preferred})
    return min(candidates, key=lambda hw: score(*hw))


def color_jitter(image: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Apply brightness, contrast, saturation and hue in a random order."""

    def factor(strength: float) -> float:
        return float(rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength))

    brightness = factor(policy.jitter_brightness)
    contrast = factor(policy.jitter_contrast)
    saturation = factor(policy.jitter_saturation)
    hue = float(rng.uniform(-policy.jitter_hue, policy.jitter_hue))
    for op in rng.permutation(4):
        if op == 0:
            image = TF.adjust_brightness(image, brightness)
        elif op == 1:
            image = TF.adjust_contrast(image, contrast)
        elif op == 2:
            image = TF.adjust_saturation(image, saturation)
        else:
            image = TF.adjust_hue(image, hue)
    return image


def blur_kernel_size(sigma: float, height: int, width: int) -> int:
    """``ceil(4 sigma)`` rounded up to odd, capped by the image size."""
    size = max(1, math.ceil(4.0 * sigma))
    if size % 2 == 0:
        size += 1
    limit = 2 * min(height, width) - 1
    if size > limit:
        size = limit if limit % 2 else limit - 1
    return size


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    k = blur_kernel_size(sigma, image.shape[-2], image.shape[-1])
    if k < 3:
        return image
    return TF.gaussian_blur(image, kernel_size=[k, k], sigma=[sigma, sigma])


def augment_tensor(
    image: torch.Tensor,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    crop: Optional[CropBox] = None,
) -> Tuple[torch.Tensor, CropBox]:
    """One strong-augmentation draw on a ``3 x H x W`` tensor; also returns the crop used."""
    validate_image(image)
    _, height, width = image.shape
    box = crop if crop is not None else sample_crop_box(height, width, policy, rng)
    out = TF.resized_crop(
        image,
        box.top,
        box.left,
        box.height,
        box.width,
        [policy.out_size, policy.out_size],
        interpolation=InterpolationMode.BILINEAR,
        antialias=False,
    )
    if rng.random() < policy.p_color_jitter:
        out = color_jitter(out, policy, rng)
    if rng.random() < policy.p_grayscale:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if rng.random() < policy.p_hflip:
        out = TF.hflip(out)
    if rng.random() < policy.p_blur:
        sigma = float(rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max))
        out = gaussian_blur(out, sigma)
    return out.clamp(0.0, 1.0), box


def strong_augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment an ``H x W x 3`` image in ``[0, 1]``; returns ``out_size x out_size x 3``."""
    out, _ = augment_tensor(to_tensor(image), policy, rng)
    return to_array(out)


def make_contrastive_pair(
    image: np.ndarray,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    source_index: Optional[int] = None,
) -> ContrastivePair:
    """Two independent draws (``t`` and ``t'``) from disjoint sub-streams of ``rng``."""
    view_q, view_k = pair_tensors(to_tensor(image), policy, rng)
    return ContrastivePair(to_array(view_q), to_array(view_k), source_index)


def pair_tensors(
    image: torch.Tensor, policy: AugmentationPolicy, rng: np.random.Generator
) -> Tuple[torch.Tensor, torch.Tensor]:
    stream_q, stream_k = rng.spawn(2)
    view_q, _ = augment_tensor(image, policy, stream_q)
    view_k, _ = augment_tensor(image, policy, stream_k)
    return view_q, view_k
