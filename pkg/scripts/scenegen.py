#!/usr/bin/env python3
"""
scenegen.py — synthetic multi-object scenes, on-disk datasets, view augmentation

Scenes are flat 2D shapes on a gray background with the attribute grid
(size × colour × texture × shape = 2 × 8 × 2 × 3 = 96 combinations). Every
object comes with a visible-pixel mask, and the background mask covers the rest.

On-disk dataset layout (see schemas/dataset-manifest.json):

    <root>/manifest.json
    <root>/images/000042.png     8-bit RGB, lossless
    <root>/masks/000042.msk      16-byte header + H*W integer labels (0 = background)

Mask header: magic b"OCLM", dtype code (uint32), H (uint32), W (uint32), little endian.
"""

from __future__ import annotations

import json
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

from ocl_utils import (
    DATASET_FORMAT_VERSION,
    ConfigError,
    DatasetError,
    DatasetValidationError,
    PlacementError,
    write_json,
)


# ============================================================
# Attribute vocabulary
# ============================================================

# 8 saturated colours, 8-bit RGB so PNG round-trips are exact
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "cyan": (40, 200, 210),
    "magenta": (200, 50, 200),
    "orange": (240, 140, 30),
    "purple": (120, 60, 190),
}
BACKGROUND_RGB = (128, 128, 128)
SIZES = ("large", "small")
COLORS = tuple(PALETTE)
TEXTURES = ("solid", "striped")
SHAPES = ("circle", "square", "triangle")

# half-extent of an object as a fraction of the image side
SIZE_RADIUS = {"large": 0.13, "small": 0.085}

MASK_MAGIC = b"OCLM"
MASK_HEADER = struct.Struct("<4sIII")
MASK_DTYPES = {1: "<u1", 2: "<u2"}

Attributes = tuple[str, str, str, str]


@dataclass
class GeneratorSpec:
    """Generator settings. Attribute tuples are (size, color, texture, shape)."""

    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 6
    num_queries: int = 11
    sizes: tuple[str, ...] = SIZES
    colors: tuple[str, ...] = COLORS
    textures: tuple[str, ...] = TEXTURES
    shapes: tuple[str, ...] = SHAPES
    max_overlap: float = 0.25
    max_retries: int = 200
    stripe_period: int = 3

    def validate(self) -> list[str]:
        errors: list[str] = []
        if self.image_size < 8:
            errors.append(f"image_size too small: {self.image_size}")
        if not 0 <= self.min_objects <= self.max_objects:
            errors.append(f"object-count range invalid: [{self.min_objects}, {self.max_objects}]")
        if self.max_objects > self.num_queries - 1:
            errors.append(
                f"max_objects={self.max_objects} exceeds num_queries-1={self.num_queries - 1}"
            )
        for size in self.sizes:
            if size not in SIZE_RADIUS:
                errors.append(f"unknown size: {size}")
        for color in self.colors:
            if color not in PALETTE:
                errors.append(f"unknown color: {color}")
        for shape in self.shapes:
            if shape not in SHAPES:
                errors.append(f"unknown shape: {shape}")
        for texture in self.textures:
            if texture not in TEXTURES:
                errors.append(f"unknown texture: {texture}")
        if not 0.0 < self.max_overlap <= 1.0:
            errors.append(f"max_overlap must be in (0, 1]: {self.max_overlap}")
        return errors

    def vocabulary(self) -> dict[str, list[str]]:
        return {
            "sizes": list(self.sizes),
            "colors": list(self.colors),
            "textures": list(self.textures),
            "shapes": list(self.shapes),
        }


@dataclass
class SceneSample:
    """One scene. ``masks[0]`` is the background; ``masks[i]`` belongs to ``attributes[i-1]``."""

    image: np.ndarray  # H×W×3 float32 in [0, 1]
    masks: list[np.ndarray]  # bool H×W, background first
    attributes: list[Attributes]
    id: int

    @property
    def object_masks(self) -> list[np.ndarray]:
        return self.masks[1:]

    @property
    def num_objects(self) -> int:
        return len(self.attributes)

    def label_map(self) -> np.ndarray:
        labels = np.zeros(self.image.shape[:2], dtype=np.uint8)
        for idx, mask in enumerate(self.object_masks, start=1):
            labels[mask] = idx
        return labels

    def validate(self) -> list[str]:
        errors: list[str] = []
        if len(self.masks) - 1 != len(self.attributes):
            errors.append(
                f"sample {self.id}: {len(self.masks) - 1} object masks but "
                f"{len(self.attributes)} attribute tuples"
            )
        if self.masks:
            covered = np.logical_or.reduce(np.stack(self.masks))
            if not covered.all():
                errors.append(f"sample {self.id}: {int((~covered).sum())} pixels outside every mask")
        return errors

    @classmethod
    def from_label_map(cls, image: np.ndarray, labels: np.ndarray,
                       attributes: list[Attributes], sample_id: int) -> "SceneSample":
        num_labels = int(labels.max()) if labels.size else 0
        if num_labels != len(attributes):
            raise DatasetValidationError(
                f"sample {sample_id}: mask has {num_labels} object labels but "
                f"{len(attributes)} attribute tuples"
            )
        masks = [labels == idx for idx in range(num_labels + 1)]
        for idx in range(1, num_labels + 1):
            if not masks[idx].any():
                raise DatasetValidationError(f"sample {sample_id}: object label {idx} has no pixels")
        return cls(image=image, masks=masks, attributes=list(attributes), id=sample_id)


# ============================================================
# Rendering
# ============================================================

def _shape_mask(shape: str, cy: float, cx: float, radius: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    if shape == "square":
        half = radius * 0.85
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if shape == "triangle":
        top = cy - radius
        inside_rows = (yy >= top) & (yy <= cy + radius)
        return inside_rows & (np.abs(xx - cx) <= (yy - top) / 2.0)
    raise ConfigError(f"unknown shape: {shape}")


def _stripes(size: int, period: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy + xx) % period == 0


def stripe_tint(color: str) -> tuple[int, int, int]:
    r, g, b = PALETTE[color]
    return ((r + 255) // 2, (g + 255) // 2, (b + 255) // 2)


def generate_scene(rng_seed: int, spec: GeneratorSpec) -> SceneSample:
    """Render one scene. Deterministic for a fixed seed."""
    errors = spec.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    rng = np.random.default_rng(rng_seed)
    size = spec.image_size
    num_objects = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    full_masks: list[np.ndarray] = []
    visible: list[np.ndarray] = []
    attributes: list[Attributes] = []
    for _ in range(num_objects):
        attrs = (
            spec.sizes[int(rng.integers(len(spec.sizes)))],
            spec.colors[int(rng.integers(len(spec.colors)))],
            spec.textures[int(rng.integers(len(spec.textures)))],
            spec.shapes[int(rng.integers(len(spec.shapes)))],
        )
        radius = SIZE_RADIUS[attrs[0]] * size
        for _attempt in range(spec.max_retries):
            cy, cx = rng.uniform(radius, size - radius, size=2)
            mask = _shape_mask(attrs[3], cy, cx, radius, size)
            area = int(mask.sum())
            if area == 0:
                continue
            ok = True
            for prev_full, prev_visible in zip(full_masks, visible):
                inter = int((mask & prev_full).sum())
                if inter >= spec.max_overlap * min(area, int(prev_full.sum())):
                    ok = False
                    break
                # earlier objects must keep at least half of their pixels
                if int((prev_visible & ~mask).sum()) < 0.5 * int(prev_full.sum()):
                    ok = False
                    break
            if ok:
                break
        else:
            raise PlacementError(
                f"seed {rng_seed}: could not place object {len(attributes) + 1} "
                f"after {spec.max_retries} attempts"
            )
        visible = [v & ~mask for v in visible]
        full_masks.append(mask)
        visible.append(mask.copy())
        attributes.append(attrs)

    canvas = np.empty((size, size, 3), dtype=np.uint8)
    canvas[:] = BACKGROUND_RGB
    stripes = _stripes(size, spec.stripe_period)
    for mask, attrs in zip(full_masks, attributes):
        canvas[mask] = PALETTE[attrs[1]]
        if attrs[2] == "striped":
            canvas[mask & stripes] = stripe_tint(attrs[1])

    background = ~np.logical_or.reduce(np.stack(visible)) if visible else np.ones((size, size), bool)
    return SceneSample(
        image=canvas.astype(np.float32) / 255.0,
        masks=[background] + visible,
        attributes=attributes,
        id=int(rng_seed),
    )


def generate_scenes(spec: GeneratorSpec, count: int, base_seed: int = 0) -> list[SceneSample]:
    return [generate_scene(base_seed + idx, spec) for idx in range(count)]


# ============================================================
# On-disk dataset
# ============================================================

def write_mask_file(path: Path, labels: np.ndarray) -> None:
    code = 1 if labels.max(initial=0) < 256 else 2
    arr = labels.astype(MASK_DTYPES[code])
    h, w = arr.shape
    path.write_bytes(MASK_HEADER.pack(MASK_MAGIC, code, h, w) + arr.tobytes())


def read_mask_file(path: Path) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"mask file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < MASK_HEADER.size:
        raise DatasetError(f"mask file truncated: {path}")
    magic, code, h, w = MASK_HEADER.unpack_from(raw)
    if magic != MASK_MAGIC:
        raise DatasetError(f"bad mask magic {magic!r}: {path}")
    if code not in MASK_DTYPES:
        raise DatasetError(f"unknown mask dtype code {code}: {path}")
    dtype = np.dtype(MASK_DTYPES[code])
    expected = h * w * dtype.itemsize
    body = raw[MASK_HEADER.size:]
    if len(body) != expected:
        raise DatasetError(f"mask file size mismatch ({len(body)} != {expected} bytes): {path}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.int64)


def split_sizes(count: int, fractions: dict[str, float]) -> dict[str, int]:
    """Contiguous split sizes from fractions; boundaries are rounded cumulative sums."""
    total = sum(fractions.values())
    if total <= 0:
        raise ConfigError("split fractions must sum to a positive value")
    sizes: dict[str, int] = {}
    cumulative = 0.0
    start = 0
    for name, frac in fractions.items():
        cumulative += frac / total
        stop = int(round(cumulative * count))
        sizes[name] = stop - start
        start = stop
    return sizes


def save_dataset(samples: Sequence[SceneSample], root: Path, splits: dict[str, float],
                 vocabulary: dict[str, list[str]] | None = None) -> Path:
    """Write samples in order; splits are assigned as contiguous blocks."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    sizes = split_sizes(len(samples), splits)
    assignment = [name for name, n in sizes.items() for _ in range(n)]

    entries = []
    for sample, split in zip(samples, assignment):
        stem = f"{sample.id:06d}"
        pixels = np.round(sample.image * 255.0).clip(0, 255).astype(np.uint8)
        Image.fromarray(pixels).save(root / "images" / f"{stem}.png")
        write_mask_file(root / "masks" / f"{stem}.msk", sample.label_map())
        entries.append({
            "id": sample.id,
            "split": split,
            "image": f"images/{stem}.png",
            "mask": f"masks/{stem}.msk",
            "attributes": [list(a) for a in sample.attributes],
        })
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "splits": dict(splits),
        "vocabulary": vocabulary or GeneratorSpec().vocabulary(),
        "samples": entries,
    }
    write_json(root / "manifest.json", manifest)
    return root


class SceneDataset(Sequence):
    """Read-only samples in manifest order plus split index lists."""

    def __init__(self, samples: list[SceneSample], split_of: list[str],
                 split_names: list[str], vocabulary: dict[str, list[str]]):
        self._samples = samples
        self.vocabulary = vocabulary
        self.splits: dict[str, list[int]] = {name: [] for name in split_names}
        for idx, name in enumerate(split_of):
            self.splits.setdefault(name, []).append(idx)

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, idx):
        return self._samples[idx]

    def split(self, name: str) -> list[SceneSample]:
        if name not in self.splits:
            raise DatasetError(f"split not present in manifest: {name}")
        return [self._samples[i] for i in self.splits[name]]


def load_dataset(path: Path) -> SceneDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, OSError) as e:
        raise DatasetError(f"manifest unreadable ({manifest_path}): {e}") from e

    entries = manifest.get("samples")
    if not isinstance(entries, list):
        raise DatasetError(f"manifest has no sample list: {manifest_path}")
    fractions = manifest.get("splits") or {"train": 1.0}

    # samples without an explicit split get the manifest fractions, in order
    fallback = [name for name, n in split_sizes(len(entries), fractions).items() for _ in range(n)]

    samples: list[SceneSample] = []
    split_of: list[str] = []
    for idx, entry in enumerate(entries):
        image_path = root / entry["image"]
        if not image_path.exists():
            raise DatasetError(f"image file not found: {image_path}")
        try:
            with Image.open(image_path) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as e:
            raise DatasetError(f"image file corrupt ({image_path}): {e}") from e
        labels = read_mask_file(root / entry["mask"])
        if labels.shape != pixels.shape[:2]:
            raise DatasetValidationError(
                f"sample {entry['id']}: mask shape {labels.shape} != image shape {pixels.shape[:2]}"
            )
        attributes = [tuple(a) for a in entry.get("attributes", [])]
        samples.append(SceneSample.from_label_map(
            pixels.astype(np.float32) / 255.0, labels, attributes, int(entry["id"]),
        ))
        split_of.append(entry.get("split") or fallback[idx])
    vocabulary = manifest.get("vocabulary") or GeneratorSpec().vocabulary()
    return SceneDataset(samples, split_of, list(fractions), vocabulary)


# ============================================================
# Augmentation
# ============================================================

@dataclass
class AugmentConfig:
    crop_scale_min: float = 0.3
    crop_scale_max: float = 1.0
    aspect_ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    output_size: int = 64
    flip_prob: float = 0.5
    brightness: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    normalize_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    normalize_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    max_crop_attempts: int = 10

    def validate(self) -> list[str]:
        errors: list[str] = []
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            errors.append(
                f"crop scale must satisfy 0 < min <= max <= 1: ({self.crop_scale_min}, {self.crop_scale_max})"
            )
        lo, hi = self.aspect_ratio_range
        if not 0.0 < lo <= hi:
            errors.append(f"aspect_ratio_range invalid: {self.aspect_ratio_range}")
        if self.output_size <= 0:
            errors.append(f"output_size must be positive: {self.output_size}")
        if not 0.0 <= self.flip_prob <= 1.0:
            errors.append(f"flip_prob must be a probability: {self.flip_prob}")
        if not 0.0 <= self.hue <= 0.5:
            errors.append(f"hue magnitude must be in [0, 0.5]: {self.hue}")
        if self.brightness < 0 or self.saturation < 0:
            errors.append("jitter magnitudes must be non-negative")
        if any(s <= 0 for s in self.normalize_std):
            errors.append(f"normalize_std must be positive: {self.normalize_std}")
        return errors


CropBox = tuple[int, int, int, int]  # top, left, height, width


@dataclass
class AugmentedPair:
    """Two views (3×S×S float tensors) of the same source; crop boxes in source coordinates."""

    view0: torch.Tensor
    view1: torch.Tensor
    source_id: int
    crop_boxes: tuple[CropBox, CropBox]
    flip_flags: tuple[bool, bool]


def sample_crop_box(rng: np.random.Generator, height: int, width: int, cfg: AugmentConfig) -> CropBox:
    """Random rectangle whose relative area lies in [crop_scale_min, crop_scale_max]."""
    area = height * width
    log_lo, log_hi = math.log(cfg.aspect_ratio_range[0]), math.log(cfg.aspect_ratio_range[1])
    for _ in range(cfg.max_crop_attempts):
        target = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max) * area
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height and cfg.crop_scale_min <= h * w / area <= cfg.crop_scale_max:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # fallback: source-shaped crop at the largest allowed scale, centred
    scale = math.sqrt(cfg.crop_scale_max)
    h = max(1, int(height * scale))
    w = max(1, int(width * scale))
    while h * w / area < cfg.crop_scale_min:
        if h < height:
            h += 1
        elif w < width:
            w += 1
        else:
            break
    return (height - h) // 2, (width - w) // 2, h, w


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """H×W×3 float array → 3×H×W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1).contiguous()


def prepare_view(image: np.ndarray | torch.Tensor, cfg: AugmentConfig) -> torch.Tensor:
    """Evaluation-time view: resize to output_size, then normalise. No randomness."""
    img = to_tensor(image) if isinstance(image, np.ndarray) else image
    img = TF.resize(img, [cfg.output_size, cfg.output_size], antialias=True)
    return TF.normalize(img, list(cfg.normalize_mean), list(cfg.normalize_std))


def _augment_view(img: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[torch.Tensor, CropBox, bool]:
    _, height, width = img.shape
    flip = bool(rng.random() < cfg.flip_prob)
    if flip:
        img = TF.hflip(img)
    top, left, h, w = sample_crop_box(rng, height, width, cfg)
    img = TF.resized_crop(img, top, left, h, w, [cfg.output_size, cfg.output_size], antialias=True)

    brightness = rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
    saturation = rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
    hue = rng.uniform(-cfg.hue, cfg.hue)
    if cfg.brightness > 0:
        img = TF.adjust_brightness(img, brightness)
    if cfg.saturation > 0:
        img = TF.adjust_saturation(img, saturation)
    if cfg.hue > 0:
        img = TF.adjust_hue(img, hue)
    img = TF.normalize(img, list(cfg.normalize_mean), list(cfg.normalize_std))

    # record the box in unflipped source coordinates
    src_left = width - left - w if flip else left
    return img, (top, src_left, h, w), flip


def augment(sample: SceneSample, cfg: AugmentConfig, rng_seed: int) -> AugmentedPair:
    """Flip → crop → resize → colour jitter → normalise, independently for each view."""
    errors = cfg.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    source = to_tensor(sample.image)
    seeds = np.random.SeedSequence(rng_seed).spawn(2)
    view0, box0, flip0 = _augment_view(source, cfg, np.random.default_rng(seeds[0]))
    view1, box1, flip1 = _augment_view(source, cfg, np.random.default_rng(seeds[1]))
    return AugmentedPair(view0, view1, sample.id, (box0, box1), (flip0, flip1))


def replay_masks(masks: np.ndarray, crop_box: CropBox, flip: bool, output_size: int) -> np.ndarray:
    """Apply a recorded crop box and flip to M×H×W masks; nearest-neighbour resize."""
    top, left, h, w = crop_box
    cropped = torch.from_numpy(np.ascontiguousarray(masks[:, top:top + h, left:left + w]).astype(np.uint8))
    if flip:
        cropped = TF.hflip(cropped)
    resized = TF.resize(cropped, [output_size, output_size], interpolation=InterpolationMode.NEAREST)
    return resized.numpy().astype(bool)
