"""Segmentation samples: synthetic generation, netpbm ingestion and splitting.

Dataset directory layout::

    <root>/images/<id>.pgm   (or .ppm for RGB)
    <root>/masks/<id>.pgm
"""

import logging
import math
import os
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import root_validator

from .common import ArrayModel
from .config import ShapeKind, SyntheticSpec
from .errors import ConfigurationError, DataError, ParseError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".ppm")

# Masks are binarized at this fraction of maxval.
MASK_THRESHOLD = 0.5

# Rejection sampling gives up after this many draws per sample.
MAX_SHAPE_ATTEMPTS = 1000

_PLAIN_MAGIC = {b"P2": 1, b"P3": 3}
_BINARY_MAGIC = {b"P5": 1, b"P6": 3}
_WHITESPACE = b" \t\r\n\x0b\x0c"


class Sample(ArrayModel):
    """One image (C x H x W, values in [0, 1]) with its binary H x W mask."""

    image: np.ndarray
    mask: np.ndarray
    id: str

    @root_validator(pre=True)
    @classmethod
    def coerce_arrays(cls, values: dict) -> dict:
        for key in ("image", "mask"):
            if key in values:
                values[key] = np.asarray(values[key], dtype=np.float64)
        return values

    @root_validator(skip_on_failure=True)
    @classmethod
    def validate_arrays(cls, values: dict) -> dict:
        image, mask = values["image"], values["mask"]
        if image.ndim != 3 or mask.ndim != 2:
            raise ValueError(
                f"Sample {values['id']}: expected C x H x W image and H x W mask, "
                f"got {image.shape} and {mask.shape}"
            )
        if image.shape[1:] != mask.shape:
            raise ValueError(
                f"Sample {values['id']}: image {image.shape[1:]} and mask {mask.shape} differ"
            )
        if image.size and (image.min() < 0.0 or image.max() > 1.0):
            raise ValueError(f"Sample {values['id']}: image values must lie in [0, 1]")
        if not np.isin(mask, (0.0, 1.0)).all():
            raise ValueError(f"Sample {values['id']}: mask values must be 0 or 1")
        return values

    @property
    def channels(self) -> int:
        return self.image.shape[0]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.mask.shape


# Synthetic blobs


def _disk(yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, radius: float) -> np.ndarray:
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2


def _draw_shape(kind: str, size: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    area = fraction * size * size

    def center(extent: float) -> Tuple[float, float]:
        low, high = min(extent, size / 2), max(size - extent, size / 2)
        return rng.uniform(low, high), rng.uniform(low, high)

    if kind == ShapeKind.DISK:
        radius = math.sqrt(area / math.pi)
        cy, cx = center(radius)
        return _disk(yy, xx, cy, cx, radius)

    if kind == ShapeKind.ELLIPSE:
        aspect = rng.uniform(0.5, 2.0)
        semi_a = math.sqrt(area * aspect / math.pi)
        semi_b = semi_a / aspect
        angle = rng.uniform(0.0, math.pi)
        cy, cx = center(max(semi_a, semi_b))
        cos, sin = math.cos(angle), math.sin(angle)
        u = (xx - cx) * cos + (yy - cy) * sin
        v = -(xx - cx) * sin + (yy - cy) * cos
        return (u / semi_a) ** 2 + (v / semi_b) ** 2 <= 1.0

    if kind == ShapeKind.BLOB_UNION:
        count = int(rng.integers(2, 5))
        mask = np.zeros((size, size), dtype=bool)
        for share in rng.dirichlet(np.ones(count)):
            radius = math.sqrt(area * share / math.pi)
            cy, cx = center(radius)
            mask |= _disk(yy, xx, cy, cx, radius)
        return mask

    raise ConfigurationError(f"Unknown shape kind {kind!r}")


def synthetic_sample(spec: SyntheticSpec, index: int) -> Sample:
    """Sample `index` of the synthetic set; depends only on (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.resolution
    for _ in range(MAX_SHAPE_ATTEMPTS):
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        target = rng.uniform(spec.min_fraction, spec.max_fraction)
        mask = _draw_shape(kind, size, target, rng)
        if spec.min_fraction <= mask.mean() <= spec.max_fraction:
            break
    else:
        raise DataError(
            f"Could not draw a shape covering [{spec.min_fraction}, {spec.max_fraction}] "
            f"of a {size}x{size} image"
        )

    background = 0.5 - spec.contrast / 2
    foreground = 0.5 + spec.contrast / 2
    clean = np.where(mask, foreground, background)
    speckle = 1.0 + spec.noise * rng.standard_normal((spec.channels, size, size))
    image = np.clip(clean[None] * speckle, 0.0, 1.0)
    return Sample(image=image, mask=mask.astype(np.float64), id=f"synthetic_{index:05d}")


def generate_synthetic(spec: SyntheticSpec) -> List[Sample]:
    samples = [synthetic_sample(spec, index) for index in range(spec.count)]
    logger.info(
        "Generated %d synthetic %dx%d samples (seed %d)",
        len(samples),
        spec.resolution,
        spec.resolution,
        spec.seed,
    )
    return samples


# Netpbm


def _header_tokens(data: bytes, count: int) -> Tuple[List[Tuple[bytes, int]], int]:
    """Read `count` whitespace-separated tokens after the magic, skipping comments.

    Returns the (token, offset) pairs and the offset just past the last token.
    """
    tokens = []
    pos = 2
    while len(tokens) < count:
        if pos >= len(data):
            raise ParseError("Truncated netpbm header", pos)
        byte = data[pos : pos + 1]
        if byte in _WHITESPACE:
            pos += 1
        elif byte == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(data) and data[pos : pos + 1] not in _WHITESPACE + b"#":
                pos += 1
            tokens.append((data[start:pos], start))
    return tokens, pos


def _header_int(token: bytes, offset: int, name: str, upper: Optional[int] = None) -> int:
    if not token.isdigit():
        raise ParseError(f"Invalid netpbm {name} {token!r}", offset)
    value = int(token)
    if value < 1 or (upper is not None and value > upper):
        raise ParseError(f"Netpbm {name} {value} is out of range", offset)
    return value


def parse_netpbm(data: bytes) -> Tuple[np.ndarray, int]:
    """Decode P2/P3/P5/P6 bytes into (H x W x channels integer array, maxval)."""
    magic = data[:2]
    if magic in _PLAIN_MAGIC:
        channels, binary = _PLAIN_MAGIC[magic], False
    elif magic in _BINARY_MAGIC:
        channels, binary = _BINARY_MAGIC[magic], True
    else:
        raise ParseError(f"Unsupported netpbm magic {magic!r}", 0)

    tokens, pos = _header_tokens(data, 3)
    width = _header_int(*tokens[0], "width")
    height = _header_int(*tokens[1], "height")
    maxval = _header_int(*tokens[2], "maxval", upper=65535)
    count = width * height * channels

    if binary:
        if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
            raise ParseError("Missing whitespace after netpbm maxval", pos)
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        expected = count * dtype.itemsize
        if len(data) - pos < expected:
            raise ParseError(
                f"Netpbm raster has {len(data) - pos} bytes, expected {expected}", pos
            )
        values = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.int64)
    else:
        raw = data[pos:].split()
        if len(raw) < count:
            raise ParseError(f"Netpbm raster has {len(raw)} values, expected {count}", pos)
        try:
            values = np.array([int(value) for value in raw[:count]], dtype=np.int64)
        except ValueError:
            raise ParseError("Non-integer value in plain netpbm raster", pos) from None

    if values.max(initial=0) > maxval:
        raise ParseError(f"Netpbm sample exceeds maxval {maxval}", pos)
    return values.reshape(height, width, channels), maxval


def encode_netpbm(pixels: np.ndarray, maxval: int = 255, plain: bool = False) -> bytes:
    """Encode an H x W (gray) or H x W x 3 (RGB) integer array."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
        raise DataError(f"Netpbm stores 1 or 3 channels, got an array of shape {pixels.shape}")
    height, width, channels = pixels.shape
    gray = channels == 1
    magic = ("P2" if gray else "P3") if plain else ("P5" if gray else "P6")
    header = f"{magic}\n{width} {height}\n{maxval}\n".encode("ascii")
    if plain:
        rows = (" ".join(str(int(v)) for v in row.ravel()) for row in pixels)
        return header + "\n".join(rows).encode("ascii") + b"\n"
    dtype = ">u2" if maxval > 255 else "u1"
    return header + pixels.astype(dtype).tobytes()


def read_image(path: str) -> np.ndarray:
    """Read a netpbm file as a C x H x W float array in [0, 1]."""
    with open(path, "rb") as fp:
        data = fp.read()
    try:
        pixels, maxval = parse_netpbm(data)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return np.transpose(pixels, (2, 0, 1)).astype(np.float64) / maxval


def write_image(path: str, image: np.ndarray, plain: bool = False) -> None:
    """Write a C x H x W array in [0, 1] with maxval 255."""
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.int64)
    with open(path, "wb") as fp:
        fp.write(encode_netpbm(np.transpose(pixels, (1, 2, 0)), plain=plain))


def _resize_nearest(array: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to size x size."""
    height, width = array.shape[-2:]
    rows = np.minimum((np.arange(size) + 0.5) * height / size, height - 1).astype(int)
    cols = np.minimum((np.arange(size) + 0.5) * width / size, width - 1).astype(int)
    return array[..., rows[:, None], cols[None, :]]


def _match_channels(image: np.ndarray, channels: Optional[int], name: str) -> np.ndarray:
    if channels is None or image.shape[0] == channels:
        return image
    if image.shape[0] == 1:
        return np.repeat(image, channels, axis=0)
    if channels == 1:
        return image.mean(axis=0, keepdims=True)
    raise DataError(f"{name}: cannot convert {image.shape[0]} channels to {channels}")


def _list_images(directory: str) -> dict:
    return {
        os.path.splitext(name)[0]: name
        for name in sorted(os.listdir(directory))
        if os.path.splitext(name)[1].lower() in IMAGE_SUFFIXES
    }


def load_dataset(
    root: str, channels: Optional[int] = None, resolution: Optional[int] = None
) -> List[Sample]:
    """Load `<root>/images` and `<root>/masks` into samples.

    Images are scaled to [0, 1] and masks binarized at half of maxval.
    `channels` converts gray <-> RGB; `resolution` resizes (nearest) to a
    square side.
    """
    image_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    for directory in (image_dir, mask_dir):
        if not os.path.isdir(directory):
            raise DataError(f"Dataset directory {directory} does not exist")

    images = _list_images(image_dir)
    if not images:
        raise DataError(f"No .pgm/.ppm images found in {image_dir}")
    masks = _list_images(mask_dir)

    samples = []
    for sample_id, name in images.items():
        if sample_id not in masks:
            raise DataError(f"No mask for image {name} in {mask_dir}")
        image = _match_channels(read_image(os.path.join(image_dir, name)), channels, name)
        mask = read_image(os.path.join(mask_dir, masks[sample_id])).mean(axis=0)
        if image.shape[1:] != mask.shape:
            raise DataError(
                f"Image {name} is {image.shape[2]}x{image.shape[1]} but its mask is "
                f"{mask.shape[1]}x{mask.shape[0]}"
            )
        if resolution is not None:
            image = _resize_nearest(image, resolution)
            mask = _resize_nearest(mask, resolution)
        binary = (mask >= MASK_THRESHOLD).astype(np.float64)
        samples.append(Sample(image=image, mask=binary, id=sample_id))

    shapes = {sample.image.shape for sample in samples}
    if len(shapes) > 1:
        raise DataError(
            f"Images in {root} have differing shapes {sorted(shapes)}; "
            "pass a resolution (and channel count) to normalize them"
        )
    logger.info("Loaded %d samples from %s", len(samples), root)
    return samples


def save_dataset(samples: Sequence[Sample], root: str, plain: bool = False) -> None:
    """Write samples in the dataset layout: gray as .pgm, RGB as .ppm."""
    image_dir = os.path.join(root, "images")
    mask_dir = os.path.join(root, "masks")
    os.makedirs(image_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    for sample in samples:
        suffix = ".pgm" if sample.channels == 1 else ".ppm"
        write_image(os.path.join(image_dir, sample.id + suffix), sample.image, plain=plain)
        write_image(os.path.join(mask_dir, sample.id + ".pgm"), sample.mask[None], plain=plain)
    logger.info("Wrote %d samples to %s", len(samples), root)


def split(
    samples: Sequence[Sample], fraction: float, seed: int
) -> Tuple[List[Sample], List[Sample]]:
    """Random train/validation partition with round(fraction * n) training samples."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"Split fraction must lie in (0, 1), got {fraction}")
    count = len(samples)
    if count < 2:
        raise DataError(f"Need at least 2 samples to split, got {count}")

    train_size = min(max(int(math.floor(fraction * count + 0.5)), 1), count - 1)
    order = np.random.default_rng(seed).permutation(count)
    train = [samples[i] for i in order[:train_size]]
    val = [samples[i] for i in order[train_size:]]
    return train, val


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([sample.image for sample in samples])


def stack_masks(samples: Sequence[Sample]) -> np.ndarray:
    """B x 1 x H x W mask batch."""
    return np.stack([sample.mask for sample in samples])[:, None]
