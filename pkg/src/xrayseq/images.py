"""Image loading, resizing to the network input size and triplet batch assembly."""

from __future__ import annotations

import hashlib
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError
from .metadata import LABEL_INDEX, NUM_LABELS
from .samples import SampleSet

INPUT_SIZE = 128
RESIZE_KERNEL = "bilinear-halfpixel"
CACHE_MAGIC = b"XRSQ-IMGCACHE-v1\n"


@dataclass(frozen=True)
class RawImage:
    """Decoded single-channel pixels and the maximum value of their bit depth."""

    pixels: np.ndarray
    max_value: float


def load_grayscale(path: str | Path) -> RawImage:
    """Decode an image file to a single-channel integer grid.

    Colour images are averaged across channels (alpha dropped); 16-bit
    greyscale keeps its full range.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(img, dtype=np.int64)
                return RawImage(np.clip(arr, 0, 65535).astype(np.uint16), 65535.0)
            if mode == "L":
                return RawImage(np.asarray(img, dtype=np.uint8).copy(), 255.0)
            if mode in ("1", "P", "PA", "CMYK", "YCbCr", "LAB", "HSV"):
                img = img.convert("RGB")
            elif mode == "LA":
                return RawImage(np.asarray(img, dtype=np.uint8)[..., 0].copy(), 255.0)
            arr = np.asarray(img, dtype=np.float64)[..., :3]
    except (UnidentifiedImageError, OSError, SyntaxError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    averaged = np.rint(arr.mean(axis=-1))
    return RawImage(averaged.astype(np.uint8), 255.0)


def resize_normalize(raw: RawImage | np.ndarray, size: int = INPUT_SIZE) -> np.ndarray:
    """Bilinear resample (half-pixel centres, no antialiasing) to ``size``x``size``, scaled to [0, 1].

    A plain float array is taken to be already normalised (max value 1).
    Returns a float32 array of shape (size, size).
    """
    if isinstance(raw, RawImage):
        pixels, max_value = raw.pixels, raw.max_value
    else:
        pixels, max_value = np.asarray(raw), 1.0
    if pixels.ndim != 2 or pixels.size == 0:
        raise ValueError(f"expected a non-empty 2-D grid, got shape {pixels.shape}")
    grid = torch.from_numpy(pixels.astype(np.float64))[None, None]
    if grid.shape[-2:] != (size, size):
        grid = F.interpolate(grid, size=(size, size), mode="bilinear", align_corners=False)
    out = (grid[0, 0] / max_value).clamp_(0.0, 1.0)
    return out.numpy().astype(np.float32)


def to_channels(image: np.ndarray, channels: int) -> np.ndarray:
    """(H, W) -> (H, W, channels) by replication."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    return np.repeat(image[..., None], channels, axis=-1)


def collapse_channels(image: np.ndarray) -> np.ndarray:
    return image[..., 0]


def check_image_tensor(t: np.ndarray, size: int = INPUT_SIZE) -> None:
    if t.shape[:2] != (size, size):
        raise ValueError(f"image tensor has shape {t.shape}, expected ({size}, {size}, c)")
    if not np.all(np.isfinite(t)):
        raise ValueError("image tensor contains NaN or Inf")
    if t.min() < 0.0 or t.max() > 1.0:
        raise ValueError(f"image tensor outside [0, 1]: [{t.min()}, {t.max()}]")


class ImageFolder:
    """Loads ``image_index`` references from a root directory.

    Resized images are memoised in memory and, when ``cache_dir`` is given,
    on disk under a key derived from file contents, kernel and size.
    """

    def __init__(
        self,
        root: str | Path,
        size: int = INPUT_SIZE,
        channels: int = 1,
        cache_dir: str | Path | None = None,
    ):
        self.root = Path(root)
        self.size = size
        self.channels = channels
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._memo: dict[str, np.ndarray] = {}

    def path_for(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.root / p

    def _cache_file(self, path: Path) -> Path:
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        key = hashlib.sha256(f"{digest}:{RESIZE_KERNEL}:{self.size}".encode()).hexdigest()
        return self.cache_dir / f"{key}.bin"

    def _load_2d(self, ref: str) -> np.ndarray:
        path = self.path_for(ref)
        cache_file = self._cache_file(path) if self.cache_dir and path.is_file() else None
        if cache_file is not None and cache_file.is_file():
            blob = cache_file.read_bytes()
            if blob.startswith(CACHE_MAGIC):
                return np.load(io.BytesIO(blob[len(CACHE_MAGIC):]))
        image = resize_normalize(load_grayscale(path), self.size)
        if cache_file is not None:
            cache_file.parent.mkdir(parents=True, exist_ok=True)
            buf = io.BytesIO()
            np.save(buf, image)
            cache_file.write_bytes(CACHE_MAGIC + buf.getvalue())
        return image

    def __call__(self, ref: str) -> np.ndarray:
        if ref not in self._memo:
            self._memo[ref] = self._load_2d(ref)
        return to_channels(self._memo[ref], self.channels)


class ArraySource:
    """In-memory image source: maps references to (H, W) arrays already in [0, 1]."""

    def __init__(self, images: Mapping[str, np.ndarray], channels: int = 1, size: int = INPUT_SIZE):
        self.images = images
        self.channels = channels
        self.size = size

    def __call__(self, ref: str) -> np.ndarray:
        if ref not in self.images:
            raise FileNotFoundError(f"no image for reference {ref!r}")
        return to_channels(resize_normalize(self.images[ref], self.size), self.channels)


ImageSource = Callable[[str], np.ndarray]


@dataclass
class TripletBatch:
    first: np.ndarray
    second: np.ndarray
    third: np.ndarray
    targets: np.ndarray
    sample_ids: list[int]

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def inputs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.first, self.second, self.third


def one_hot(label: str) -> np.ndarray:
    row = np.zeros(NUM_LABELS, dtype=np.float32)
    row[LABEL_INDEX[label]] = 1.0
    return row


def assemble_batch(samples: Sequence[SampleSet], source: ImageSource, workers: int = 1) -> TripletBatch:
    """Stack the first, second and third follow-ups of ``samples`` into aligned arrays."""

    def load(ref_and_id: tuple[str, int]) -> np.ndarray:
        ref, sid = ref_and_id
        try:
            return source(ref)
        except (OSError, DecodeError) as exc:
            raise type(exc)(f"sample {sid}: {exc}") from exc

    jobs = [(ref, s.sample_id) for s in samples for ref in s.images]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            loaded = list(pool.map(load, jobs))
    else:
        loaded = [load(job) for job in jobs]
    if not loaded:
        empty = np.zeros((0, 0, 0, 0), dtype=np.float32)
        return TripletBatch(empty, empty, empty, np.zeros((0, NUM_LABELS), np.float32), [])
    stacked = np.stack(loaded).astype(np.float32)
    return TripletBatch(
        first=np.ascontiguousarray(stacked[0::3]),
        second=np.ascontiguousarray(stacked[1::3]),
        third=np.ascontiguousarray(stacked[2::3]),
        targets=np.stack([one_hot(s.target_label) for s in samples]),
        sample_ids=[s.sample_id for s in samples],
    )
