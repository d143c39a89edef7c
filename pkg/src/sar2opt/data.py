"""Co-registered SAR/optical pairs: loading, patching, batching, synthesis.

On disk a dataset is two directories with matching PNG filenames::

    root/A/<id>.png   SAR (8-bit gray, or RGB for full-pol pseudo-colour)
    root/B/<id>.png   optical (8-bit RGB)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

__all__ = [
    "DataError",
    "DatasetManifest",
    "ImageDecodeError",
    "ImagePair",
    "MissingCounterpartError",
    "PairSizeError",
    "batch_for_step",
    "batch_iterator",
    "clean_sar",
    "cut_patches",
    "denormalize",
    "export_dataset",
    "load_dataset",
    "normalize",
    "read_png",
    "speckle_field",
    "synth_dataset",
    "to_batch",
    "write_png",
]


class DataError(ValueError):
    pass


class MissingCounterpartError(DataError):
    pass


class ImageDecodeError(DataError):
    pass


class PairSizeError(DataError):
    pass


@dataclass
class ImagePair:
    id: str
    sar: np.ndarray  # uint8 [H, W, 1|3]
    optical: np.ndarray  # uint8 [H, W, 3]

    def __post_init__(self):
        if self.sar.shape[:2] != self.optical.shape[:2]:
            raise PairSizeError(
                f"pair {self.id}: SAR {self.sar.shape[:2]} and optical {self.optical.shape[:2]} differ in size"
            )
        if self.sar.shape[2] not in (1, 3) or self.optical.shape[2] != 3:
            raise DataError(f"pair {self.id}: unsupported channels SAR {self.sar.shape}, optical {self.optical.shape}")


def read_png(path) -> np.ndarray:
    """Decode to uint8 ``[H, W, C]`` with C = 1 for gray and 3 otherwise."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1", "I;16", "I"):
                arr = np.asarray(im.convert("L"))[:, :, None]
            else:
                arr = np.asarray(im.convert("RGB"))
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    return np.ascontiguousarray(arr, dtype=np.uint8)


def write_png(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    # fixed encoder settings keep the bytes reproducible
    Image.fromarray(image).save(path, format="PNG", optimize=False, compress_level=6)


@dataclass
class DatasetManifest:
    root: Path
    ids: List[str]
    patch_size: int = 256
    channel_mode: str = "single-pol"

    @property
    def sar_channels(self) -> int:
        return 1 if self.channel_mode == "single-pol" else 3

    def load(self, pair_id: str) -> ImagePair:
        sar = read_png(self.root / "A" / f"{pair_id}.png")
        opt = read_png(self.root / "B" / f"{pair_id}.png")
        if sar.shape[:2] != opt.shape[:2]:
            raise PairSizeError(f"pair {pair_id}: SAR {sar.shape[:2]} and optical {opt.shape[:2]} differ in size")
        if sar.shape[2] != self.sar_channels:
            raise DataError(f"pair {pair_id}: SAR has {sar.shape[2]} channels, dataset is {self.channel_mode}")
        if opt.shape[2] != 3:
            raise DataError(f"pair {pair_id}: optical image must be RGB")
        return ImagePair(pair_id, sar, opt)

    def pairs(self) -> Iterator[ImagePair]:
        for pair_id in self.ids:
            yield self.load(pair_id)


def load_dataset(root, patch_size: int = 256) -> Tuple[DatasetManifest, Iterator[ImagePair]]:
    root = Path(root)
    a_dir, b_dir = root / "A", root / "B"
    for d in (a_dir, b_dir):
        if not d.is_dir():
            raise DataError(f"dataset root {root} lacks directory {d.name}/")
    a_ids = {p.stem for p in a_dir.glob("*.png")}
    b_ids = {p.stem for p in b_dir.glob("*.png")}
    for missing, side in ((sorted(a_ids - b_ids), "B"), (sorted(b_ids - a_ids), "A")):
        if missing:
            raise MissingCounterpartError(f"pair {missing[0]} has no counterpart in {side}/")
    ids = sorted(a_ids)
    if not ids:
        raise DataError(f"dataset root {root} holds no PNG pairs")
    if patch_size < 16:
        raise DataError(f"patch_size must be >= 16, got {patch_size}")
    first = read_png(a_dir / f"{ids[0]}.png")
    mode = "single-pol" if first.shape[2] == 1 else "full-pol"
    manifest = DatasetManifest(root, ids, patch_size, mode)
    return manifest, manifest.pairs()


def cut_patches(pair: ImagePair, patch_size: int, stride: Optional[int] = None) -> List[ImagePair]:
    """Aligned grid of patches; partial border patches are dropped."""
    stride = patch_size if stride is None else stride
    if stride < 1:
        raise DataError("stride must be >= 1")
    h, w = pair.sar.shape[:2]
    if h < patch_size or w < patch_size:
        raise DataError(f"pair {pair.id}: image {h}x{w} is smaller than patch size {patch_size}")
    out = []
    for row, y in enumerate(range(0, h - patch_size + 1, stride)):
        for col, x in enumerate(range(0, w - patch_size + 1, stride)):
            window = (slice(y, y + patch_size), slice(x, x + patch_size))
            out.append(ImagePair(f"{pair.id}_{row}_{col}", pair.sar[window].copy(), pair.optical[window].copy()))
    return out


def normalize(image: np.ndarray) -> np.ndarray:
    """uint8 -> float32 in [-1, 1] via x/127.5 - 1 (layout unchanged)."""
    return (np.asarray(image, dtype=np.float32) / np.float32(127.5) - np.float32(1)).astype(np.float32)


def denormalize(t: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, clamped to 0..255, rounding half away from zero."""
    v = (np.asarray(t, dtype=np.float64) + 1.0) * 127.5
    return np.floor(np.clip(v, 0.0, 255.0) + 0.5).astype(np.uint8)


def to_batch(pairs: Sequence[ImagePair]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack pairs into NCHW model-space arrays (sar, optical)."""
    sar = np.stack([normalize(p.sar).transpose(2, 0, 1) for p in pairs])
    opt = np.stack([normalize(p.optical).transpose(2, 0, 1) for p in pairs])
    return sar, opt


def _permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iterator(pairs: Sequence, batch_size: int, seed: int, epoch: int) -> Iterator[list]:
    """Shuffled batches; the order depends only on (seed, epoch)."""
    n = len(pairs)
    if n == 0:
        raise DataError("cannot batch an empty dataset")
    if batch_size > n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {n}")
    perm = _permutation(n, seed, epoch)
    for start in range(0, n - batch_size + 1, batch_size):
        yield [pairs[i] for i in perm[start : start + batch_size]]


def batch_for_step(pairs: Sequence, batch_size: int, seed: int, step: int) -> list:
    """The batch :func:`batch_iterator` yields at global position ``step``."""
    n = len(pairs)
    if n == 0:
        raise DataError("cannot batch an empty dataset")
    if batch_size > n:
        raise DataError(f"batch_size {batch_size} exceeds dataset size {n}")
    per_epoch = n // batch_size
    epoch, idx = divmod(step, per_epoch)
    perm = _permutation(n, seed, epoch)
    return [pairs[i] for i in perm[idx * batch_size : (idx + 1) * batch_size]]


# -- synthetic scenes ---------------------------------------------------------

# land-cover classes: optical colour and SAR backscatter gain per channel
PALETTE = np.array(
    [
        [38, 72, 118],  # water
        [62, 124, 52],  # vegetation
        [176, 146, 104],  # bare soil
        [206, 204, 210],  # built-up
    ],
    dtype=np.uint8,
)
SAR_GAIN = np.array(
    [
        [0.12, 0.10, 0.15],
        [0.35, 0.50, 0.25],
        [0.50, 0.35, 0.40],
        [1.00, 0.75, 0.90],
    ]
)
LUMA = np.array([0.299, 0.587, 0.114])
LOOKS = 4


def _scene(rng: np.random.Generator, size: int) -> np.ndarray:
    labels = np.full((size, size), rng.choice([1, 2]), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 7))):
        cls = int(rng.integers(0, len(PALETTE)))
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(size / 12, size / 3, 2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        labels[mask] = cls
    return PALETTE[labels]


def clean_sar(optical: np.ndarray, channels: int = 1) -> np.ndarray:
    """The noise-free optical->SAR map: luminance times the per-class gain."""
    optical = np.asarray(optical)
    dist = ((optical[:, :, None, :].astype(np.int64) - PALETTE[None, None].astype(np.int64)) ** 2).sum(-1)
    labels = dist.argmin(-1)
    lum = optical.astype(np.float64) @ LUMA
    gain = SAR_GAIN[labels][:, :, :channels]
    return np.floor(np.clip(lum[:, :, None] * gain, 0, 255) + 0.5).astype(np.uint8)


def speckle_field(rng: np.random.Generator, shape, looks: int = LOOKS) -> np.ndarray:
    """Multi-look speckle: per pixel the mean of ``looks`` unit exponentials."""
    return rng.standard_exponential((looks,) + tuple(shape)).mean(axis=0)


def synth_dataset(
    seed: int, n_pairs: int, size: int, speckle: bool = True, sar_channels: int = 1, looks: int = LOOKS
) -> List[ImagePair]:
    """Seeded procedural scenes paired with their speckled SAR rendering."""
    pairs = []
    for i in range(n_pairs):
        rng = np.random.default_rng([seed, i])
        optical = _scene(rng, size)
        sar = clean_sar(optical, sar_channels)
        if speckle:
            noisy = sar * speckle_field(rng, sar.shape, looks)
            sar = np.floor(np.clip(noisy, 0, 255) + 0.5).astype(np.uint8)
        pairs.append(ImagePair(f"synth_{i:05d}", sar, optical))
    return pairs


def export_dataset(pairs: Sequence[ImagePair], root, meta: Optional[dict] = None) -> Path:
    root = Path(root)
    try:
        (root / "A").mkdir(parents=True, exist_ok=True)
        (root / "B").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {root}: {exc}") from exc
    for p in pairs:
        write_png(root / "A" / f"{p.id}.png", p.sar)
        write_png(root / "B" / f"{p.id}.png", p.optical)
    manifest = {"ids": [p.id for p in pairs], **(meta or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root
