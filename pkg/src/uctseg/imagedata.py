"""Core image/label data model, one-hot encoding, manifests, and splits.

Images are 2-D float64 arrays with intensities in [0, 1]; label maps are
2-D uint8 arrays with values in {0, 1, 2} for air, dirt, and bone.
Datasets are described by tab-separated manifests (one row per slice:
identifier, image path, label path).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DataError

AIR, DIRT, BONE = 0, 1, 2
NUM_CLASSES = 3
CLASS_NAMES = ("air", "dirt", "bone")


def validate_image(values: np.ndarray) -> np.ndarray:
    """Check a grayscale image array and return it as float64.

    Raises DataError unless the array is 2-D, at least 1x1, finite, and
    within [0, 1].
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"image must be a 2-D grid, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise DataError(
            f"image intensities outside [0, 1]: min={arr.min():g}, max={arr.max():g}"
        )
    return arr


def validate_labels(values: np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
    """Check a label map and return it as uint8, optionally against an image's shape."""
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DataError(f"label map must be a 2-D grid, got shape {arr.shape}")
    uniq = np.unique(arr)
    if not np.isin(uniq, (AIR, DIRT, BONE)).all():
        bad = uniq[~np.isin(uniq, (AIR, DIRT, BONE))]
        raise DataError(f"label out of range: found value(s) {bad.tolist()}, expected 0/1/2")
    if image is not None and arr.shape != image.shape:
        raise DataError(
            f"label dimensions {arr.shape} do not match image dimensions {image.shape}"
        )
    return arr.astype(np.uint8)


def one_hot_encode(labels: np.ndarray) -> np.ndarray:
    """Encode a label map as a (3, H, W) array of {0, 1} indicators."""
    lab = validate_labels(labels)
    onehot = np.zeros((NUM_CLASSES,) + lab.shape, dtype=np.uint8)
    for c in range(NUM_CLASSES):
        onehot[c] = lab == c
    return onehot


def one_hot_decode(onehot: np.ndarray) -> np.ndarray:
    """Invert one_hot_encode; rejects inputs whose per-pixel channel sum is not 1."""
    arr = np.asarray(onehot)
    if arr.ndim != 3 or arr.shape[0] != NUM_CLASSES:
        raise DataError(f"one-hot map must have shape (3, H, W), got {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise DataError("one-hot map must contain only 0/1 indicators")
    sums = arr.sum(axis=0)
    if not (sums == 1).all():
        raise DataError("not one-hot: per-pixel channel sum must be exactly 1")
    return arr.argmax(axis=0).astype(np.uint8)


def _max_value_for(img: Image.Image, path: str) -> int:
    # Container bit depth, not the per-image maximum: 8-bit modes scale by
    # 255, 16-bit modes by 65535.
    if img.mode == "L":
        return 255
    if img.mode in ("I", "I;16", "I;16B", "I;16L"):
        return 65535
    raise DataError(f"{path}: unsupported image mode {img.mode!r} (need 8/16-bit grayscale)")


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG/PGM, scaled to [0, 1] by the stored bit depth."""
    path = os.fspath(path)
    try:
        with Image.open(path) as img:
            maxv = _max_value_for(img, path)
            arr = np.asarray(img, dtype=np.float64)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return validate_image(arr / maxv)


def load_labels(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit label map with values restricted to {0, 1, 2}."""
    path = os.fspath(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: unreadable label file ({exc})") from exc
    try:
        return validate_labels(arr)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def load_pair(image_path: str | os.PathLike, label_path: str | os.PathLike):
    """Load an image/label pair, checking that their dimensions agree."""
    image = load_image(image_path)
    labels = load_labels(label_path)
    if labels.shape != image.shape:
        raise DataError(
            f"{label_path}: label dimensions {labels.shape} do not match "
            f"image dimensions {image.shape} of {image_path}"
        )
    return image, labels


def save_image(values: np.ndarray, path: str | os.PathLike, bit_depth: int = 16) -> None:
    """Write a [0, 1] grayscale image as an 8- or 16-bit PNG/PGM."""
    arr = validate_image(values)
    if bit_depth == 8:
        data = np.round(arr * 255).astype(np.uint8)
        Image.fromarray(data, mode="L").save(os.fspath(path))
    elif bit_depth == 16:
        data = np.round(arr * 65535).astype(np.uint16)
        Image.fromarray(data).save(os.fspath(path))
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")


def save_labels(labels: np.ndarray, path: str | os.PathLike) -> None:
    """Write a label map as an 8-bit PNG/PGM with raw values {0, 1, 2}."""
    lab = validate_labels(labels)
    Image.fromarray(lab, mode="L").save(os.fspath(path))


def save_rgb(rgb: np.ndarray, path: str | os.PathLike) -> None:
    """Write an (H, W, 3) uint8 array as an RGB image."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DataError(f"expected (H, W, 3) uint8 array, got {rgb.dtype} {rgb.shape}")
    Image.fromarray(rgb, mode="RGB").save(os.fspath(path))


@dataclass(frozen=True)
class ManifestEntry:
    identifier: str
    image_path: str
    label_path: str


@dataclass
class DatasetManifest:
    """Ordered list of slice entries plus a split tag (all/train/test)."""

    entries: list[ManifestEntry] = field(default_factory=list)
    split_tag: str = "all"

    def __post_init__(self):
        ids = [e.identifier for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate manifest identifiers: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def read_manifest(
    path: str | os.PathLike, split_tag: str = "all", check_paths: bool = True
) -> DatasetManifest:
    """Read a TSV manifest; relative paths resolve against the manifest's directory."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line or line.startswith("#"):
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise DataError(
                        f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                    )
                ident, img, lab = parts
                img = img if os.path.isabs(img) else os.path.join(base, img)
                lab = lab if os.path.isabs(lab) else os.path.join(base, lab)
                entries.append(ManifestEntry(ident, img, lab))
    except OSError as exc:
        raise DataError(f"{path}: cannot read manifest ({exc})") from exc
    if check_paths:
        for e in entries:
            for p in (e.image_path, e.label_path):
                if not os.path.exists(p):
                    raise DataError(f"{path}: listed file does not exist: {p}")
    return DatasetManifest(entries, split_tag)


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> None:
    """Write a manifest as UTF-8 TSV, using paths relative to the file when possible."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    lines = []
    for e in manifest.entries:
        img, lab = e.image_path, e.label_path
        try:
            img = os.path.relpath(img, base)
            lab = os.path.relpath(lab, base)
        except ValueError:
            pass  # different drive on some platforms; keep absolute
        lines.append(f"{e.identifier}\t{img}\t{lab}\n")
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(lines)


def make_splits(
    manifest: DatasetManifest, train_count: int, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split a manifest into disjoint train/test manifests, deterministically by seed.

    Entries keep their original manifest order within each side.
    """
    n = len(manifest)
    if not 0 < train_count < n:
        raise ValueError(f"train_count must be in [1, {n - 1}], got {train_count}")
    if seed < 0:
        raise ValueError("seed must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    picked = set(rng.permutation(n)[:train_count].tolist())
    train = [e for i, e in enumerate(manifest.entries) if i in picked]
    test = [e for i, e in enumerate(manifest.entries) if i not in picked]
    return DatasetManifest(train, "train"), DatasetManifest(test, "test")
