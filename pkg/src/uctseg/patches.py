"""Sliding-window patch extraction, representative selection, balanced sampling.

Training consumes two kinds of patches: labeled windows cut from every
slice (the segmentation batches), and unlabeled grayscale "representative"
patches dominated by a single class, which feed the representation-layer
losses. Representatives are picked automatically by class-fraction
thresholds since the phantoms carry ground truth.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import imagedata
from .errors import DataError


@dataclass(frozen=True)
class PatchSpec:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be at least 1, got {self.window}")
        if not 1 <= self.stride <= self.window:
            raise ValueError(
                f"stride must be in [1, window]; got stride={self.stride}, window={self.window}"
            )


@dataclass(frozen=True)
class LabeledPatch:
    image: np.ndarray
    labels: np.ndarray
    source_id: str
    row: int
    col: int


def patch_grid_count(height: int, width: int, spec: PatchSpec) -> int:
    """Number of fully in-bounds windows: (floor((H-w)/s)+1) * (floor((W-w)/s)+1)."""
    if height < spec.window or width < spec.window:
        raise DataError(
            f"image {height}x{width} is smaller than the {spec.window}-pixel window"
        )
    return ((height - spec.window) // spec.stride + 1) * (
        (width - spec.window) // spec.stride + 1
    )


def extract_patches(
    image: np.ndarray,
    labels: np.ndarray,
    spec: PatchSpec,
    source_id: str = "",
) -> list[LabeledPatch]:
    """Cut all fully in-bounds windows at stride offsets, in row-major order."""
    if image.shape != labels.shape:
        raise DataError(
            f"image dimensions {image.shape} do not match label dimensions {labels.shape}"
        )
    h, w = image.shape
    patch_grid_count(h, w, spec)  # raises if the image is too small
    out = []
    for r in range(0, h - spec.window + 1, spec.stride):
        for c in range(0, w - spec.window + 1, spec.stride):
            out.append(
                LabeledPatch(
                    image=image[r : r + spec.window, c : c + spec.window].copy(),
                    labels=labels[r : r + spec.window, c : c + spec.window].copy(),
                    source_id=source_id,
                    row=r,
                    col=c,
                )
            )
    return out


def class_fractions(labels: np.ndarray) -> np.ndarray:
    """Fractions of air/dirt/bone pixels as a length-3 array."""
    total = labels.size
    return np.array(
        [(labels == c).sum() / total for c in range(imagedata.NUM_CLASSES)]
    )


@dataclass
class RepresentativePatchSet:
    """Grayscale bone/dirt exemplar patches plus the per-step draw size."""

    bone_patches: list[np.ndarray]
    dirt_patches: list[np.ndarray]
    per_step_count: int

    def __post_init__(self):
        if not self.bone_patches or not self.dirt_patches:
            raise DataError("representative patch lists must be non-empty")
        if not 1 <= self.per_step_count <= min(
            len(self.bone_patches), len(self.dirt_patches)
        ):
            raise ValueError(
                f"per_step_count {self.per_step_count} exceeds the smaller patch list"
            )


def select_representatives(
    patches: list[LabeledPatch],
    bone_min_fraction: float = 0.30,
    dirt_min_fraction: float = 0.10,
    other_max_fraction: float = 0.02,
    max_per_class: int = 64,
    per_step_count: int = 8,
) -> RepresentativePatchSet:
    """Pick patches dominated by one class and nearly free of the other.

    A patch joins the bone list when its bone fraction is at least
    bone_min_fraction and its dirt fraction at most other_max_fraction;
    the dirt list is symmetric. Each list keeps the max_per_class patches
    with the highest own-class fraction. The per-step draw size is clamped
    to the smaller list.
    """
    if not patches:
        raise DataError("cannot select representatives from an empty patch list")
    bone_scored, dirt_scored = [], []
    for p in patches:
        frac = class_fractions(p.labels)
        if frac[imagedata.BONE] >= bone_min_fraction and frac[imagedata.DIRT] <= other_max_fraction:
            bone_scored.append((frac[imagedata.BONE], p))
        if frac[imagedata.DIRT] >= dirt_min_fraction and frac[imagedata.BONE] <= other_max_fraction:
            dirt_scored.append((frac[imagedata.DIRT], p))
    if not bone_scored:
        raise DataError(
            "no qualifying bone representative patches; the representation losses "
            "cannot be driven by this dataset"
        )
    if not dirt_scored:
        raise DataError(
            "no qualifying dirt representative patches; the representation losses "
            "cannot be driven by this dataset"
        )
    bone_scored.sort(key=lambda t: -t[0])
    dirt_scored.sort(key=lambda t: -t[0])
    bone = [p.image for _, p in bone_scored[:max_per_class]]
    dirt = [p.image for _, p in dirt_scored[:max_per_class]]
    return RepresentativePatchSet(
        bone_patches=bone,
        dirt_patches=dirt,
        per_step_count=min(per_step_count, len(bone), len(dirt)),
    )


def balanced_sample(
    patch_set: RepresentativePatchSet, seed: int, step: int
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Draw an equal number of bone and dirt patches, without replacement.

    Deterministic in (seed, step): the same pair always yields the same draw.
    """
    if seed < 0 or step < 0:
        raise ValueError("seed and step must be non-negative")
    p = patch_set.per_step_count
    if p > min(len(patch_set.bone_patches), len(patch_set.dirt_patches)):
        raise ValueError("per_step_count exceeds the available patches")
    rng = np.random.default_rng(np.random.SeedSequence([seed, step]))
    bone_idx = rng.choice(len(patch_set.bone_patches), size=p, replace=False)
    dirt_idx = rng.choice(len(patch_set.dirt_patches), size=p, replace=False)
    return (
        [patch_set.bone_patches[i] for i in bone_idx],
        [patch_set.dirt_patches[i] for i in dirt_idx],
    )


def export_patch_set(patch_set: RepresentativePatchSet, out_dir: str | os.PathLike) -> str:
    """Write representative patches as PNGs plus a TSV index for visual audit."""
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    index_path = os.path.join(out_dir, "index.tsv")
    with open(index_path, "w", encoding="utf-8") as fh:
        for cls, plist in (("bone", patch_set.bone_patches), ("dirt", patch_set.dirt_patches)):
            for i, patch in enumerate(plist):
                name = f"{cls}_{i:03d}.png"
                imagedata.save_image(patch, os.path.join(out_dir, name), bit_depth=16)
                fh.write(f"{cls}\t{i}\t{name}\n")
    return index_path
