"""Synthetic micro-CT-like slices with ground-truth air/dirt/bone labels.

Each slice holds one specimen: a smooth low-frequency support region
filled with strut-like structures carved from band-pass-filtered noise,
surrounded by background air — so, as in a real scan, there are both
bone-dense interior neighborhoods and bone-free background. Dirt collects
as pockets of small blobs in the air along the specimen margin and in
larger cavities. A single ``intensity_overlap`` knob slides the dirt
intensity distribution from well-separated (0) to fully overlapping
bone's (1), so at high overlap no global threshold can split the two
classes and only shape/context cues remain.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from . import imagedata
from .errors import DataError
from .imagedata import DatasetManifest, ManifestEntry

AIR_MEAN = 0.08
BONE_MEAN = 0.75
CLASS_STD = 0.08
# Dirt mean slides from BONE_MEAN - MEAN_SPAN (overlap 0) up to BONE_MEAN.
MEAN_SPAN = 0.35

# Tolerance on achieved class fractions: tighter for small targets.
def fraction_tolerance(target: float) -> float:
    return 0.015 if target < 0.1 else 0.05


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 128
    height: int = 128
    bone_fraction_target: float = 0.30
    dirt_fraction_target: float = 0.05
    intensity_overlap: float = 0.6
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError("phantom dimensions must be at least 8x8")
        for name in ("bone_fraction_target", "dirt_fraction_target"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must be in (0, 1), got {v}")
        if self.dirt_fraction_target >= self.bone_fraction_target:
            raise ValueError("dirt_fraction_target must be below bone_fraction_target")
        if self.bone_fraction_target + self.dirt_fraction_target >= 1.0:
            raise ValueError("class fraction targets must leave room for air")
        if not 0.0 <= self.intensity_overlap <= 1.0:
            raise ValueError("intensity_overlap must be in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def dirt_mean(config: PhantomConfig) -> float:
    return BONE_MEAN - (1.0 - config.intensity_overlap) * MEAN_SPAN


def _bone_mask(rng: np.random.Generator, config: PhantomConfig) -> np.ndarray:
    h, w = config.height, config.width
    # Specimen support: one smooth low-frequency region pushed away from a
    # randomly chosen corner, so each slice keeps a wide clear air margin on
    # one side the way a mounted specimen leaves headspace in the holder.
    field = ndimage.gaussian_filter(rng.standard_normal((h, w)), min(h, w) / 6.0)
    field /= max(field.std(), 1e-12)
    corner = rng.integers(4)
    yy, xx = np.mgrid[0:h, 0:w]
    cy = 0.0 if corner in (0, 1) else float(h - 1)
    cx = 0.0 if corner in (0, 2) else float(w - 1)
    taper = np.hypot((yy - cy) / h, (xx - cx) / w)  # 0 at the clear corner
    field += 2.5 * taper
    # Carve the clear-corner quadrant outright (smoothed edge keeps the
    # specimen boundary organic); the quantile below would otherwise creep
    # back into it whenever the random field runs high there.
    clear = (np.abs(yy - cy) < 0.56 * h) & (np.abs(xx - cx) < 0.56 * w)
    field -= 5.0 * ndimage.gaussian_filter(clear.astype(float), min(h, w) / 20.0)
    strut_density = max(0.75, config.bone_fraction_target / 0.85)
    support_fraction = min(config.bone_fraction_target / strut_density, 0.85)
    support = field >= np.quantile(field, 1.0 - support_fraction)

    # Struts inside the support, thresholded by order statistic so the global
    # bone fraction lands on target (up to one pixel).
    noise = rng.standard_normal((h, w))
    band = ndimage.gaussian_filter(noise, 1.5) - ndimage.gaussian_filter(noise, 3.0)
    local_density = config.bone_fraction_target * h * w / max(int(support.sum()), 1)
    if local_density >= 1.0:
        raise DataError(
            f"infeasible bone fraction target {config.bone_fraction_target}: "
            "support region too small for the requested strut density"
        )
    thr = np.quantile(band[support], 1.0 - local_density)
    return support & (band >= thr)


def _dirt_mask(rng: np.random.Generator, bone: np.ndarray, config: PhantomConfig) -> np.ndarray:
    h, w = bone.shape
    target_px = int(round(config.dirt_fraction_target * h * w))
    tol_px = int(round(fraction_tolerance(config.dirt_fraction_target) * h * w))

    # Pocket centers live in the air margin around the specimen (and in any
    # cavity wide enough), close to bone but with clearance to stay off the
    # struts themselves.
    dist = ndimage.distance_transform_edt(~bone)
    lo = min(16.0, max(3.0, min(h, w) / 8.0))
    hi = max(lo + 8.0, 0.7 * min(h, w))
    centers_ok = (dist >= lo) & (dist <= hi)
    if not centers_ok.any() or int(np.count_nonzero(dist >= 3.0)) < target_px:
        raise DataError(
            "infeasible dirt fraction target: not enough clear air near the specimen"
        )

    yy, xx = np.mgrid[0:h, 0:w]
    dirt = np.zeros((h, w), dtype=bool)
    insertions = 0  # bounded at 100; exceeding it means infeasible
    attempts = 0
    pocket_index = 0
    while insertions < 100 and attempts < 600 and int(dirt.sum()) < target_px:
        open_centers = np.argwhere(centers_ok & ~dirt)
        if len(open_centers) == 0:
            break
        if pocket_index == 0:
            # The anchor pocket is a single dense deposit dropped at the
            # deepest open background, clamped off the image border so the
            # whole disk fits; later pockets are looser scatter that tops up
            # the global fraction from beside the specimen.
            cluster_r = rng.uniform(12.5, 14.0)
            fill = rng.uniform(0.85, 0.95)
            margin = int(np.ceil(cluster_r)) + 1
            depth = dist.copy()
            depth[:margin, :] = 0.0
            depth[-margin:, :] = 0.0
            depth[:, :margin] = 0.0
            depth[:, -margin:] = 0.0
            flat = np.argsort(depth, axis=None)[::-1][:10]
            pick = flat[rng.integers(len(flat))]
            cy, cx = np.unravel_index(pick, depth.shape)
        else:
            # Tournament on clearance: pockets prefer the deeper background
            # so they sit beside the specimen rather than laced through it.
            picks = open_centers[rng.integers(len(open_centers), size=8)]
            cy, cx = picks[np.argmax(dist[picks[:, 0], picks[:, 1]])]
            cluster_r = rng.uniform(10.0, 14.0)
            fill = rng.uniform(0.5, 0.8)
        pocket_goal = min(
            target_px - int(dirt.sum()),
            int(fill * np.pi * cluster_r**2),
        )
        pocket_index += 1
        pocket = 0
        pocket_attempts = 0
        while (
            insertions < 100
            and attempts < 600
            and pocket < pocket_goal
            and pocket_attempts < 120
        ):
            attempts += 1
            pocket_attempts += 1
            # Uniform point in the pocket disk, then one small blob there.
            ang = rng.uniform(0.0, 2.0 * np.pi)
            rad = cluster_r * np.sqrt(rng.uniform())
            by, bx = cy + rad * np.sin(ang), cx + rad * np.cos(ang)
            r = rng.uniform(1.6, 3.2)
            blob = (
                ((yy - by) ** 2 + (xx - bx) ** 2 <= r**2)
                & ~bone
                & ~dirt
                & (dist >= 3.0)
            )
            n_new = int(blob.sum())
            if n_new == 0:
                continue
            insertions += 1
            overshoot = int(dirt.sum()) + n_new - target_px
            if overshoot > 0:
                # Keep only the innermost pixels of the newest blob.
                pix = np.argwhere(blob)
                d2 = (pix[:, 0] - by) ** 2 + (pix[:, 1] - bx) ** 2
                keep = pix[np.argsort(d2, kind="stable")][: n_new - overshoot]
                blob = np.zeros_like(blob)
                blob[keep[:, 0], keep[:, 1]] = True
                n_new -= overshoot
            dirt |= blob
            pocket += n_new
    achieved = int(dirt.sum())
    if abs(achieved - target_px) > tol_px:
        raise DataError(
            f"infeasible dirt fraction target: reached {achieved / (h * w):.4f} "
            f"after bounded insertions (target {config.dirt_fraction_target})"
        )
    return dirt


def generate_slice(config: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    """Generate one (image, labels) pair, fully determined by config.seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed]))
    bone = _bone_mask(rng, config)
    dirt = _dirt_mask(rng, bone, config)

    labels = np.zeros(bone.shape, dtype=np.uint8)
    labels[dirt] = imagedata.DIRT
    labels[bone] = imagedata.BONE

    mean_map = np.full(bone.shape, AIR_MEAN)
    mean_map[dirt] = dirt_mean(config)
    mean_map[bone] = BONE_MEAN
    std_map = np.full(bone.shape, config.noise_sigma)
    std_map[dirt | bone] = CLASS_STD
    image = mean_map + std_map * rng.standard_normal(bone.shape)
    np.clip(image, 0.0, 1.0, out=image)

    bone_frac = bone.mean()
    if abs(bone_frac - config.bone_fraction_target) > fraction_tolerance(
        config.bone_fraction_target
    ):
        raise DataError(
            f"bone fraction {bone_frac:.4f} missed target {config.bone_fraction_target}"
        )
    return image, labels


def class_fraction_summary(labels: np.ndarray) -> dict[str, float]:
    total = labels.size
    return {
        name: float((labels == c).sum()) / total
        for c, name in enumerate(imagedata.CLASS_NAMES)
    }


def generate_dataset(
    config: PhantomConfig, count: int, out_dir: str | os.PathLike
) -> DatasetManifest:
    """Write ``count`` slice pairs plus a manifest.tsv into out_dir.

    Slice i uses seed ``config.seed + i``, so regeneration is byte-identical
    regardless of how the work is ordered.
    """
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(count):
        image, labels = generate_slice(replace(config, seed=config.seed + i))
        img_path = os.path.join(out_dir, f"slice_{i:03d}.png")
        lab_path = os.path.join(out_dir, f"slice_{i:03d}_labels.png")
        imagedata.save_image(image, img_path, bit_depth=16)
        imagedata.save_labels(labels, lab_path)
        entries.append(ManifestEntry(f"slice_{i:03d}", img_path, lab_path))
    manifest = DatasetManifest(entries, "all")
    imagedata.write_manifest(manifest, os.path.join(out_dir, "manifest.tsv"))
    return manifest


def dirt_bone_threshold_error(
    image: np.ndarray, labels: np.ndarray, num_thresholds: int = 512
) -> tuple[float, float]:
    """Best achievable balanced error of a global dirt-vs-bone intensity threshold.

    Sweeps thresholds over [0, 1], classifying dirt/bone pixels as bone when
    their intensity exceeds the threshold, and returns (best_threshold,
    balanced_error) where the error is the mean of the two per-class
    misclassification rates. Values well above 0 certify that intensity alone
    cannot separate the two classes.
    """
    dirt_vals = image[labels == imagedata.DIRT]
    bone_vals = image[labels == imagedata.BONE]
    if dirt_vals.size == 0 or bone_vals.size == 0:
        raise ValueError("need both dirt and bone pixels to sweep thresholds")
    thresholds = np.linspace(0.0, 1.0, num_thresholds)
    # For each t: dirt misclassified if > t, bone misclassified if <= t.
    dirt_err = (dirt_vals[None, :] > thresholds[:, None]).mean(axis=1)
    bone_err = (bone_vals[None, :] <= thresholds[:, None]).mean(axis=1)
    balanced = 0.5 * (dirt_err + bone_err)
    best = int(np.argmin(balanced))
    return float(thresholds[best]), float(balanced[best])
