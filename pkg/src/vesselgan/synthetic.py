"""Synthetic fundus-like images for tests and offline demos.

Each image has a circular field of view, smooth illumination falloff, a
bright optic disc and a branching tree of dark vessels whose ground truth is
known exactly. :func:`write_drive_tree` lays such images out in the DRIVE
directory structure.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import FundusImage


def _stamp(mask: np.ndarray, r: float, c: float, radius: float) -> None:
    h, w = mask.shape
    r0, r1 = max(0, int(r - radius - 1)), min(h, int(r + radius + 2))
    c0, c1 = max(0, int(c - radius - 1)), min(w, int(c + radius + 2))
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.mgrid[r0:r1, c0:c1]
    mask[r0:r1, c0:c1] |= (rr - r) ** 2 + (cc - c) ** 2 <= radius ** 2


def _grow(mask, rng, r, c, angle, radius, length, depth):
    for _ in range(int(length)):
        _stamp(mask, r, c, radius)
        angle += rng.normal(0, 0.12)
        r += np.sin(angle) * 0.7
        c += np.cos(angle) * 0.7
        if not (0 <= r < mask.shape[0] and 0 <= c < mask.shape[1]):
            return
    if depth > 0 and radius > 0.6:
        for turn in (-0.5, 0.5):
            _grow(mask, rng, r, c, angle + turn + rng.normal(0, 0.15), radius * 0.75, length * 0.7, depth - 1)


def synthetic_fundus(size: int = 128, seed: int = 0, image_id: str = "syn", split: str = "train",
                     n_trees: int = 4) -> FundusImage:
    rng = np.random.default_rng(seed)
    h = w = size
    rr, cc = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    dist = np.hypot(rr - cy, cc - cx) / (size / 2)
    fov = dist <= 0.92

    disc_r, disc_c = cy + rng.uniform(-0.1, 0.1) * size, cx + rng.choice([-1, 1]) * 0.25 * size
    vessels = np.zeros((h, w), bool)
    for k in range(n_trees):
        angle = 2 * np.pi * k / n_trees + rng.uniform(-0.4, 0.4)
        _grow(vessels, rng, disc_r, disc_c, angle, radius=size / 70 + 0.9, length=size * 0.35, depth=3)
    vessels &= fov

    illum = 0.75 - 0.35 * dist ** 2 + 0.05 * rng.standard_normal()
    disc = np.exp(-((rr - disc_r) ** 2 + (cc - disc_c) ** 2) / (2 * (size / 18) ** 2))
    green = illum + 0.25 * disc - 0.3 * vessels + rng.normal(0, 0.03, (h, w))
    red = 0.9 * illum + 0.2 * disc - 0.1 * vessels + rng.normal(0, 0.03, (h, w))
    blue = 0.3 * illum - 0.05 * vessels + rng.normal(0, 0.02, (h, w))
    rgb = np.stack([red, green, blue], axis=2)
    rgb = np.where(fov[..., None], rgb, 0.0)
    pixels = np.clip(np.round(rgb * 255), 0, 255).astype(np.uint8)
    return FundusImage(pixels, fov, vessels, image_id, split)


def synthetic_dataset(n_train: int = 20, n_test: int = 20, size: int = 128, seed: int = 0):
    from .dataset import Dataset

    train = [synthetic_fundus(size, seed * 1000 + i, f"{21 + i:02d}_training", "train") for i in range(n_train)]
    test = [synthetic_fundus(size, seed * 1000 + 500 + i, f"{1 + i:02d}_test", "test") for i in range(n_test)]
    return Dataset("DRIVE", train, test)


def write_drive_tree(root, n_train: int = 20, n_test: int = 20, size: int = 128, seed: int = 0) -> Path:
    """Write a synthetic dataset with DRIVE file names and formats (TIFF images, GIF masks)."""
    root = Path(root)
    data = synthetic_dataset(n_train, n_test, size, seed)
    for split_dir, images in (("training", data.train), ("test", data.test)):
        for sub in ("images", "mask", "1st_manual"):
            (root / split_dir / sub).mkdir(parents=True, exist_ok=True)
        for img in images:
            number = img.image_id.split("_")[0]
            Image.fromarray(img.pixels).save(root / split_dir / "images" / f"{img.image_id}.tif")
            Image.fromarray(img.fov_mask.astype(np.uint8) * 255).save(root / split_dir / "mask" / f"{img.image_id}_mask.gif")
            Image.fromarray(img.vessel_gt.astype(np.uint8) * 255).save(root / split_dir / "1st_manual" / f"{number}_manual1.gif")
    return root
