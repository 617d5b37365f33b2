"""Dataset protocols (DRIVE split, STARE leave-one-out folds) and the annotation budget sampler."""

from __future__ import annotations

import gzip
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from . import reference
from .exceptions import ConfigurationError, DatasetIntegrityError, SamplerError
from .imaging import (
    FundusImage,
    GrayImage,
    PatchSet,
    PreprocessConfig,
    SIGNED_RANGE,
    extract_patches,
    preprocess,
)
from .storage import read_mask, read_patchset, read_raster, write_patchset

DATASETS = ("DRIVE", "STARE")
DATA_ROOT_ENV = "VESSELGAN_DATA_ROOT"
DEFAULT_UNLABELED_POOL = 20000
STARE_IMAGE_COUNT = 20
DRIVE_SPLIT_SIZE = 20


def normalize_name(name: str) -> str:
    upper = str(name).upper()
    if upper not in DATASETS:
        raise ConfigurationError(f"unknown dataset {name!r}; expected one of {', '.join(DATASETS)}")
    return upper


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    root_path: Optional[str] = None
    fold_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "name", normalize_name(self.name))

    def resolve_root(self) -> Path:
        """Explicit root, else ``$VESSELGAN_DATA_ROOT/<name>`` or the env root itself."""
        if self.root_path:
            return Path(self.root_path)
        env = os.environ.get(DATA_ROOT_ENV)
        if not env:
            raise DatasetIntegrityError(f"no root path given and ${DATA_ROOT_ENV} is unset")
        base = Path(env)
        for candidate in (base / self.name, base / self.name.lower()):
            if candidate.is_dir():
                return candidate
        return base


@dataclass
class Dataset:
    name: str
    train: List[FundusImage]
    test: List[FundusImage]


@dataclass
class PreparedImage:
    """Preprocessed image in network range [-1, 1] plus masks."""

    image_id: str
    gray: GrayImage
    fov_mask: np.ndarray
    vessel_gt: Optional[np.ndarray]

    @property
    def shape(self):
        return self.gray.shape


def prepare(img: Union[FundusImage, PreparedImage], config: PreprocessConfig = PreprocessConfig()) -> PreparedImage:
    if isinstance(img, PreparedImage):
        return img
    gray = preprocess(img, config).rescaled(SIGNED_RANGE)
    return PreparedImage(img.image_id, gray, img.fov_mask, img.vessel_gt)


def _open_any(path: Path) -> np.ndarray:
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return read_raster(io.BytesIO(fh.read()))
    return read_raster(path)


def _find_one(folder: Path, patterns: Sequence[str]) -> Path:
    for pattern in patterns:
        hits = sorted(folder.glob(pattern))
        if hits:
            return hits[0]
    raise DatasetIntegrityError(f"no file matching {list(patterns)} in {folder}")


def _load_drive_split(split_dir: Path, split: str) -> List[FundusImage]:
    images_dir = split_dir / "images"
    if not images_dir.is_dir():
        raise DatasetIntegrityError(f"missing {images_dir}")
    out = []
    for path in sorted(images_dir.iterdir()):
        if path.suffix.lower() not in (".tif", ".tiff", ".png"):
            continue
        image_id = path.stem
        number = image_id.split("_")[0]
        pixels = read_raster(path)
        fov = read_mask(_find_one(split_dir / "mask", [f"{image_id}_mask.*", f"{number}_*mask.*"]))
        gt_path = split_dir / "1st_manual"
        gt = read_mask(_find_one(gt_path, [f"{number}_manual1.*"])) if gt_path.is_dir() else None
        if gt is not None:
            gt &= fov
        out.append(FundusImage(pixels, fov, gt, image_id, split))
    return out


def load_drive(root) -> Dataset:
    """DRIVE directory with ``training/`` and ``test/`` subfolders, 20 images each.

    Each split holds ``images/*.tif``, ``mask/*_mask.gif`` and ``1st_manual/*_manual1.gif``.
    Annotated pixels outside the FOV mask are dropped.
    """
    root = Path(root)
    train = _load_drive_split(root / "training", "train")
    test = _load_drive_split(root / "test", "test")
    if len(train) != DRIVE_SPLIT_SIZE or len(test) != DRIVE_SPLIT_SIZE:
        raise DatasetIntegrityError(f"DRIVE expects {DRIVE_SPLIT_SIZE} train and {DRIVE_SPLIT_SIZE} test images, found {len(train)} and {len(test)}")
    return Dataset("DRIVE", train, test)


def stare_fov(pixels: np.ndarray, threshold: int = 20) -> np.ndarray:
    """STARE ships no FOV masks; threshold the brightest channel and fill holes."""
    mask = pixels.max(axis=2) > threshold
    mask = ndimage.binary_opening(mask, iterations=2)
    return ndimage.binary_fill_holes(mask)


def load_stare_images(root) -> List[FundusImage]:
    """The 20 annotated STARE images (``im*.ppm`` with ``*.ah.ppm`` labels, optionally gzipped)."""
    root = Path(root)
    labels = sorted(p for p in root.rglob("*.ah.ppm*"))
    if len(labels) != STARE_IMAGE_COUNT:
        raise DatasetIntegrityError(f"STARE expects {STARE_IMAGE_COUNT} annotated images, found {len(labels)}")
    out = []
    for lab in labels:
        image_id = lab.name.split(".")[0]
        candidates = [p for p in root.rglob(f"{image_id}.ppm*") if ".ah." not in p.name]
        if not candidates:
            raise DatasetIntegrityError(f"no STARE image for label {lab.name}")
        pixels = _open_any(sorted(candidates)[0])
        gt_raw = _open_any(lab)
        gt = (gt_raw.max(axis=2) if gt_raw.ndim == 3 else gt_raw) > 0
        fov = stare_fov(pixels)
        out.append(FundusImage(pixels, fov, gt & fov, image_id, "train"))
    return out


@dataclass(frozen=True)
class Fold:
    index: int
    test_id: str
    train_ids: tuple


def stare_holdout_folds(spec_or_ids, fold_seed: Optional[int] = None) -> List[Fold]:
    """Twenty leave-one-out folds; a seeded permutation decides the fold order.

    Accepts a :class:`DatasetSpec` (image ids read from disk) or a sequence of ids.
    """
    if isinstance(spec_or_ids, DatasetSpec):
        ids = [img.image_id for img in load_stare_images(spec_or_ids.resolve_root())]
        seed = spec_or_ids.fold_seed if fold_seed is None else fold_seed
    else:
        ids = [i.image_id if isinstance(i, FundusImage) else str(i) for i in spec_or_ids]
        seed = 0 if fold_seed is None else fold_seed
    if len(ids) != STARE_IMAGE_COUNT or len(set(ids)) != len(ids):
        raise DatasetIntegrityError(f"STARE folds need {STARE_IMAGE_COUNT} distinct images, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    folds = []
    for k, idx in enumerate(order):
        test_id = ids[idx]
        folds.append(Fold(k, test_id, tuple(i for i in ids if i != test_id)))
    return folds


def stare_fold_dataset(images: Sequence[FundusImage], fold: Fold) -> Dataset:
    by_id = {img.image_id: img for img in images}
    test = by_id[fold.test_id]
    test = FundusImage(test.pixels, test.fov_mask, test.vessel_gt, test.image_id, "test")
    return Dataset("STARE", [by_id[i] for i in fold.train_ids], [test])


def load_dataset(spec: DatasetSpec, fold: int = 0) -> Dataset:
    """DRIVE's fixed split, or STARE fold ``fold`` of :func:`stare_holdout_folds`."""
    root = spec.resolve_root()
    if spec.name == "DRIVE":
        return load_drive(root)
    images = load_stare_images(root)
    folds = stare_holdout_folds([i.image_id for i in images], spec.fold_seed)
    return stare_fold_dataset(images, folds[fold])


@dataclass(frozen=True)
class BudgetPlan:
    budget: int
    pool: int
    seed: int = 0

    def validate(self, n_train: int) -> None:
        if self.budget < 0:
            raise ConfigurationError(f"budget must be nonnegative, got {self.budget}")
        if not 1 <= self.pool <= n_train:
            raise ConfigurationError(f"pool size must lie in [1, {n_train}], got {self.pool}")


@dataclass(frozen=True)
class SamplingConfig:
    unlabeled_pool: int = DEFAULT_UNLABELED_POOL
    patch_size: int = 48
    restrict_to_fov: bool = True


@dataclass
class SplitPatchSet:
    labeled: PatchSet
    unlabeled: PatchSet
    plan: BudgetPlan
    chosen_ids: List[str] = field(default_factory=list)
    all_ids: List[str] = field(default_factory=list)
    dataset: str = ""


def balanced_counts(total: int, parts: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``total`` into ``parts`` integers differing by at most one; the +1s go to random parts."""
    counts = np.full(parts, total // parts, dtype=np.int64)
    counts[rng.permutation(parts)[: total % parts]] += 1
    return counts


def sample_budget(
    train_images: Sequence[Union[FundusImage, PreparedImage]],
    plan: BudgetPlan,
    imaging_cfg: PreprocessConfig = PreprocessConfig(),
    sampling: SamplingConfig = SamplingConfig(),
    dataset: str = "",
) -> SplitPatchSet:
    """Draw ``plan.budget`` labeled patches from ``plan.pool`` randomly chosen images.

    The unlabeled pool is spread evenly over every training image. Labeled and
    unlabeled patches of one image come from a single draw without replacement,
    so no (image, centre) pair lands in both sets. Patch values are in [-1, 1].
    """
    images = [prepare(img, imaging_cfg) for img in train_images]
    n = len(images)
    plan.validate(n)
    if sampling.unlabeled_pool < 0:
        raise ConfigurationError("unlabeled pool size must be nonnegative")
    rng = np.random.default_rng(plan.seed)
    chosen = np.sort(rng.choice(n, size=plan.pool, replace=False))
    lab_counts = np.zeros(n, dtype=np.int64)
    lab_counts[chosen] = balanced_counts(plan.budget, plan.pool, rng)
    unl_counts = balanced_counts(sampling.unlabeled_pool, n, rng)
    seeds = np.random.SeedSequence(plan.seed).spawn(n)

    labeled, unlabeled = [], []
    for i, img in enumerate(images):
        k_lab, k_unl = int(lab_counts[i]), int(unl_counts[i])
        if img.vessel_gt is None and k_lab:
            raise SamplerError(f"{img.image_id}: labeled patches requested from an unannotated image")
        fov = img.fov_mask if sampling.restrict_to_fov else None
        try:
            drawn = extract_patches(img.gray, img.vessel_gt, k_lab + k_unl, sampling.patch_size, np.random.default_rng(seeds[i]), fov, img.image_id)
        except SamplerError as exc:
            raise SamplerError(f"budget {plan.budget} over {plan.pool} images is not admissible: {exc}") from exc
        labeled.append(drawn.take(np.arange(k_lab)))
        unlabeled.append(drawn.take(np.arange(k_lab, k_lab + k_unl)).without_labels())

    ids = [img.image_id for img in images]
    return SplitPatchSet(
        PatchSet.concatenate(labeled, sampling.patch_size, labeled=True),
        PatchSet.concatenate(unlabeled, sampling.patch_size, labeled=False),
        plan,
        [ids[i] for i in chosen],
        ids,
        dataset,
    )


def literature_rows(dataset: str) -> Dict[str, Dict[int, float]]:
    """Published AUCs per method and budget for DRIVE or STARE."""
    table = reference.COMPARISON[normalize_name(dataset)]
    return {method: dict(zip(reference.BUDGETS, values)) for method, values in table.items()}


def _provenance(patches: PatchSet):
    return [[str(s), int(r), int(c)] for s, (r, c) in zip(patches.source_ids, patches.centers)]


def save_plan(path, split: SplitPatchSet) -> None:
    """One JSON header line, then the labeled and unlabeled VGPS containers."""
    header = {
        "format": "vesselgan-plan",
        "version": 1,
        "dataset": split.dataset,
        "budget": split.plan.budget,
        "pool": split.plan.pool,
        "seed": split.plan.seed,
        "image_ids": list(split.chosen_ids),
        "all_image_ids": list(split.all_ids),
        "patch_size": split.labeled.size,
        "labeled": _provenance(split.labeled),
        "unlabeled": _provenance(split.unlabeled),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        write_patchset(fh, split.labeled)
        write_patchset(fh, split.unlabeled if split.unlabeled.labels is None else split.unlabeled.without_labels())


def _unpack_provenance(rows):
    if not rows:
        return np.zeros((0, 2), np.int64), np.array([], dtype=object)
    return np.array([[r, c] for _, r, c in rows], np.int64), np.array([s for s, _, _ in rows], dtype=object)


def load_plan(path) -> SplitPatchSet:
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"{path}: not a plan file") from exc
        if header.get("format") != "vesselgan-plan":
            raise ConfigurationError(f"{path}: not a plan file")
        labeled = read_patchset(fh, *_unpack_provenance(header["labeled"]))
        unlabeled = read_patchset(fh, *_unpack_provenance(header["unlabeled"]))
    size = header["patch_size"]
    if labeled.labels is None:
        labeled = PatchSet(labeled.values, np.zeros(labeled.values.shape, bool), labeled.centers, labeled.source_ids, size)
    unlabeled = unlabeled.without_labels()
    plan = BudgetPlan(header["budget"], header["pool"], header["seed"])
    return SplitPatchSet(labeled, unlabeled, plan, header["image_ids"], header["all_image_ids"], header["dataset"])
