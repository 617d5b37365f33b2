"""Whole-image prediction, AUC evaluation and the experiment runners."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from sklearn.exceptions import NotFittedError

from . import reference
from .dataset import (
    BudgetPlan,
    Dataset,
    DatasetSpec,
    PreparedImage,
    SamplingConfig,
    load_drive,
    load_stare_images,
    prepare,
    sample_budget,
    stare_fold_dataset,
    stare_holdout_folds,
)
from .estimator import VesselSegmenter
from .exceptions import ConfigurationError, ShapeError
from .imaging import FundusImage, GrayImage, PreprocessConfig
from .metrics import auc_roc
from .nets import Discriminator, as_batch, class_probabilities

log = logging.getLogger("vesselgan")

ABLATION_BLOCKS = (("max", "none"), ("average", "none"), ("average", "instance"), ("average", "weight"))
ABLATION_LAYERS = ("C1", "C3", "C5", "C7", "C9", "Con1", "Con2")
BLOCK_TITLES = {
    ("max", "none"): "Max Pool",
    ("average", "none"): "Average Pool",
    ("average", "instance"): "Instance Norm + Average Pool",
    ("average", "weight"): "Weight Norm + Average Pool",
    ("max", "instance"): "Instance Norm + Max Pool",
    ("max", "weight"): "Weight Norm + Max Pool",
    ("max", "batch"): "Batch Norm + Max Pool",
    ("average", "batch"): "Batch Norm + Average Pool",
}


@dataclass
class ScoreMap:
    values: np.ndarray
    coverage: np.ndarray


def grid_positions(n: int, size: int, stride: int) -> List[int]:
    """Window start positions every ``stride`` pixels, plus a final flush window at the border."""
    if size > n:
        raise ShapeError(f"patch size {size} exceeds image extent {n}")
    pos = list(range(0, n - size + 1, stride))
    if pos[-1] != n - size:
        pos.append(n - size)
    return pos


def _predictor(net, head: Optional[str]) -> Tuple[Callable[[np.ndarray], np.ndarray], bool, int]:
    """Normalise a model into (patches -> vessel probabilities, structured?, patch size)."""
    if isinstance(net, VesselSegmenter):
        if not hasattr(net, "trainer_"):
            raise NotFittedError("estimator is not fitted")
        return net.predict_proba, net.structured_, net.patch_size_
    if hasattr(net, "predict_proba") and hasattr(net, "D"):
        return net.predict_proba, net.D.structured, net.d_spec.input_resolution
    if isinstance(net, Discriminator):
        def run(patches, chunk=256):
            net.eval()
            out = []
            with torch.no_grad():
                for s in range(0, len(patches), chunk):
                    logits, _ = net(as_batch(patches[s:s + chunk], next(net.parameters()).dtype))
                    out.append(class_probabilities(logits)[:, 1].numpy())
            return np.concatenate(out)
        return run, net.structured, net.spec.input_resolution
    if callable(net):
        if head is None:
            raise ConfigurationError("a plain callable needs an explicit head")
        size = getattr(net, "patch_size", 48)
        return net, head in ("structured", "sp"), size
    raise ConfigurationError(f"cannot predict with {type(net).__name__}")


def predict_image(img, net, head: Optional[str] = None, stride: int = 24, fov=None, chunk: int = 512) -> ScoreMap:
    """Per-pixel vessel probability for a whole image.

    Structured head: overlapping patch predictions averaged per pixel.
    Center-pixel head: a window is centred on every ``stride``-th pixel (every
    pixel at stride 1) with reflect padding at the borders, and each prediction
    fills its ``stride`` x ``stride`` cell. Dropout is disabled. ``fov``
    restricts center-pixel evaluation to field-of-view cells.
    """
    values = img.gray.values if isinstance(img, PreparedImage) else (img.values if isinstance(img, GrayImage) else np.asarray(img, np.float64))
    if fov is None and isinstance(img, PreparedImage):
        fov = img.fov_mask
    predict, structured, size = _predictor(net, head)
    h, w = values.shape
    if not 1 <= stride <= size:
        raise ConfigurationError(f"stride must lie in [1, {size}], got {stride}")
    total = np.zeros((h, w), np.float64)
    coverage = np.zeros((h, w), np.int64)
    if structured:
        rows, cols = grid_positions(h, size, stride), grid_positions(w, size, stride)
        corners = [(r, c) for r in rows for c in cols]
        for s in range(0, len(corners), chunk):
            batch = corners[s:s + chunk]
            patches = np.stack([values[r:r + size, c:c + size] for r, c in batch]).astype(np.float32)
            probs = predict(patches)
            for (r, c), p in zip(batch, probs):
                total[r:r + size, c:c + size] += p
                coverage[r:r + size, c:c + size] += 1
    else:
        half = size // 2
        padded = np.pad(values, ((half, size - half), (half, size - half)), mode="reflect")
        centers = [(r, c) for r in range(0, h, stride) for c in range(0, w, stride)]
        if fov is not None:
            fov = np.asarray(fov, bool)
            centers = [(r, c) for r, c in centers if fov[r:r + stride, c:c + stride].any()]
        for s in range(0, len(centers), chunk):
            batch = centers[s:s + chunk]
            patches = np.stack([padded[r:r + size, c:c + size] for r, c in batch]).astype(np.float32)
            probs = predict(patches)
            for (r, c), p in zip(batch, probs):
                total[r:r + stride, c:c + stride] += p
                coverage[r:r + stride, c:c + stride] += 1
    scores = np.divide(total, coverage, out=np.zeros_like(total), where=coverage > 0)
    return ScoreMap(np.clip(scores, 0.0, 1.0), coverage)


def image_auc(score: ScoreMap, gt: np.ndarray, fov: Optional[np.ndarray] = None) -> float:
    mask = None if fov is None else np.asarray(fov, bool)
    return auc_roc(score.values, gt, mask)


def evaluate_images(net, images: Sequence[PreparedImage], head: Optional[str] = None, stride: int = 24,
                    fov_only: bool = True) -> List[Tuple[str, float]]:
    """AUC per test image (FOV pixels only by default)."""
    out = []
    for img in images:
        if img.vessel_gt is None:
            raise ShapeError(f"{img.image_id} has no ground truth")
        fov = img.fov_mask if fov_only else None
        score = predict_image(img, net, head, stride, fov=fov)
        out.append((img.image_id, image_auc(score, img.vessel_gt, fov)))
    return out


@dataclass
class ExperimentCell:
    dataset: str
    budget: int
    pool: int
    config: Dict[str, object]
    seeds: List[int] = field(default_factory=list)
    aucs: List[float] = field(default_factory=list)
    auc_mean: float = float("nan")
    auc_std: float = float("nan")
    error: Optional[str] = None

    def finalize(self) -> "ExperimentCell":
        if self.aucs:
            self.auc_mean = float(np.mean(self.aucs))
            self.auc_std = float(np.std(self.aucs))
        return self

    @property
    def key(self) -> str:
        parts = [self.dataset, f"B{self.budget}", f"M{self.pool}"] + [f"{k}-{v}" for k, v in sorted(self.config.items())]
        return re.sub(r"[^A-Za-z0-9._-]+", "", "_".join(str(p) for p in parts))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)


@dataclass
class RunSettings:
    """Schedule and scale knobs shared by the runners; full-scale schedule by default."""

    epochs: int = 50
    batch_size: int = 64
    unlabeled_pool: int = 20000
    seeds: Tuple[int, ...] = (0, 1, 2)
    stride: int = 24
    max_test_images: Optional[int] = None
    max_folds: Optional[int] = None
    fov_only: bool = True
    lr: float = 1e-4
    preprocess: PreprocessConfig = PreprocessConfig()


@dataclass
class _Split:
    train: List[PreparedImage]
    test: List[PreparedImage]
    name: str


def _prepared_splits(data, settings: RunSettings) -> List[_Split]:
    cfg = settings.preprocess

    def prep(ds: Dataset) -> _Split:
        test = ds.test[: settings.max_test_images] if settings.max_test_images else ds.test
        return _Split([prepare(i, cfg) for i in ds.train], [prepare(i, cfg) for i in test], ds.name)

    if isinstance(data, Dataset):
        return [prep(data)]
    if isinstance(data, DatasetSpec):
        root = data.resolve_root()
        if data.name == "DRIVE":
            return [prep(load_drive(root))]
        images = load_stare_images(root)
        folds = stare_holdout_folds([i.image_id for i in images], data.fold_seed)
        folds = folds[: settings.max_folds] if settings.max_folds else folds
        return [prep(stare_fold_dataset(images, f)) for f in folds]
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], (Dataset, _Split)):
        return [d if isinstance(d, _Split) else prep(d) for d in data]
    raise ConfigurationError(f"cannot run experiments on {type(data).__name__}")


def make_estimator(settings: RunSettings, seed: int, **params) -> VesselSegmenter:
    return VesselSegmenter(epochs=settings.epochs, batch_size=settings.batch_size, lr_d=settings.lr, lr_g=settings.lr,
                           seed=seed, keep_best=False, **params)


def run_cell(data, budget: int, pool: Optional[int], params: Dict[str, object], settings: RunSettings,
             dataset_name: Optional[str] = None) -> ExperimentCell:
    """Train one configuration per seed (and per fold) and pool the test AUCs.

    ``pool=None`` draws labels from every training image. Failures are caught
    and stored on the cell.
    """
    splits = _prepared_splits(data, settings)
    name = dataset_name or splits[0].name
    pool_m = pool if pool is not None else len(splits[0].train)
    cell = ExperimentCell(name, budget, pool_m, dict(params), list(settings.seeds))
    sampling = SamplingConfig(unlabeled_pool=settings.unlabeled_pool)
    try:
        for seed in settings.seeds:
            fold_aucs = []
            for split in splits:
                plan = BudgetPlan(budget, min(pool_m, len(split.train)), seed)
                patches = sample_budget(split.train, plan, settings.preprocess, sampling, name)
                est = make_estimator(settings, seed, **run_cell_params(params))
                est.fit(patches.labeled.values, patches.labeled.labels, patches.unlabeled.values)
                per_image = evaluate_images(est, split.test, stride=settings.stride, fov_only=settings.fov_only)
                fold_aucs.append(float(np.mean([a for _, a in per_image])))
            cell.aucs.append(float(np.mean(fold_aucs)))
            log.info("cell %s seed %d auc %.4f", cell.key, seed, cell.aucs[-1])
    except Exception as exc:  # recorded per cell, the grid carries on
        log.exception("cell %s failed", cell.key)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell.finalize()


def _store(cells: Sequence[ExperimentCell], out_dir, stem: str) -> None:
    if out_dir is None:
        return
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    for cell in cells:
        (out_dir / "cells" / f"{cell.key}.json").write_text(cell.to_json() + "\n")
    write_cells_csv(out_dir / f"{stem}.csv", cells)


def write_cells_csv(path, cells: Sequence[ExperimentCell]) -> None:
    keys = sorted({k for c in cells for k in c.config})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "budget", "pool", *keys, "seeds", "auc_mean", "auc_std", "error"])
        for c in cells:
            writer.writerow([c.dataset, c.budget, c.pool, *[c.config.get(k, "") for k in keys],
                             " ".join(map(str, c.seeds)), f"{c.auc_mean:.6f}", f"{c.auc_std:.6f}", c.error or ""])


def load_cells(directory) -> List[ExperimentCell]:
    return [ExperimentCell(**json.loads(p.read_text())) for p in sorted(Path(directory, "cells").glob("*.json"))]


def run_ablation_grid(data, budget: int = 1000, blocks: Sequence[Tuple[str, str]] = ABLATION_BLOCKS,
                      layers: Sequence[str] = ABLATION_LAYERS, objectives: Sequence[str] = ("feature_matching", "vanilla"),
                      settings: RunSettings = RunSettings(), out_dir=None) -> List[ExperimentCell]:
    """Pooling x normalisation blocks, each with feature matching at every layer plus one vanilla column."""
    cells = []
    for pooling, norm in blocks:
        for objective in objectives:
            for layer in (layers if objective == "feature_matching" else ("C10",)):
                params = {"head": "structured", "pooling": pooling, "norm": norm,
                          "generator_objective": objective, "matching_layer": layer}
                cells.append(run_cell(data, budget, None, params, settings))
    _store(cells, out_dir, "ablation")
    if out_dir is not None:
        Path(out_dir, "ablation.md").write_text(render_ablation_table(cells))
    return cells


def run_budget_diversity(data, budgets: Sequence[int] = (500, 1000), pool_sizes: Sequence[int] = (1, 2, 4, 8, 12, 16, 20),
                         settings: RunSettings = RunSettings(), params: Optional[dict] = None, out_dir=None) -> List[ExperimentCell]:
    """AUC on a (budget, number of source images) grid, plus a line plot when ``out_dir`` is given."""
    splits = _prepared_splits(data, settings)
    n_train = min(len(s.train) for s in splits)
    bad = [m for m in pool_sizes if not 1 <= m <= n_train]
    if bad:
        raise ConfigurationError(f"pool sizes {bad} exceed the {n_train} available training images")
    params = dict(params or {})
    cells = [run_cell(splits, b, m, params, settings, splits[0].name) for b in budgets for m in pool_sizes]
    _store(cells, out_dir, "diversity")
    if out_dir is not None:
        plot_diversity(cells, Path(out_dir) / "diversity.png")
    return cells


def run_comparison(data, budgets: Sequence[int] = reference.BUDGETS, settings: RunSettings = RunSettings(),
                   out_dir=None) -> Tuple[List[ExperimentCell], str]:
    """Computed Proposed (SP) and supervised U-Net rows merged with the published rows."""
    splits = _prepared_splits(data, settings)
    name = splits[0].name
    cells = []
    for budget in budgets:
        cells.append(run_cell(splits, budget, None, {"method": "Proposed (SP)"} | _PROPOSED, settings, name))
        cells.append(run_cell(splits, budget, None, {"method": "U-Net"} | _SUPERVISED, settings, name))
    computed: Dict[str, Dict[int, Tuple[float, float]]] = {}
    for c in cells:
        computed.setdefault(str(c.config["method"]), {})[c.budget] = (c.auc_mean, c.auc_std)
    table = render_comparison_table(name, computed, budgets)
    _store(cells, out_dir, "comparison")
    if out_dir is not None:
        Path(out_dir, "comparison.md").write_text(table)
    return cells, table


_PROPOSED = {"head": "structured", "pooling": "average", "norm": "weight", "generator_objective": "feature_matching", "matching_layer": "Con1"}
_SUPERVISED = {"head": "structured", "pooling": "average", "norm": "weight", "semi_supervised": False}


def run_cell_params(cell_config: dict) -> dict:
    """Strip bookkeeping keys so a stored cell config can be fed back to :class:`VesselSegmenter`."""
    return {k: v for k, v in cell_config.items() if k != "method"}


def _fmt(value: Optional[float], std: Optional[float] = None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    if std is None:
        return f"{value:.2f}"
    return f"{value:.3f} ± {std:.3f}"


def _budget_label(b: int) -> str:
    return f"{b / 1000:g}K"


def render_comparison_table(dataset: str, computed: Dict[str, Dict[int, Tuple[float, float]]],
                            budgets: Sequence[int] = reference.BUDGETS) -> str:
    """Markdown mirror of the comparison tables: published rows, then the rows computed here."""
    from .dataset import literature_rows, normalize_name

    dataset = normalize_name(dataset)
    published = literature_rows(dataset)
    header = "| Genre | Method | " + " | ".join(_budget_label(b) for b in budgets) + " |"
    lines = [f"### Comparison on {dataset} (AUC)", "", header, "|" + "---|" * (len(budgets) + 2)]
    for method, row in published.items():
        cells = " | ".join(_fmt(row.get(b)) for b in budgets)
        lines.append(f"| {reference.GENRES[method]} | {method} (published) | {cells} |")
    for method in sorted(computed):
        row = computed[method]
        cells = " | ".join(_fmt(*row[b]) if b in row else "-" for b in budgets)
        genre = reference.GENRES.get(method, "")
        lines.append(f"| {genre} | {method} (this run) | {cells} |")
    return "\n".join(lines) + "\n"


def render_ablation_table(cells: Sequence[ExperimentCell], layers: Sequence[str] = ABLATION_LAYERS) -> str:
    """Markdown mirror of the ablation grid, each block followed by its published values."""
    by_block: Dict[Tuple[str, str], Dict[str, ExperimentCell]] = {}
    for c in cells:
        block = (str(c.config["pooling"]), str(c.config["norm"]))
        col = c.config["matching_layer"] if c.config["generator_objective"] == "feature_matching" else "vanilla"
        by_block.setdefault(block, {})[str(col)] = c
    cols = list(layers) + ["vanilla"]
    header = "| Setting | " + " | ".join(("Vanilla (C10)" if c == "vanilla" else c) for c in cols) + " |"
    lines = ["### Ablation: feature matching layer vs vanilla GAN (AUC)", "", header, "|" + "---|" * (len(cols) + 1)]
    for block, row in by_block.items():
        title = BLOCK_TITLES.get(block, f"{block[1]} + {block[0]} pool")
        lines.append(f"| {title} | " + " | ".join(_fmt(row[c].auc_mean, row[c].auc_std) if c in row else "-" for c in cols) + " |")
        published = reference.ABLATION.get(block)
        if published:
            lines.append(f"| {title} (published) | " + " | ".join(_fmt(published.get(c)) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def plot_diversity(cells: Sequence[ExperimentCell], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for budget in sorted({c.budget for c in cells}):
        pts = sorted((c.pool, c.auc_mean, c.auc_std) for c in cells if c.budget == budget)
        x, y, e = zip(*pts)
        ax.errorbar(x, y, yerr=e, marker="o", capsize=3, label=f"{_budget_label(budget)} labeled patches")
    ax.set_xlabel("number of training images")
    ax.set_ylabel("AUC")
    ax.set_title(cells[0].dataset if cells else "")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def _to_rgb8(arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    elif arr.dtype != np.uint8:
        lo, hi = (-1.0, 1.0) if arr.min() < 0 else (0.0, 1.0)
        arr = np.round((np.clip(arr, lo, hi) - lo) / (hi - lo) * 255).astype(np.uint8)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return arr


def _zoom(panel: np.ndarray, box: Tuple[int, int, int, int]) -> np.ndarray:
    r, c, hh, ww = box
    crop = panel[r:r + hh, c:c + ww]
    h, w = panel.shape[:2]
    f = max(1, min(h // hh, w // ww))
    big = np.repeat(np.repeat(crop, f, axis=0), f, axis=1)
    out = np.zeros_like(panel)
    out[: big.shape[0], : big.shape[1]] = big
    return out


def render_overlays(img, score, gt, threshold: float = 0.5, out_path=None,
                    zoom_box: Optional[Tuple[int, int, int, int]] = None) -> np.ndarray:
    """Original / ground truth / binarised prediction, with an enlarged crop of each below.

    Returns the composite RGB uint8 image and writes it as PNG when ``out_path`` is given.
    """
    if isinstance(img, FundusImage):
        original = img.pixels
    elif isinstance(img, PreparedImage):
        original = img.gray.values
    elif isinstance(img, GrayImage):
        original = img.values
    else:
        original = np.asarray(img)
    values = score.values if isinstance(score, ScoreMap) else np.asarray(score, np.float64)
    gt = np.asarray(gt, bool)
    if values.shape != gt.shape or original.shape[:2] != gt.shape:
        raise ShapeError("image, score map and ground truth must share H x W")
    h, w = gt.shape
    if zoom_box is None:
        hh, ww = max(1, h // 4), max(1, w // 4)
        zoom_box = ((h - hh) // 2, (w - ww) // 2, hh, ww)
    panels = [_to_rgb8(original), _to_rgb8(gt), _to_rgb8(values >= threshold)]
    top = np.concatenate(panels, axis=1)
    bottom = np.concatenate([_zoom(p, zoom_box) for p in panels], axis=1)
    composite = np.concatenate([top, bottom], axis=0)
    if out_path is not None:
        Image.fromarray(composite).save(out_path, format="PNG", optimize=False)
    return composite
