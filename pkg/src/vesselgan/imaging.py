"""Fundus preprocessing: weighted grayscale, CLAHE, gamma and patch extraction.

Every function here is pure; the same inputs always give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ChannelCountError, ConfigurationError, SamplerError, ShapeError

UNIT_RANGE = (0.0, 1.0)
SIGNED_RANGE = (-1.0, 1.0)

DEFAULT_WEIGHTS = (0.25, 0.5, 0.25)
DEFAULT_CLIP_LIMIT = 2.0
DEFAULT_TILE_GRID = (8, 8)
DEFAULT_GAMMA = 1.2
DEFAULT_PATCH_SIZE = 48


@dataclass
class FundusImage:
    """Raw RGB fundus photograph with its field-of-view mask and optional vessel annotation."""

    pixels: np.ndarray
    fov_mask: np.ndarray
    vessel_gt: Optional[np.ndarray] = None
    image_id: str = ""
    split_tag: str = "train"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.fov_mask = np.asarray(self.fov_mask, dtype=bool)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ChannelCountError(f"{self.image_id or 'image'}: expected H x W x 3 pixels, got shape {self.pixels.shape}")
        hw = self.pixels.shape[:2]
        if self.fov_mask.shape != hw:
            raise ShapeError(f"{self.image_id}: fov mask {self.fov_mask.shape} does not match pixels {hw}")
        if self.vessel_gt is not None:
            self.vessel_gt = np.asarray(self.vessel_gt, dtype=bool)
            if self.vessel_gt.shape != hw:
                raise ShapeError(f"{self.image_id}: vessel gt {self.vessel_gt.shape} does not match pixels {hw}")
            if np.any(self.vessel_gt & ~self.fov_mask):
                raise ShapeError(f"{self.image_id}: vessel annotation extends outside the field of view")
        if self.split_tag not in ("train", "test"):
            raise ConfigurationError(f"split_tag must be 'train' or 'test', got {self.split_tag!r}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass
class GrayImage:
    values: np.ndarray
    value_range: Tuple[float, float] = UNIT_RANGE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ShapeError(f"gray image must be 2-D, got shape {self.values.shape}")
        self.value_range = tuple(float(v) for v in self.value_range)
        if self.value_range not in (UNIT_RANGE, SIGNED_RANGE):
            raise ConfigurationError(f"value_range must be [0,1] or [-1,1], got {self.value_range}")
        lo, hi = self.value_range
        if self.values.size and (self.values.min() < lo or self.values.max() > hi):
            raise ShapeError(f"values fall outside declared range {self.value_range}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def rescaled(self, value_range: Tuple[float, float]) -> "GrayImage":
        """Affinely map onto another declared range."""
        value_range = tuple(float(v) for v in value_range)
        if value_range == self.value_range:
            return self
        lo, hi = self.value_range
        unit = (self.values - lo) / (hi - lo)
        nlo, nhi = value_range
        return GrayImage(np.clip(nlo + unit * (nhi - nlo), nlo, nhi), value_range)


@dataclass(frozen=True)
class Patch:
    values: np.ndarray
    label: Optional[np.ndarray]
    center: Tuple[int, int]
    source_id: str


@dataclass
class PatchSet:
    """Array-backed collection of equally sized square patches.

    ``values`` is (N, S, S) float32, ``labels`` is (N, S, S) bool or ``None``
    when unlabeled, ``centers`` holds absolute (row, col) positions and
    ``source_ids`` the originating image of each patch.
    """

    values: np.ndarray
    labels: Optional[np.ndarray]
    centers: np.ndarray
    source_ids: np.ndarray
    size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1, self.size, self.size)
        n = len(self.values)
        self.centers = np.asarray(self.centers, dtype=np.int64).reshape(n, 2)
        self.source_ids = np.asarray(self.source_ids, dtype=object).reshape(n)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool).reshape(n, self.size, self.size)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i) -> Patch:
        label = None if self.labels is None else self.labels[i]
        return Patch(self.values[i], label, tuple(int(v) for v in self.centers[i]), str(self.source_ids[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def identities(self):
        return {(str(s), int(r), int(c)) for s, (r, c) in zip(self.source_ids, self.centers)}

    def take(self, index) -> "PatchSet":
        index = np.asarray(index, dtype=np.int64)
        labels = None if self.labels is None else self.labels[index]
        return PatchSet(self.values[index], labels, self.centers[index], self.source_ids[index], self.size)

    def without_labels(self) -> "PatchSet":
        return PatchSet(self.values, None, self.centers, self.source_ids, self.size)

    @classmethod
    def empty(cls, size: int = DEFAULT_PATCH_SIZE, labeled: bool = True) -> "PatchSet":
        labels = np.zeros((0, size, size), bool) if labeled else None
        return cls(np.zeros((0, size, size), np.float32), labels, np.zeros((0, 2), np.int64), np.array([], dtype=object), size)

    @classmethod
    def concatenate(cls, parts: Sequence["PatchSet"], size: int = DEFAULT_PATCH_SIZE, labeled: bool = True) -> "PatchSet":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(size, labeled)
        size = parts[0].size
        if any(p.size != size for p in parts):
            raise ShapeError("cannot concatenate patch sets of different patch sizes")
        if labeled and any(p.labels is None for p in parts):
            raise ShapeError("cannot build a labeled set from unlabeled parts")
        labels = np.concatenate([p.labels for p in parts]) if labeled else None
        return cls(
            np.concatenate([p.values for p in parts]),
            labels,
            np.concatenate([p.centers for p in parts]),
            np.concatenate([p.source_ids for p in parts]),
            size,
        )


def _check_unit(values: np.ndarray, what: str):
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        raise ShapeError(f"{what} expects values in [0, 1]")


def to_weighted_grayscale(img, weights: Tuple[float, float, float] = DEFAULT_WEIGHTS) -> GrayImage:
    """Weighted sum of the R, G, B planes scaled from [0, 255] to [0, 1].

    ``img`` may be a :class:`FundusImage` or a raw H x W x 3 array.
    """
    pixels = img.pixels if isinstance(img, FundusImage) else np.asarray(img)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        channels = 1 if pixels.ndim == 2 else (pixels.shape[2] if pixels.ndim == 3 else None)
        raise ChannelCountError(f"expected 3 colour channels, got {channels}")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"grayscale weights must be 3 nonnegative reals summing to 1, got {weights}")
    rgb = pixels.astype(np.float64)
    gray = (w[0] * rgb[..., 0] + w[1] * rgb[..., 1] + w[2] * rgb[..., 2]) / 255.0
    return GrayImage(np.clip(gray, 0.0, 1.0), UNIT_RANGE)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.linspace(0, n, tiles + 1).round().astype(np.int64)


def _interp_axis(n: int, edges: np.ndarray):
    """Per-coordinate lower/upper tile index and weight of the upper tile."""
    centers = (edges[:-1] + edges[1:]) / 2.0
    pos = np.arange(n) + 0.5
    upper = np.searchsorted(centers, pos, side="right")
    i0 = np.clip(upper - 1, 0, len(centers) - 1)
    i1 = np.clip(upper, 0, len(centers) - 1)
    span = centers[i1] - centers[i0]
    weight = np.where(span > 0, (pos - centers[i0]) / np.where(span > 0, span, 1.0), 0.0)
    return i0, i1, weight


def clahe(
    img: GrayImage,
    clip_limit: float = DEFAULT_CLIP_LIMIT,
    tile_grid: Tuple[int, int] = DEFAULT_TILE_GRID,
    nbins: int = 256,
) -> GrayImage:
    """Contrast limited adaptive histogram equalization.

    Intensities are quantised into ``nbins`` bins and a histogram is built per
    tile. ``clip_limit`` is relative to a flat histogram: a bin may hold at most
    ``clip_limit * tile_pixels / nbins`` counts, and the excess is spread evenly
    over all bins (``float('inf')`` disables clipping). Each tile's mapping is
    its normalised cumulative histogram; pixels blend the four nearest tile
    mappings bilinearly by distance to the tile centres.
    """
    values = img.values
    _check_unit(values, "clahe")
    rows, cols = (int(t) for t in tile_grid)
    if rows < 1 or cols < 1:
        raise ConfigurationError(f"tile grid must be at least 1 x 1, got {tile_grid}")
    if not clip_limit > 0:
        raise ConfigurationError(f"clip_limit must be positive, got {clip_limit}")
    h, w = values.shape
    if h < rows or w < cols:
        raise ConfigurationError(f"image {h}x{w} is smaller than tile grid {rows}x{cols}")

    bins = np.minimum((values * nbins).astype(np.int64), nbins - 1)
    redges, cedges = _tile_edges(h, rows), _tile_edges(w, cols)
    maps = np.empty((rows, cols, nbins), dtype=np.float64)
    for i in range(rows):
        for j in range(cols):
            tile = bins[redges[i]:redges[i + 1], cedges[j]:cedges[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=nbins).astype(np.float64)
            if np.isfinite(clip_limit):
                limit = clip_limit * tile.size / nbins
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / nbins
            maps[i, j] = np.cumsum(hist) / hist.sum()

    r0, r1, wr = _interp_axis(h, redges)
    c0, c1, wc = _interp_axis(w, cedges)
    R0, R1, WR = r0[:, None], r1[:, None], wr[:, None]
    C0, C1, WC = c0[None, :], c1[None, :], wc[None, :]
    out = (
        (1 - WR) * (1 - WC) * maps[R0, C0, bins]
        + (1 - WR) * WC * maps[R0, C1, bins]
        + WR * (1 - WC) * maps[R1, C0, bins]
        + WR * WC * maps[R1, C1, bins]
    )
    return GrayImage(np.clip(out, 0.0, 1.0), UNIT_RANGE)


def gamma_adjust(img: GrayImage, gamma: float = DEFAULT_GAMMA) -> GrayImage:
    if not gamma > 0:
        raise ConfigurationError(f"gamma must be positive, got {gamma}")
    _check_unit(img.values, "gamma_adjust")
    return GrayImage(np.power(img.values, gamma), UNIT_RANGE)


def admissible_centers(shape: Tuple[int, int], size: int, fov: Optional[np.ndarray] = None) -> np.ndarray:
    """(K, 2) array of patch centres whose full window lies inside the image.

    The centre of a window with top-left corner (r, c) is (r + size // 2, c + size // 2).
    When ``fov`` is given only centres inside it are kept.
    """
    h, w = shape
    if size < 1 or size > min(h, w):
        raise ShapeError(f"patch size {size} does not fit image {h}x{w}")
    half = size // 2
    rr, cc = np.mgrid[half:h - size + half + 1, half:w - size + half + 1]
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1)
    if fov is not None:
        fov = np.asarray(fov, dtype=bool)
        if fov.shape != (h, w):
            raise ShapeError(f"fov mask {fov.shape} does not match image {h}x{w}")
        centers = centers[fov[centers[:, 0], centers[:, 1]]]
    return centers


def crop_patches(values: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """Stack of ``size`` x ``size`` windows at the given centres."""
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    half = size // 2
    out = np.empty((len(centers), size, size), dtype=values.dtype)
    for k, (r, c) in enumerate(centers - half):
        out[k] = values[r:r + size, c:c + size]
    return out


def extract_patches(
    img: GrayImage,
    gt: Optional[np.ndarray] = None,
    count: int = 0,
    size: int = DEFAULT_PATCH_SIZE,
    rng_seed=0,
    fov: Optional[np.ndarray] = None,
    source_id: str = "",
) -> PatchSet:
    """Sample ``count`` distinct patches with uniformly random admissible centres.

    ``rng_seed`` may be an int, a ``SeedSequence`` or a ``numpy.random.Generator``.
    """
    if count < 0:
        raise SamplerError(f"count must be nonnegative, got {count}")
    values = img.values if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    centers = admissible_centers(values.shape, size, fov)
    if count > len(centers):
        raise SamplerError(f"{source_id or 'image'}: requested {count} patches but only {len(centers)} admissible centres")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    chosen = centers[rng.choice(len(centers), size=count, replace=False)] if count else centers[:0]
    labels = None
    if gt is not None:
        gt = np.asarray(gt, dtype=bool)
        if gt.shape != values.shape:
            raise ShapeError(f"ground truth {gt.shape} does not match image {values.shape}")
        labels = crop_patches(gt, chosen, size)
    return PatchSet(
        crop_patches(values.astype(np.float32), chosen, size),
        labels,
        chosen,
        np.full(len(chosen), source_id, dtype=object),
        size,
    )


@dataclass(frozen=True)
class PreprocessConfig:
    weights: Tuple[float, float, float] = DEFAULT_WEIGHTS
    clip_limit: float = DEFAULT_CLIP_LIMIT
    tile_grid: Tuple[int, int] = DEFAULT_TILE_GRID
    gamma: float = DEFAULT_GAMMA
    patch_size: int = DEFAULT_PATCH_SIZE
    restrict_to_fov: bool = True


def preprocess(img: FundusImage, config: PreprocessConfig = PreprocessConfig()) -> GrayImage:
    """Grayscale, then CLAHE, then gamma; output in [0, 1]."""
    gray = to_weighted_grayscale(img, config.weights)
    gray = clahe(gray, config.clip_limit, config.tile_grid)
    return gamma_adjust(gray, config.gamma)


class FundusPreprocessor(BaseEstimator, TransformerMixin):
    """Stateless scikit-learn transformer wrapping :func:`preprocess`.

    Accepts a single image (``FundusImage`` or H x W x 3 array) or a sequence of
    them; returns float arrays in [0, 1], or in [-1, 1] with
    ``output_range="signed"``.
    """

    def __init__(self, weights=DEFAULT_WEIGHTS, clip_limit=DEFAULT_CLIP_LIMIT, tile_grid=DEFAULT_TILE_GRID,
                 gamma=DEFAULT_GAMMA, output_range="unit"):
        self.weights = weights
        self.clip_limit = clip_limit
        self.tile_grid = tile_grid
        self.gamma = gamma
        self.output_range = output_range

    def fit(self, X, y=None):
        if self.output_range not in ("unit", "signed"):
            raise ConfigurationError(f"output_range must be 'unit' or 'signed', got {self.output_range!r}")
        self._config = PreprocessConfig(tuple(self.weights), self.clip_limit, tuple(self.tile_grid), self.gamma)
        return self

    def _one(self, img):
        if not isinstance(img, FundusImage):
            arr = np.asarray(img)
            img = FundusImage(arr, np.ones(arr.shape[:2], bool)) if arr.ndim == 3 else arr
        gray = preprocess(img, self._config) if isinstance(img, FundusImage) else to_weighted_grayscale(img)
        if self.output_range == "signed":
            gray = gray.rescaled(SIGNED_RANGE)
        return gray.values

    def transform(self, X):
        if not hasattr(self, "_config"):
            self.fit(X)
        if isinstance(X, FundusImage) or (isinstance(X, np.ndarray) and X.ndim == 3 and X.shape[-1] == 3):
            return self._one(X)
        out = [self._one(img) for img in X]
        if len({o.shape for o in out}) == 1:
            return np.stack(out)
        return out
