"""Residual maps, 3-D postprocessing, threshold fitting and segmentation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ContractError, DimensionError, ParameterError

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass
class PipelineConfig:
    percentile: float = 98.0
    median_size: int = 5
    erosion_radius: int = 1
    min_component: int = 6
    connectivity: int = 6

    def validate(self) -> None:
        if not 0.0 < self.percentile <= 100.0:
            raise ParameterError(f"percentile must be in (0, 100], got {self.percentile}")
        if self.median_size < 1 or self.median_size % 2 == 0:
            raise ParameterError(f"median size must be a positive odd integer, got {self.median_size}")
        if self.erosion_radius < 0:
            raise ParameterError(f"erosion radius must be >= 0, got {self.erosion_radius}")
        if self.min_component < 1:
            raise ParameterError(f"min_component must be >= 1, got {self.min_component}")
        if self.connectivity not in _CONNECTIVITY_RANK:
            raise ParameterError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")


@dataclass
class Threshold:
    value: float
    percentile: float
    source: str = ""
    n_samples: int = 0


@dataclass
class SegmentationResult:
    mask: np.ndarray
    threshold: Threshold
    residual: np.ndarray
    seconds: float = 0.0
    timings: dict = field(default_factory=dict)


def _arr(v) -> np.ndarray:
    """Unwrap a Volume/Tensor; arrays pass through."""
    return v if isinstance(v, np.ndarray) else np.asarray(getattr(v, "data", v))


def residual(x, x_hat) -> np.ndarray:
    """Voxelwise |x - x_hat|."""
    x, x_hat = _arr(x), _arr(x_hat)
    if x.shape != x_hat.shape:
        raise DimensionError(f"residual: {x.shape} vs {x_hat.shape}")
    return np.abs(x.astype(np.float32) - x_hat.astype(np.float32))


def median_filter_3d(r, size: int = 5) -> np.ndarray:
    """Median over a size^3 neighbourhood, borders by edge replication."""
    if size < 1 or size % 2 == 0:
        raise ParameterError(f"median filter size must be odd, got {size}")
    return ndimage.median_filter(_arr(r), size=size, mode="nearest")


def erode_mask(mask, radius: int = 1) -> np.ndarray:
    """Binary erosion with a (2r+1)^3 box.

    Voxels outside the grid count as edge-replicated, so the slab's first and
    last slices are not eroded just for touching the volume boundary.
    """
    if radius < 0:
        raise ParameterError(f"erosion radius must be >= 0, got {radius}")
    m = _arr(mask).astype(bool)
    if radius == 0:
        return m.copy()
    return ndimage.minimum_filter(m, size=2 * radius + 1, mode="nearest")


def remove_small_components(mask, min_voxels: int = 6, connectivity: int = 6) -> np.ndarray:
    """Drop connected components with fewer than ``min_voxels`` voxels."""
    if min_voxels < 1:
        raise ParameterError(f"min_voxels must be >= 1, got {min_voxels}")
    if connectivity not in _CONNECTIVITY_RANK:
        raise ParameterError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    m = _arr(mask).astype(bool)
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    labels, n = ndimage.label(m, structure=structure)
    if n == 0:
        return m
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[labels]


def nearest_rank_index(n: int, percentile: float) -> int:
    """1-based index ceil(p/100 * n), clamped to [1, n]."""
    return min(n, max(1, math.ceil(Fraction(percentile) * n / 100)))


def fit_threshold(training_residuals: Iterable, percentile: float = 98.0, source: str = "") -> Threshold:
    """Nearest-rank percentile over all values of ``training_residuals``.

    Accepts a flat array or an iterable of arrays / scalars.
    """
    if not 0.0 < percentile <= 100.0:
        raise ParameterError(f"percentile must be in (0, 100], got {percentile}")
    if isinstance(training_residuals, np.ndarray):
        values = training_residuals.ravel()
    else:
        chunks = [np.asarray(c, dtype=np.float32).ravel() for c in training_residuals]
        values = np.concatenate(chunks) if chunks else np.empty(0, np.float32)
    if values.size == 0:
        raise ContractError("fit_threshold: no residual values")
    k = nearest_rank_index(values.size, percentile) - 1
    value = float(np.partition(values, k)[k])
    return Threshold(value, float(percentile), source, int(values.size))


def masked_training_residuals(x, x_hat, brain_mask, erosion_radius: int = 1) -> np.ndarray:
    """Raw residuals inside the eroded brain mask, as used for threshold fitting."""
    return residual(x, x_hat)[erode_mask(brain_mask, erosion_radius)]


def segment(x, x_hat, brain_mask, thr: Threshold, cfg: PipelineConfig | None = None) -> SegmentationResult:
    """residual -> median -> eroded-mask product -> threshold (strict) -> component filter."""
    cfg = cfg or PipelineConfig()
    cfg.validate()
    bm = _arr(brain_mask)
    if bm.shape != _arr(x).shape:
        raise DimensionError(f"segment: brain mask {bm.shape} vs volume {_arr(x).shape}")
    t0 = time.perf_counter()
    r = median_filter_3d(residual(x, x_hat), cfg.median_size)
    r = r * erode_mask(bm, cfg.erosion_radius)
    mask = remove_small_components(r > thr.value, cfg.min_component, cfg.connectivity)
    return SegmentationResult(mask.astype(np.uint8), thr, r.astype(np.float32),
                              time.perf_counter() - t0)


def segment_volume(params, image, brain_mask, thr: Threshold,
                   cfg: PipelineConfig | None = None) -> SegmentationResult:
    """Reconstruct every slice with ``params`` and segment; timing covers both."""
    from .models import reconstruct

    img = _arr(image)
    t0 = time.perf_counter()
    x_hat = reconstruct(params, img[:, None])[:, 0]
    t1 = time.perf_counter()
    res = segment(img, x_hat, brain_mask, thr, cfg)
    total = time.perf_counter() - t0
    res.seconds = total
    res.timings = {"reconstruct": t1 - t0, "postprocess": res.seconds - (t1 - t0),
                   "per_sample": total / img.shape[0], "x_hat": x_hat}
    return res
