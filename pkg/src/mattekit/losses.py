"""Training losses: unknown-masked L1, composition, Laplacian pyramid.

All three are means over the unknown region. For the composition and
pyramid terms the masking is realized upstream by the copy-rule merge
(known pixels of the prediction are overwritten with their trimap values),
so perturbing the raw prediction outside the unknown region changes nothing.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import NonFiniteError, Tensor
from .synth import CompositeSample, LABEL_UNKNOWN, SampleBatch

EPS = 1e-6

# Separable binomial blur taps; the 5x5 outer product sums to exactly 1.
BLUR_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class DegenerateSampleWarning(UserWarning):
    """A loss was asked to average over an empty unknown region."""


@dataclass
class LossWeights:
    l1: float = 1.0
    comp: float = 1.0
    lap: float = 1.0


@dataclass
class LossBreakdown:
    """Per-term loss report; total is the weighted sum the optimizer sees."""

    l1: float
    comp: float
    lap: float
    total: float
    degenerate: bool = False

    @classmethod
    def from_terms(cls, l1: float, comp: float, lap: float,
                   weights: LossWeights, degenerate: bool = False) -> "LossBreakdown":
        total = weights.l1 * l1 + weights.comp * comp + weights.lap * lap
        return cls(l1=l1, comp=comp, lap=lap, total=total, degenerate=degenerate)

    CSV_FIELDS = ("l1", "comp", "lap", "total")


def _as_plane(values, like: Tensor) -> Tensor:
    """Wrap an (H,W) / (N,H,W) / NCHW array as a constant NCHW plane."""
    arr = np.asarray(values)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    return engine.constant(arr, like=like)


def _as_image(values, like: Tensor) -> Tensor:
    """Wrap an (H,W,3) / (N,H,W,3) array as a constant (N,3,H,W) tensor."""
    arr = np.asarray(values)
    if arr.ndim == 3 and arr.shape[2] == 3:
        arr = arr.transpose(2, 0, 1)[None]
    elif arr.ndim == 4 and arr.shape[3] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    return engine.constant(np.ascontiguousarray(arr), like=like)


def _labels_array(trimap) -> np.ndarray:
    """Label plane(s) as (N,H,W), from a Trimap or a raw label array."""
    labels = trimap.labels if hasattr(trimap, "labels") else np.asarray(trimap)
    return labels[None] if labels.ndim == 2 else labels


def _check_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("unknown mask must be binary")
    return mask.astype(np.float64)


def _warn_degenerate(name: str) -> None:
    warnings.warn(f"{name}: empty unknown region, returning zero loss",
                  DegenerateSampleWarning, stacklevel=3)


def masked_l1(pred_alpha: Tensor, gt_alpha, unknown_mask) -> Tensor:
    """Mean absolute alpha error over unknown pixels."""
    mask = _check_mask(unknown_mask)
    if pred_alpha.values.size != mask.size:
        raise ValueError(
            f"prediction {pred_alpha.shape} and mask {mask.shape} sizes differ")
    count = mask.sum()
    if count == 0:
        _warn_degenerate("masked_l1")
        return engine.constant(np.zeros(()), like=pred_alpha)
    diff = engine.sub(pred_alpha, _as_plane(gt_alpha, pred_alpha))
    masked = engine.mul(engine.absolute(diff), _as_plane(mask, pred_alpha))
    return engine.affine(engine.sum_all(masked), 1.0 / (count + EPS))


def composition_loss(pred_alpha: Tensor, fg, bg, fused, unknown_mask) -> Tensor:
    """Mean absolute error, over unknown pixels and 3 channels, between the
    image re-composited from the predicted alpha and the original fusion."""
    mask = _check_mask(unknown_mask)
    count = mask.sum()
    if count == 0:
        _warn_degenerate("composition_loss")
        return engine.constant(np.zeros(()), like=pred_alpha)
    pred3 = engine.repeat_channels(pred_alpha, 3)
    f = _as_image(fg, pred_alpha)
    b = _as_image(bg, pred_alpha)
    i = _as_image(fused, pred_alpha)
    recomposed = engine.add(engine.mul(pred3, f),
                            engine.mul(engine.affine(pred3, -1.0, 1.0), b))
    diff = engine.absolute(engine.sub(recomposed, i))
    mask3 = engine.repeat_channels(_as_plane(mask, pred_alpha), 3)
    total = engine.sum_all(engine.mul(diff, mask3))
    return engine.affine(total, 1.0 / (3.0 * count + EPS))


def _blur_kernel(like: Tensor) -> Tensor:
    k = np.outer(BLUR_TAPS, BLUR_TAPS)[None, None]
    return engine.constant(k, like=like)


def _downsample(x: Tensor, kernel: Tensor) -> Tensor:
    # Blur + take every second pixel, fused as a stride-2 convolution over
    # the edge-replicated input (constant regions stay exactly constant).
    return engine.conv2d(engine.replication_pad2d(x, 2), kernel, None,
                         stride=2, padding=0)


def laplacian_pyramid(x: Tensor, levels: int) -> list[Tensor]:
    """Band decomposition: levels-1 difference bands plus the coarsest
    Gaussian; recursive recombination reproduces the input."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    if x.values.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"laplacian_pyramid expects an N1HW tensor, got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    need = 2 ** (levels - 1)
    if h < need or w < need:
        raise ValueError(
            f"{levels} levels need height and width >= {need}, got {h}x{w}")
    kernel = _blur_kernel(x)
    bands = []
    current = x
    for _ in range(levels - 1):
        coarser = _downsample(current, kernel)
        up = engine.crop2d(engine.upsample2x(coarser),
                           current.shape[2], current.shape[3])
        bands.append(engine.sub(current, up))
        current = coarser
    bands.append(current)
    return bands


def reconstruct_from_pyramid(bands: list[Tensor]) -> Tensor:
    """Inverse of laplacian_pyramid: L0 + up(L1 + up(L2 + ...))."""
    current = bands[-1]
    for band in reversed(bands[:-1]):
        up = engine.crop2d(engine.upsample2x(current),
                           band.shape[2], band.shape[3])
        current = engine.add(band, up)
    return current


def laplacian_loss(pred_alpha: Tensor, gt_alpha, trimap=None, levels: int = 5) -> Tensor:
    """Sum over pyramid levels i=1..levels of 2^(i-1) * mean|band_i(pred) -
    band_i(gt)|. Expects a copy-rule-merged prediction; when a trimap is
    given, that precondition is checked (binarization thresholds allow known
    pixels to sit up to 0.001 from their copied values)."""
    gt = _as_plane(gt_alpha, pred_alpha)
    if trimap is not None:
        known = _labels_array(trimap) != LABEL_UNKNOWN
        known = np.broadcast_to(known, pred_alpha.values[:, 0].shape)
        drift = np.abs(pred_alpha.values[:, 0] - gt.values[:, 0])[known]
        if drift.size and drift.max() > 0.0015:
            raise ValueError(
                "laplacian_loss expects a prediction merged with the copy rule; "
                f"known-region deviation {drift.max():.4f} exceeds 0.0015")
    pred_bands = laplacian_pyramid(pred_alpha, levels)
    gt_bands = laplacian_pyramid(gt, levels)
    total = None
    for i, (pb, gb) in enumerate(zip(pred_bands, gt_bands)):
        mean = engine.affine(engine.sum_all(engine.absolute(engine.sub(pb, gb))),
                             float(2 ** i) / pb.values.size)
        total = mean if total is None else engine.add(total, mean)
    return total


def unknown_mask_of(sample) -> np.ndarray:
    """(N,1,H,W) float32 unknown-pixel mask of a sample or sample batch."""
    labels = _labels_array(sample.trimap)
    return (labels == LABEL_UNKNOWN).astype(np.float32)[:, None]


def total_loss(pred_alpha: Tensor, sample: CompositeSample | SampleBatch,
               weights: LossWeights | None = None,
               levels: int = 5) -> tuple[Tensor, LossBreakdown]:
    """Weighted sum of the three losses against a pretext sample (or a
    stacked batch of them); the prediction must already be copy-rule
    merged."""
    weights = weights or LossWeights()
    mask = unknown_mask_of(sample)
    degenerate = mask.sum() == 0
    l1 = masked_l1(pred_alpha, sample.alpha, mask)
    comp = composition_loss(pred_alpha, sample.foreground, sample.background,
                            sample.fused, mask)
    lap = laplacian_loss(pred_alpha, sample.alpha, sample.trimap, levels=levels)
    total = engine.add(
        engine.add(engine.affine(l1, weights.l1), engine.affine(comp, weights.comp)),
        engine.affine(lap, weights.lap))
    if not np.isfinite(total.values).all():
        raise NonFiniteError("total loss is non-finite")
    breakdown = LossBreakdown.from_terms(l1.item(), comp.item(), lap.item(),
                                         weights, degenerate=degenerate)
    return total, breakdown
