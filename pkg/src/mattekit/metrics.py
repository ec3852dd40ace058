"""Matting evaluation metrics: SAD, MSE, Grad, Conn over the unknown region.

Definitions follow the community-standard matting evaluation code: /1000
scaling for SAD/Grad/Conn, x1000 reporting for MSE, Gaussian-derivative
filters at sigma=1.4 for Grad, a 0.1-step threshold sweep with largest
4-connected components for Conn. Lower is better for all four.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .losses import DegenerateSampleWarning
from .synth import LABEL_UNKNOWN, Trimap

GRAD_SIGMA = 1.4
GRAD_KERNEL_EPS = 1e-2       # tail cutoff that fixes the kernel half-size
CONN_STEP = 0.1
CONN_SOFT_THRESHOLD = 0.15
PAD_MULTIPLE = 32

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class EvalResult:
    sad: float
    mse: float
    grad: float
    conn: float
    unknown_pixel_count: int

    CSV_FIELDS = ("sad", "mse", "grad", "conn", "unknown_pixels")

    def csv_row(self) -> list:
        return [self.sad, self.mse, self.grad, self.conn, self.unknown_pixel_count]


def _prepare(pred, gt, unknown_mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(unknown_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if mask.shape != pred.shape:
        raise ValueError(f"mask {mask.shape} does not match mattes {pred.shape}")
    return pred, gt, mask


def sad(pred, gt, unknown_mask) -> float:
    """Sum of absolute differences over unknown pixels, / 1000."""
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    return float(np.abs(pred - gt)[mask].sum() / 1000.0)


def mse(pred, gt, unknown_mask) -> float:
    """Mean squared error over unknown pixels, x 1000."""
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    count = int(mask.sum())
    if count == 0:
        warnings.warn("mse: empty unknown region, returning 0",
                      DegenerateSampleWarning, stacklevel=2)
        return 0.0
    return float(((pred - gt) ** 2)[mask].sum() / count * 1000.0)


def _gauss(x: float, sigma: float) -> float:
    return np.exp(-x * x / (2.0 * sigma * sigma)) / (sigma * np.sqrt(2.0 * np.pi))


def gaussian_derivative_kernel(sigma: float = GRAD_SIGMA) -> np.ndarray:
    """Horizontal-derivative filter: gauss(row) * dgauss(col), L2-normalized.

    The half-size comes from the tail cutoff eps: the kernel extends to where
    the 1-D Gaussian falls to eps, giving half-size 3 (7x7) at sigma 1.4.
    """
    halfsize = int(sigma * np.sqrt(-2.0 * np.log(np.sqrt(2.0 * np.pi) * sigma
                                                 * GRAD_KERNEL_EPS)))
    size = 2 * halfsize + 1
    hx = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            u, v = i - halfsize, j - halfsize
            hx[i, j] = _gauss(u, sigma) * (-v * _gauss(v, sigma) / sigma ** 2)
    return hx / np.sqrt(np.sum(hx ** 2))


def grad_error(pred, gt, unknown_mask) -> float:
    """Squared difference of Gaussian-derivative gradient magnitudes over
    unknown pixels, / 1000."""
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    hx = gaussian_derivative_kernel()
    if pred.shape[0] < hx.shape[0] or pred.shape[1] < hx.shape[1]:
        raise ValueError(
            f"image {pred.shape} smaller than the {hx.shape[0]}x{hx.shape[1]} "
            "gradient kernel")
    hy = hx.T

    def magnitude(x):
        gx = ndimage.convolve(x, hx, mode="nearest")
        gy = ndimage.convolve(x, hy, mode="nearest")
        return np.sqrt(gx ** 2 + gy ** 2)

    err = (magnitude(pred) - magnitude(gt)) ** 2
    return float(err[mask].sum() / 1000.0)


def conn_error(pred, gt, unknown_mask, step: float = CONN_STEP) -> float:
    """Connectivity error / 1000.

    Sweep thresholds t = step..1: binarize both mattes at t, intersect, keep
    the largest 4-connected component. l_map records, per pixel, the last
    threshold before the pixel first fell out of that component (1 if never).
    phi(x) = 1 - (x - l) where x - l >= 0.15, else 1; the error is the masked
    sum of |phi(pred) - phi(gt)|.
    """
    pred, gt, mask = _prepare(pred, gt, unknown_mask)
    if not 0.0 < step < 1.0:
        raise ValueError(f"step must be in (0, 1), got {step}")
    thresh_steps = np.arange(0.0, 1.0 + step, step)
    l_map = np.full(pred.shape, -1.0)
    for ii in range(1, thresh_steps.size):
        joint = (pred >= thresh_steps[ii]) & (gt >= thresh_steps[ii])
        if not joint.any():
            continue
        components, count = ndimage.label(joint, structure=FOUR_CONNECTED)
        # bincount argmax keeps the lowest label on ties, i.e. the component
        # whose seed comes first in row-major scan order
        sizes = np.bincount(components.ravel())
        sizes[0] = 0
        omega = components == sizes.argmax()
        dropped = (l_map == -1.0) & ~omega
        l_map[dropped] = thresh_steps[ii - 1]
    l_map[l_map == -1.0] = 1.0
    pred_d = pred - l_map
    gt_d = gt - l_map
    pred_phi = 1.0 - pred_d * (pred_d >= CONN_SOFT_THRESHOLD)
    gt_phi = 1.0 - gt_d * (gt_d >= CONN_SOFT_THRESHOLD)
    return float(np.abs(pred_phi - gt_phi)[mask].sum() / 1000.0)


# ---------------------------------------------------------------------------
# padding + full evaluation

def pad_to_multiple(array: np.ndarray, multiple: int = PAD_MULTIPLE) -> tuple[np.ndarray, tuple[int, int]]:
    """Edge-replicate pad the two leading spatial axes up to a multiple;
    returns (padded, original (H, W)) for later unpadding."""
    h, w = array.shape[:2]
    ph = (-h) % multiple
    pw = (-w) % multiple
    widths = [(0, ph), (0, pw)] + [(0, 0)] * (array.ndim - 2)
    return np.pad(array, widths, mode="edge"), (h, w)


def unpad(array: np.ndarray, original: tuple[int, int]) -> np.ndarray:
    h, w = original
    return array[:h, :w]


def evaluate(pred, gt, trimap, pad_to: int = PAD_MULTIPLE) -> EvalResult:
    """All four metrics with mask = unknown region of the trimap. Inputs run
    through the pad/unpad round trip used by model-facing code, and the
    metrics are computed on the restored original size."""
    labels = trimap.labels if isinstance(trimap, Trimap) else np.asarray(trimap)
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or labels.shape != pred.shape:
        raise ValueError(
            f"shapes differ: pred {pred.shape}, gt {gt.shape}, trimap {labels.shape}")
    padded_pred, size = pad_to_multiple(pred, pad_to)
    padded_gt, _ = pad_to_multiple(gt, pad_to)
    pred = unpad(padded_pred, size)
    gt = unpad(padded_gt, size)
    mask = labels == LABEL_UNKNOWN
    return EvalResult(
        sad=sad(pred, gt, mask),
        mse=mse(pred, gt, mask),
        grad=grad_error(pred, gt, mask),
        conn=conn_error(pred, gt, mask),
        unknown_pixel_count=int(mask.sum()),
    )
