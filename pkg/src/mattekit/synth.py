"""Deterministic, seedable pretext-sample synthesis.

Generates trimaps (grid-cell and nested-block strategies), pseudo alpha
mattes, alpha-composited images and augmentations from unlabeled sources,
plus fine-tuning trimaps derived from ground-truth alphas. Every function is
a pure function of (inputs, seed): identical arguments give bit-identical
results across processes, so parallel sample producers need no coordination.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    BG_VALUE_RANGE,
    FG_VALUE_RANGE,
    TEXTURE_KINDS,
    decode_image,
    encode_image,
    gray_to_trimap,
    procedural_texture,
    shade_to_range,
    to_uint8,
    trimap_to_gray,
)

_MASK64 = (1 << 64) - 1

LABEL_BACKGROUND, LABEL_UNKNOWN, LABEL_FOREGROUND = 0, 1, 2


def derive_seed(run_seed: int, index: int) -> int:
    """Stateless per-sample seed: a 64-bit avalanche of (run_seed, index)."""
    z = ((run_seed & _MASK64) + 0x9E3779B97F4A7C15 * ((index & _MASK64) + 1)) & _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class TrimapRatios:
    """Fractions of cells labeled unknown / foreground / background.

    The background share is recomputed as 1 - unknown - foreground after
    validation so the three stored floats sum to exactly 1.0.
    """

    theta_unknown: float
    beta_foreground: float
    gamma_background: float

    def __post_init__(self):
        total = self.theta_unknown + self.beta_foreground + self.gamma_background
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"trimap ratios must sum to 1, got {total!r}")
        if min(self.theta_unknown, self.beta_foreground, self.gamma_background) < -1e-12:
            raise ValueError("trimap ratios must be non-negative")
        gamma = 1.0 - self.theta_unknown - self.beta_foreground
        object.__setattr__(self, "gamma_background", max(0.0, gamma))

    @classmethod
    def parse(cls, text: str) -> "TrimapRatios":
        """Parse 'u,f,b' as unknown, foreground, background fractions."""
        parts = text.split(",")
        if len(parts) != 3:
            raise ValueError(f"expected 'u,f,b', got {text!r}")
        u, f, b = (float(p) for p in parts)
        return cls(u, f, b)


DEFAULT_RATIOS = TrimapRatios(0.75, 0.125, 0.125)


@dataclass
class Trimap:
    """H×W label map over {0=background, 1=unknown, 2=foreground}."""

    labels: np.ndarray
    grid_size: int = 1

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ValueError(f"trimap labels must be H×W, got {self.labels.shape}")
        if not np.isin(self.labels, (0, 1, 2)).all():
            raise ValueError("trimap labels must be in {0, 1, 2}")

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    def one_hot(self) -> np.ndarray:
        """(3, H, W) float32 view, channel order (background, unknown, fg)."""
        return (self.labels[None] == np.arange(3, dtype=np.uint8)[:, None, None]) \
            .astype(np.float32)

    def counts(self) -> tuple[int, int, int]:
        """Pixel counts as (background, unknown, foreground)."""
        return tuple(int((self.labels == k).sum()) for k in (0, 1, 2))


@dataclass
class CompositeSample:
    """One pretext training sample; fused = alpha*fg + (1-alpha)*bg."""

    fused: np.ndarray        # H×W×3 float32
    foreground: np.ndarray   # H×W×3 float32
    background: np.ndarray   # H×W×3 float32
    alpha: np.ndarray        # H×W float32
    trimap: Trimap
    seed: int


@dataclass(frozen=True)
class SampleBatch:
    """Samples stacked along a leading batch axis for one training step.

    Field names mirror CompositeSample so losses accept either; here
    ``trimap`` holds the raw label array rather than a Trimap wrapper.
    """

    fused: np.ndarray        # N×H×W×3 float32
    foreground: np.ndarray   # N×H×W×3 float32
    background: np.ndarray   # N×H×W×3 float32
    alpha: np.ndarray        # N×H×W float32
    trimap: np.ndarray       # N×H×W uint8 labels
    seeds: tuple[int, ...]

    @classmethod
    def from_samples(cls, samples) -> "SampleBatch":
        samples = list(samples)
        if not samples:
            raise ValueError("cannot build a batch from zero samples")
        return cls(
            fused=np.stack([s.fused for s in samples]),
            foreground=np.stack([s.foreground for s in samples]),
            background=np.stack([s.background for s in samples]),
            alpha=np.stack([s.alpha for s in samples]),
            trimap=np.stack([s.trimap.labels for s in samples]),
            seeds=tuple(s.seed for s in samples),
        )

    def one_hot(self) -> np.ndarray:
        """(N, 3, H, W) float32, channel order (background, unknown, fg)."""
        return (self.trimap[:, None] == np.arange(3, dtype=np.uint8)[None, :, None, None]) \
            .astype(np.float32)

    def images_nchw(self) -> np.ndarray:
        """(N, 3, H, W) float32 view of the fused images."""
        return np.ascontiguousarray(self.fused.transpose(0, 3, 1, 2))


@dataclass
class AugmentConfig:
    rotation_degrees: float = 30.0
    scale_range: tuple[float, float] = (0.8, 1.25)
    shear_degrees: float = 10.0
    flip_prob: float = 0.5
    hue_shift: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"scale range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError(f"flip probability must be in [0,1], got {self.flip_prob}")
        if min(self.rotation_degrees, self.shear_degrees, self.hue_shift) < 0:
            raise ValueError("augmentation ranges must be non-negative")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(rotation_degrees=0.0, scale_range=(1.0, 1.0), shear_degrees=0.0,
                   flip_prob=0.0, hue_shift=0.0)


@dataclass
class PretextConfig:
    """Everything that determines a pretext sample besides the sources+seed."""

    size: int = 224
    grid: int = 7
    ratios: TrimapRatios = field(default_factory=lambda: DEFAULT_RATIOS)
    strategy: str = "pixel"          # "pixel" (grid cells) or "block" (nested boxes)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.strategy not in ("pixel", "block"):
            raise ValueError(f"strategy must be 'pixel' or 'block', got {self.strategy!r}")


# ---------------------------------------------------------------------------
# trimap generation

def generate_trimap_grid(height: int, width: int, grid: int,
                         ratios: TrimapRatios, rng) -> Trimap:
    """Partition the image into grid×grid cells and assign exact label quotas
    by a seeded shuffle."""
    if grid < 1:
        raise ValueError(f"grid size must be >= 1, got {grid}")
    if height % grid or width % grid:
        h2 = max(grid, round(height / grid) * grid)
        w2 = max(grid, round(width / grid) * grid)
        raise ValueError(
            f"image size {height}x{width} not divisible by grid {grid}; "
            f"nearest valid size is {h2}x{w2}")
    rng = _as_rng(rng)
    gh, gw = height // grid, width // grid
    n = gh * gw
    n_u = int(np.floor(ratios.theta_unknown * n + 0.5))
    n_f = min(int(np.floor(ratios.beta_foreground * n + 0.5)), n - n_u)
    n_b = n - n_u - n_f
    cells = np.concatenate([
        np.full(n_u, LABEL_UNKNOWN, dtype=np.uint8),
        np.full(n_f, LABEL_FOREGROUND, dtype=np.uint8),
        np.full(n_b, LABEL_BACKGROUND, dtype=np.uint8),
    ])
    rng.shuffle(cells)
    labels = np.repeat(np.repeat(cells.reshape(gh, gw), grid, axis=0), grid, axis=1)
    return Trimap(labels, grid_size=grid)


def block_trimap_from_boxes(height: int, width: int,
                            outer: tuple[int, int, int, int],
                            inner: tuple[int, int, int, int]) -> Trimap:
    """Nested-rectangle trimap from explicit (top, left, h, w) boxes:
    inside inner = foreground, inner..outer = unknown, outside = background."""
    ot, ol, oh, ow = outer
    it, il, ih, iw = inner
    if not (0 <= ot and 0 <= ol and ot + oh <= height and ol + ow <= width):
        raise ValueError(f"outer box {outer} exceeds image {height}x{width}")
    if not (ot <= it and ol <= il and it + ih <= ot + oh and il + iw <= ol + ow):
        raise ValueError(f"inner box {inner} not contained in outer box {outer}")
    if oh < 1 or ow < 1 or ih < 1 or iw < 1:
        raise ValueError("boxes must be at least 1x1")
    labels = np.zeros((height, width), dtype=np.uint8)
    labels[ot:ot + oh, ol:ol + ow] = LABEL_UNKNOWN
    labels[it:it + ih, il:il + iw] = LABEL_FOREGROUND
    return Trimap(labels, grid_size=1)


def generate_trimap_block(height: int, width: int, rng) -> Trimap:
    """Sample nested boxes: the outer fusion box covers >= 25% of the image,
    the inner foreground box >= 10% of the outer box."""
    if height < 16 or width < 16:
        raise ValueError(f"block trimaps need height, width >= 16, got {height}x{width}")
    rng = _as_rng(rng)
    # Sides >= half the image guarantee the 25% area bound; inner sides
    # >= 0.32 of the outer sides guarantee the 10% bound (0.32^2 > 0.1).
    bh = int(rng.integers((height + 1) // 2, height + 1))
    bw = int(rng.integers((width + 1) // 2, width + 1))
    top = int(rng.integers(0, height - bh + 1))
    left = int(rng.integers(0, width - bw + 1))
    fh = int(rng.integers(max(1, -(-bh * 32 // 100)), bh + 1))
    fw = int(rng.integers(max(1, -(-bw * 32 // 100)), bw + 1))
    ftop = int(rng.integers(top, top + bh - fh + 1))
    fleft = int(rng.integers(left, left + bw - fw + 1))
    return block_trimap_from_boxes(height, width, (top, left, bh, bw),
                                   (ftop, fleft, fh, fw))


# ---------------------------------------------------------------------------
# pseudo alpha + compositing

def generate_pseudo_alpha(trimap: Trimap, rng) -> np.ndarray:
    """alpha = 1 on foreground, 0 on background; unknown pixels draw an
    independent uniform 8-bit level k and store k/255."""
    rng = _as_rng(rng)
    alpha = np.zeros(trimap.shape, dtype=np.float32)
    alpha[trimap.labels == LABEL_FOREGROUND] = 1.0
    unknown = trimap.labels == LABEL_UNKNOWN
    draws = rng.integers(0, 256, size=int(unknown.sum()))
    alpha[unknown] = draws.astype(np.float32) / np.float32(255.0)
    return alpha


def composite(foreground: np.ndarray, background: np.ndarray,
              alpha: np.ndarray) -> np.ndarray:
    """Per-pixel linear fusion: fused = alpha*fg + (1-alpha)*bg."""
    foreground = np.asarray(foreground, dtype=np.float32)
    background = np.asarray(background, dtype=np.float32)
    alpha = np.asarray(alpha, dtype=np.float32)
    if foreground.ndim != 3 or foreground.shape[2] != 3:
        raise ValueError(f"foreground must be H×W×3, got {foreground.shape}")
    if foreground.shape != background.shape:
        raise ValueError(
            f"foreground {foreground.shape} and background {background.shape} differ")
    if alpha.shape != foreground.shape[:2]:
        raise ValueError(f"alpha {alpha.shape} does not match image {foreground.shape[:2]}")
    if alpha.min() < 0.0 or alpha.max() > 1.0:
        raise ValueError("alpha values must lie in [0, 1]")
    a = alpha[:, :, None]
    return a * foreground + (np.float32(1.0) - a) * background


# ---------------------------------------------------------------------------
# augmentation

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    v = maxc
    delta = maxc - minc
    safe = np.where(delta == 0, 1.0, delta)
    s = np.where(maxc == 0, 0.0, delta / np.where(maxc == 0, 1.0, maxc))
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.select([maxc == r, maxc == g], [bc - gc, 2.0 + rc - bc], default=4.0 + gc - rc)
    h = np.where(delta == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def shift_hue(image: np.ndarray, amount: float) -> np.ndarray:
    """Rotate hue by ``amount`` (fraction of the hue circle) in HSV space."""
    hsv = rgb_to_hsv(image)
    hsv[..., 0] = (hsv[..., 0] + amount) % 1.0
    return hsv_to_rgb(hsv).astype(np.float32)


def _bilinear_sample(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample image at float coords with edge clamping."""
    h, w = image.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = image[y0, x0] * (1.0 - wx) + image[y0, x1] * wx
    bot = image[y1, x0] * (1.0 - wx) + image[y1, x1] * wx
    return top * (1.0 - wy) + bot * wy


def augment(image: np.ndarray, config: AugmentConfig, rng) -> np.ndarray:
    """One sampled affine map (rotate/scale/shear, bilinear, edge clamp),
    optional horizontal flip, then a hue rotation. Shape-preserving."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"augment expects an H×W×3 image, got {image.shape}")
    rng = _as_rng(rng)
    angle = np.deg2rad(rng.uniform(-config.rotation_degrees, config.rotation_degrees))
    scale = rng.uniform(config.scale_range[0], config.scale_range[1])
    shear = np.deg2rad(rng.uniform(-config.shear_degrees, config.shear_degrees))
    flip = rng.uniform(0.0, 1.0) < config.flip_prob
    hue = rng.uniform(-config.hue_shift, config.hue_shift)

    h, w = image.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rot = np.array([[np.cos(angle), -np.sin(angle)],
                    [np.sin(angle), np.cos(angle)]])
    shr = np.array([[1.0, np.tan(shear)], [0.0, 1.0]])
    fwd = rot @ shr * scale
    inv = np.linalg.inv(fwd)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yc, xc = yy - cy, xx - cx
    ys = inv[0, 0] * yc + inv[0, 1] * xc + cy
    xs = inv[1, 0] * yc + inv[1, 1] * xc + cx
    out = _bilinear_sample(image.astype(np.float64), ys, xs)
    if flip:
        out = out[:, ::-1]
    if hue != 0.0:
        out = shift_hue(np.clip(out, 0.0, 1.0), hue)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# full pretext sample

def _random_crop(image: np.ndarray, size: int, rng: np.random.Generator, tag: str) -> np.ndarray:
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"{tag} source {h}x{w} smaller than crop size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return np.ascontiguousarray(image[top:top + size, left:left + size])


def make_pretrain_sample(fg_source: np.ndarray, bg_source: np.ndarray,
                         config: PretextConfig, seed: int) -> CompositeSample:
    """Augment both sources independently, crop, generate a trimap per the
    configured strategy, draw pseudo alpha, composite."""
    rng = np.random.default_rng(seed & _MASK64)
    fg = _random_crop(augment(fg_source, config.augment, rng), config.size, rng, "foreground")
    bg = _random_crop(augment(bg_source, config.augment, rng), config.size, rng, "background")
    if config.strategy == "pixel":
        trimap = generate_trimap_grid(config.size, config.size, config.grid,
                                      config.ratios, rng)
    else:
        trimap = generate_trimap_block(config.size, config.size, rng)
    alpha = generate_pseudo_alpha(trimap, rng)
    fused = composite(fg, bg, alpha)
    return CompositeSample(fused=fused, foreground=fg, background=bg,
                           alpha=alpha, trimap=trimap, seed=seed)


def procedural_pretext_sample(seed: int, config: PretextConfig) -> CompositeSample:
    """Pretext sample whose fg/bg sources are procedural textures.

    A pure function of (seed, config). Sources are drawn oversized (a
    quarter-size margin, at least 8 px) from a seed stream separate from the
    augmentation stream, so crops have room to move and the two stages stay
    uncorrelated. Foreground sources are shaded bright and background sources
    dark (see data.shade_to_range) so the two layers are statistically
    separable.
    """
    src_rng = np.random.default_rng([seed & _MASK64, 0x535243])
    src_size = config.size + max(8, config.size // 4)
    fg_kind = TEXTURE_KINDS[int(src_rng.integers(0, len(TEXTURE_KINDS)))]
    bg_kind = TEXTURE_KINDS[int(src_rng.integers(0, len(TEXTURE_KINDS)))]
    fg = shade_to_range(procedural_texture(fg_kind, src_size, src_rng), FG_VALUE_RANGE)
    bg = shade_to_range(procedural_texture(bg_kind, src_size, src_rng), BG_VALUE_RANGE)
    return make_pretrain_sample(fg, bg, config, seed)


def validate_sample(sample: CompositeSample) -> None:
    """Raise if any CompositeSample invariant is violated."""
    recomputed = composite(sample.foreground, sample.background, sample.alpha)
    if not np.array_equal(recomputed, sample.fused):
        raise ValueError("fused image does not equal alpha*fg + (1-alpha)*bg bit-exactly")
    labels = sample.trimap.labels
    if not np.all(sample.alpha[labels == LABEL_FOREGROUND] == 1.0):
        raise ValueError("alpha must be exactly 1 on foreground trimap pixels")
    if not np.all(sample.alpha[labels == LABEL_BACKGROUND] == 0.0):
        raise ValueError("alpha must be exactly 0 on background trimap pixels")
    scaled = sample.alpha[labels == LABEL_UNKNOWN].astype(np.float64) * 255.0
    if not np.allclose(scaled, np.round(scaled), atol=1e-3):
        raise ValueError("unknown-region alpha must be an 8-bit level / 255")
    if np.round(scaled).min(initial=0) < 0 or np.round(scaled).max(initial=0) > 255:
        raise ValueError("unknown-region alpha levels must lie in [0, 255]")
    onehot = sample.trimap.one_hot()
    if not np.array_equal(onehot.sum(axis=0), np.ones(sample.trimap.shape, np.float32)):
        raise ValueError("one-hot trimap must have exactly one 1 per pixel")


# ---------------------------------------------------------------------------
# fine-tuning trimaps

def binary_erode(mask: np.ndarray, radius: int) -> np.ndarray:
    """Erosion with a (2r+1)² square structuring element; pixels beyond the
    border count as empty, so true regions shrink at image edges."""
    if radius < 0:
        raise ValueError("erosion radius must be non-negative")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    h, w = mask.shape
    padded = np.pad(mask, ((radius, radius), (0, 0)), constant_values=False)
    rows = np.logical_and.reduce([padded[i:i + h] for i in range(2 * radius + 1)])
    padded = np.pad(rows, ((0, 0), (radius, radius)), constant_values=False)
    return np.logical_and.reduce([padded[:, i:i + w] for i in range(2 * radius + 1)])


def make_finetune_trimap(gt_alpha: np.ndarray, rng) -> Trimap:
    """Trimap from a ground-truth alpha: erode the near-1 region to get
    foreground, erode the near-0 region to get background, rest unknown."""
    gt_alpha = np.asarray(gt_alpha)
    if gt_alpha.min() < 0.0 or gt_alpha.max() > 1.0:
        raise ValueError("ground-truth alpha must lie in [0, 1]")
    rng = _as_rng(rng)
    r_fg = int(rng.integers(1, 16))
    r_bg = int(rng.integers(1, 16))
    labels = np.full(gt_alpha.shape, LABEL_UNKNOWN, dtype=np.uint8)
    labels[binary_erode(gt_alpha >= 0.999, r_fg)] = LABEL_FOREGROUND
    labels[binary_erode(gt_alpha <= 0.001, r_bg)] = LABEL_BACKGROUND
    return Trimap(labels, grid_size=1)


# ---------------------------------------------------------------------------
# sample persistence (8-bit dump; see data module for codecs)

def dump_sample(sample: CompositeSample, out_dir, config: PretextConfig | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    encode_image(sample.fused, out_dir / "fused.png")
    encode_image(sample.foreground, out_dir / "fg.png")
    encode_image(sample.background, out_dir / "bg.png")
    encode_image(to_uint8(sample.alpha), out_dir / "alpha.png")
    encode_image(trimap_to_gray(sample.trimap.labels), out_dir / "trimap.png")
    meta = {"seed": int(sample.seed)}
    if config is not None:
        meta["config"] = asdict(config)
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_sample(sample_dir) -> CompositeSample:
    """Load a dumped sample; arrays carry the 8-bit quantization of the dump."""
    sample_dir = Path(sample_dir)
    meta = json.loads((sample_dir / "meta.json").read_text())
    grid = int(meta.get("config", {}).get("grid", 1))
    strategy = meta.get("config", {}).get("strategy", "block")
    labels = gray_to_trimap(to_uint8(decode_image(sample_dir / "trimap.png").pixels[:, :, 0]))
    return CompositeSample(
        fused=decode_image(sample_dir / "fused.png").pixels,
        foreground=decode_image(sample_dir / "fg.png").pixels,
        background=decode_image(sample_dir / "bg.png").pixels,
        alpha=decode_image(sample_dir / "alpha.png").pixels[:, :, 0],
        trimap=Trimap(labels, grid_size=grid if strategy == "pixel" else 1),
        seed=int(meta["seed"]),
    )


def sample_panel(sample: CompositeSample) -> np.ndarray:
    """Side-by-side inspection image: fused | trimap | alpha | foreground."""
    tri = sample.trimap.labels.astype(np.float32) / 2.0
    panels = [sample.fused,
              np.repeat(tri[:, :, None], 3, axis=2),
              np.repeat(sample.alpha[:, :, None], 3, axis=2),
              sample.foreground]
    return np.concatenate(panels, axis=1)
