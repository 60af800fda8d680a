"""Training-tuple synthesis: free-form stroke masks, soft dilation and alpha blending.

A tuple is ``(I, O, M, N, M_soft)`` where the degraded image is
``I = O * (1 - M_soft) + N * M_soft`` and ``M`` is the binary stroke mask that
``M_soft`` was dilated from.  Images are ``(h, w, c)`` float32 arrays in
``[-1, 1]``; masks are ``(h, w, 1)`` float32 arrays in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence, Union

import cv2
import numpy as np
from PIL import Image

from .errors import ConfigError

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence, None]

REFERENCE_SIZE = 256


@dataclass(frozen=True)
class StrokeSpec:
    """Random-walk brush stroke parameters.

    All integer/real ranges are inclusive ``(low, high)`` pairs. Lengths and
    widths are in pixels; defaults are tuned for 256x256 images (see
    :meth:`for_size`) so that the mean damaged/clean ratio sits near 0.56.
    """

    num_strokes_range: tuple[int, int] = (4, 5)
    vertices_range: tuple[int, int] = (4, 10)
    brush_width_range: tuple[float, float] = (16.0, 42.0)
    turn_angle_range: tuple[float, float] = (0.0, 2 * math.pi / 5)
    max_stroke_length: float = 100.0

    def validate(self) -> None:
        for name in ("num_strokes_range", "vertices_range", "brush_width_range", "turn_angle_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} is empty: {lo} > {hi}")
        if self.num_strokes_range[0] < 0:
            raise ConfigError("num_strokes_range must be non-negative")
        if self.vertices_range[0] < 1:
            raise ConfigError("each stroke needs at least one vertex")
        if self.brush_width_range[0] < 1:
            raise ConfigError("brush width must be at least 1 px")
        if self.max_stroke_length <= 0:
            raise ConfigError("max_stroke_length must be positive")

    def for_size(self, h: int, w: int) -> "StrokeSpec":
        """Rescale pixel quantities from the 256px reference to an ``h x w`` canvas."""
        s = min(h, w) / REFERENCE_SIZE
        lo, hi = self.brush_width_range
        return replace(
            self,
            brush_width_range=(max(1.0, lo * s), max(1.0, hi * s)),
            max_stroke_length=self.max_stroke_length * s,
        )


class TrainingTuple(NamedTuple):
    degraded: np.ndarray
    truth: np.ndarray
    mask: np.ndarray
    noise: np.ndarray
    soft_mask: np.ndarray


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_seed(global_seed: int, index: int) -> int:
    """Counter-based per-sample seed, independent of worker scheduling."""
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1, np.uint64)[0])


def gen_freeform_mask(spec: StrokeSpec, seed: SeedLike, h: int, w: int) -> np.ndarray:
    """Draw random polyline brush strokes with round caps and joins.

    Each stroke starts at a uniform point with a uniform heading; every vertex
    turns the heading by a signed angle from ``turn_angle_range`` and advances
    by a length in ``[1, max_stroke_length]``.  Returns ``(h, w, 1)`` float32
    in ``{0, 1}``.
    """
    if h < 16 or w < 16:
        raise ValueError(f"mask must be at least 16x16, got {h}x{w}")
    spec.validate()
    rng = _rng(seed)
    canvas = np.zeros((h, w), dtype=np.uint8)
    n_strokes = int(rng.integers(spec.num_strokes_range[0], spec.num_strokes_range[1] + 1))
    for _ in range(n_strokes):
        n_vertices = int(rng.integers(spec.vertices_range[0], spec.vertices_range[1] + 1))
        width = float(rng.uniform(*spec.brush_width_range))
        thickness = max(1, int(round(width)))
        radius = max(0, int(round(width / 2)))
        x, y = rng.uniform(0, w), rng.uniform(0, h)
        heading = rng.uniform(0, 2 * math.pi)
        p0 = (int(round(x)), int(round(y)))
        cv2.circle(canvas, p0, radius, 1, thickness=-1)
        for _ in range(n_vertices):
            turn = rng.uniform(*spec.turn_angle_range)
            heading += turn if rng.random() < 0.5 else -turn
            length = rng.uniform(1.0, max(1.0, spec.max_stroke_length))
            x = float(np.clip(x + length * math.cos(heading), 0, w - 1))
            y = float(np.clip(y + length * math.sin(heading), 0, h - 1))
            p1 = (int(round(x)), int(round(y)))
            cv2.line(canvas, p0, p1, 1, thickness=thickness, lineType=cv2.LINE_8)
            cv2.circle(canvas, p1, radius, 1, thickness=-1)
            p0 = p1
    return canvas.astype(np.float32)[:, :, None]


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps of odd length ``size``."""
    r = size // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def dilate_soft(mask: np.ndarray, iterations: int = 4, sigma: float = 1.0, kernel_size: int = 5) -> np.ndarray:
    """Grow a binary mask into a soft band by iterated Gaussian smoothing.

    Each iteration blurs the current soft mask with a normalized separable
    Gaussian (replicated borders) and takes the elementwise max with the
    original mask, so stroke interiors stay at 1 and the band decays with
    distance.  Pixels farther than ``iterations * (kernel_size // 2)`` from a
    stroke remain exactly 0.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be a positive odd integer")
    base = np.asarray(mask, dtype=np.float64)
    squeeze = base.ndim == 3
    if squeeze:
        base = base[:, :, 0]
    g = gaussian_kernel(kernel_size, sigma)
    soft = base.copy()
    for _ in range(iterations):
        blurred = cv2.sepFilter2D(soft, cv2.CV_64F, g, g, borderType=cv2.BORDER_REPLICATE)
        soft = np.maximum(base, blurred)
    soft = np.clip(soft, 0.0, 1.0)
    return soft[:, :, None] if squeeze else soft


def compose_degraded(truth: np.ndarray, noise: np.ndarray, soft_mask: np.ndarray) -> np.ndarray:
    """Alpha-blend ``noise`` into ``truth`` with the soft mask as per-pixel alpha."""
    truth = np.asarray(truth)
    noise = np.asarray(noise)
    alpha = np.asarray(soft_mask)
    if truth.shape != noise.shape:
        raise ValueError(f"truth {truth.shape} and noise {noise.shape} differ")
    if alpha.ndim == 2:
        alpha = alpha[:, :, None]
    if alpha.shape[:2] != truth.shape[:2] or alpha.shape[2] not in (1, truth.shape[2]):
        raise ValueError(f"soft mask {alpha.shape} does not match image {truth.shape}")
    alpha = alpha.astype(truth.dtype, copy=False)
    return truth * (1 - alpha) + noise * alpha


def make_training_tuple(
    truth: np.ndarray,
    noise: np.ndarray,
    spec: StrokeSpec | None = None,
    seed: SeedLike = None,
    iterations: int = 4,
    sigma: float = 1.0,
) -> TrainingTuple:
    truth = np.asarray(truth, dtype=np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    if truth.shape != noise.shape:
        raise ValueError(f"truth {truth.shape} and noise {noise.shape} differ; crop or resize noise first")
    h, w = truth.shape[:2]
    if spec is None:
        spec = StrokeSpec().for_size(h, w)
    mask = gen_freeform_mask(spec, seed, h, w)
    soft = dilate_soft(mask, iterations, sigma).astype(np.float32)
    degraded = compose_degraded(truth, noise, soft)
    return TrainingTuple(degraded, truth, mask, noise, soft)


def damage_ratio(mask: np.ndarray) -> float:
    """|ones| / |zeros| of a binary mask (inf when fully damaged)."""
    ones = float(np.count_nonzero(np.asarray(mask) > 0.5))
    zeros = float(np.asarray(mask).size) - ones
    return math.inf if zeros == 0 else ones / zeros


# ---------------------------------------------------------------------------
# Image IO (8-bit files <-> [-1, 1] float arrays)
# ---------------------------------------------------------------------------

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff"}


def list_images(directory: str | Path) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def to_signed(u8: np.ndarray) -> np.ndarray:
    return (u8.astype(np.float32) / 127.5) - 1.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(path: str | Path, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Load an RGB image as ``(size, size, 3)`` in [-1, 1].

    Without ``rng`` the largest centered square is used; with ``rng`` a random
    square patch (at least half the short side) is cropped, which is how noise
    sources are sampled.
    """
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        short = min(w, h)
        if rng is None:
            side = short
            left, top = (w - side) // 2, (h - side) // 2
        else:
            side = int(rng.integers(max(1, short // 2), short + 1))
            left = int(rng.integers(0, w - side + 1))
            top = int(rng.integers(0, h - side + 1))
        im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.BILINEAR)
        return to_signed(np.asarray(im))


def save_image(path: str | Path, x: np.ndarray) -> None:
    Image.fromarray(to_uint8(x)).save(path)


def save_mask(path: str | Path, m: np.ndarray) -> None:
    """8-bit grayscale, 255 = damaged."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 3:
        m = m[:, :, 0]
    Image.fromarray(np.clip(np.round(m * 255.0), 0, 255).astype(np.uint8), mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L"), dtype=np.float32) / 255.0)[:, :, None]


def procedural_image(seed: SeedLike, h: int, w: int) -> np.ndarray:
    """Smooth gradients, blobs and stripes: a stand-in for natural photos in demos and tests."""
    rng = _rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    img = np.empty((h, w, 3))
    for c in range(3):
        a, b, c0 = rng.uniform(-1, 1, 3)
        img[:, :, c] = 0.5 * (a * xx + b * yy) + 0.3 * c0
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        color = rng.uniform(-1, 1, 3)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[inside] = 0.4 * img[inside] + 0.6 * color
    freq = rng.uniform(4, 14)
    theta = rng.uniform(0, math.pi)
    stripes = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)))
    img += 0.15 * stripes[:, :, None] * rng.uniform(-1, 1, 3)
    img += rng.normal(0, 0.02, img.shape)
    return np.clip(img, -1, 1).astype(np.float32)


def stack_tuples(tuples: Sequence[TrainingTuple]) -> TrainingTuple:
    return TrainingTuple(*(np.stack(field) for field in zip(*tuples)))
