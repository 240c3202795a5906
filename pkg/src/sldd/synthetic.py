"""Synthetic stand-ins for the gastric patches: three textures with
class-specific frequency content, and full scenes with a stomach mask."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .patches import IRRELEVANT, NEGATIVE, POSITIVE, PatchDataset, write_raster

# (cycles along rows, cycles along cols, period in pixels) per class; the
# periods divide 8 so windows cut at a stride of 8 keep their phase.
_WAVES = {
    IRRELEVANT: (0.0, 1.0, 16.0),
    NEGATIVE: (1.0, 0.0, 8.0),
    POSITIVE: (1.0, 1.0, 4.0),
}


def texture(label: int, shape: tuple[int, int], top: int = 0, left: int = 0, phase: float = 0.0) -> np.ndarray:
    """Noise-free class texture sampled at absolute pixel offset (top, left)."""
    ky, kx, period = _WAVES[label]
    yy, xx = np.mgrid[top:top + shape[0], left:left + shape[1]]
    return np.cos(2 * np.pi * (ky * yy + kx * xx) / period + phase)


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], scale: int = 4) -> np.ndarray:
    coarse = rng.standard_normal((shape[0] // scale + 2, shape[1] // scale + 2))
    fine = np.kron(coarse, np.ones((scale, scale)))
    return fine[:shape[0], :shape[1]]


def make_patch_benchmark(
    n_train: int = 3000,
    n_test: int = 1000,
    size: int = 16,
    noise: float = 2.0,
    jitter: float = 0.4,
    seed: int = 0,
) -> tuple[PatchDataset, PatchDataset]:
    """Balanced three-class texture patches (labels I, N, P).

    Each patch is ``a * texture(phase + e) + background + noise`` with a
    random amplitude ``a``, phase jitter ``e``, a smooth shared background
    and white Gaussian noise of std ``noise``.
    """
    rng = np.random.default_rng(seed)

    def draw(n):
        labels = np.arange(n) % 3
        rng.shuffle(labels)
        out = np.empty((n, size, size))
        for i, lab in enumerate(labels):
            amp = rng.uniform(0.6, 1.4)
            ph = rng.uniform(-jitter, jitter)
            out[i] = (
                amp * texture(int(lab), (size, size), phase=ph)
                + 0.5 * _smooth_noise(rng, (size, size))
                + noise * rng.standard_normal((size, size))
            )
        return PatchDataset(out, labels)

    return draw(n_train), draw(n_test)


def make_scene(
    image_size: int,
    gastritis: bool,
    rng: np.random.Generator,
    noise: float = 0.6,
) -> tuple[np.ndarray, np.ndarray]:
    """One 8-bit grayscale scene and its 8-bit stomach mask (255 inside).

    The stomach is a random ellipse; inside it the texture is P for a
    gastritis scene and N otherwise; outside it is I on a darker level.
    """
    d = image_size
    yy, xx = np.mgrid[0:d, 0:d]
    cy, cx = rng.uniform(0.4, 0.6, size=2) * d
    ry, rx = rng.uniform(0.25, 0.35, size=2) * d
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    inner = texture(POSITIVE if gastritis else NEGATIVE, (d, d))
    outer = texture(IRRELEVANT, (d, d))
    field = np.where(inside, 0.5 + 0.8 * inner, -0.8 + 0.8 * outer)
    field = field + noise * rng.standard_normal((d, d))
    image = np.clip(128 + 50 * field, 0, 255).astype(np.uint8)
    mask = np.where(inside, 255, 0).astype(np.uint8)
    return image, mask


def write_scene_fixture(
    directory,
    n_images: int,
    image_size: int,
    seed: int = 0,
    fmt: str = "pgm",
) -> Path:
    """Write ``images/``, ``masks/`` and ``manifest.csv`` under ``directory``.

    Labels alternate so both classes are present whenever ``n_images >= 2``.
    """
    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_images):
        label = i % 2
        image, mask = make_scene(image_size, bool(label), rng)
        name = f"img{i:04d}"
        write_raster(d / "images" / f"{name}.{fmt}", image)
        write_raster(d / "masks" / f"{name}.{fmt}", mask)
        rows.append((name, label))
    with open(d / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label"])
        w.writerows(rows)
    return d
