"""Sliding-window patch extraction, mask-based I/N/P annotation, and the
on-disk patch dataset format."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

LABELS = ("I", "N", "P")
IRRELEVANT, NEGATIVE, POSITIVE = 0, 1, 2
UNLABELED = -1


@dataclass(frozen=True)
class SliceConfig:
    __pydantic_config__ = {"extra": "forbid"}

    image_size: int = 2048
    patch_size: int = 299
    stride: int = 50
    area_low: float = 0.01
    area_high: float = 0.85

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size < 1:
            raise ValueError("image_size and patch_size must be positive")
        if self.patch_size > self.image_size:
            raise ValueError(f"patch_size {self.patch_size} exceeds image_size {self.image_size}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if not 0 <= self.area_low < self.area_high <= 1:
            raise ValueError("need 0 <= area_low < area_high <= 1")

    @property
    def grid(self) -> int:
        """Windows per axis."""
        return (self.image_size - self.patch_size) // self.stride + 1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Window(NamedTuple):
    row: int
    col: int
    top: int
    left: int
    pixels: np.ndarray


def slice_image(image: np.ndarray, config: SliceConfig) -> list[Window]:
    """Cut a square image into row-major overlapping windows.

    Pixels are views into ``image``; copy them if the image will be mutated.
    """
    image = np.asarray(image)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square 2-d image, got shape {image.shape}")
    d, p, s = image.shape[0], config.patch_size, config.stride
    if d != config.image_size:
        raise ValueError(f"image is {d}px but config.image_size is {config.image_size}")
    if p > d:
        raise ValueError(f"patch_size {p} exceeds image size {d}")
    n = config.grid
    return [
        Window(r, c, r * s, c * s, image[r * s:r * s + p, c * s:c * s + p])
        for r in range(n)
        for c in range(n)
    ]


def mask_from_raster(raster: np.ndarray) -> np.ndarray:
    """8-bit mask raster to boolean: values above 127 are inside the stomach."""
    raster = np.asarray(raster)
    if raster.dtype == bool:
        return raster
    return raster > 127


def area_fraction(mask: np.ndarray, window: Window, patch_size: int) -> float:
    inside = mask[window.top:window.top + patch_size, window.left:window.left + patch_size]
    return float(np.count_nonzero(inside)) / float(patch_size * patch_size)


def annotate(
    windows: Sequence[Window],
    mask: np.ndarray,
    gastritis: bool | int,
    config: SliceConfig,
) -> tuple[list[tuple[Window, int]], list[Window]]:
    """Label windows by their in-stomach area.

    Strictly below ``area_low`` is I, strictly above ``area_high`` is N or P
    depending on the image label; anything in between (thresholds included)
    is discarded and returned separately.
    """
    mask = mask_from_raster(mask)
    if mask.shape != (config.image_size, config.image_size):
        raise ValueError(f"mask shape {mask.shape} does not match image size {config.image_size}")
    inside_label = POSITIVE if gastritis else NEGATIVE
    labeled, discarded = [], []
    for w in windows:
        a = area_fraction(mask, w, config.patch_size)
        if a < config.area_low:
            labeled.append((w, IRRELEVANT))
        elif a > config.area_high:
            labeled.append((w, inside_label))
        else:
            discarded.append(w)
    return labeled, discarded


@dataclass
class PatchDataset:
    """Patches as an (N, C, h, w) array with provenance per patch.

    Raw 8-bit patches stay ``uint8`` to keep full-size slices affordable;
    anything else is stored as float64. ``normalize`` always yields float64.
    """

    images: np.ndarray
    labels: np.ndarray
    image_ids: np.ndarray = None
    rows: np.ndarray = None
    cols: np.ndarray = None
    norm: tuple[float, float] | None = None
    slice_config: SliceConfig | None = None
    label_names: tuple[str, ...] = LABELS
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.dtype != np.uint8:
            self.images = self.images.astype(np.float64, copy=False)
        if self.images.ndim == 3:
            self.images = self.images[:, None]
        if self.images.ndim != 4:
            raise ValueError(f"patch array must be (N, C, h, w), got {self.images.shape}")
        n = len(self.images)
        self.labels = np.asarray(self.labels, dtype=int).reshape(n)
        self.image_ids = np.asarray(["synthetic"] * n if self.image_ids is None else self.image_ids, dtype=str)
        self.rows = np.zeros(n, dtype=int) if self.rows is None else np.asarray(self.rows, dtype=int)
        self.cols = np.zeros(n, dtype=int) if self.cols is None else np.asarray(self.cols, dtype=int)
        bad = self.labels[(self.labels < UNLABELED) | (self.labels >= len(self.label_names))]
        if bad.size:
            raise ValueError(f"labels outside {self.label_names}: {sorted(set(bad.tolist()))}")

    def __len__(self):
        return len(self.images)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def counts(self) -> dict[str, int]:
        out = {name: int(np.sum(self.labels == i)) for i, name in enumerate(self.label_names)}
        unl = int(np.sum(self.labels == UNLABELED))
        if unl:
            out["unlabeled"] = unl
        return out

    def subset(self, index) -> "PatchDataset":
        index = np.asarray(index)
        return replace(
            self,
            images=self.images[index],
            labels=self.labels[index],
            image_ids=self.image_ids[index],
            rows=self.rows[index],
            cols=self.cols[index],
            meta=dict(self.meta),
        )

    def split(self, fraction: float, seed: int = 0) -> tuple["PatchDataset", "PatchDataset"]:
        """Random (1 - fraction, fraction) split."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = len(self) - int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))

    def patch_ids(self) -> list[str]:
        return [f"{i:07d}" for i in range(len(self))]


def normalize(dataset: PatchDataset, stats: tuple[float, float] | None = None) -> PatchDataset:
    """Standardize pixels; with ``stats=None`` they are computed from ``dataset``.

    Pass the training split's ``norm`` when normalizing test data.
    """
    if dataset.norm is not None:
        raise ValueError("dataset is already normalized")
    if stats is None:
        if len(dataset) == 0:
            raise ValueError("cannot compute normalization statistics of an empty dataset")
        mean = float(np.mean(dataset.images))
        std = float(np.std(dataset.images))
        if not std > 0:
            ids = sorted(set(dataset.image_ids.tolist()))
            raise ValueError(f"pixel std is zero (constant images: {', '.join(ids[:5])})")
    else:
        mean, std = map(float, stats)
    images = (dataset.images.astype(np.float64) - mean) / std
    return replace(dataset, images=images, norm=(mean, std), meta=dict(dataset.meta))


def extract(image: np.ndarray, config: SliceConfig, row: int, col: int) -> np.ndarray:
    """Re-cut the window at grid position (row, col)."""
    top, left = row * config.stride, col * config.stride
    return np.asarray(image)[top:top + config.patch_size, left:left + config.patch_size]


def build_dataset(
    images: dict[str, np.ndarray],
    config: SliceConfig,
    masks: dict[str, np.ndarray] | None = None,
    labels: dict[str, int] | None = None,
) -> tuple[PatchDataset, dict[str, int]]:
    """Slice many images into one dataset.

    With masks and labels the windows are annotated and the ambiguous ones
    dropped; without them every window is kept unlabeled (the test-image
    case). Returns the dataset and a per-image discard count.
    """
    pix, labs, ids, rows, cols = [], [], [], [], []
    discarded = {}
    for image_id in sorted(images):
        windows = slice_image(images[image_id], config)
        if masks is None:
            kept = [(w, UNLABELED) for w in windows]
            discarded[image_id] = 0
        else:
            kept, dropped = annotate(windows, masks[image_id], labels[image_id], config)
            discarded[image_id] = len(dropped)
        for w, lab in kept:
            pix.append(w.pixels)
            labs.append(lab)
            ids.append(image_id)
            rows.append(w.row)
            cols.append(w.col)
    p = config.patch_size
    arr = np.stack(pix) if pix else np.zeros((0, p, p), dtype=np.uint8)
    ds = PatchDataset(arr, np.asarray(labs, dtype=int), ids, rows, cols, slice_config=config)
    return ds, discarded


# -- disk format ------------------------------------------------------------

INDEX_COLUMNS = ("patch_id", "image_id", "row", "col", "label")


def save_dataset(dataset: PatchDataset, directory: str | os.PathLike) -> Path:
    """Write ``patches.npy``, ``index.csv`` and ``meta.json`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "patches.npy", dataset.images, allow_pickle=False)
    with open(d / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(INDEX_COLUMNS)
        for pid, iid, r, c, lab in zip(dataset.patch_ids(), dataset.image_ids, dataset.rows, dataset.cols, dataset.labels):
            w.writerow([pid, iid, int(r), int(c), dataset.label_names[lab] if lab >= 0 else ""])
    meta = {
        "label_names": list(dataset.label_names),
        "counts": dataset.counts(),
        "norm": list(dataset.norm) if dataset.norm else None,
        "slice_config": dataset.slice_config.to_dict() if dataset.slice_config else None,
        "meta": dataset.meta,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_dataset(directory: str | os.PathLike) -> PatchDataset:
    d = Path(directory)
    if not (d / "index.csv").exists() or not (d / "patches.npy").exists():
        raise FileNotFoundError(f"{d} is not a patch dataset (missing index.csv or patches.npy)")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    names = tuple(meta.get("label_names", LABELS))
    lookup = {n: i for i, n in enumerate(names)}
    ids, rows, cols, labs = [], [], [], []
    with open(d / "index.csv", newline="") as fh:
        for rec in csv.DictReader(fh):
            ids.append(rec["image_id"])
            rows.append(int(rec["row"]))
            cols.append(int(rec["col"]))
            labs.append(lookup[rec["label"]] if rec["label"] else UNLABELED)
    images = np.load(d / "patches.npy", allow_pickle=False)
    if len(images) != len(ids):
        raise ValueError(f"{d}: index has {len(ids)} rows but patches.npy holds {len(images)}")
    sc = meta.get("slice_config")
    norm = meta.get("norm")
    return PatchDataset(
        images,
        np.asarray(labs, dtype=int),
        ids,
        rows,
        cols,
        norm=tuple(norm) if norm else None,
        slice_config=SliceConfig(**sc) if sc else None,
        label_names=names,
        meta=meta.get("meta", {}),
    )


def read_raster(path: str | os.PathLike) -> np.ndarray:
    """Load an 8-bit grayscale PGM/PNG as a uint8 array."""
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "1", "P"):
            im = im.convert("L")
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_raster(path: str | os.PathLike, array: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(array, dtype=np.uint8), mode="L").save(path)


def read_manifest(path: str | os.PathLike) -> dict[str, int]:
    """``image_id,label`` CSV with label 1 = gastritis, 0 = non-gastritis."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"image_id", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: manifest needs columns image_id,label")
        for rec in reader:
            lab = int(rec["label"])
            if lab not in (0, 1):
                raise ValueError(f"{path}: label for {rec['image_id']} must be 0 or 1, got {lab}")
            out[rec["image_id"]] = lab
    return out
