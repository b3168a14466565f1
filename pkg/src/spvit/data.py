"""Synthetic local-texture task and a flat binary image-directory loader."""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

TEXTURES = ("rows", "cols", "checker", "blocks")
LAYOUTS = ("quadrant", "complement")


@dataclass
class Dataset:
    images: np.ndarray  # [B, H, W, C] float64
    labels: np.ndarray  # [B] int64
    n_classes: int

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes)


@dataclass
class SyntheticTask:
    """Class = (pixel texture inside each patch, how much of the grid it covers).

    Textured tokens hold one of four sign patterns at pixel scale, flipped by a
    random sign shared by each ``sign_cell x sign_cell`` cell of tokens, so
    the texture is visible to a local nonlinear detector (and cleaner after
    summing a neighbourhood) while its signed evidence has zero mean under
    linear pooling. The textured region is
    either one random quadrant of the token grid or everything except one
    random quadrant; the remaining tokens hold independent random pixel signs.
    Telling the two coverages apart needs a global view.
    """

    n_train: int = 1024
    n_val: int = 512
    image_size: int = 32
    patch_size: int = 4
    in_chans: int = 3
    amplitude: float = 1.0
    noise: float = 1.6
    sign_cell: int = 2
    layouts: int = 2  # 1: texture-only classes, quadrant coverage
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be a multiple of patch_size")
        if self.grid < 2 or self.grid % 2:
            raise ValueError("token grid must be even and at least 2")
        if self.sign_cell < 1 or (self.grid // 2) % self.sign_cell:
            raise ValueError("sign_cell must divide half the token grid")
        if self.layouts not in (1, 2):
            raise ValueError("layouts must be 1 or 2")

    @property
    def n_classes(self) -> int:
        return len(TEXTURES) * self.layouts

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    def label_of(self, texture: int, layout: int) -> int:
        return texture * self.layouts + layout


def _split_seed(seed: int, split: str) -> int:
    return (seed * 1_000_003 + zlib.crc32(split.encode())) % (2**32)


def texture_signs(texture: int, size: int) -> np.ndarray:
    """``size x size`` +-1 pattern for one texture id (``blocks`` is constant at size 2)."""
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    pattern = {
        0: i,
        1: j,
        2: i + j,
        3: i // 2 + j // 2,
    }[texture]
    return np.where(pattern % 2 == 0, 1.0, -1.0)


def coverage_mask(layout: int, quadrant: int, grid: int) -> np.ndarray:
    """Boolean token mask: one quadrant (layout 0) or its complement (layout 1)."""
    h = grid // 2
    q = np.zeros((grid, grid), dtype=bool)
    r, c = divmod(quadrant, 2)
    q[r * h:(r + 1) * h, c * h:(c + 1) * h] = True
    return q if layout == 0 else ~q


def generate_synthetic(task: SyntheticTask, split: str) -> Dataset:
    """Deterministic labelled images for ``split`` in {"train", "val"}."""
    if split not in ("train", "val"):
        raise ValueError(f"unknown split {split!r}")
    n = task.n_train if split == "train" else task.n_val
    rng = np.random.default_rng(_split_seed(task.seed, split))
    g, p = task.grid, task.patch_size
    # channel mix shared by the whole task, so it is fixed across splits
    colour = np.random.default_rng(task.seed).standard_normal(task.in_chans)
    colour /= np.linalg.norm(colour) / np.sqrt(task.in_chans)

    labels = np.arange(n) % task.n_classes
    rng.shuffle(labels)
    tex, lay = np.divmod(labels, task.layouts)
    quadrant = rng.integers(0, 4, size=n)
    cells = rng.choice([-1.0, 1.0], size=(n, g // task.sign_cell, g // task.sign_cell))
    token_sign = np.repeat(np.repeat(cells, task.sign_cell, 1), task.sign_cell, 2)[..., None, None]
    # pixel signs laid out per token: [n, g, g, p, p]
    signs = rng.choice([-1.0, 1.0], size=(n, g, g, p, p))
    patterns = np.stack([texture_signs(t, p) for t in range(len(TEXTURES))])
    for i in range(n):
        m = coverage_mask(lay[i], quadrant[i], g)
        signs[i][m] = patterns[tex[i]]
    signs *= token_sign
    field = signs.transpose(0, 1, 3, 2, 4).reshape(n, g * p, g * p)
    images = task.amplitude * field[..., None] * colour
    images = images + task.noise * rng.standard_normal(images.shape)
    return Dataset(images, labels.astype(np.int64), task.n_classes)


def iterate_batches(data: Dataset, batch_size: int,
                    rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Mini-batches in a permuted order (in file order when ``rng`` is None)."""
    order = np.arange(len(data)) if rng is None else rng.permutation(len(data))
    for s in range(0, len(data), batch_size):
        idx = order[s:s + batch_size]
        yield data.images[idx], data.labels[idx]


# ---------------------------------------------------------------------------
# raw directory format: manifest.json + one flat u8 file per split

def save_raw_dir(path: str | Path, splits: dict[str, Dataset]) -> None:
    """Write images as u8 (0..255 mapped to [0, 1]) plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "spvit-raw-u8", "splits": {}}
    for name, ds in splits.items():
        img = np.clip(np.round(ds.images * 255.0), 0, 255).astype(np.uint8)
        img.tofile(path / f"{name}.u8")
        manifest["splits"][name] = {
            "file": f"{name}.u8",
            "shape": list(img.shape),
            "labels": ds.labels.tolist(),
        }
    manifest["n_classes"] = next(iter(splits.values())).n_classes
    (path / "manifest.json").write_text(json.dumps(manifest))


def load_raw_dir(path: str | Path, split: str) -> Dataset:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "spvit-raw-u8":
        raise ValueError(f"{path}: not an spvit-raw-u8 manifest")
    try:
        entry = manifest["splits"][split]
    except KeyError:
        raise ValueError(f"{path}: no split {split!r}") from None
    shape = tuple(entry["shape"])
    raw = np.fromfile(path / entry["file"], dtype=np.uint8)
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"{path / entry['file']}: {raw.size} bytes, expected {int(np.prod(shape))}")
    labels = np.asarray(entry["labels"], dtype=np.int64)
    if labels.shape[0] != shape[0]:
        raise ValueError(f"{path}: {labels.shape[0]} labels for {shape[0]} images")
    return Dataset(raw.reshape(shape).astype(np.float64) / 255.0, labels, int(manifest["n_classes"]))
