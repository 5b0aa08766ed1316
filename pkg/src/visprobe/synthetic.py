"""Planted-motif synthetic dataset.

Images are 4x4 grids of tiles, each tile filled with one of eight colour /
texture motifs. Motifs 0-3 and 4-7 form two co-occurrence groups: an image
only ever mixes motifs of one group, so cross-group words never co-occur.
Classes 0-2 draw from the first group and class 3 from the second, which
makes the second group's words rare overall.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import save_image

# (base colour, texture) per motif
MOTIFS = [
    ((220, 40, 40), "solid"),
    ((40, 170, 60), "hstripes"),
    ((40, 70, 210), "vstripes"),
    ((230, 210, 50), "checker"),
    ((200, 60, 200), "solid"),
    ((40, 200, 210), "hstripes"),
    ((240, 140, 30), "vstripes"),
    ((235, 235, 235), "checker"),
]
N_MOTIFS = len(MOTIFS)
GROUPS = ((0, 1, 2, 3), (4, 5, 6, 7))
N_CLASSES = 4
GROUP_OF_CLASS = (0, 0, 0, 1)
CONTRAST = 0.12  # relative darkening of the alternate texture pixels


@dataclass
class SyntheticImage:
    image_id: str
    pixels: np.ndarray
    motif_map: np.ndarray  # (H, W) motif id per pixel
    class_label: str
    split: str

    @property
    def motifs(self) -> frozenset[int]:
        return frozenset(np.unique(self.motif_map).tolist())


def motif_tile(motif: int, size: int, rng: np.random.Generator, noise: float = 4.0,
               contrast: float = CONTRAST) -> np.ndarray:
    colour, texture = MOTIFS[motif]
    base = np.array(colour, dtype=np.float64)
    dark = base * (1.0 - contrast)
    yy, xx = np.mgrid[:size, :size]
    if texture == "solid":
        alt = np.zeros((size, size), dtype=bool)
    elif texture == "hstripes":
        alt = yy % 2 == 1
    elif texture == "vstripes":
        alt = xx % 2 == 1
    else:
        alt = (yy + xx) % 2 == 1
    tile = np.where(alt[..., None], dark, base)
    tile = tile + rng.normal(0.0, noise, tile.shape)
    return np.clip(np.rint(tile), 0, 255).astype(np.uint8)


def make_image(motif_grid: np.ndarray, tile: int, rng: np.random.Generator
               ) -> tuple[np.ndarray, np.ndarray]:
    gh, gw = motif_grid.shape
    pixels = np.zeros((gh * tile, gw * tile, 3), dtype=np.uint8)
    for r in range(gh):
        for c in range(gw):
            pixels[r * tile:(r + 1) * tile, c * tile:(c + 1) * tile] = \
                motif_tile(int(motif_grid[r, c]), tile, rng)
    motif_map = np.kron(motif_grid, np.ones((tile, tile), dtype=np.int64))
    return pixels, motif_map


def generate_dataset(n_images: int = 200, size: int = 64, grid: int = 4, seed: int = 0,
                     val_fraction: float = 0.25) -> list[SyntheticImage]:
    """Deterministic planted dataset; classes alternate, every fourth image goes to val."""
    rng = np.random.default_rng(seed)
    tile = size // grid
    n_val_every = max(1, int(round(1.0 / val_fraction)))
    images = []
    for i in range(n_images):
        cls = i % N_CLASSES
        group = GROUPS[GROUP_OF_CLASS[cls]]
        n_motifs = int(rng.integers(2, len(group) + 1))
        chosen = rng.choice(group, size=n_motifs, replace=False)
        # every chosen motif gets at least two tiles
        cells = np.concatenate([np.repeat(chosen, 2),
                                rng.choice(chosen, size=grid * grid - 2 * n_motifs)])
        motif_grid = rng.permutation(cells).reshape(grid, grid)
        pixels, motif_map = make_image(motif_grid, tile, rng)
        split = "val" if (i // N_CLASSES) % n_val_every == n_val_every - 1 else "train"
        images.append(SyntheticImage(f"img{i:04d}", pixels, motif_map, f"class{cls}", split))
    return images


def write_dataset(images: list[SyntheticImage], directory: str | Path) -> Path:
    """Write PNGs, motif maps and a tab-separated manifest; returns the manifest path."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "motifs").mkdir(parents=True, exist_ok=True)
    lines = []
    for im in images:
        rel = Path("images") / f"{im.image_id}.png"
        save_image(im.pixels, directory / rel)
        np.save(directory / "motifs" / f"{im.image_id}.npy", im.motif_map.astype(np.uint8))
        lines.append(f"{im.image_id}\t{rel.as_posix()}\t{im.class_label}\t{im.split}\n")
    manifest = directory / "manifest.tsv"
    manifest.write_text("".join(lines), encoding="utf-8")
    return manifest


def load_motif_map(directory: str | Path, image_id: str) -> np.ndarray:
    return np.load(Path(directory) / "motifs" / f"{image_id}.npy").astype(np.int64)


def assignment_purity(word_ids: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of items whose word's majority ground-truth class matches their own."""
    word_ids = np.asarray(word_ids)
    truth = np.asarray(truth)
    total = 0
    for w in np.unique(word_ids):
        total += np.bincount(truth[word_ids == w]).max()
    return total / len(word_ids)


def majority_motif(motif_map: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Majority motif under every superpixel of a label map."""
    n = int(labels.max()) + 1
    counts = np.zeros((n, N_MOTIFS), dtype=np.int64)
    np.add.at(counts, (labels.ravel(), motif_map.ravel()), 1)
    return counts.argmax(axis=1)


SYNTHETIC_CONFIG = {
    "seed": 0,
    "out": "out",
    "data": {"manifest": "manifest.tsv", "image_size": 64},
    "encode": {"patch_size": 64},
    "representations": [{"name": "oracle", "encoder": "bow-oracle", "noise_sigma": 0.1}],
    "dictionary": {"k_per_class": 25, "n_words": N_MOTIFS, "min_frequency": 10},
    "tasks": {
        "sl_bins": {"source": "equal-frequency", "n_bins": 3},
        "cb_bins": {"source": "equal-frequency", "n_bins": 6},
        "mwc": {"n_pairs_train": 2000, "n_pairs_val": 1000, "n_bins": 10},
    },
}


def write_synthetic_config(directory: str | Path, **overrides) -> Path:
    """Config for the planted dataset written next to its manifest."""
    import yaml

    cfg = {**SYNTHETIC_CONFIG, **overrides}
    path = Path(directory) / "config.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=False), encoding="utf-8")
    return path
