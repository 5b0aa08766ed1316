"""Label construction for the probing tasks (WC, SL, CB, SOMO, MWC)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dictionary import CooccurrenceMatrix, VisualSentence
from .embedding import EmbeddingStore
from .imaging import Segmentation, SuperpixelStats
from .probes import cosine_distance

TASKS = ("WC", "MWC", "SL", "CBshape", "CBcolor", "SOMOfar", "SOMOclose")

TABLE3_SL = (18, 21, 23, 26, 28)
TABLE3_CB_SHAPE = (0.153, 0.207, 0.263, 0.336, 0.462)
TABLE3_CB_COLOR = (0.063, 0.085, 0.104, 0.125, 0.155)


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class BinSpec:
    """Ascending cut points; bin ``i`` is the half-open ``[edge[i-1], edge[i])``."""

    edges: tuple[float, ...]
    source: str = "table3-defaults"

    def __post_init__(self):
        if len(self.edges) < 1:
            raise TaskError("a BinSpec needs at least one edge")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise TaskError(f"bin edges must be strictly increasing: {self.edges}")

    @property
    def n_bins(self) -> int:
        return len(self.edges) + 1

    def classify(self, values) -> np.ndarray:
        return np.searchsorted(np.asarray(self.edges, dtype=np.float64),
                               np.asarray(values, dtype=np.float64), side="right")

    def __call__(self, value: float) -> int:
        return int(self.classify([value])[0])


TABLE3_BINS = {
    "SL": BinSpec(TABLE3_SL),
    "CBshape": BinSpec(TABLE3_CB_SHAPE),
    "CBcolor": BinSpec(TABLE3_CB_COLOR),
}


def equal_frequency_bins(values, n_bins: int = 6) -> BinSpec:
    """Edges at the empirical ``k/n_bins`` quantiles (value at sorted index ``k*n//n_bins``).

    When ties make a quantile repeat the previous edge, the next larger
    distinct value is used instead.
    """
    vals = np.sort(np.asarray(values, dtype=np.float64))
    n = len(vals)
    if n < n_bins:
        raise TaskError(f"need at least {n_bins} values, got {n}")
    distinct = np.unique(vals)
    if len(distinct) < n_bins:
        raise TaskError(f"only {len(distinct)} distinct values for {n_bins} bins")
    edges: list[float] = []
    for k in range(1, n_bins):
        edge = float(vals[(k * n) // n_bins])
        if edges and edge <= edges[-1]:
            bigger = distinct[distinct > edges[-1]]
            if len(bigger) == 0:
                raise TaskError("ties leave too few distinct values for equal-frequency bins")
            edge = float(bigger[0])
        edges.append(edge)
    return BinSpec(tuple(edges), "equal-frequency")


# -- WC / SL / CB ---------------------------------------------------------------

def wc_labels(sentence: VisualSentence, n_words: int = 50) -> np.ndarray:
    flags = np.zeros(n_words, dtype=np.int64)
    flags[sorted(sentence.unique_words)] = 1
    return flags


def sl_label(sentence: VisualSentence, bins: BinSpec, resolution: str | None = None) -> int:
    return bins(sentence.length_at(resolution))


def cb_labels(stats: SuperpixelStats, shape_bins: BinSpec, color_bins: BinSpec) -> tuple[int, int]:
    return shape_bins(stats.co), color_bins(stats.icv)


# -- SOMO -------------------------------------------------------------------------

@dataclass
class Candidate:
    """A superpixel that may be pasted into another image."""

    image_id: str
    resolution: str
    label: int
    word: int
    area: int
    crop: np.ndarray  # bounding-box pixels of the source image


@dataclass
class SomoInstance:
    base_image_id: str
    altered: bool
    mode: str
    pixels: np.ndarray
    target: tuple[str, int] | None = None
    replacement_source: tuple[str, str, int] | None = None
    target_word: int | None = None
    replacement_word: int | None = None
    altered_mask: np.ndarray | None = field(default=None, repr=False)

    @property
    def instance_id(self) -> str:
        return f"{self.base_image_id}.{'altered' if self.altered else 'orig'}"


@dataclass
class SomoSkip:
    base_image_id: str
    reason: str


def somo_select_target(seg: Segmentation | np.ndarray, sigma_frac: float = 0.25,
                       seed: int | np.random.Generator = 0) -> int:
    """Label under a pixel drawn from a centred, truncated 2-D Gaussian."""
    labels = seg.labels if isinstance(seg, Segmentation) else np.asarray(seg)
    height, width = labels.shape
    if sigma_frac <= 0:
        return int(labels[height // 2, width // 2])
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        x = rng.normal(width / 2.0, sigma_frac * width)
        y = rng.normal(height / 2.0, sigma_frac * height)
        if 0.0 <= x < width and 0.0 <= y < height:
            return int(labels[int(y), int(x)])


def _nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape[:2]
    rows = np.minimum((np.arange(out_h) * in_h) // out_h, in_h - 1)
    cols = np.minimum((np.arange(out_w) * in_w) // out_w, in_w - 1)
    return arr[rows[:, None], cols[None, :]]


def admissible_words(target_word: int, cooc: CooccurrenceMatrix, available: set[int],
                     mode: str, quantile: float = 0.25) -> list[int]:
    """Replacement words ordered by preference.

    ``close`` takes the most frequently co-occurring quantile of words, ``far``
    the least frequent; order within the quantile follows the same ranking,
    ties by word id.
    """
    if mode not in ("close", "far"):
        raise TaskError(f"mode must be 'close' or 'far', got {mode!r}")
    row = cooc.counts[target_word]
    pool = [v for v in sorted(available) if v != target_word]
    if not pool:
        return []
    sign = -1 if mode == "close" else 1
    pool.sort(key=lambda v: (sign * int(row[v]), v))
    k = max(1, math.ceil(quantile * len(pool)))
    return pool[:k]


def somo_generate(
    image: np.ndarray,
    seg: Segmentation | np.ndarray,
    words: Mapping[int, int],
    cooc: CooccurrenceMatrix,
    candidates: Sequence[Candidate],
    mode: str,
    quantile: float = 0.25,
    shape_tolerance: float = 2.0,
    sigma_frac: float = 0.25,
    seed: int | np.random.Generator = 0,
    *,
    image_id: str = "",
    resolution: str = "medium",
) -> SomoInstance | SomoSkip:
    """Replace a centre-biased superpixel with one of a (rarely|often) co-occurring word.

    ``words`` maps each label of ``seg`` to its visual word. The replacement's
    bounding-box crop is resampled (nearest neighbour) onto the target's
    bounding box and pasted through the target mask, so only pixels of the
    target superpixel change.
    """
    labels = seg.labels if isinstance(seg, Segmentation) else np.asarray(seg)
    target = somo_select_target(labels, sigma_frac, seed)
    w = int(words[target])
    mask = labels == target
    area = int(mask.sum())
    pool = [c for c in candidates if c.image_id != image_id and c.word != w]
    by_word: dict[int, list[Candidate]] = {}
    for c in pool:
        by_word.setdefault(c.word, []).append(c)
    order = admissible_words(w, cooc, set(by_word), mode, quantile)
    if not order:
        return SomoSkip(image_id, f"no candidate superpixel of a word other than {w}")
    chosen = None
    for v in order:
        best = None
        for c in by_word[v]:
            ratio = c.area / area
            if 1.0 / shape_tolerance <= ratio <= shape_tolerance:
                score = abs(math.log(ratio))
                if best is None or score < best[0]:
                    best = (score, c)
        if best is not None:
            chosen = best[1]
            break
    if chosen is None:
        return SomoSkip(image_id, f"no shape-admissible candidate among words {order}")

    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    patch = _nearest_resize(chosen.crop, y1 - y0, x1 - x0)
    altered = image.copy()
    box_mask = mask[y0:y1, x0:x1]
    altered[y0:y1, x0:x1][box_mask] = patch[box_mask]
    return SomoInstance(
        base_image_id=image_id, altered=True, mode=mode, pixels=altered,
        target=(resolution, target), replacement_source=(chosen.image_id, chosen.resolution, chosen.label),
        target_word=w, replacement_word=chosen.word, altered_mask=mask,
    )


def somo_split_plan(image_ids: Sequence[str], seed: int) -> tuple[list[str], list[str]]:
    """Shuffle a split into (bases to alter, bases kept intact), halves of equal size."""
    rng = np.random.default_rng(seed)
    ids = list(image_ids)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    half = len(perm) // 2
    return perm[:half], perm[half:2 * half]


def balance_somo(altered: list[SomoInstance], intact_pool: Sequence[str],
                 image_of: Mapping[str, np.ndarray], mode: str) -> list[SomoInstance]:
    """Pair every altered instance with one unaltered instance."""
    n = min(len(altered), len(intact_pool))
    out = list(altered[:n])
    for image_id in intact_pool[:n]:
        out.append(SomoInstance(image_id, False, mode, image_of[image_id]))
    return out


# -- MWC ------------------------------------------------------------------------

@dataclass
class MwcPair:
    image_a: str
    image_b: str
    cosine_distance: float
    labels: np.ndarray
    distance_bin: int = -1

    @property
    def entity_id(self) -> str:
        return f"{self.image_a}|{self.image_b}"


def _pair_from_index(k: int, n: int) -> tuple[int, int]:
    # row-major enumeration of i < j
    i = int(n - 2 - math.floor(math.sqrt(-8 * k + 4 * n * (n - 1) - 7) / 2.0 - 0.5))
    j = int(k + i + 1 - n * (n - 1) // 2 + (n - i) * ((n - i) - 1) // 2)
    return i, j


def mwc_build_pairs(image_ids: Sequence[str], representations: EmbeddingStore,
                    sentences: Mapping[str, VisualSentence], n_pairs: int, seed: int = 0,
                    n_words: int = 50) -> list[MwcPair]:
    """Sample distinct unordered image pairs and label words present in both."""
    if representations.role != "representation":
        raise TaskError("MWC distances need a representation-role store")
    ids = list(image_ids)
    n = len(ids)
    total = n * (n - 1) // 2
    if n_pairs > total:
        raise TaskError(f"{n_pairs} pairs requested but only {total} exist for {n} images")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=n_pairs, replace=False)) if n_pairs else []
    pairs = []
    for k in picks:
        i, j = _pair_from_index(int(k), n)
        a, b = ids[i], ids[j]
        shared = sentences[a].unique_words & sentences[b].unique_words
        labels = np.zeros(n_words, dtype=np.int64)
        labels[sorted(shared)] = 1
        pairs.append(MwcPair(a, b, cosine_distance(representations[a], representations[b]), labels))
    return pairs


def mwc_distance_bins(pairs: Sequence[MwcPair], n_bins: int = 10) -> list[MwcPair]:
    """Sort by distance (stable) and cut into ``n_bins`` contiguous equal-count bins."""
    if len(pairs) < n_bins:
        raise TaskError(f"{len(pairs)} pairs cannot fill {n_bins} bins")
    order = np.argsort(np.array([p.cosine_distance for p in pairs]), kind="stable")
    base, extra = divmod(len(pairs), n_bins)
    out = []
    pos = 0
    for b in range(n_bins):
        size = base + (1 if b < extra else 0)
        for idx in order[pos:pos + size]:
            p = pairs[idx]
            out.append(MwcPair(p.image_a, p.image_b, p.cosine_distance, p.labels, b))
        pos += size
    return out


def mwc_input(store: EmbeddingStore, a: str, b: str) -> np.ndarray:
    return np.concatenate([store[a], store[b]]).astype(np.float64)
