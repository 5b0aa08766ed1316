"""Image decoding, SLIC superpixels and per-superpixel statistics.

Images are ``uint8`` arrays of shape ``(H, W, 3)``. Label maps are ``int32``
arrays of shape ``(H, W)`` with contiguous ids ``0..n-1``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

RESOLUTION_TAGS = ("coarse", "medium", "fine")
DEFAULT_RESOLUTIONS = {"coarse": 15, "medium": 50, "fine": 80}

STATS_HEADER = [
    "image_id", "resolution", "label", "area", "perimeter",
    "co", "icv", "cx", "cy", "x0", "y0", "x1", "y1",
]

_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


class SegmentationError(ValueError):
    pass


@dataclass
class Segmentation:
    labels: np.ndarray
    n_segments_requested: int
    resolution_tag: str = ""

    @property
    def n_segments_actual(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class SuperpixelStats:
    label: int
    area: int
    perimeter: int
    co: float
    icv: float
    cx: float
    cy: float
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1 (inclusive)


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    if image.shape[0] < 8 or image.shape[1] < 8:
        raise ValueError(f"image must be at least 8x8, got {image.shape[1]}x{image.shape[0]}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {image.dtype}")
    return image


def load_image(path: str | Path, size: int | tuple[int, int] | None = None) -> np.ndarray:
    """Decode an image file to RGB ``uint8``, optionally resizing to ``size``."""
    with PILImage.open(path) as img:
        img = img.convert("RGB")
        if size is not None:
            w, h = (size, size) if isinstance(size, int) else size
            if img.size != (w, h):
                img = img.resize((w, h), PILImage.Resampling.BILINEAR)
        return validate_image(np.array(img, dtype=np.uint8))


def save_image(image: np.ndarray, path: str | Path) -> None:
    PILImage.fromarray(np.ascontiguousarray(image)).save(path, format="PNG")


def save_label_map(labels: np.ndarray, path: str | Path) -> None:
    """Write a label map as a 16-bit single-channel PNG."""
    if labels.max(initial=0) > 0xFFFF or labels.min(initial=0) < 0:
        raise ValueError("label ids must fit in 16 bits")
    arr = np.ascontiguousarray(labels.astype("<u2"))
    PILImage.fromarray(arr).save(path, format="PNG")


def load_label_map(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as img:
        return np.array(img).astype(np.int32)


# -- colour -----------------------------------------------------------------

_SRGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
# D65 reference white, computed from the matrix so that white maps to a=b=0
_WHITE = _SRGB_TO_XYZ.sum(axis=1)


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """sRGB (D65) to CIELAB. Returns float64 ``(H, W, 3)``."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T / _WHITE
    eps = (6.0 / 29.0) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6.0 / 29.0) ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    # f(0) = 4/29 gives L = 0 exactly only up to rounding
    lab[..., 0] = np.clip(lab[..., 0], 0.0, 100.0)
    return lab


# -- SLIC ---------------------------------------------------------------------

def _grid_shape(n_segments: int, height: int, width: int) -> tuple[int, int]:
    ny = max(1, int(round(math.sqrt(n_segments * height / width))))
    nx = max(1, int(round(n_segments / ny)))
    return ny, nx


def _lab_gradient(lab: np.ndarray) -> np.ndarray:
    padded = np.pad(lab, ((1, 1), (1, 1), (0, 0)), mode="edge")
    dx = padded[1:-1, 2:] - padded[1:-1, :-2]
    dy = padded[2:, 1:-1] - padded[:-2, 1:-1]
    return (dx ** 2).sum(axis=2) + (dy ** 2).sum(axis=2)


def slic_segment(
    image: np.ndarray,
    n_segments: int,
    compactness_m: float = 10.0,
    max_iter: int = 10,
    seed: int = 0,
    *,
    enforce: bool = True,
    min_size: int | None = None,
    resolution_tag: str = "",
) -> Segmentation:
    """SLIC superpixels in CIELAB space.

    Centers start on a regular grid with spacing ``S = sqrt(W*H/n_segments)``,
    are moved to the lowest-gradient pixel of their 3x3 neighbourhood, and are
    refined by local k-means within a ``2S x 2S`` window using the distance
    ``sqrt(d_lab**2 + (m/S)**2 * d_xy**2)``. With ``enforce`` the result goes
    through :func:`enforce_connectivity` using ``min_size`` (default ``S**2/4``).

    The algorithm has no random component; ``seed`` is accepted so every stage
    shares one calling convention and is recorded in run logs.
    """
    del seed
    image = validate_image(image)
    height, width = image.shape[:2]
    if not 2 <= n_segments <= (width * height) // 4:
        raise SegmentationError(
            f"n_segments must lie in [2, {width * height // 4}], got {n_segments}")
    ny, nx = _grid_shape(n_segments, height, width)
    if ny > height // 2 or nx > width // 2:
        raise SegmentationError(f"{width}x{height} image too small for a {nx}x{ny} cluster grid")

    lab = rgb_to_lab(image)
    step = math.sqrt(width * height / n_segments)
    grad = _lab_gradient(lab)

    # grid initialisation + 3x3 perturbation
    ys = np.minimum(((np.arange(ny) + 0.5) * height / ny).astype(int), height - 1)
    xs = np.minimum(((np.arange(nx) + 0.5) * width / nx).astype(int), width - 1)
    cy0, cx0 = np.meshgrid(ys, xs, indexing="ij")
    cy0, cx0 = cy0.ravel(), cx0.ravel()
    best_y, best_x = cy0.copy(), cx0.copy()
    best_g = grad[cy0, cx0].copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            yy = np.clip(cy0 + dy, 0, height - 1)
            xx = np.clip(cx0 + dx, 0, width - 1)
            g = grad[yy, xx]
            better = g < best_g
            best_g = np.where(better, g, best_g)
            best_y = np.where(better, yy, best_y)
            best_x = np.where(better, xx, best_x)
    centers = np.column_stack([lab[best_y, best_x], best_y, best_x]).astype(np.float64)
    n_centers = len(centers)

    half = int(math.ceil(step))
    offsets = np.arange(-half, half + 1)
    spatial_w = (compactness_m / step) ** 2
    flat_lab = lab.reshape(-1, 3)
    labels = np.full(height * width, -1, dtype=np.int64)

    for _ in range(max_iter):
        cy = np.round(centers[:, 3]).astype(int)
        cx = np.round(centers[:, 4]).astype(int)
        wy = np.clip(cy[:, None] + offsets[None, :], 0, height - 1)  # (K, w)
        wx = np.clip(cx[:, None] + offsets[None, :], 0, width - 1)
        py = np.broadcast_to(wy[:, :, None], (n_centers, len(offsets), len(offsets)))
        px = np.broadcast_to(wx[:, None, :], (n_centers, len(offsets), len(offsets)))
        pix = (py * width + px).reshape(n_centers, -1)
        d_lab = ((flat_lab[pix] - centers[:, None, :3]) ** 2).sum(axis=2)
        d_xy = (py.reshape(n_centers, -1) - centers[:, 3:4]) ** 2 \
            + (px.reshape(n_centers, -1) - centers[:, 4:5]) ** 2
        dist = (d_lab + spatial_w * d_xy).ravel()
        owner = np.repeat(np.arange(n_centers), pix.shape[1])
        pix = pix.ravel()
        # per pixel: smallest distance, ties to the lowest center index
        order = np.lexsort((owner, dist, pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        labels[pix_sorted[first]] = owner[order][first]

        assigned = labels >= 0
        lab_idx = labels[assigned]
        counts = np.bincount(lab_idx, minlength=n_centers).astype(np.float64)
        coords_y, coords_x = np.divmod(np.flatnonzero(assigned), width)
        feats = np.column_stack([flat_lab[assigned], coords_y, coords_x])
        sums = np.stack([np.bincount(lab_idx, weights=feats[:, j], minlength=n_centers)
                         for j in range(5)], axis=1)
        nonempty = counts > 0
        new_centers = centers.copy()
        new_centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        shift = np.abs(new_centers - centers).max()
        centers = new_centers
        if shift == 0.0:
            break

    if (labels < 0).any():
        # pixels no window reached: nearest center in the image plane
        miss = np.flatnonzero(labels < 0)
        my, mx = np.divmod(miss, width)
        d = (my[:, None] - centers[None, :, 3]) ** 2 + (mx[:, None] - centers[None, :, 4]) ** 2
        labels[miss] = np.argmin(d, axis=1)

    seg = Segmentation(_relabel(labels.reshape(height, width)), n_segments, resolution_tag)
    if enforce:
        if min_size is None:
            min_size = max(1, int(step * step / 4))
        seg = enforce_connectivity(seg, min_size)
    return seg


def _relabel(labels: np.ndarray) -> np.ndarray:
    """Renumber ids contiguously in order of first raster occurrence."""
    flat = labels.ravel()
    uniq, first_idx, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(len(uniq))
    return rank[inverse].reshape(labels.shape).astype(np.int32)


def connected_components(labels: np.ndarray) -> np.ndarray:
    """Split every label into its 4-connected components (raster-ordered ids)."""
    comp = np.zeros(labels.shape, dtype=np.int64)
    offset = 0
    for lab in np.unique(labels):
        mask = labels == lab
        cc, n = ndimage.label(mask, structure=_FOUR_CONN)
        comp[mask] = cc[mask] + offset - 1
        offset += n
    return _relabel(comp)


def enforce_connectivity(seg: Segmentation, min_size: int) -> Segmentation:
    """Make every segment 4-connected and at least ``min_size`` pixels.

    Each connected component becomes its own segment; components smaller than
    ``min_size`` are merged (smallest first) into the largest 4-adjacent
    neighbour, ties going to the lower id.
    """
    comp = connected_components(seg.labels).astype(np.int64)
    height, width = comp.shape
    n = int(comp.max()) + 1
    sizes = np.bincount(comp.ravel(), minlength=n)

    # adjacency between components as a set per node
    pairs = np.concatenate([
        np.stack([comp[:, :-1].ravel(), comp[:, 1:].ravel()], axis=1),
        np.stack([comp[:-1, :].ravel(), comp[1:, :].ravel()], axis=1),
    ])
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    neighbours: list[set[int]] = [set() for _ in range(n)]
    for a, b in np.unique(np.sort(pairs, axis=1), axis=0):
        neighbours[a].add(int(b))
        neighbours[b].add(int(a))

    parent = np.arange(n)
    alive = np.ones(n, dtype=bool)
    while True:
        small = np.flatnonzero(alive & (sizes < min_size))
        if len(small) == 0:
            break
        # smallest first, ties by id
        victim = int(small[np.lexsort((small, sizes[small]))][0])
        if not neighbours[victim]:
            break
        nbrs = sorted(neighbours[victim])
        target = max(nbrs, key=lambda j: (sizes[j], -j))
        sizes[target] += sizes[victim]
        sizes[victim] = 0
        alive[victim] = False
        parent[victim] = target
        for j in nbrs:
            neighbours[j].discard(victim)
            if j != target:
                neighbours[j].add(target)
                neighbours[target].add(j)
        neighbours[victim] = set()

    # resolve merge chains
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    merged = root[comp]
    return Segmentation(_relabel(merged), seg.n_segments_requested, seg.resolution_tag)


def is_four_connected(labels: np.ndarray) -> bool:
    for lab in np.unique(labels):
        _, n = ndimage.label(labels == lab, structure=_FOUR_CONN)
        if n != 1:
            return False
    return True


# -- statistics ---------------------------------------------------------------

def compactness_score(area: int, perimeter: int) -> float:
    """Area over the area of the circle with the same perimeter, ``4*pi*A/P**2``."""
    if perimeter <= 0:
        raise ValueError(f"perimeter must be positive, got {perimeter}")
    if area < 1:
        raise ValueError(f"area must be at least 1, got {area}")
    return 4.0 * math.pi * area / (perimeter * perimeter)


def _icv_from_moments(n: int, s1: np.ndarray, s2: np.ndarray) -> float:
    # integer moments keep the variance exact before the final sqrt
    total = 0.0
    for a, b in zip(s1.tolist(), s2.tolist()):
        total += math.sqrt(n * b - a * a) / (n * 255.0)
    return total / 3.0


def icv_score(image: np.ndarray, seg: Segmentation | np.ndarray, label: int) -> float:
    """Mean over the three channels of the population std (channels in [0, 1])."""
    labels = seg.labels if isinstance(seg, Segmentation) else np.asarray(seg)
    mask = labels == label
    n = int(mask.sum())
    if n == 0:
        raise SegmentationError(f"label {label} not present in segmentation")
    px = image[mask].astype(np.int64)
    return _icv_from_moments(n, px.sum(axis=0), (px * px).sum(axis=0))


def perimeters(labels: np.ndarray) -> np.ndarray:
    """Unit edges between each label and other labels or the image border."""
    n = int(labels.max()) + 1
    out = np.zeros(n, dtype=np.int64)
    h_diff = labels[:, :-1] != labels[:, 1:]
    v_diff = labels[:-1, :] != labels[1:, :]
    for arr in (labels[:, :-1][h_diff], labels[:, 1:][h_diff],
                labels[:-1, :][v_diff], labels[1:, :][v_diff],
                labels[0, :], labels[-1, :], labels[:, 0], labels[:, -1]):
        out += np.bincount(arr.ravel(), minlength=n)
    return out


def all_superpixel_stats(image: np.ndarray, seg: Segmentation | np.ndarray) -> list[SuperpixelStats]:
    labels = seg.labels if isinstance(seg, Segmentation) else np.asarray(seg)
    height, width = labels.shape
    n = int(labels.max()) + 1
    flat = labels.ravel()
    area = np.bincount(flat, minlength=n)
    perim = perimeters(labels)
    ys, xs = np.divmod(np.arange(flat.size), width)
    sum_x = np.bincount(flat, weights=xs, minlength=n)
    sum_y = np.bincount(flat, weights=ys, minlength=n)
    x0 = np.full(n, width)
    y0 = np.full(n, height)
    x1 = np.full(n, -1)
    y1 = np.full(n, -1)
    np.minimum.at(x0, flat, xs)
    np.minimum.at(y0, flat, ys)
    np.maximum.at(x1, flat, xs)
    np.maximum.at(y1, flat, ys)
    px = image.reshape(-1, 3).astype(np.int64)
    s1 = np.zeros((n, 3), dtype=np.int64)
    s2 = np.zeros((n, 3), dtype=np.int64)
    for c in range(3):
        s1[:, c] = _int_bincount(flat, px[:, c], n)
        s2[:, c] = _int_bincount(flat, px[:, c] * px[:, c], n)
    out = []
    for lab in range(n):
        if area[lab] == 0:
            raise SegmentationError(f"label ids are not contiguous: {lab} is empty")
        out.append(SuperpixelStats(
            label=lab,
            area=int(area[lab]),
            perimeter=int(perim[lab]),
            co=compactness_score(int(area[lab]), int(perim[lab])),
            icv=_icv_from_moments(int(area[lab]), s1[lab], s2[lab]),
            cx=float(sum_x[lab] / area[lab]),
            cy=float(sum_y[lab] / area[lab]),
            bbox=(int(x0[lab]), int(y0[lab]), int(x1[lab]), int(y1[lab])),
        ))
    return out


def _int_bincount(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.int64)
    np.add.at(out, idx, values)
    return out


def superpixel_stats(image: np.ndarray, seg: Segmentation | np.ndarray, label: int) -> SuperpixelStats:
    labels = seg.labels if isinstance(seg, Segmentation) else np.asarray(seg)
    mask = labels == label
    if not mask.any():
        raise SegmentationError(f"label {label} not present: corrupt segmentation")
    ys, xs = np.nonzero(mask)
    area = int(mask.sum())
    padded = np.pad(mask, 1, constant_values=False)
    perimeter = int((padded[1:, :] != padded[:-1, :]).sum() + (padded[:, 1:] != padded[:, :-1]).sum())
    return SuperpixelStats(
        label=int(label),
        area=area,
        perimeter=perimeter,
        co=compactness_score(area, perimeter),
        icv=icv_score(image, labels, label),
        cx=float(xs.mean()),
        cy=float(ys.mean()),
        bbox=(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())),
    )


def write_stats_csv(rows: list[tuple[str, str, SuperpixelStats]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(STATS_HEADER)
        for image_id, res, st in rows:
            writer.writerow([image_id, res, st.label, st.area, st.perimeter,
                             repr(st.co), repr(st.icv), repr(st.cx), repr(st.cy), *st.bbox])


def read_stats_csv(path: str | Path) -> dict[tuple[str, str, int], SuperpixelStats]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            st = SuperpixelStats(
                label=int(row["label"]), area=int(row["area"]), perimeter=int(row["perimeter"]),
                co=float(row["co"]), icv=float(row["icv"]), cx=float(row["cx"]), cy=float(row["cy"]),
                bbox=(int(row["x0"]), int(row["y0"]), int(row["x1"]), int(row["y1"])),
            )
            out[(row["image_id"], row["resolution"], st.label)] = st
    return out
