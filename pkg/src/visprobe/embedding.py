"""Superpixel patches, the toy encoder and the binary embedding store.

Store layout (little-endian)::

    b"VPEB" | u32 version=1 | u8 role | u32 dim | u64 count
    count x ( u16 id_len | id bytes (UTF-8) | dim x float32 )
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .imaging import Segmentation, compactness_score

MAGIC = b"VPEB"
VERSION = 1
ROLES = ("dictionary", "representation")
TOY_DIM = 37
MEAN_GRAY = (128, 128, 128)

_HEADER = struct.Struct("<4sIBIQ")


class StoreError(ValueError):
    """Base class for embedding-store problems."""


class BadMagicError(StoreError):
    pass


class VersionMismatchError(StoreError):
    pass


class TruncatedRecordError(StoreError):
    pass


class DimMismatchError(StoreError):
    pass


class NonFiniteError(StoreError):
    pass


class RoleMismatchError(StoreError):
    pass


class DuplicateIdError(StoreError):
    pass


@dataclass
class EmbeddingStore:
    """Vectors keyed by entity id, all of one encoder role.

    ``encoder_name`` is not part of the binary format and is ignored by
    equality; the pipeline keeps it in a JSON sidecar.
    """

    role: str
    dim: int
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    encoder_name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")
        self.entries = {k: self._coerce(v) for k, v in self.entries.items()}

    def _coerce(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype="<f4").reshape(-1)
        if vec.shape[0] != self.dim:
            raise DimMismatchError(f"vector of length {vec.shape[0]} in a dim-{self.dim} store")
        return vec

    def add(self, entity_id: str, vector) -> None:
        if entity_id in self.entries:
            raise DuplicateIdError(f"duplicate id {entity_id!r}")
        self.entries[entity_id] = self._coerce(vector)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self.entries

    def __getitem__(self, entity_id: str) -> np.ndarray:
        return self.entries[entity_id]

    def ids(self) -> list[str]:
        return list(self.entries)

    def matrix(self, ids: Iterable[str] | None = None) -> np.ndarray:
        ids = self.ids() if ids is None else list(ids)
        if not ids:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([self.entries[i] for i in ids]).astype(np.float64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        if (self.role, self.dim, list(self.entries)) != (other.role, other.dim, list(other.entries)):
            return False
        return all(self.entries[k].tobytes() == other.entries[k].tobytes() for k in self.entries)


def store_to_bytes(store: EmbeddingStore) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, ROLES.index(store.role), store.dim, len(store.entries))]
    for entity_id, vec in store.entries.items():
        if vec.shape != (store.dim,):
            raise DimMismatchError(f"{entity_id!r}: length {vec.shape} != dim {store.dim}")
        if not np.isfinite(vec).all():
            raise NonFiniteError(f"{entity_id!r}: vector contains non-finite values")
        raw_id = entity_id.encode("utf-8")
        if len(raw_id) > 0xFFFF:
            raise StoreError(f"id too long ({len(raw_id)} bytes)")
        parts.append(struct.pack("<H", len(raw_id)))
        parts.append(raw_id)
        parts.append(vec.astype("<f4").tobytes())
    return b"".join(parts)


def store_from_bytes(data: bytes) -> EmbeddingStore:
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise BadMagicError("not an embedding store")
        raise TruncatedRecordError("file shorter than the header")
    magic, version, role, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}, expected {VERSION}")
    if role >= len(ROLES):
        raise StoreError(f"unknown role byte {role}")
    store = EmbeddingStore(ROLES[role], dim)
    pos = _HEADER.size
    vec_bytes = 4 * dim
    view = memoryview(data)
    for i in range(count):
        if pos + 2 > len(data):
            raise TruncatedRecordError(f"record {i}: missing id length")
        (id_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + id_len + vec_bytes > len(data):
            raise TruncatedRecordError(f"record {i}: expected {id_len + vec_bytes} bytes")
        entity_id = bytes(view[pos:pos + id_len]).decode("utf-8")
        pos += id_len
        vec = np.frombuffer(view[pos:pos + vec_bytes], dtype="<f4").copy()
        pos += vec_bytes
        if entity_id in store.entries:
            raise DuplicateIdError(f"duplicate id {entity_id!r}")
        store.entries[entity_id] = vec
    if pos != len(data):
        raise DimMismatchError(
            f"{len(data) - pos} trailing bytes: records do not match dim {dim} x {count}")
    return store


def write_embedding_store(store: EmbeddingStore, path: str | Path) -> None:
    data = store_to_bytes(store)
    Path(path).write_bytes(data)


def read_embedding_store(path: str | Path, *, expected_role: str | None = None,
                         expected_dim: int | None = None) -> EmbeddingStore:
    store = store_from_bytes(Path(path).read_bytes())
    if expected_role is not None and store.role != expected_role:
        raise RoleMismatchError(f"{path}: role {store.role!r}, expected {expected_role!r}")
    if expected_dim is not None and store.dim != expected_dim:
        raise DimMismatchError(f"{path}: dim {store.dim}, expected {expected_dim}")
    return store


# -- patches ------------------------------------------------------------------

@dataclass
class Patch:
    pixels: np.ndarray  # (T, T, 3) uint8
    mask: np.ndarray  # (T, T) bool, superpixel footprint after letterboxing
    provenance: tuple[str, str, int]
    area_fraction: float
    co: float


def _nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape[:2]
    rows = np.minimum((np.arange(out_h) * in_h) // out_h, in_h - 1)
    cols = np.minimum((np.arange(out_w) * in_w) // out_w, in_w - 1)
    return arr[rows[:, None], cols[None, :]]


def prepare_patch(
    image: np.ndarray,
    seg: Segmentation | np.ndarray,
    label: int,
    target_size: int = 224,
    fill_policy: str = "mean-gray",
    *,
    dataset_mean: tuple[int, int, int] | None = None,
    provenance: tuple[str, str, int] = ("", "", -1),
) -> Patch:
    """Crop a superpixel's bounding box and letterbox it onto a square canvas.

    Pixels outside the superpixel, and the letterbox margins, take the fill
    colour. Resampling is nearest-neighbour so patches are bit-reproducible.
    """
    labels = seg.labels if isinstance(seg, Segmentation) else np.asarray(seg)
    mask = labels == label
    area = int(mask.sum())
    if area == 0:
        raise ValueError(f"superpixel {label} has zero area")
    if fill_policy == "mean-gray":
        fill = np.array(MEAN_GRAY, dtype=np.uint8)
    elif fill_policy == "dataset-mean":
        if dataset_mean is None:
            raise ValueError("fill_policy 'dataset-mean' needs dataset_mean")
        fill = np.asarray(dataset_mean, dtype=np.uint8)
    else:
        raise ValueError(f"unknown fill policy {fill_policy!r}")

    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    crop = image[y0:y1, x0:x1].copy()
    crop_mask = mask[y0:y1, x0:x1]
    crop[~crop_mask] = fill
    bh, bw = crop_mask.shape
    scale = target_size / max(bh, bw)
    nh = max(1, min(target_size, int(round(bh * scale))))
    nw = max(1, min(target_size, int(round(bw * scale))))
    canvas = np.empty((target_size, target_size, 3), dtype=np.uint8)
    canvas[:] = fill
    canvas_mask = np.zeros((target_size, target_size), dtype=bool)
    oy, ox = (target_size - nh) // 2, (target_size - nw) // 2
    canvas[oy:oy + nh, ox:ox + nw] = _nearest_resize(crop, nh, nw)
    canvas_mask[oy:oy + nh, ox:ox + nw] = _nearest_resize(crop_mask, nh, nw)

    # perimeter of the superpixel in the source image
    padded = np.pad(mask, 1)
    perim = int((padded[1:, :] != padded[:-1, :]).sum() + (padded[:, 1:] != padded[:, :-1]).sum())
    return Patch(canvas, canvas_mask, provenance, area / mask.size, compactness_score(area, perim))


def full_image_patch(image: np.ndarray, target_size: int = 224,
                     provenance: tuple[str, str, int] = ("", "", -1)) -> Patch:
    """Patch for a whole image (the superpixel covering everything)."""
    return prepare_patch(image, np.zeros(image.shape[:2], dtype=np.int32), 0, target_size,
                         provenance=provenance)


# -- toy encoder ----------------------------------------------------------------

def _orientation_histogram(gray: np.ndarray, mask: np.ndarray, n_bins: int = 8) -> np.ndarray:
    h, w = gray.shape
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    # central differences, only where both neighbours lie inside the mask
    ok_x = np.zeros_like(mask)
    ok_x[:, 1:-1] = mask[:, :-2] & mask[:, 2:] & mask[:, 1:-1]
    ok_y = np.zeros_like(mask)
    ok_y[1:-1, :] = mask[:-2, :] & mask[2:, :] & mask[1:-1, :]
    if w > 2:
        gx[:, 1:-1] = (gray[:, 2:] - gray[:, :-2]) / 2.0
    if h > 2:
        gy[1:-1, :] = (gray[2:, :] - gray[:-2, :]) / 2.0
    gx = np.where(ok_x, gx, 0.0)
    gy = np.where(ok_y, gy, 0.0)
    mag = np.hypot(gx, gy)
    hist = np.zeros(n_bins)
    moving = mag > 1e-12
    if moving.any():
        theta = np.mod(np.arctan2(gy[moving], gx[moving]), np.pi)
        bins = np.rint(theta / (np.pi / n_bins)).astype(int) % n_bins
        # halved central differences bound |g| by sqrt(0.5)
        hist = np.bincount(bins, weights=mag[moving] / math.sqrt(0.5), minlength=n_bins)
    return np.clip(hist / max(int(mask.sum()), 1), 0.0, 1.0)


def toy_encode(patch: Patch) -> np.ndarray:
    """37-d hand-crafted descriptor of a patch, every component in [0, 1].

    Layout: mean RGB (3) | 8-bin histogram per channel (24) | area fraction (1)
    | compactness (1) | 8-bin gradient-orientation histogram (8). Statistics
    use only pixels inside the patch mask.
    """
    mask = patch.mask
    n = int(mask.sum())
    if n == 0:
        raise ValueError("patch mask is empty")
    px = patch.pixels[mask]
    mean = px.mean(axis=0) / 255.0
    hists = [np.bincount(px[:, c] // 32, minlength=8) / n for c in range(3)]
    gray = patch.pixels.astype(np.float64).mean(axis=2) / 255.0
    grad = _orientation_histogram(gray, mask)
    return np.concatenate([
        mean, *hists, [min(patch.area_fraction, 1.0)], [min(patch.co, 1.0)], grad,
    ]).astype(np.float64)


def toy_encode_segmentation(image: np.ndarray, labels: np.ndarray, target_size: int,
                            fill_policy: str = "mean-gray",
                            dataset_mean: tuple[int, int, int] | None = None) -> np.ndarray:
    """Encode every superpixel of one label map; row ``i`` is label ``i``."""
    n = int(labels.max()) + 1
    out = np.empty((n, TOY_DIM))
    for lab in range(n):
        out[lab] = toy_encode(prepare_patch(image, labels, lab, target_size, fill_policy,
                                            dataset_mean=dataset_mean))
    return out


def superpixel_id(image_id: str, resolution: str, label: int) -> str:
    return f"{image_id}/{resolution}/{label}"


def parse_superpixel_id(entity_id: str) -> tuple[str, str, int]:
    image_id, resolution, label = entity_id.rsplit("/", 2)
    return image_id, resolution, int(label)


__all__ = [
    "EmbeddingStore", "Patch", "prepare_patch", "full_image_patch", "toy_encode",
    "write_embedding_store", "read_embedding_store", "StoreError", "BadMagicError",
    "VersionMismatchError", "TruncatedRecordError", "DimMismatchError", "NonFiniteError",
    "RoleMismatchError", "DuplicateIdError", "superpixel_id", "parse_superpixel_id",
]
