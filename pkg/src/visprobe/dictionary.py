"""Visual-word dictionary: per-class concepts, global words, sentences."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .embedding import EmbeddingStore, parse_superpixel_id, read_embedding_store, write_embedding_store

log = logging.getLogger(__name__)

CONCEPT_HEADER = ["word_id", "concept_index", "class_label", "member_count", "importance"]
SENTENCE_HEADER = ["image_id", "resolution", "label", "word_id"]


class DictionaryError(ValueError):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: list[float]
    n_iter: int

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=len(self.centroids))


def _sq_dists(points: np.ndarray, centroids: np.ndarray, chunk: int = 2048) -> np.ndarray:
    # direct differences: the expanded form loses exact ties to cancellation
    out = np.empty((len(points), len(centroids)))
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        out[start:start + chunk] = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = ((points - points[chosen[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a center already; reuse one at random
            idx = int(rng.integers(n))
        chosen.append(idx)
        closest = np.minimum(closest, ((points - points[idx]) ** 2).sum(1))
    return points[chosen].copy()


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8,
           n_init: int = 1) -> KMeansResult:
    """Lloyd's k-means with k-means++ seeding.

    Empty clusters are re-seeded at the point farthest from its centroid.
    Assignment ties go to the lowest centroid index. ``objective`` holds the
    sum of squared distances after every assignment step. With ``n_init > 1``
    the seeding is repeated from one generator and the run with the lowest
    final objective is kept (earliest on ties).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise DictionaryError("points must be a 2-D array")
    n = len(points)
    if n < k:
        raise DictionaryError(f"need at least k={k} points, got {n}")
    if k < 1:
        raise DictionaryError("k must be positive")
    if n_init < 1:
        raise DictionaryError("n_init must be positive")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        res = _lloyd(points, k, rng, max_iter, tol)
        if best is None or res.objective[-1] < best.objective[-1]:
            best = res
    return best


def _lloyd(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int,
           tol: float) -> KMeansResult:
    n = len(points)
    centroids = _kmeans_pp(points, k, rng)
    objective: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(points, centroids)
        assign = np.argmin(d, axis=1)
        point_d = d[np.arange(n), assign]
        counts = np.bincount(assign, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            far = int(np.argmax(point_d))
            if point_d[far] <= 0.0:
                break
            assign[far] = empty
            point_d[far] = 0.0
            counts = np.bincount(assign, minlength=k)
        objective.append(float(point_d.sum()))
        new = centroids.copy()
        for j in range(k):
            members = assign == j
            if members.any():
                new[j] = points[members].mean(axis=0)
        shift = float(np.sqrt(((new - centroids) ** 2).sum(1)).max())
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(points, centroids)
    final = np.argmin(d, axis=1)
    if not np.array_equal(final, assign):
        assign = final
        objective.append(float(d[np.arange(n), assign].sum()))
    return KMeansResult(centroids, assign, objective, it)


# -- concepts -----------------------------------------------------------------

@dataclass
class Concept:
    centroid: np.ndarray
    class_label: str
    member_count: int
    importance_score: float | None = None
    index: int = -1


def build_concepts(
    store: EmbeddingStore,
    class_of: Mapping[str, str],
    k_per_class: int = 25,
    seed: int = 0,
    *,
    max_iter: int = 300,
    tol: float = 1e-8,
    n_init: int = 1,
    warnings: list[str] | None = None,
) -> list[Concept]:
    """Cluster superpixel embeddings class by class; every cluster is a concept."""
    if store.role != "dictionary":
        raise DictionaryError(f"concepts need a dictionary-role store, got {store.role!r}")
    by_class: dict[str, list[str]] = {}
    for entity_id in store.ids():
        image_id = parse_superpixel_id(entity_id)[0]
        if image_id not in class_of:
            raise DictionaryError(f"{entity_id}: image {image_id!r} has no class")
        by_class.setdefault(class_of[image_id], []).append(entity_id)

    concepts: list[Concept] = []
    for ci, cls in enumerate(sorted(by_class)):
        ids = by_class[cls]
        k = k_per_class
        if len(ids) < k:
            msg = f"class {cls!r}: {len(ids)} superpixels < k={k}; using k={len(ids)}"
            log.warning(msg)
            if warnings is not None:
                warnings.append(msg)
            k = len(ids)
        res = kmeans(store.matrix(ids), k, seed=seed + ci, max_iter=max_iter, tol=tol,
                     n_init=n_init)
        for j, count in enumerate(res.counts):
            concepts.append(Concept(res.centroids[j], cls, int(count), index=len(concepts)))
    return concepts


def filter_concepts(
    concepts: Sequence[Concept],
    min_frequency: int = 10,
    importance_scores: Mapping[int, float] | None = None,
    keep_count: int | None = None,
) -> list[Concept]:
    """Drop infrequent concepts, then keep the ``keep_count`` most important.

    Ranking is by importance score (descending), then member count, then the
    original concept index. Without scores, member count alone decides.
    """
    if importance_scores is not None:
        concepts = [
            Concept(c.centroid, c.class_label, c.member_count,
                    importance_scores.get(c.index, c.importance_score), c.index)
            for c in concepts
        ]
    survivors = [c for c in concepts if c.member_count >= min_frequency]
    if keep_count is None:
        return survivors
    if keep_count > len(survivors):
        raise DictionaryError(
            f"keep_count={keep_count} exceeds {len(survivors)} concepts left after the "
            f"frequency filter (of {len(concepts)})")
    has_scores = any(c.importance_score is not None for c in survivors)

    def key(c: Concept):
        score = c.importance_score if c.importance_score is not None else -math.inf
        return (-score if has_scores else 0.0, -c.member_count, c.index)

    return sorted(survivors, key=key)[:keep_count]


@dataclass
class VisualWordDictionary:
    concept_centroids: np.ndarray
    concept_to_word: np.ndarray
    concepts: list[Concept] = field(default_factory=list)

    @property
    def n_words(self) -> int:
        return int(self.concept_to_word.max()) + 1

    @property
    def dim(self) -> int:
        return self.concept_centroids.shape[1]

    def nearest_concepts(self, embeddings) -> np.ndarray:
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if emb.shape[1] != self.dim:
            raise DictionaryError(f"embedding dim {emb.shape[1]} != dictionary dim {self.dim}")
        return np.argmin(_sq_dists(emb, self.concept_centroids), axis=1)

    def assign(self, embeddings) -> np.ndarray:
        """Two-stage lookup: nearest concept, then that concept's word."""
        return self.concept_to_word[self.nearest_concepts(embeddings)]


def assign_word(embedding, dictionary: VisualWordDictionary) -> int:
    emb = np.asarray(embedding, dtype=np.float64).reshape(-1)
    if emb.shape[0] != dictionary.dim:
        raise DictionaryError(f"embedding dim {emb.shape[0]} != dictionary dim {dictionary.dim}")
    return int(dictionary.assign(emb)[0])


def build_dictionary(concepts: Sequence[Concept], n_words: int = 50, seed: int = 0,
                     max_iter: int = 300, tol: float = 1e-8, n_init: int = 1
                     ) -> VisualWordDictionary:
    if len(concepts) < n_words:
        raise DictionaryError(f"{len(concepts)} concepts cannot form {n_words} words")
    centroids = np.stack([c.centroid for c in concepts]).astype(np.float64)
    res = kmeans(centroids, n_words, seed=seed, max_iter=max_iter, tol=tol, n_init=n_init)
    # renumber words by first appearance so ids are contiguous and every word is non-empty
    _, first = np.unique(res.assignments, return_index=True)
    order = res.assignments[np.sort(first)]
    remap = {int(w): i for i, w in enumerate(order)}
    concept_to_word = np.array([remap[int(w)] for w in res.assignments], dtype=np.int64)
    return VisualWordDictionary(centroids, concept_to_word, list(concepts))


def save_dictionary(dictionary: VisualWordDictionary, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "concepts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONCEPT_HEADER)
        for i, c in enumerate(dictionary.concepts):
            imp = "" if c.importance_score is None else repr(float(c.importance_score))
            w.writerow([int(dictionary.concept_to_word[i]), i, c.class_label, c.member_count, imp])
    store = EmbeddingStore("dictionary", dictionary.dim,
                           {str(i): v for i, v in enumerate(dictionary.concept_centroids)})
    write_embedding_store(store, directory / "centroids.vpeb")


def load_dictionary(directory: str | Path) -> VisualWordDictionary:
    directory = Path(directory)
    store = read_embedding_store(directory / "centroids.vpeb", expected_role="dictionary")
    concepts, words = [], []
    with open(directory / "concepts.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            i = int(row["concept_index"])
            imp = float(row["importance"]) if row["importance"] else None
            concepts.append(Concept(store[str(i)].astype(np.float64), row["class_label"],
                                    int(row["member_count"]), imp, i))
            words.append(int(row["word_id"]))
    centroids = np.stack([c.centroid for c in concepts])
    return VisualWordDictionary(centroids, np.array(words, dtype=np.int64), concepts)


def read_importance_scores(path: str | Path) -> dict[int, float]:
    """CSV ``concept_index,importance`` (e.g. externally computed TCAV scores)."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            out[int(row["concept_index"])] = float(row["importance"])
    return out


# -- sentences ----------------------------------------------------------------

@dataclass
class VisualSentence:
    image_id: str
    assignments: dict[tuple[str, int], int]

    @property
    def unique_words(self) -> frozenset[int]:
        return frozenset(self.assignments.values())

    @property
    def sentence_length(self) -> int:
        return len(self.unique_words)

    def words_at(self, resolution: str) -> frozenset[int]:
        return frozenset(w for (res, _), w in self.assignments.items() if res == resolution)

    def length_at(self, resolution: str | None = None) -> int:
        return self.sentence_length if resolution is None else len(self.words_at(resolution))


def build_sentence(image_id: str, assignments: Mapping[tuple[str, int], int],
                   expected: Iterable[tuple[str, int]] | None = None) -> VisualSentence:
    """Collect per-superpixel word ids of one image.

    ``expected`` lists the (resolution, label) keys that must be covered.
    """
    assignments = dict(assignments)
    if expected is not None:
        missing = [key for key in expected if key not in assignments]
        if missing:
            raise DictionaryError(f"{image_id}: no word for superpixels {missing[:5]}")
    if not assignments:
        raise DictionaryError(f"{image_id}: empty sentence")
    return VisualSentence(image_id, assignments)


@dataclass
class CooccurrenceMatrix:
    counts: np.ndarray
    n_images: int


def cooccurrence_matrix(sentences: Sequence[VisualSentence] | Sequence[Iterable[int]],
                        n_words: int) -> CooccurrenceMatrix:
    if len(sentences) == 0:
        raise DictionaryError("co-occurrence needs at least one sentence")
    presence = np.zeros((len(sentences), n_words), dtype=np.int64)
    for i, s in enumerate(sentences):
        words = s.unique_words if isinstance(s, VisualSentence) else set(s)
        presence[i, list(words)] = 1
    return CooccurrenceMatrix(presence.T @ presence, len(sentences))


def write_sentences(sentences: Sequence[VisualSentence], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SENTENCE_HEADER)
        for s in sentences:
            for (res, label), word in s.assignments.items():
                w.writerow([s.image_id, res, label, word])


def read_sentences(path: str | Path) -> dict[str, VisualSentence]:
    grouped: dict[str, dict[tuple[str, int], int]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            grouped.setdefault(row["image_id"], {})[(row["resolution"], int(row["label"]))] = \
                int(row["word_id"])
    return {k: VisualSentence(k, v) for k, v in grouped.items()}
