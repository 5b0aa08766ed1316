import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from visprobe.dictionary import CooccurrenceMatrix, VisualSentence, cooccurrence_matrix
from visprobe.embedding import EmbeddingStore
from visprobe.imaging import SuperpixelStats
from visprobe.tasks import (
    TABLE3_BINS, BinSpec, Candidate, SomoInstance, SomoSkip, TaskError, admissible_words,
    balance_somo, cb_labels, equal_frequency_bins, mwc_build_pairs, mwc_distance_bins,
    sl_label, somo_generate, somo_select_target, somo_split_plan, wc_labels,
)
from visprobe.tasks import MwcPair, _pair_from_index


def _sentence(words, image_id="i"):
    return VisualSentence(image_id, {("fine", k): int(w) for k, w in enumerate(sorted(words))})


def _stats(co, icv):
    return SuperpixelStats(0, 1, 4, co, icv, 0.0, 0.0, (0, 0, 0, 0))


class TestBins:
    def test_table3_sl(self):
        bins = TABLE3_BINS["SL"]
        assert [sl_label(_sentence(range(n)), bins) for n in (17, 21, 28)] == [0, 2, 5]

    def test_table3_cb(self):
        shape, color = TABLE3_BINS["CBshape"], TABLE3_BINS["CBcolor"]
        assert cb_labels(_stats(0.20, 0.09), shape, color) == (1, 2)
        assert cb_labels(_stats(0.50, 0.16), shape, color) == (5, 5)
        assert all(b.n_bins == 6 for b in TABLE3_BINS.values())

    def test_equal_frequency_600(self):
        spec = equal_frequency_bins(np.arange(1, 601), 6)
        assert spec.edges == (101, 201, 301, 401, 501)
        assert np.bincount(spec.classify(np.arange(1, 601))).tolist() == [100] * 6

    def test_equal_frequency_errors(self):
        with pytest.raises(TaskError):
            equal_frequency_bins([3.0] * 20)
        with pytest.raises(TaskError):
            equal_frequency_bins([1, 2, 3])

    def test_bad_edges(self):
        with pytest.raises(TaskError):
            BinSpec((1.0, 1.0))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 40), min_size=30, max_size=200))
    def test_edges_increasing_and_total(self, values):
        if len(set(values)) < 6:
            return
        spec = equal_frequency_bins(values)
        assert all(b > a for a, b in zip(spec.edges, spec.edges[1:]))
        cls = spec.classify(values)
        assert ((cls >= 0) & (cls < 6)).all()

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-1e3, 1e3, allow_nan=False))
    def test_total(self, value):
        assert 0 <= TABLE3_BINS["CBshape"](value) <= 5


class TestWc:
    def test_flags(self):
        flags = wc_labels(_sentence({3, 7}))
        assert flags.sum() == 2 and flags[3] == flags[7] == 1
        assert wc_labels(_sentence(range(50))).sum() == 50

    @settings(max_examples=30, deadline=None)
    @given(st.sets(st.integers(0, 49), min_size=1))
    def test_membership(self, words):
        flags = wc_labels(_sentence(words))
        assert all(bool(flags[w]) == (w in words) for w in range(50))


class TestSomoTarget:
    def test_degenerate(self):
        labels = np.arange(64 * 64).reshape(64, 64)
        assert all(somo_select_target(labels, 0.0, seed=s) == labels[32, 32] for s in range(5))

    def test_seeded(self):
        labels = np.arange(64 * 64).reshape(64, 64)
        assert somo_select_target(labels, 0.25, 11) == somo_select_target(labels, 0.25, 11)

    def test_quadrant_frequencies(self):
        # off-centre split so the four masses differ
        h = w = 64
        xs, ys = 20, 24
        labels = np.zeros((h, w), dtype=int)
        labels[:, xs:] += 1
        labels[ys:, :] += 2
        rng = np.random.default_rng(0)
        draws = np.bincount([somo_select_target(labels, 0.25, rng) for _ in range(10_000)],
                            minlength=4)

        def mass(lo, hi, centre, sd, length):
            z = norm.cdf(length, centre, sd) - norm.cdf(0, centre, sd)
            return (norm.cdf(hi, centre, sd) - norm.cdf(lo, centre, sd)) / z

        px = [mass(0, xs, 32, 16, w), mass(xs, w, 32, 16, w)]
        py = [mass(0, ys, 32, 16, h), mass(ys, h, 32, 16, h)]
        for q in range(4):
            p = py[q // 2] * px[q % 2]
            sd = math.sqrt(10_000 * p * (1 - p))
            assert abs(draws[q] - 10_000 * p) <= 3 * sd, (q, draws[q], 10_000 * p)


def _somo_setup():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    labels = np.zeros((32, 32), dtype=int)
    labels[:, 16:] += 1
    labels[16:, :] += 2  # centre pixel (16, 16) lies in label 3
    words = {0: 0, 1: 1, 2: 2, 3: 3}
    counts = np.full((6, 6), 5)
    counts[3, 4] = counts[4, 3] = 0
    cooc = CooccurrenceMatrix(counts, 10)
    src = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    candidates = [Candidate(f"other{v}", "medium", 0, v, 256, src) for v in (0, 1, 2, 4, 5)]
    return image, labels, words, cooc, candidates


class TestSomoGenerate:
    def test_far_takes_unique_zero(self):
        image, labels, words, cooc, cands = _somo_setup()
        inst = somo_generate(image, labels, words, cooc, cands, "far", sigma_frac=0.0,
                             image_id="base")
        assert isinstance(inst, SomoInstance)
        assert inst.target_word == 3 and inst.replacement_word == 4
        assert inst.target == ("medium", 3)

    def test_only_mask_changes(self):
        image, labels, words, cooc, cands = _somo_setup()
        for seed in range(10):
            inst = somo_generate(image, labels, words, cooc, cands, "close", seed=seed,
                                 image_id="base")
            diff = (inst.pixels != image).any(axis=2)
            assert not diff[~inst.altered_mask].any()
            assert inst.replacement_word != inst.target_word

    def test_shape_tolerance_skip(self):
        image, labels, words, cooc, cands = _somo_setup()
        tiny = [Candidate(c.image_id, c.resolution, c.label, c.word, 10, c.crop) for c in cands]
        out = somo_generate(image, labels, words, cooc, tiny, "far", sigma_frac=0.0)
        assert isinstance(out, SomoSkip) and "shape" in out.reason
        out = somo_generate(image, labels, words, cooc, [], "far", sigma_frac=0.0)
        assert isinstance(out, SomoSkip)

    def test_own_image_excluded(self):
        image, labels, words, cooc, cands = _somo_setup()
        own = [Candidate("base", "medium", 0, 4, 256, cands[0].crop)]
        assert isinstance(somo_generate(image, labels, words, cooc, own, "far",
                                        sigma_frac=0.0, image_id="base"), SomoSkip)

    def test_admissible_quartiles(self):
        cooc = cooccurrence_matrix([{0, 1}, {0, 1}, {0, 2}, {0, 3}, {0, 1, 4}], 5)
        assert admissible_words(0, cooc, {1, 2, 3, 4}, "close") == [1]
        assert admissible_words(0, cooc, {1, 2, 3, 4}, "far") == [2]
        with pytest.raises(TaskError):
            admissible_words(0, cooc, {1}, "near")

    def test_split_and_balance(self):
        ids = [f"i{k}" for k in range(11)]
        alter, keep = somo_split_plan(ids, 3)
        assert len(alter) == len(keep) == 5 and not set(alter) & set(keep)
        assert somo_split_plan(ids, 3) == (alter, keep)
        image = np.zeros((8, 8, 3), dtype=np.uint8)
        altered = [SomoInstance(i, True, "far", image) for i in alter[:3]]
        out = balance_somo(altered, keep, {i: image for i in ids}, "far")
        assert sum(x.altered for x in out) == sum(not x.altered for x in out) == 3
        assert all(x.target is None for x in out if not x.altered)


def _mwc_setup(n=12, seed=0):
    rng = np.random.default_rng(seed)
    store = EmbeddingStore("representation", 5)
    sentences = {}
    for i in range(n):
        store.add(f"i{i}", rng.normal(size=5))
        sentences[f"i{i}"] = _sentence(set(rng.integers(0, 10, 4).tolist()), f"i{i}")
    return store, sentences


class TestMwc:
    def test_pair_index(self):
        pairs = [_pair_from_index(k, 7) for k in range(21)]
        assert pairs == [(i, j) for i in range(7) for j in range(i + 1, 7)]

    def test_intersection_oracle(self):
        store, sentences = _mwc_setup()
        pairs = mwc_build_pairs(store.ids(), store, sentences, 40, seed=1, n_words=10)
        assert len({p.entity_id for p in pairs}) == 40
        for p in pairs:
            shared = sentences[p.image_a].unique_words & sentences[p.image_b].unique_words
            assert set(np.flatnonzero(p.labels).tolist()) == shared
            u, v = store[p.image_a].astype(float), store[p.image_b].astype(float)
            assert abs(p.cosine_distance - (1 - u @ v / np.linalg.norm(u) / np.linalg.norm(v))) < 1e-9

    def test_identical_and_disjoint(self):
        store = EmbeddingStore("representation", 2, {"a": [1, 2], "b": [1, 2], "c": [-2, 1]})
        sentences = {"a": _sentence({1, 2}), "b": _sentence({1, 2}), "c": _sentence({5})}
        pairs = {p.entity_id: p for p in mwc_build_pairs(["a", "b", "c"], store, sentences, 3,
                                                         n_words=6)}
        assert abs(pairs["a|b"].cosine_distance) < 1e-12
        assert np.array_equal(pairs["a|b"].labels, wc_labels(sentences["a"], 6))
        assert pairs["a|c"].labels.sum() == 0

    def test_errors(self):
        store, sentences = _mwc_setup(4)
        with pytest.raises(TaskError):
            mwc_build_pairs(store.ids(), store, sentences, 7)
        with pytest.raises(TaskError):
            mwc_build_pairs(store.ids(), EmbeddingStore("dictionary", 5), sentences, 1)

    def test_equal_count_bins(self):
        rng = np.random.default_rng(0)
        pairs = [MwcPair(f"a{i}", "b", float(d), np.zeros(2)) for i, d in enumerate(rng.random(100))]
        binned = mwc_distance_bins(pairs, 10)
        by_bin = [sorted(p.cosine_distance for p in binned if p.distance_bin == b) for b in range(10)]
        assert [len(b) for b in by_bin] == [10] * 10
        assert by_bin[0] == sorted(p.cosine_distance for p in pairs)[:10]
        assert all(by_bin[b][-1] <= by_bin[b + 1][0] for b in range(9))

    def test_ties_stable(self):
        pairs = [MwcPair(f"a{i}", "b", 0.5, np.zeros(2)) for i in range(23)]
        binned = mwc_distance_bins(pairs, 10)
        assert [p.image_a for p in binned] == [p.image_a for p in pairs]
        assert np.bincount([p.distance_bin for p in binned]).tolist() == [3, 3, 3] + [2] * 7
