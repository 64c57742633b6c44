import json

import numpy as np
import pytest

from figrot.embedstore import EmbeddingStore
from figrot.retrieval import Gallery, batch_search, ranked_to_jsonl, \
    search_topk


def make_gallery(vectors, ids):
    vectors = np.asarray(vectors, np.float32)
    return Gallery(EmbeddingStore(tuple(ids), vectors, True))


def random_gallery(n, d, seed, quantize=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    if quantize:
        # coarse directions force score ties
        x = np.sign(x) * (np.abs(x) > 0.5)
        x[np.linalg.norm(x, axis=1) == 0, 0] = 1.0
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    ids = [f"g{i:04d}" for i in rng.permutation(n)]
    return make_gallery(x, ids), x.astype(np.float32)


def oracle_rank(q, gallery, k, exclude=None):
    """Naive reference: full sort by (score desc, id asc)."""
    scores = gallery.vectors @ np.asarray(q, gallery.vectors.dtype)
    scored = [(id_, float(scores[i])) for i, id_ in enumerate(gallery.ids)
              if id_ != exclude]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


class TestSearchTopK:
    def test_orthogonal_axes(self):
        g = make_gallery([[1, 0], [0, 1]], ["a", "b"])
        out = search_topk(np.array([1.0, 0.0]), g, 2)
        assert out.items == (("a", 1.0), ("b", 0.0))

    def test_exclusion(self):
        g = make_gallery([[1, 0], [0, 1]], ["a", "b"])
        out = search_topk(np.array([1.0, 0.0]), g, 2, exclude_id="a")
        assert out.items == (("b", 0.0),)

    def test_tie_ascending_id(self):
        v = np.array([1.0, 0.0], np.float32)
        g = make_gallery([v, v, v], ["c", "a", "b"])
        out = search_topk(v, g, 3)
        assert out.ids() == ["a", "b", "c"]

    def test_k_validation(self):
        g = make_gallery([[1, 0]], ["a"])
        with pytest.raises(ValueError, match="k"):
            search_topk(np.array([1.0, 0.0]), g, 0)

    def test_dim_mismatch(self):
        g = make_gallery([[1, 0]], ["a"])
        with pytest.raises(ValueError, match="shape"):
            search_topk(np.ones(3), g, 1)

    def test_empty_gallery(self):
        with pytest.raises(ValueError, match="empty"):
            make_gallery(np.zeros((0, 2), np.float32), [])

    def test_non_unit_gallery_rejected(self):
        store = EmbeddingStore(("a",), np.array([[2.0, 0.0]], np.float32),
                               False)
        with pytest.raises(ValueError, match="norm"):
            Gallery(store)

    def test_prefix_monotonicity(self):
        g, _ = random_gallery(40, 8, seed=1)
        q = np.random.default_rng(2).normal(size=8)
        q = q / np.linalg.norm(q)
        prev = search_topk(q, g, 1).ids()
        for k in range(2, 15):
            cur = search_topk(q, g, k).ids()
            assert cur[: k - 1] == prev
            prev = cur


class TestOracleEquivalence:
    @pytest.mark.parametrize("quantize", [False, True])
    def test_matches_full_sort(self, quantize):
        rng = np.random.default_rng(11)
        for trial in range(50):
            n = int(rng.integers(1, 200))
            d = int(rng.integers(2, 32))
            g, _ = random_gallery(n, d, seed=trial + (1000 if quantize else 0),
                                  quantize=quantize)
            q = rng.normal(size=d)
            q = (q / np.linalg.norm(q)).astype(np.float32)
            k = int(rng.integers(1, n + 3))
            exclude = g.ids[int(rng.integers(n))] if rng.random() < 0.5 else None
            got = search_topk(q, g, k, exclude_id=exclude).items
            assert list(got) == oracle_rank(q, g, k, exclude)

    @pytest.mark.parametrize("shards", [1, 2, 3, 4, 7])
    def test_shard_invariance(self, shards):
        g, _ = random_gallery(57, 8, seed=5, quantize=True)
        rng = np.random.default_rng(6)
        queries = rng.normal(size=(9, 8))
        queries = queries / np.linalg.norm(queries, axis=1, keepdims=True)
        base = batch_search(list(queries), g, k=10, shards=1)
        sharded = batch_search(list(queries), g, k=10, shards=shards)
        assert [r.items for r in base] == [r.items for r in sharded]


class TestBatchSearch:
    def test_single_query_matches_search_topk(self):
        g, _ = random_gallery(20, 6, seed=7)
        q = np.random.default_rng(8).normal(size=6)
        q /= np.linalg.norm(q)
        single = search_topk(q, g, 5, exclude_id=g.ids[0])
        batched = batch_search([q], g, 5, exclusions=[g.ids[0]])
        assert batched[0].items == single.items

    def test_empty_query_list(self):
        g, _ = random_gallery(5, 4, seed=9)
        assert batch_search([], g, 3) == []

    def test_error_carries_query_index(self):
        g, _ = random_gallery(5, 4, seed=10)
        good = np.array([1.0, 0, 0, 0], np.float32)
        with pytest.raises(ValueError, match="query 1"):
            batch_search([good, np.ones(3)], g, 2)

    def test_jsonl_export(self, tmp_path):
        g = make_gallery([[1, 0], [0, 1]], ["a", "b"])
        out = batch_search([np.array([1.0, 0.0])], g, 2, query_keys=["q0"])
        path = tmp_path / "r.jsonl"
        ranked_to_jsonl(out, path)
        doc = json.loads(path.read_text().splitlines()[0])
        assert doc["query"] == "q0"
        assert [r["id"] for r in doc["results"]] == ["a", "b"]
