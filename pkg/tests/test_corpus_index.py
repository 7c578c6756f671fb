"""
Unit tests for the corpus index.
Tests chunking, embedding normalization, exact top-k search against a
brute-force scan, and index persistence.
"""

import unittest
import tempfile
import shutil
from types import SimpleNamespace
from unittest.mock import Mock, patch
import sys
import os

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from corpus_index import (
    CorpusError, DimensionMismatch, EmbeddingProvider, EmptyDocument, EmptyIndex,
    HashEmbeddingProvider, OpenAIEmbeddingProvider, Passage, ProviderError, RetrievalConfig,
    SourceDocument, VectorIndex, build_index, chunk_document, embed, load_corpus, load_index,
    passage_id_for, save_index, search,
)


def numbered_words(n, prefix="w"):
    return " ".join(f"{prefix}{i}" for i in range(n))


def brute_force(index, query, k):
    """Reference scan: cosine per passage, score descending then passage_id ascending."""
    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scored = []
    for passage, vector in zip(index.passages, index.vectors):
        score = float(np.clip(np.dot(vector.astype(np.float64), q), -1.0, 1.0))
        scored.append((passage.passage_id, score))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


class ConstantProvider(EmbeddingProvider):
    """Returns caller-supplied vectors and records batch sizes."""

    def __init__(self, vector, batch_size=64):
        self.vector = vector
        self.batch_size = batch_size
        self.batches = []

    @property
    def provider_id(self):
        return "constant"

    def embed_batch(self, texts):
        self.batches.append(len(texts))
        return [list(self.vector) for _ in texts]


class TestChunking(unittest.TestCase):
    """Test overlapping word windows."""

    def test_thousand_words_make_three_windows(self):
        doc = SourceDocument('doc', 'Doc', numbered_words(1000))
        passages = chunk_document(doc, RetrievalConfig(chunk_size_words=400, overlap_words=50))
        self.assertEqual([p.word_count for p in passages], [400, 400, 300])
        self.assertEqual([p.ordinal for p in passages], [0, 1, 2])
        self.assertTrue(passages[1].text.startswith("w350 "))
        self.assertTrue(passages[2].text.endswith("w999"))

    def test_window_starts_until_past_end(self):
        cfg = RetrievalConfig(chunk_size_words=400, overlap_words=50)
        cases = [
            (100, [100]),
            (400, [400, 50]),
            (750, [400, 400, 50]),
            (1000, [400, 400, 300]),
            (1050, [400, 400, 350]),
        ]
        for length, counts in cases:
            with self.subTest(length=length):
                passages = chunk_document(SourceDocument('doc', 'Doc', numbered_words(length)), cfg)
                self.assertEqual([p.word_count for p in passages], counts)
                starts = [int(p.text.split()[0][1:]) for p in passages]
                self.assertEqual(starts, [i * 350 for i in range(len(passages))])
                self.assertTrue(passages[-1].text.endswith(f"w{length - 1}"))

    def test_overlap_is_shared(self):
        doc = SourceDocument('doc', 'Doc', numbered_words(20))
        first, second = chunk_document(doc, RetrievalConfig(chunk_size_words=10, overlap_words=3))[:2]
        self.assertEqual(first.text.split()[-3:], second.text.split()[:3])

    def test_short_document_single_passage(self):
        passages = chunk_document(SourceDocument('d', 'D', "just five words right here"), RetrievalConfig())
        self.assertEqual(len(passages), 1)
        self.assertEqual(passages[0].passage_id, 'd#00000')

    def test_empty_document_rejected(self):
        with self.assertRaises(EmptyDocument):
            chunk_document(SourceDocument('d', 'D', "  \n\t "), RetrievalConfig())

    def test_passage_ids_sort_in_ordinal_order(self):
        ids = [passage_id_for('doc', i) for i in (2, 10, 100)]
        self.assertEqual(sorted(ids), ids)

    def test_invalid_config(self):
        for kwargs in ({'k': 0}, {'chunk_size_words': 0}, {'chunk_size_words': 10, 'overlap_words': 10}):
            with self.subTest(kwargs=kwargs):
                with self.assertRaises(ValueError):
                    RetrievalConfig(**kwargs)


class TestEmbedding(unittest.TestCase):
    """Test provider batching and normalization."""

    def test_hash_provider_is_deterministic(self):
        provider = HashEmbeddingProvider(dims=16)
        a, b = embed(provider, ["present value", "present value"])
        np.testing.assert_array_equal(a, b)
        self.assertEqual(provider.provider_id, "hash-16")

    def test_vectors_are_unit_float32(self):
        vectors = embed(HashEmbeddingProvider(dims=32), ["a", "b", "c"])
        for vector in vectors:
            self.assertEqual(vector.dtype, np.float32)
            self.assertAlmostEqual(float(np.linalg.norm(vector.astype(np.float64))), 1.0, places=6)

    def test_batches_respect_batch_size(self):
        provider = ConstantProvider([3.0, 4.0], batch_size=2)
        embed(provider, ["t"] * 5)
        self.assertEqual(provider.batches, [2, 2, 1])

    def test_zero_vector_rejected(self):
        with self.assertRaises(ProviderError):
            embed(ConstantProvider([0.0, 0.0]), ["t"])

    def test_dimension_change_rejected(self):
        provider = Mock(spec=EmbeddingProvider)
        provider.batch_size = 64
        provider.provider_id = "mock"
        provider.embed_batch.return_value = [[1.0, 0.0], [1.0, 0.0, 0.0]]
        with self.assertRaises(DimensionMismatch):
            embed(provider, ["a", "b"])

    def test_remote_provider_orders_by_index(self):
        client = Mock()
        client.embeddings.create.return_value = SimpleNamespace(data=[
            SimpleNamespace(index=1, embedding=[0.0, 1.0]),
            SimpleNamespace(index=0, embedding=[1.0, 0.0]),
        ])
        provider = OpenAIEmbeddingProvider("http://localhost:8080/v1", client=client)
        self.assertEqual(provider.embed_batch(["x", "y"]), [[1.0, 0.0], [0.0, 1.0]])
        self.assertEqual(provider.provider_id, "all-MiniLM-L6-v2")

    def test_remote_provider_wraps_failures(self):
        client = Mock()
        client.embeddings.create.side_effect = RuntimeError("connection refused")
        provider = OpenAIEmbeddingProvider("http://localhost:8080/v1", client=client)
        with self.assertRaises(ProviderError):
            provider.embed_batch(["x"])


class TestSearch(unittest.TestCase):
    """Test exact top-k search."""

    def setUp(self):
        self.provider = HashEmbeddingProvider(dims=32)
        self.cfg = RetrievalConfig(k=3, chunk_size_words=5, overlap_words=0)
        # 40 documents x 5 passages of 5 words = 200 passages
        docs = [SourceDocument(f"doc{d:02d}", f"Doc {d}", numbered_words(25, prefix=f"d{d}w")) for d in range(40)]
        self.index = build_index(docs, self.provider, self.cfg)

    def test_matches_brute_force_scan(self):
        self.assertEqual(len(self.index), 200)
        rng = np.random.default_rng(7)
        for q in range(100):
            query = rng.standard_normal(self.index.dims)
            with self.subTest(query=q):
                expected = brute_force(self.index, query, 3)
                actual = search(self.index, query, 3)
                self.assertEqual([p.passage_id for p, _ in actual], [pid for pid, _ in expected])
                for (_, score), (_, ref) in zip(actual, expected):
                    self.assertLess(abs(score - ref), 1e-9)

    def test_ties_break_by_passage_id(self):
        passages = [Passage(passage_id_for(doc, 0), doc, 0, "text", 1) for doc in ("c", "a", "b")]
        index = VectorIndex(passages, np.ones((3, 2), dtype=np.float32) / np.sqrt(2), "constant",
                            "2024-01-01T00:00:00Z", RetrievalConfig())
        self.assertEqual([p.doc_id for p, _ in search(index, [1.0, 1.0], 3)], ["a", "b", "c"])

    def test_k_larger_than_index(self):
        results = search(self.index, np.ones(self.index.dims), 500)
        self.assertEqual(len(results), 200)

    def test_own_text_is_top_hit(self):
        passage = self.index.passages[17]
        query = embed(self.provider, [passage.text])[0]
        top, score = search(self.index, query, 1)[0]
        self.assertEqual(top.passage_id, passage.passage_id)
        self.assertAlmostEqual(score, 1.0, places=5)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            search(self.index, np.ones(5), 3)

    def test_empty_index(self):
        index = VectorIndex((), np.zeros((0, 4), dtype=np.float32), "hash-4", "2024-01-01T00:00:00Z", RetrievalConfig())
        with self.assertRaises(EmptyIndex):
            search(index, np.ones(4), 3)

    def test_vectors_are_read_only(self):
        with self.assertRaises(ValueError):
            self.index.vectors[0, 0] = 0.0

    def test_duplicate_doc_ids_rejected(self):
        docs = [SourceDocument('same', 'A', 'alpha beta'), SourceDocument('same', 'B', 'gamma delta')]
        with self.assertRaises(CorpusError):
            build_index(docs, self.provider, self.cfg)


class TestPersistence(unittest.TestCase):
    """Test the binary index file."""

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        docs = [SourceDocument(f"doc{d}", f"Doc {d}", numbered_words(60, prefix=f"d{d}w")) for d in range(5)]
        self.index = build_index(docs, HashEmbeddingProvider(dims=24), RetrievalConfig(chunk_size_words=20, overlap_words=5))
        self.path = os.path.join(self.temp_dir, 'sub', 'corpus.idx')

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_reload_gives_identical_search_results(self):
        save_index(self.index, self.path)
        loaded = load_index(self.path)
        self.assertEqual(loaded.passages, self.index.passages)
        self.assertEqual(loaded.provider_id, "hash-24")
        self.assertEqual(loaded.cfg, self.index.cfg)
        np.testing.assert_array_equal(loaded.vectors, self.index.vectors)
        rng = np.random.default_rng(3)
        for _ in range(100):
            query = rng.standard_normal(24)
            before = [(p.passage_id, s) for p, s in search(self.index, query, 3)]
            after = [(p.passage_id, s) for p, s in search(loaded, query, 3)]
            self.assertEqual(before, after)

    def test_rebuild_is_byte_identical_with_pinned_epoch(self):
        with patch.dict(os.environ, {'SOURCE_DATE_EPOCH': '1700000000'}):
            docs = [SourceDocument('d', 'D', numbered_words(50))]
            cfg = RetrievalConfig(chunk_size_words=20, overlap_words=5)
            first = os.path.join(self.temp_dir, 'a.idx')
            second = os.path.join(self.temp_dir, 'b.idx')
            save_index(build_index(docs, HashEmbeddingProvider(8), cfg), first)
            save_index(build_index(docs, HashEmbeddingProvider(8), cfg), second)
        with open(first, 'rb') as a, open(second, 'rb') as b:
            self.assertEqual(a.read(), b.read())

    def test_bad_magic(self):
        with open(os.path.join(self.temp_dir, 'bad.idx'), 'wb') as f:
            f.write(b"not an index")
        with self.assertRaises(CorpusError):
            load_index(os.path.join(self.temp_dir, 'bad.idx'))

    def test_truncated_file(self):
        save_index(self.index, self.path)
        with open(self.path, 'rb') as f:
            data = f.read()
        with open(self.path, 'wb') as f:
            f.write(data[:-10])
        with self.assertRaises(CorpusError):
            load_index(self.path)

    def test_missing_file(self):
        with self.assertRaises(CorpusError):
            load_index(os.path.join(self.temp_dir, 'missing.idx'))

    def test_malformed_records_raise_corpus_error(self):
        save_index(self.index, self.path)
        with open(self.path, 'rb') as f:
            data = f.read()
        # Same-length substitutions keep every length prefix valid.
        for old, new in ((b'"word_count"', b'"word_xount"'), (b'"built_at"', b'"built_on"')):
            self.assertIn(old, data)
            with self.subTest(field=old.decode()):
                with open(self.path, 'wb') as f:
                    f.write(data.replace(old, new))
                with self.assertRaises(CorpusError):
                    load_index(self.path)


class TestLoadCorpus(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_reads_sorted_text_files(self):
        for name, body in (('b.txt', 'Second doc\nbody'), ('a.txt', 'First doc\nbody'),
                           ('empty.txt', '   '), ('notes.md', 'ignored')):
            with open(os.path.join(self.temp_dir, name), 'w', encoding='utf-8') as f:
                f.write(body)
        docs = load_corpus(self.temp_dir)
        self.assertEqual([d.doc_id for d in docs], ['a', 'b'])
        self.assertEqual(docs[0].title, 'First doc')

    def test_empty_directory(self):
        with self.assertRaises(CorpusError):
            load_corpus(self.temp_dir)

    def test_sample_corpus_builds(self):
        corpus_dir = os.path.join(os.path.dirname(__file__), '..', 'data', 'sample_corpus')
        index = build_index(load_corpus(corpus_dir), HashEmbeddingProvider(), RetrievalConfig(chunk_size_words=60, overlap_words=10))
        self.assertGreater(len(index), 5)


if __name__ == '__main__':
    unittest.main()
