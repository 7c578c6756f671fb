"""
Corpus Index for the Financial QA Agent Framework.
Builds the textbook evidence store used by the Evidence Retriever:
chunks plain-text documents into overlapping word windows, embeds the
passages through a pluggable provider, and serves exact top-k cosine search.
Indexes persist to a single versioned binary file.
"""

import abc
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"FQAVIDX\x00"
INDEX_VERSION = 1


class CorpusError(Exception):
    """Base class for corpus and index failures."""


class EmptyDocument(CorpusError):
    """Document body has no words."""


class EmptyIndex(CorpusError):
    """Search attempted on an index without passages."""


class DimensionMismatch(CorpusError):
    """Vectors of different dimensionality were mixed."""


class ProviderError(CorpusError):
    """Embedding provider failed or returned unusable vectors."""


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    title: str
    body: str


@dataclass(frozen=True)
class Passage:
    passage_id: str
    doc_id: str
    ordinal: int
    text: str
    word_count: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'passage_id': self.passage_id,
            'doc_id': self.doc_id,
            'ordinal': self.ordinal,
            'text': self.text,
            'word_count': self.word_count,
        }


@dataclass(frozen=True)
class RetrievalConfig:
    """Retrieval depth and chunking parameters."""
    k: int = 3
    chunk_size_words: int = 400
    overlap_words: int = 50

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.chunk_size_words < 1:
            raise ValueError(f"chunk_size_words must be positive, got {self.chunk_size_words}")
        if not 0 <= self.overlap_words < self.chunk_size_words:
            raise ValueError(
                f"overlap_words must be in [0, chunk_size_words), got {self.overlap_words}"
            )

    def to_dict(self) -> Dict[str, int]:
        return {'k': self.k, 'chunk_size_words': self.chunk_size_words, 'overlap_words': self.overlap_words}


def passage_id_for(doc_id: str, ordinal: int) -> str:
    # Zero padding keeps lexical order equal to ordinal order within a document.
    return f"{doc_id}#{ordinal:05d}"


def chunk_document(doc: SourceDocument, cfg: RetrievalConfig) -> List[Passage]:
    """
    Split a document into overlapping word windows.

    Window i starts at word i * (chunk_size - overlap). Chunking stops once a
    window would start at or past the end of the body, so the last passage may
    be shorter and can fall entirely inside the previous window's overlap.

    Args:
        doc: Document to chunk
        cfg: Retrieval configuration supplying window size and overlap

    Returns:
        Passages in document order with ordinals 0..n-1

    Raises:
        EmptyDocument: If the body contains no words
    """
    words = doc.body.split()
    if not words:
        raise EmptyDocument(f"Document '{doc.doc_id}' has an empty body")

    stride = cfg.chunk_size_words - cfg.overlap_words
    passages = []
    start = 0
    while start < len(words):
        window = words[start:start + cfg.chunk_size_words]
        ordinal = len(passages)
        passages.append(Passage(
            passage_id=passage_id_for(doc.doc_id, ordinal),
            doc_id=doc.doc_id,
            ordinal=ordinal,
            text=' '.join(window),
            word_count=len(window),
        ))
        start += stride
    return passages


class EmbeddingProvider(abc.ABC):
    """Interface that every embedding provider must implement."""

    batch_size: int = 64

    @property
    @abc.abstractmethod
    def provider_id(self) -> str:
        """Identifier recorded in the index header."""

    @abc.abstractmethod
    def embed_batch(self, texts: List[str]) -> List[List[float]]:
        """Return one raw (unnormalized) vector per input text."""


class HashEmbeddingProvider(EmbeddingProvider):
    """
    Deterministic fake provider: each text seeds a Gaussian vector from the
    sha256 of its content. Identical text always yields the identical vector.
    """

    def __init__(self, dims: int = 64):
        if dims < 1:
            raise ValueError("dims must be positive")
        self.dims = dims

    @property
    def provider_id(self) -> str:
        return f"hash-{self.dims}"

    def embed_batch(self, texts: List[str]) -> List[List[float]]:
        vectors = []
        for text in texts:
            seed = int.from_bytes(hashlib.sha256(text.encode('utf-8')).digest()[:8], 'little')
            rng = np.random.default_rng(seed)
            vectors.append(rng.standard_normal(self.dims).tolist())
        return vectors


class OpenAIEmbeddingProvider(EmbeddingProvider):
    """
    Remote embedding provider for any OpenAI-compatible /embeddings endpoint
    (e.g. a text-embeddings server hosting all-MiniLM-L6-v2).
    """

    def __init__(self, endpoint: str, model: str = "all-MiniLM-L6-v2",
                 auth_env_var: Optional[str] = None, batch_size: int = 64, client: Any = None):
        self.endpoint = endpoint
        self.model = model
        self.auth_env_var = auth_env_var
        self.batch_size = batch_size
        self._client = client

    @property
    def provider_id(self) -> str:
        return self.model

    @property
    def client(self):
        if self._client is None:
            api_key = os.getenv(self.auth_env_var) if self.auth_env_var else None
            if self.auth_env_var and not api_key:
                raise ProviderError(f"Environment variable {self.auth_env_var} is not set")
            import openai
            self._client = openai.OpenAI(base_url=self.endpoint, api_key=api_key or "EMPTY")
        return self._client

    def embed_batch(self, texts: List[str]) -> List[List[float]]:
        try:
            response = self.client.embeddings.create(model=self.model, input=texts)
        except ProviderError:
            raise
        except Exception as e:
            raise ProviderError(f"Embedding endpoint {self.endpoint} failed: {e}") from e
        data = sorted(response.data, key=lambda item: item.index)
        if len(data) != len(texts):
            raise ProviderError(f"Expected {len(texts)} embeddings, received {len(data)}")
        return [list(item.embedding) for item in data]


def embed(provider: EmbeddingProvider, texts: Sequence[str]) -> List[np.ndarray]:
    """
    Embed texts and unit-normalize the vectors.

    Args:
        provider: Embedding provider
        texts: Non-empty list of texts

    Returns:
        One float32 unit vector per text, in input order

    Raises:
        ProviderError: Provider failure, wrong count, or a zero vector
        DimensionMismatch: Provider returned vectors of different lengths
    """
    texts = list(texts)
    if not texts:
        raise ProviderError("embed() requires at least one text")

    batch_size = max(1, int(getattr(provider, 'batch_size', 64) or 64))
    vectors: List[np.ndarray] = []
    dims = None
    for start in range(0, len(texts), batch_size):
        batch = texts[start:start + batch_size]
        raw = provider.embed_batch(batch)
        if len(raw) != len(batch):
            raise ProviderError(f"Provider {provider.provider_id} returned {len(raw)} vectors for {len(batch)} texts")
        for values in raw:
            vector = np.asarray(values, dtype=np.float64)
            if vector.ndim != 1 or vector.size == 0:
                raise ProviderError(f"Provider {provider.provider_id} returned a non-vector embedding")
            if dims is None:
                dims = vector.size
            elif vector.size != dims:
                raise DimensionMismatch(
                    f"Provider {provider.provider_id} returned {vector.size} dims after {dims}"
                )
            norm = np.linalg.norm(vector)
            if norm == 0 or not np.isfinite(norm):
                raise ProviderError(f"Provider {provider.provider_id} returned a zero or non-finite vector")
            vectors.append((vector / norm).astype(np.float32))
    return vectors


@dataclass(frozen=True)
class VectorIndex:
    """
    Immutable passage store with parallel unit vectors (float32, one row per passage).
    """
    passages: Tuple[Passage, ...]
    vectors: np.ndarray
    provider_id: str
    built_at: str
    cfg: RetrievalConfig

    def __post_init__(self):
        object.__setattr__(self, 'passages', tuple(self.passages))
        vectors = np.array(self.vectors, dtype=np.float32, order='C', copy=True)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.passages):
            raise CorpusError(
                f"Index has {len(self.passages)} passages but vector matrix of shape {vectors.shape}"
            )
        vectors.setflags(write=False)
        object.__setattr__(self, 'vectors', vectors)

    @property
    def dims(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.passages)

    def search(self, query_vec, k: int) -> List[Tuple[Passage, float]]:
        return search(self, query_vec, k)


def _built_at() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so rebuilt index files are byte-identical.
    epoch = os.getenv('SOURCE_DATE_EPOCH')
    moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc) if epoch else datetime.now(timezone.utc)
    return moment.strftime('%Y-%m-%dT%H:%M:%SZ')


def build_index(docs: Sequence[SourceDocument], provider: EmbeddingProvider, cfg: RetrievalConfig) -> VectorIndex:
    """
    Chunk and embed a corpus into a VectorIndex.

    Args:
        docs: Source documents (doc_ids must be unique)
        provider: Embedding provider
        cfg: Retrieval configuration

    Returns:
        The built VectorIndex
    """
    if not docs:
        raise CorpusError("Cannot build an index without documents")
    seen = set()
    for doc in docs:
        if doc.doc_id in seen:
            raise CorpusError(f"Duplicate doc_id '{doc.doc_id}' in corpus")
        seen.add(doc.doc_id)

    passages: List[Passage] = []
    for doc in docs:
        doc_passages = chunk_document(doc, cfg)
        logger.info(f"Chunked {doc.doc_id}: {len(doc_passages)} passages")
        passages.extend(doc_passages)

    vectors = embed(provider, [p.text for p in passages])
    index = VectorIndex(
        passages=tuple(passages),
        vectors=np.vstack(vectors),
        provider_id=provider.provider_id,
        built_at=_built_at(),
        cfg=cfg,
    )
    logger.info(f"Built index: {len(index)} passages, {index.dims} dims, provider {index.provider_id}")
    return index


def search(index: VectorIndex, query_vec, k: int) -> List[Tuple[Passage, float]]:
    """
    Exact top-k cosine search.

    Args:
        index: Vector index
        query_vec: Query embedding (normalized here if it is not already)
        k: Number of results

    Returns:
        (Passage, score) pairs by score descending, ties by passage_id ascending

    Raises:
        EmptyIndex: Index has no passages
        DimensionMismatch: Query dims differ from index dims
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    if len(index) == 0:
        raise EmptyIndex("Cannot search an empty index")

    query = np.asarray(query_vec, dtype=np.float64).ravel()
    if query.size != index.dims:
        raise DimensionMismatch(f"Query has {query.size} dims, index has {index.dims}")
    norm = np.linalg.norm(query)
    if norm == 0:
        scores = np.zeros(len(index))
    else:
        scores = index.vectors.astype(np.float64) @ (query / norm)
    scores = np.clip(scores, -1.0, 1.0)

    ids = np.array([p.passage_id for p in index.passages])
    # lexsort uses the last key as primary: score descending, then passage_id ascending.
    order = np.lexsort((ids, -scores))[:min(k, len(index))]
    return [(index.passages[i], float(scores[i])) for i in order]


def save_index(index: VectorIndex, path: str):
    """
    Persist an index to one binary file.

    Layout: magic (8 bytes), version (uint32 LE), header length (uint32 LE),
    header JSON, passages length (uint32 LE), passages JSON, then the vector
    matrix as little-endian float32, row-major.
    """
    header = {
        'provider_id': index.provider_id,
        'dims': index.dims,
        'cfg': index.cfg.to_dict(),
        'passage_count': len(index),
        'built_at': index.built_at,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    passages_bytes = json.dumps([p.to_dict() for p in index.passages], ensure_ascii=False).encode('utf-8')
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(INDEX_MAGIC)
        f.write(struct.pack('<I', INDEX_VERSION))
        f.write(struct.pack('<I', len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack('<I', len(passages_bytes)))
        f.write(passages_bytes)
        f.write(index.vectors.astype('<f4').tobytes(order='C'))
    logger.info(f"Saved index with {len(index)} passages to {path}")


def load_index(path: str) -> VectorIndex:
    """
    Load an index written by save_index.

    Raises:
        CorpusError: Missing file, wrong magic/version, malformed metadata or truncated payload
    """
    if not os.path.exists(path):
        raise CorpusError(f"Index file not found: {path}")
    with open(path, 'rb') as f:
        data = f.read()

    if not data.startswith(INDEX_MAGIC):
        raise CorpusError(f"{path} is not an index file (bad magic)")
    offset = len(INDEX_MAGIC)
    try:
        (version,) = struct.unpack_from('<I', data, offset)
        offset += 4
        if version != INDEX_VERSION:
            raise CorpusError(f"Unsupported index version {version} in {path}")
        (header_len,) = struct.unpack_from('<I', data, offset)
        offset += 4
        header = json.loads(data[offset:offset + header_len].decode('utf-8'))
        offset += header_len
        (passages_len,) = struct.unpack_from('<I', data, offset)
        offset += 4
        records = json.loads(data[offset:offset + passages_len].decode('utf-8'))
        offset += passages_len
    except (struct.error, ValueError) as e:
        raise CorpusError(f"Corrupt index header in {path}: {e}") from e

    try:
        count, dims = header['passage_count'], header['dims']
        passages = tuple(Passage(**r) for r in records)
        cfg = RetrievalConfig(**header['cfg'])
        provider_id, built_at = header['provider_id'], header['built_at']
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"Malformed index metadata in {path}: {e!r}") from e

    expected = count * dims * 4
    if len(data) - offset != expected or len(passages) != count:
        raise CorpusError(f"Index {path} is truncated: expected {count} x {dims} vectors")
    vectors = np.frombuffer(data, dtype='<f4', count=count * dims, offset=offset).reshape(count, dims)

    return VectorIndex(
        passages=passages,
        vectors=vectors.astype(np.float32),
        provider_id=provider_id,
        built_at=built_at,
        cfg=cfg,
    )


def load_corpus(directory: str) -> List[SourceDocument]:
    """
    Read every *.txt file in a directory as one SourceDocument (doc_id = file stem).

    Raises:
        CorpusError: Directory missing or containing no non-empty text files
    """
    if not os.path.isdir(directory):
        raise CorpusError(f"Corpus directory not found: {directory}")
    docs = []
    for filename in sorted(os.listdir(directory)):
        if not filename.endswith('.txt'):
            continue
        with open(os.path.join(directory, filename), 'r', encoding='utf-8') as f:
            body = f.read()
        if not body.split():
            logger.warning(f"Skipping empty corpus file {filename}")
            continue
        doc_id = os.path.splitext(filename)[0]
        title = body.strip().splitlines()[0][:120]
        docs.append(SourceDocument(doc_id=doc_id, title=title, body=body))
    if not docs:
        raise CorpusError(f"Corpus directory {directory} contains no non-empty .txt files")
    logger.info(f"Loaded {len(docs)} documents from {directory}")
    return docs
