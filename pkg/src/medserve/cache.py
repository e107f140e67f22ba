"""Two-tier response cache with exact and semantic lookup.

A bounded in-memory LRU tier fronts an append-only disk log. Lookups try an
exact text match first (memory, then disk index), then fall back to the
best semantic match whose blended similarity (token-set Jaccard plus cosine
over feature-hashed bag-of-token embeddings) clears the acceptance
threshold. Every insert is persisted, so memory evictions lose nothing, and
recovery after a crash replays the longest consistent prefix of the log.

Disk appends run on a background writer thread; inserts are acknowledged
after the memory write and a close() flush barrier drains the queue.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .query_pipeline import tokenize

log = logging.getLogger(__name__)

EMBED_DIM = 64
_RECORD_HEADER = struct.Struct("<I")


def jaccard(s1, s2) -> float:
    """|s1 & s2| / |s1 | s2|; two empty sets count as identical (1.0)."""
    s1, s2 = set(s1), set(s2)
    if not s1 and not s2:
        return 1.0
    return len(s1 & s2) / len(s1 | s2)


def embed(text: str, dim: int = EMBED_DIM) -> np.ndarray:
    """Deterministic feature-hashed bag-of-tokens vector, unit L2 norm.

    Token order is irrelevant; empty text maps to the zero vector. The hash
    is md5-based so vectors are stable across processes and platforms.
    """
    vec = np.zeros(dim, dtype=np.float64)
    for token in tokenize(text):
        digest = hashlib.md5(token.encode("utf-8")).digest()
        idx = int.from_bytes(digest[:4], "little") % dim
        sign = 1.0 if digest[4] & 1 else -1.0
        vec[idx] += sign
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec.astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; zero vectors compare as 0 by convention."""
    na = float(np.linalg.norm(np.asarray(a, dtype=np.float64)))
    nb = float(np.linalg.norm(np.asarray(b, dtype=np.float64)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(np.asarray(a, np.float64), np.asarray(b, np.float64)) / (na * nb))


@dataclass(frozen=True)
class SimilarityConfig:
    """alpha blends token overlap vs embedding cosine; tau is the hit bar."""

    alpha: float = 0.3
    tau: float = 0.92

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")


def similarity(q1: str, q2: str, cfg: SimilarityConfig) -> float:
    """alpha * Jaccard(tokens) + (1 - alpha) * cosine(embeddings)."""
    j = jaccard(tokenize(q1), tokenize(q2))
    c = cosine(embed(q1), embed(q2))
    return cfg.alpha * j + (1.0 - cfg.alpha) * c


@dataclass
class CacheEntry:
    query: str
    tokens: frozenset[str]
    embedding: np.ndarray
    response: str
    category: str
    timestamp: float
    hits: int = 0

    @classmethod
    def build(cls, query: str, response: str, category: str,
              timestamp: float | None = None) -> "CacheEntry":
        return cls(
            query=query,
            tokens=frozenset(tokenize(query)),
            embedding=embed(query),
            response=response,
            category=category,
            timestamp=time.time() if timestamp is None else timestamp,
        )


def encode_record(entry: CacheEntry) -> bytes:
    """Length-prefixed record: query, response, category, embedding, timestamp."""
    q = entry.query.encode("utf-8")
    r = entry.response.encode("utf-8")
    c = entry.category.encode("utf-8")
    emb = np.asarray(entry.embedding, dtype="<f4").tobytes()
    payload = b"".join([
        _RECORD_HEADER.pack(len(q)), q,
        _RECORD_HEADER.pack(len(r)), r,
        _RECORD_HEADER.pack(len(c)), c,
        emb,
        struct.pack("<d", entry.timestamp),
    ])
    return _RECORD_HEADER.pack(len(payload)) + payload


def decode_records(blob: bytes) -> tuple[list[CacheEntry], int]:
    """Parse the longest consistent prefix; returns (entries, valid_bytes)."""
    entries = []
    offset = 0
    while True:
        if offset + 4 > len(blob):
            break
        (payload_len,) = _RECORD_HEADER.unpack_from(blob, offset)
        start = offset + 4
        end = start + payload_len
        if end > len(blob):
            break
        try:
            entries.append(_decode_payload(blob[start:end]))
        except (struct.error, UnicodeDecodeError, ValueError):
            break
        offset = end
    return entries, offset


def _decode_payload(payload: bytes) -> CacheEntry:
    pos = 0

    def take_str():
        nonlocal pos
        (n,) = _RECORD_HEADER.unpack_from(payload, pos)
        pos += 4
        if pos + n > len(payload):
            raise ValueError("truncated field")
        out = payload[pos:pos + n].decode("utf-8")
        pos += n
        return out

    query = take_str()
    response = take_str()
    category = take_str()
    emb_bytes = EMBED_DIM * 4
    if pos + emb_bytes + 8 != len(payload):
        raise ValueError("record payload length mismatch")
    embedding = np.frombuffer(payload[pos:pos + emb_bytes], dtype="<f4").copy()
    pos += emb_bytes
    (timestamp,) = struct.unpack_from("<d", payload, pos)
    return CacheEntry(
        query=query, tokens=frozenset(tokenize(query)), embedding=embedding,
        response=response, category=category, timestamp=timestamp,
    )


class DiskLog:
    """Append-only record log; the index is rebuilt by full scan on open."""

    def __init__(self, directory):
        self.path = Path(directory) / "cache.log"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        blob = self.path.read_bytes() if self.path.exists() else b""
        self.entries, valid = decode_records(blob)
        # A partial tail record can never be completed; drop it now so the
        # next append lands on a record boundary.
        self._fh = open(self.path, "ab")
        if valid < len(blob):
            self._fh.truncate(valid)
        self._fh.seek(0, 2)

    def append(self, entry: CacheEntry):
        self._fh.write(encode_record(entry))
        self._fh.flush()

    def close(self):
        self._fh.close()


@dataclass
class CacheStats:
    memory_hits: int = 0
    disk_hits: int = 0
    misses: int = 0
    inserts: int = 0
    evictions: int = 0

    def as_dict(self) -> dict:
        return {
            "memory_hits": self.memory_hits,
            "disk_hits": self.disk_hits,
            "misses": self.misses,
            "inserts": self.inserts,
            "evictions": self.evictions,
        }


@dataclass(frozen=True)
class CacheHit:
    response: str
    tier: str  # "memory" | "disk"
    similarity: float
    category: str


_CLOSE = object()


class TwoLevelCache:
    """Memory LRU over a persistent disk tier with semantic fallback lookup."""

    def __init__(self, capacity: int, disk_dir=None,
                 config: SimilarityConfig | None = None):
        if capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        self.capacity = capacity
        self.config = config or SimilarityConfig()
        self.stats = CacheStats()
        self._lock = threading.RLock()
        self._memory: OrderedDict[str, CacheEntry] = OrderedDict()
        self._disk_index: dict[str, CacheEntry] = {}
        self._log: DiskLog | None = None
        self.degraded = False
        self._queue: queue.Queue = queue.Queue()
        self._writer: threading.Thread | None = None
        if disk_dir is not None:
            try:
                self._log = DiskLog(disk_dir)
            except OSError as exc:
                log.warning("disk tier unavailable (%s); running memory-only", exc)
                self.degraded = True
            else:
                for entry in self._log.entries:
                    self._disk_index[entry.query] = entry
                self._writer = threading.Thread(
                    target=self._writer_loop, name="cache-writer", daemon=True
                )
                self._writer.start()
        else:
            self.degraded = True

    # -- write path ---------------------------------------------------

    def _writer_loop(self):
        while True:
            item = self._queue.get()
            if item is _CLOSE:
                self._queue.task_done()
                return
            try:
                self._log.append(item)
            except OSError as exc:
                log.warning("disk append failed (%s); entering degraded mode", exc)
                self.degraded = True
            finally:
                self._queue.task_done()

    def insert(self, query: str, response: str, category: str = ""):
        """Store a response; acknowledged after the memory write.

        Re-inserting an identical (query, response) pair is a no-op beyond
        recency: the hit count survives and the log does not grow.
        """
        with self._lock:
            existing = self._memory.get(query) or self._disk_index.get(query)
            if existing is not None and existing.response == response:
                self._touch(existing)
                return
            entry = CacheEntry.build(query, response, category)
            self._touch(entry)
            self.stats.inserts += 1
            if self._log is not None and not self.degraded:
                self._disk_index[query] = entry
                self._queue.put(entry)

    def _touch(self, entry: CacheEntry):
        """Put an entry at the MRU end of the memory tier, evicting as needed."""
        self._memory[entry.query] = entry
        self._memory.move_to_end(entry.query)
        while len(self._memory) > self.capacity:
            self._memory.popitem(last=False)
            self.stats.evictions += 1

    # -- read path ----------------------------------------------------

    def lookup(self, query: str) -> CacheHit | None:
        """Exact match first (memory then disk), then best semantic match.

        A memory-tier semantic match that clears tau short-circuits the disk
        scan. Hits promote the entry to the memory MRU position.
        """
        tokens = frozenset(tokenize(query))
        vec = embed(query)
        with self._lock:
            entry = self._memory.get(query)
            if entry is not None:
                return self._hit(entry, "memory", 1.0)
            entry = self._disk_index.get(query)
            if entry is not None:
                return self._hit(entry, "disk", 1.0)

            best = self._best_semantic(self._memory.values(), tokens, vec)
            if best is not None:
                return self._hit(best[0], "memory", best[1])
            disk_only = (
                e for q, e in self._disk_index.items() if q not in self._memory
            )
            best = self._best_semantic(disk_only, tokens, vec)
            if best is not None:
                return self._hit(best[0], "disk", best[1])

            self.stats.misses += 1
            return None

    def _best_semantic(self, entries, tokens, vec):
        best_entry, best_sim = None, -1.0
        for entry in entries:
            sim = (
                self.config.alpha * jaccard(tokens, entry.tokens)
                + (1.0 - self.config.alpha) * cosine(vec, entry.embedding)
            )
            if sim > best_sim:
                best_entry, best_sim = entry, sim
        if best_entry is not None and best_sim >= self.config.tau:
            return best_entry, best_sim
        return None

    def _hit(self, entry: CacheEntry, tier: str, sim: float) -> CacheHit:
        entry.hits += 1
        if tier == "memory":
            self.stats.memory_hits += 1
        else:
            self.stats.disk_hits += 1
        self._touch(entry)
        return CacheHit(response=entry.response, tier=tier, similarity=sim,
                        category=entry.category)

    # -- lifecycle ------------------------------------------------------

    def flush(self):
        """Block until all queued disk appends have retired."""
        if self._writer is not None:
            self._queue.join()

    def close(self):
        if self._writer is not None:
            self._queue.put(_CLOSE)
            self._queue.join()
            self._writer = None
        if self._log is not None:
            self._log.close()
            self._log = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
