"""Approximate entity retrieval by normalized edit distance.

The index answers exact top-k queries: an exact-match table for folded
surfaces, plus length and trigram lower bounds that order surfaces for
chunked dynamic-programming verification. Pruning only ever skips surfaces
whose proven lower bound exceeds the current kth distance, so results are
identical to a full scan under the tie rule documented on candidates().
"""

from __future__ import annotations

import heapq
import pickle
from array import array
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DataError, InvalidArgumentError, NoVisualTextError, NotFoundError

if TYPE_CHECKING:
    from .kb import KnowledgeBase

_CHUNK = 1024
_CACHE_VERSION = 1


def fold(s: str) -> str:
    """Case- and whitespace-insensitive form: lowercase, collapse runs of
    whitespace to single spaces, strip the ends."""
    return " ".join(s.lower().split())


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance, two-row dynamic program."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        append = cur.append
        left = i
        for j, cb in enumerate(b, start=1):
            sub = prev[j - 1] if ca == cb else prev[j - 1] + 1
            up = prev[j] + 1
            left = min(sub, up, left + 1)
            append(left)
        prev = cur
    return prev[-1]


def ned(a: str, b: str) -> float:
    """Normalized edit distance between folded strings, in [0, 1].

    Both-empty compares equal (0.0); division by max length is exact for
    equal ratios because IEEE division is correctly rounded.
    """
    fa, fb = fold(a), fold(b)
    if not fa and not fb:
        return 0.0
    return levenshtein(fa, fb) / max(len(fa), len(fb))


@dataclass(frozen=True)
class ScoredCandidate:
    entity_id: str
    name: str
    matched_surface: str
    ned: float


@dataclass(frozen=True)
class CandidateSet:
    query_text: str
    k: int
    items: tuple[ScoredCandidate, ...]

    def ids(self) -> tuple[str, ...]:
        return tuple(c.entity_id for c in self.items)

    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.items)


def _encode(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.uint32)


def _batch_levenshtein(query: np.ndarray, codes: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Edit distance from one query to every padded surface row.

    The row dependency min(left+1, ...) is resolved with a prefix-minimum
    pass: subtracting the column index turns the chained +1 into a running
    minimum, which np.minimum.accumulate applies across the whole chunk.
    """
    n, lmax = codes.shape
    ar = np.arange(lmax + 1, dtype=np.int32)
    prev = np.broadcast_to(ar, (n, lmax + 1)).astype(np.int32)
    row = np.empty((n, lmax + 1), dtype=np.int32)
    for i in range(1, len(query) + 1):
        np.minimum(prev[:, :-1] + (codes != query[i - 1]), prev[:, 1:] + 1, out=row[:, 1:])
        row[:, 0] = i
        np.subtract(row, ar, out=row)
        np.minimum.accumulate(row, axis=1, out=row)
        np.add(row, ar, out=row)
        prev, row = row, prev
    return np.take_along_axis(prev, lengths[:, None].astype(np.int64), axis=1)[:, 0]


def _trigram_counts(s: str) -> Counter[str]:
    return Counter(s[i : i + 3] for i in range(len(s) - 2))


class EntityIndex:
    """Surface index over a knowledge base for exact top-k retrieval.

    Query scoring considers the full folded OCR string and, for multi-token
    queries, each token; every surface keeps its best variant. Per entity the
    best surface wins. Ordering key everywhere:

        (ned, variant_rank, folded surface length, entity id)

    where variant_rank is 0 for the full string and 1 for single tokens, so
    full-string matches dominate token matches at equal distance.
    """

    def __init__(
        self,
        *,
        entity_ids: list[str],
        names: dict[str, str],
        surfaces: list[str],
        folded: list[str],
        kb_hash: str,
    ):
        self._entity_ids = entity_ids
        self._names = names
        self._surfaces = surfaces
        self._folded = folded
        self.kb_hash = kb_hash
        self.n_entities = len(names)
        self.n_surfaces = len(surfaces)
        self._pack()

    def _pack(self) -> None:
        lengths = np.array([len(f) for f in self._folded], dtype=np.int32)
        lmax = int(lengths.max(initial=1))
        codes = np.zeros((len(self._folded), lmax), dtype=np.uint32)
        for i, f in enumerate(self._folded):
            codes[i, : len(f)] = _encode(f)
        self._codes = codes
        self._lengths = lengths
        self._trigram_totals = np.maximum(lengths - 2, 0).astype(np.int32)

        exact: dict[str, list[int]] = {}
        for i, f in enumerate(self._folded):
            exact.setdefault(f, []).append(i)
        self._exact = exact

        # Flat postings: per (trigram, surface) one entry with the surface's
        # multiset count, grouped contiguously per trigram.
        gram_ids: dict[str, int] = {}
        post_gram = array("i")
        post_row = array("i")
        post_count = array("i")
        for i, f in enumerate(self._folded):
            for gram, count in _trigram_counts(f).items():
                gid = gram_ids.setdefault(gram, len(gram_ids))
                post_gram.append(gid)
                post_row.append(i)
                post_count.append(count)
        grams = np.frombuffer(post_gram, dtype=np.int32)
        order = np.argsort(grams, kind="stable")
        self._post_rows = np.frombuffer(post_row, dtype=np.int32)[order]
        self._post_counts = np.frombuffer(post_count, dtype=np.int32)[order]
        sorted_grams = grams[order]
        starts = np.searchsorted(sorted_grams, np.arange(len(gram_ids), dtype=np.int32), "left")
        ends = np.searchsorted(sorted_grams, np.arange(len(gram_ids), dtype=np.int32), "right")
        self._gram_ids = gram_ids
        self._gram_starts = starts.astype(np.int64)
        self._gram_ends = ends.astype(np.int64)

    def _distance_lower_bounds(self, variant_text: str) -> np.ndarray:
        """Per-surface lower bound on edit distance to ``variant_text``.

        Length bound: |len(a) - len(b)|. Trigram bound: an edit touches at
        most three trigrams, so d >= ceil((max(Na, Nb) - overlap) / 3) with
        overlap the multiset trigram intersection.
        """
        la = len(variant_text)
        length_bound = np.abs(self._lengths - la)
        overlap = np.zeros(len(self._folded), dtype=np.int32)
        for gram, count in _trigram_counts(variant_text).items():
            gid = self._gram_ids.get(gram)
            if gid is None:
                continue
            lo, hi = self._gram_starts[gid], self._gram_ends[gid]
            rows = self._post_rows[lo:hi]
            np.add.at(overlap, rows, np.minimum(self._post_counts[lo:hi], count))
        na = max(la - 2, 0)
        deficit = np.maximum(np.maximum(self._trigram_totals, na) - overlap, 0)
        trigram_bound = (deficit + 2) // 3
        return np.maximum(length_bound, trigram_bound)

    def candidates(self, ocr_text: str, k: int) -> CandidateSet:
        """Exact top-k entities by normalized edit distance.

        Raises NoVisualTextError when the folded query is empty. Returns
        min(k, number of entities) candidates sorted by the tie rule.
        """
        if k < 1:
            raise InvalidArgumentError(f"k must be >= 1, got {k}")
        folded_query = fold(ocr_text)
        if not folded_query:
            raise NoVisualTextError("query has no visual text after folding")

        variants: list[tuple[str, int]] = [(folded_query, 0)]
        tokens = folded_query.split()
        if len(tokens) > 1:
            variants.extend((t, 1) for t in dict.fromkeys(tokens))

        encoded = [(_encode(text), text, rank) for text, rank in variants]
        lengths = self._lengths.astype(np.float64)
        bound = None
        for _, text, _ in encoded:
            b = self._distance_lower_bounds(text) / np.maximum(len(text), lengths)
            bound = b if bound is None else np.minimum(bound, b)
        order = np.argsort(bound, kind="stable")

        # best[entity_id] = (ned, variant_rank, folded length, folded, row)
        best: dict[str, tuple[float, int, int, str, int]] = {}
        kth = np.inf
        pos = 0
        while pos < len(order):
            if len(best) >= k and bound[order[pos]] > kth:
                break
            rows = order[pos : pos + _CHUNK]
            pos += len(rows)
            chunk_codes = self._codes[rows]
            chunk_lengths = self._lengths[rows]
            chunk_ned = None
            chunk_rank = None
            for qcodes, text, rank in encoded:
                d = _batch_levenshtein(qcodes, chunk_codes, chunk_lengths)
                n = d / np.maximum(len(text), chunk_lengths)
                if chunk_ned is None:
                    chunk_ned = n
                    chunk_rank = np.full(len(rows), rank, dtype=np.int32)
                else:
                    better = (n < chunk_ned) | ((n == chunk_ned) & (rank < chunk_rank))
                    chunk_ned = np.where(better, n, chunk_ned)
                    chunk_rank = np.where(better, rank, chunk_rank)
            for j in range(len(rows)):
                row = int(rows[j])
                entity_id = self._entity_ids[row]
                key = (
                    float(chunk_ned[j]),
                    int(chunk_rank[j]),
                    int(chunk_lengths[j]),
                    self._folded[row],
                    row,
                )
                cur = best.get(entity_id)
                if cur is None or key < cur:
                    best[entity_id] = key
            if len(best) >= k:
                kth = heapq.nsmallest(
                    k, ((v[0], v[1], v[2], eid) for eid, v in best.items())
                )[-1][0]

        ranked = sorted(
            ((v[0], v[1], v[2], eid, v[4]) for eid, v in best.items()),
        )[: min(k, self.n_entities)]
        items = tuple(
            ScoredCandidate(
                entity_id=eid,
                name=self._names[eid],
                matched_surface=self._surfaces[row],
                ned=score,
            )
            for score, _, _, eid, row in ranked
        )
        return CandidateSet(query_text=ocr_text, k=k, items=items)

    def direct_match(self, ocr_text: str) -> str | None:
        """Entity whose folded surface equals the folded query, else None.

        Several matching entities resolve to the lexicographically smallest
        entity id.
        """
        rows = self._exact.get(fold(ocr_text))
        if not rows:
            return None
        return min(self._entity_ids[r] for r in rows)

    def entity_ids_in_order(self) -> tuple[str, ...]:
        return tuple(self._names)

    def name_of(self, entity_id: str) -> str:
        try:
            return self._names[entity_id]
        except KeyError:
            raise NotFoundError(f"unknown entity id: {entity_id!r}") from None

    def save(self, path: str | Path) -> None:
        payload = {
            "version": _CACHE_VERSION,
            "kb_hash": self.kb_hash,
            "entity_ids": self._entity_ids,
            "names": self._names,
            "surfaces": self._surfaces,
            "folded": self._folded,
        }
        Path(path).write_bytes(pickle.dumps(payload, protocol=4))

    @classmethod
    def load(cls, path: str | Path, *, expect_kb_hash: str | None = None) -> "EntityIndex":
        p = Path(path)
        if not p.exists():
            raise NotFoundError(f"index cache not found: {p}")
        try:
            payload = pickle.loads(p.read_bytes())
            if payload["version"] != _CACHE_VERSION:
                raise DataError(f"index cache version {payload['version']} unsupported")
            index = cls(
                entity_ids=payload["entity_ids"],
                names=payload["names"],
                surfaces=payload["surfaces"],
                folded=payload["folded"],
                kb_hash=payload["kb_hash"],
            )
        except DataError:
            raise
        except Exception as exc:
            raise DataError(f"index cache unreadable: {exc}") from exc
        if expect_kb_hash is not None and index.kb_hash != expect_kb_hash:
            raise DataError("index cache is stale: knowledge base hash mismatch")
        return index


def build_index(kb: "KnowledgeBase") -> EntityIndex:
    """Index every entity's canonical name and aliases.

    Surfaces folding to the empty string are dropped; every entity stays
    reachable through its canonical name, which ingestion guarantees is
    non-blank. Per entity, duplicate folded surfaces keep the first spelling.
    """
    from .kb import kb_content_hash

    if not kb.entities:
        raise DataError("cannot index an empty knowledge base")
    entity_ids: list[str] = []
    surfaces: list[str] = []
    folded: list[str] = []
    names: dict[str, str] = {}
    for entity in kb.entities.values():
        names[entity.id] = entity.name
        seen: set[str] = set()
        for surface in entity.surfaces():
            f = fold(surface)
            if not f or f in seen:
                continue
            seen.add(f)
            entity_ids.append(entity.id)
            surfaces.append(surface)
            folded.append(f)
        if not seen:
            raise DataError(f"entity {entity.id!r} has no indexable surface")
    return EntityIndex(
        entity_ids=entity_ids,
        names=names,
        surfaces=surfaces,
        folded=folded,
        kb_hash=kb_content_hash(kb),
    )
