"""Readers for MIND-style news/behaviors files, vector files and KG edge lists.

All ids use 0 as PAD. Records are padded to fixed widths and carry boolean
masks that are true exactly on the non-PAD positions.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PAD = "<pad>"
TITLE_LEN = 30
NUM_ENTITIES = 5
HISTORY_LEN = 50
NUM_NEIGHBORS = 10

_TOKEN_RE = re.compile(r"\w+(?:'\w+)*", re.UNICODE)


class DataError(ValueError):
    """A data file could not be parsed."""


class Vocab:
    """Token <-> id map with id 0 reserved for PAD."""

    def __init__(self, tokens=()):
        self.itos: list[str] = [PAD]
        self.stoi: dict[str, int] = {PAD: 0}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return idx

    def get(self, token: str, default: int = 0) -> int:
        return self.stoi.get(token, default)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos


def tokenize(title: str) -> list[str]:
    """Lowercase and split into word tokens, dropping surrounding punctuation."""
    return _TOKEN_RE.findall(title.lower())


def pad_ids(ids: list[int], length: int) -> tuple[np.ndarray, np.ndarray]:
    out = np.zeros(length, dtype=np.int64)
    ids = ids[:length]
    out[: len(ids)] = ids
    return out, out != 0


@dataclass(eq=False)
class NewsRecord:
    news_id: str
    token_ids: np.ndarray
    entity_ids: np.ndarray
    token_mask: np.ndarray
    entity_mask: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, NewsRecord)
            and self.news_id == other.news_id
            and np.array_equal(self.token_ids, other.token_ids)
            and np.array_equal(self.entity_ids, other.entity_ids)
        )

    @classmethod
    def build(cls, news_id: str, tokens: list[int], entities: list[int], title_len=TITLE_LEN, num_entities=NUM_ENTITIES):
        t, tm = pad_ids(tokens, title_len)
        e, em = pad_ids(entities, num_entities)
        return cls(news_id, t, e, tm, em)


@dataclass(eq=False)
class UserHistory:
    user_id: str
    clicked_news: list[str]  # most recent first, "" for PAD slots
    history_mask: np.ndarray

    def __eq__(self, other):
        return (
            isinstance(other, UserHistory)
            and self.user_id == other.user_id
            and self.clicked_news == other.clicked_news
        )

    @classmethod
    def build(cls, user_id: str, recent_first: list[str], history_len=HISTORY_LEN):
        ids = list(recent_first[:history_len])
        mask = np.zeros(history_len, dtype=bool)
        mask[: len(ids)] = True
        return cls(user_id, ids + [""] * (history_len - len(ids)), mask)

    @property
    def real_clicks(self) -> list[str]:
        return [n for n, m in zip(self.clicked_news, self.history_mask) if m]


@dataclass
class ImpressionRecord:
    impression_id: str
    user: UserHistory
    candidates: list[tuple[str, int]]

    @property
    def labels(self) -> np.ndarray:
        return np.array([lab for _, lab in self.candidates], dtype=np.int64)

    @property
    def candidate_ids(self) -> list[str]:
        return [n for n, _ in self.candidates]


@dataclass
class KnowledgeGraph:
    adjacency: dict[int, list[int]]
    neighbor_table: np.ndarray  # [E, B]
    neighbor_mask: np.ndarray
    entity_vectors: np.ndarray  # [E, d_k], row 0 zero

    @property
    def num_entities(self) -> int:
        return self.entity_vectors.shape[0]


@dataclass
class EmbeddingTable:
    vectors: np.ndarray  # [vocab, dim], row 0 zero
    coverage: float = 0.0
    duplicates: int = 0


@dataclass
class ParseStats:
    bad_entity_json: int = 0
    dropped_history: int = 0
    skipped_edges: int = 0
    extra: dict = field(default_factory=dict)


def _open_tsv(path):
    try:
        return open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def parse_news_file(
    path,
    vocab: Vocab,
    entity_vocab: Vocab,
    title_len: int = TITLE_LEN,
    num_entities: int = NUM_ENTITIES,
    stats: ParseStats | None = None,
) -> list[NewsRecord]:
    """Read a MIND ``news.tsv``; grows ``vocab`` and ``entity_vocab`` in place."""
    stats = stats if stats is not None else ParseStats()
    records = []
    with _open_tsv(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) < 7:
                raise DataError(f"{path}:{lineno}: expected 8 tab-separated columns, got {len(cols)}")
            news_id, title, ents_raw = cols[0], cols[3], cols[6]
            if not news_id:
                raise DataError(f"{path}:{lineno}: empty news id")
            tokens = [vocab.add(t) for t in tokenize(title)[:title_len]]
            entities = []
            if ents_raw.strip():
                try:
                    wids = [obj["WikidataId"] for obj in json.loads(ents_raw)]
                except (json.JSONDecodeError, TypeError, KeyError):
                    stats.bad_entity_json += 1
                    wids = []
                entities = [entity_vocab.add(w) for w in wids[:num_entities]]
            records.append(NewsRecord.build(news_id, tokens, entities, title_len, num_entities))
    if stats.bad_entity_json:
        log.warning("%s: %d rows with unreadable entity JSON", path, stats.bad_entity_json)
    return records


def parse_behaviors_file(
    path,
    news_index: dict[str, NewsRecord],
    history_len: int = HISTORY_LEN,
    stats: ParseStats | None = None,
    require_labels: bool = True,
) -> list[ImpressionRecord]:
    """Read a MIND ``behaviors.tsv``. History is kept most-recent-first.

    With ``require_labels=False`` bare candidate ids (as in the test split)
    are accepted and labelled 0.
    """
    stats = stats if stats is not None else ParseStats()
    out = []
    with _open_tsv(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 5:
                raise DataError(f"{path}:{lineno}: expected 5 tab-separated columns, got {len(cols)}")
            imp_id, user_id, _time, hist_raw, imps_raw = cols
            history = []
            for nid in hist_raw.split():
                if nid in news_index:
                    history.append(nid)
                else:
                    stats.dropped_history += 1
            recent = history[::-1][:history_len]
            cands = []
            for tok in imps_raw.split():
                nid, sep, lab = tok.rpartition("-")
                if not require_labels and (not sep or lab not in ("0", "1")):
                    cands.append((tok, 0))
                    continue
                if not sep or lab not in ("0", "1") or not nid:
                    raise DataError(f"{path}:{lineno}: candidate {tok!r} lacks a -0/-1 label")
                cands.append((nid, int(lab)))
            if not cands:
                raise DataError(f"{path}:{lineno}: impression has no candidates")
            out.append(ImpressionRecord(imp_id, UserHistory.build(user_id, recent, history_len), cands))
    return out


def load_vector_file(path, dim: int, id_map: Vocab, seed: int = 0) -> EmbeddingTable:
    """Read whitespace-separated ``token v1 ... v_dim`` lines into a table for ``id_map``.

    Tokens missing from the file get ``U(-0.05, 0.05)`` vectors; row 0 is zero.
    """
    rng = np.random.default_rng(seed)
    table = rng.uniform(-0.05, 0.05, size=(len(id_map), dim))
    found = np.zeros(len(id_map), dtype=bool)
    dup = 0
    with _open_tsv(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{path}:{lineno}: expected {dim} components, got {len(parts) - 1}")
            idx = id_map.get(parts[0], -1)
            if idx <= 0:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}:{lineno}: non-finite value")
            if found[idx]:
                dup += 1
            table[idx] = vec
            found[idx] = True
    table[0] = 0.0
    real = len(id_map) - 1
    coverage = float(found[1:].sum()) / real if real else 0.0
    if dup:
        log.warning("%s: %d duplicate tokens (last occurrence kept)", path, dup)
    return EmbeddingTable(table, coverage, dup)


def read_vector_tokens(path) -> list[str]:
    """First column of a vector file, in order (used to size the entity vocab)."""
    tokens = []
    with _open_tsv(path) as fh:
        for line in fh:
            parts = line.split(None, 1)
            if parts:
                tokens.append(parts[0])
    return tokens


def load_kg_edges(path, entity_vocab: Vocab, stats: ParseStats | None = None) -> dict[int, list[int]]:
    """Undirected adjacency from ``entity \\t neighbor`` lines; unknown ids are skipped."""
    stats = stats if stats is not None else ParseStats()
    adj: dict[int, list[int]] = {}
    seen: set[tuple[int, int]] = set()
    with _open_tsv(path) as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
            if not row:
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            a, b = entity_vocab.get(row[0].strip()), entity_vocab.get(row[1].strip())
            if a == 0 or b == 0:
                stats.skipped_edges += 1
                continue
            for x, y in ((a, b), (b, a)):
                if (x, y) not in seen:
                    seen.add((x, y))
                    adj.setdefault(x, []).append(y)
    return adj


def build_neighbor_table(
    adjacency: dict[int, list[int]], num_entities: int, B: int = NUM_NEIGHBORS, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Sample up to ``B`` neighbors per entity without replacement."""
    if B <= 0:
        raise ValueError("B must be positive")
    rng = np.random.default_rng(seed)
    table = np.zeros((num_entities, B), dtype=np.int64)
    for e in range(1, num_entities):
        nbrs = adjacency.get(e)
        if not nbrs:
            continue
        if len(nbrs) > B:
            pick = rng.choice(len(nbrs), size=B, replace=False)
            chosen = [nbrs[i] for i in sorted(pick)]
        else:
            chosen = list(nbrs)
        table[e, : len(chosen)] = chosen
    return table, table != 0


def build_knowledge_graph(adjacency, entity_vectors: np.ndarray, B: int = NUM_NEIGHBORS, seed: int = 0) -> KnowledgeGraph:
    vecs = np.array(entity_vectors, dtype=np.float64, copy=True)
    vecs[0] = 0.0
    table, mask = build_neighbor_table(adjacency, vecs.shape[0], B, seed)
    return KnowledgeGraph(adjacency, table, mask, vecs)


class NewsTable:
    """Dense arrays for a news collection; row 0 is an all-PAD news item."""

    def __init__(self, records: list[NewsRecord]):
        if not records:
            raise ValueError("empty news collection")
        self.ids = [""] + [r.news_id for r in records]
        self.index = {nid: i for i, nid in enumerate(self.ids)}
        if len(self.index) != len(self.ids):
            raise DataError("duplicate news ids")
        m, d = len(records[0].token_ids), len(records[0].entity_ids)
        self.tokens = np.zeros((len(self.ids), m), dtype=np.int64)
        self.entities = np.zeros((len(self.ids), d), dtype=np.int64)
        for i, r in enumerate(records, 1):
            self.tokens[i] = r.token_ids
            self.entities[i] = r.entity_ids
        self.records = records

    def __len__(self):
        return len(self.ids)

    def lookup(self, news_ids) -> np.ndarray:
        return np.array([self.index[n] if n else 0 for n in news_ids], dtype=np.int64)

    def without_entities(self) -> "NewsTable":
        out = NewsTable.__new__(NewsTable)
        out.__dict__.update(self.__dict__)
        out.entities = np.zeros_like(self.entities)
        return out

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.ids).encode())
        h.update(self.tokens.tobytes())
        h.update(self.entities.tobytes())
        return h.hexdigest()


@dataclass
class Dataset:
    """Everything needed to train or evaluate, after vocabularies are fixed."""

    news: NewsTable
    word_vocab: Vocab
    entity_vocab: Vocab
    word_vectors: np.ndarray
    kg: KnowledgeGraph
    train: list[ImpressionRecord] = field(default_factory=list)
    val: list[ImpressionRecord] = field(default_factory=list)
    test: list[ImpressionRecord] = field(default_factory=list)


def load_mind_dataset(data_cfg, model_cfg, seed: int = 0) -> Dataset:
    """Assemble a :class:`Dataset` from the paths in a ``DataConfig``."""
    vocab, evocab = Vocab(), Vocab()
    stats = ParseStats()
    news = parse_news_file(data_cfg.news, vocab, evocab, model_cfg.title_len, model_cfg.num_entities, stats)
    if not news:
        raise DataError(f"{data_cfg.news}: no news rows")
    if data_cfg.entity_vectors:
        for tok in read_vector_tokens(data_cfg.entity_vectors):
            evocab.add(tok)
    index = {r.news_id: r for r in news}
    splits = {}
    for name in ("train", "val", "test"):
        p = getattr(data_cfg, f"{name}_behaviors")
        splits[name] = parse_behaviors_file(p, index, model_cfg.history_len, stats) if p else []
    if data_cfg.word_vectors:
        words = load_vector_file(data_cfg.word_vectors, model_cfg.word_dim, vocab, seed).vectors
    else:
        words = np.random.default_rng(seed).uniform(-0.05, 0.05, (len(vocab), model_cfg.word_dim))
        words[0] = 0
    if data_cfg.entity_vectors:
        ents = load_vector_file(data_cfg.entity_vectors, model_cfg.entity_dim, evocab, seed + 1).vectors
    else:
        ents = np.random.default_rng(seed + 1).uniform(-0.05, 0.05, (len(evocab), model_cfg.entity_dim))
    adj = load_kg_edges(data_cfg.kg_edges, evocab, stats) if data_cfg.kg_edges else {}
    if stats.dropped_history or stats.skipped_edges:
        log.info("dropped %d history clicks, skipped %d KG edges", stats.dropped_history, stats.skipped_edges)
    kg = build_knowledge_graph(adj, ents, model_cfg.num_neighbors, seed)
    return Dataset(NewsTable(news), vocab, evocab, words, kg, splits["train"], splits["val"], splits["test"])


def write_news_file(path, rows) -> None:
    """Write MIND news rows: (news_id, category, subcategory, title, entity WikidataIds)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for nid, cat, sub, title, ents in rows:
            ent_json = json.dumps([{"Label": e, "Type": "X", "WikidataId": e, "Confidence": 1.0, "OccurrenceOffsets": [0], "SurfaceForms": [e]} for e in ents])
            fh.write("\t".join([nid, cat, sub, title, "", "", ent_json, "[]"]) + "\n")


def write_behaviors_file(path, impressions: list[ImpressionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for imp in impressions:
            hist = " ".join(reversed(imp.user.real_clicks))
            cands = " ".join(f"{n}-{lab}" for n, lab in imp.candidates)
            fh.write("\t".join([imp.impression_id, imp.user.user_id, "11/11/2019 9:00:00 AM", hist, cands]) + "\n")


def write_vector_file(path, tokens: list[str], vectors: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, vec in zip(tokens, vectors):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in vec) + "\n")


def write_kg_edges(path, edges: list[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a, b in edges:
            fh.write(f"{a}\t{b}\n")

