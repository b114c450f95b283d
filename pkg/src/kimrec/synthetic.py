"""Seeded generator for small, learnable news-recommendation corpora.

Each topic owns a word pool (with one anchor word every topical title
contains), a set of *core* entities whose vectors cluster around a topic
centroid, and a set of *bridge* entities with unrelated random vectors that
are linked to the topic's core entities only through KG edges.

Two news styles exist per topic:

* text style: topic words plus core entities, so text and entities both match;
* KG style: words from a pool shared by every topic plus bridge entities, so
  only the knowledge graph ties them to the topic.

Users own one or two topics and click text-style news of those topics.
Positives come from the user's topics (KG style with probability
``kg_signal_fraction``); negatives come from other topics with the same style
mix, so the style itself carries no label information.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .ingest import (
    ImpressionRecord,
    KnowledgeGraph,
    EmbeddingTable,
    NewsRecord,
    UserHistory,
    Vocab,
    build_knowledge_graph,
    write_behaviors_file,
    write_kg_edges,
    write_news_file,
    write_vector_file,
)

STOPWORDS = ("the", "a", "of", "in", "to", "on", "for", "with", "and", "is")


@dataclass
class SyntheticSpec:
    topics: int = 50
    news: int = 500
    users: int = 200
    train_impressions: int = 400
    val_impressions: int = 200
    candidates: int = 5
    max_positives: int = 1
    min_history: int = 3
    max_history: int = 10
    words_per_topic: int = 8
    shared_words: int = 60
    core_entities_per_topic: int = 4
    bridge_entities_per_topic: int = 4
    bridge_degree: int = 3
    noise_edges: int = 50
    kg_signal_fraction: float = 0.3
    label_noise: float = 0.0
    word_dim: int = 300
    entity_dim: int = 100
    title_len: int = 30
    num_entities: int = 5
    history_len: int = 50
    num_neighbors: int = 10

    def validate(self) -> None:
        if self.candidates < 2:
            raise ValueError("candidates per impression must be >= 2")
        if not 1 <= self.max_positives < self.candidates:
            raise ValueError("max_positives must be in [1, candidates)")
        if self.topics < 1 or self.users < 1 or self.train_impressions < 1:
            raise ValueError("topics, users and train_impressions must be >= 1")
        if self.news < 2 * self.topics:
            raise ValueError("need at least two news per topic")
        if not 0.0 <= self.kg_signal_fraction <= 1.0 or not 0.0 <= self.label_noise < 0.5:
            raise ValueError("kg_signal_fraction must be in [0, 1], label_noise in [0, 0.5)")
        if not 1 <= self.min_history <= self.max_history:
            raise ValueError("need 1 <= min_history <= max_history")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and v < 0:
                raise ValueError(f"{f.name} must be non-negative")


def read_synthetic_spec(path) -> SyntheticSpec:
    """Read a ``[synthetic]`` INI section; keys are :class:`SyntheticSpec` fields."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read(path, encoding="utf-8")
    spec = SyntheticSpec()
    known = {f.name: f for f in fields(spec)}
    if cp.has_section("synthetic"):
        for key, raw in cp.items("synthetic"):
            if key not in known:
                raise ValueError(f"synthetic.{key}: unknown key")
            cur = getattr(spec, key)
            setattr(spec, key, type(cur)(raw))
    spec.validate()
    return spec


@dataclass
class SyntheticCorpus:
    news: list[NewsRecord]
    train: list[ImpressionRecord]
    val: list[ImpressionRecord]
    kg: KnowledgeGraph
    words: EmbeddingTable
    word_vocab: Vocab
    entity_vocab: Vocab
    news_topic: dict[str, int] = field(default_factory=dict)
    news_style: dict[str, str] = field(default_factory=dict)
    titles: dict[str, list[str]] = field(default_factory=dict)
    news_entities: dict[str, list[str]] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (news, impressions, kg, word table)
        return iter((self.news, self.train, self.kg, self.words))

    def write(self, out_dir) -> dict[str, str]:
        """Write MIND-format files; returns the ``[data]`` paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for r in self.news:
            rows.append((r.news_id, f"topic{self.news_topic[r.news_id]}", self.news_style[r.news_id],
                         " ".join(self.titles[r.news_id]), self.news_entities[r.news_id]))
        paths = {
            "news": str(out / "news.tsv"),
            "train_behaviors": str(out / "train_behaviors.tsv"),
            "val_behaviors": str(out / "val_behaviors.tsv"),
            "word_vectors": str(out / "words.vec"),
            "entity_vectors": str(out / "entities.vec"),
            "kg_edges": str(out / "kg_edges.tsv"),
        }
        write_news_file(paths["news"], rows)
        write_behaviors_file(paths["train_behaviors"], self.train)
        write_behaviors_file(paths["val_behaviors"], self.val)
        write_vector_file(paths["word_vectors"], self.word_vocab.itos[1:], self.words.vectors[1:])
        write_vector_file(paths["entity_vectors"], self.entity_vocab.itos[1:], self.kg.entity_vectors[1:])
        write_kg_edges(paths["kg_edges"], self.edges)
        return paths


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int = 0) -> SyntheticCorpus:
    spec.validate()
    rng = np.random.default_rng(seed)
    T = spec.topics

    vocab = Vocab(STOPWORDS)
    topic_words = [[vocab.add(f"t{t}w{k}") for k in range(spec.words_per_topic)] for t in range(T)]
    shared = [vocab.add(f"s{k}") for k in range(spec.shared_words)]

    evocab = Vocab()
    core = [[evocab.add(f"Q{t}c{k}") for k in range(spec.core_entities_per_topic)] for t in range(T)]
    bridge = [[evocab.add(f"Q{t}b{k}") for k in range(spec.bridge_entities_per_topic)] for t in range(T)]

    # word vectors: topic words cluster around a topic direction
    wv = rng.normal(0, 0.1, size=(len(vocab), spec.word_dim))
    wcent = rng.normal(0, 0.3, size=(T, spec.word_dim))
    for t in range(T):
        for w in topic_words[t]:
            wv[w] += wcent[t]
    wv[0] = 0.0
    ecent = rng.normal(0, 1.0 / np.sqrt(spec.entity_dim), size=(T, spec.entity_dim)) * 3
    ev = rng.normal(0, 1.0 / np.sqrt(spec.entity_dim), size=(len(evocab), spec.entity_dim))
    for t in range(T):
        for e in core[t]:
            ev[e] = ecent[t] + 0.3 * ev[e]
    ev[0] = 0.0

    edges: list[tuple[int, int]] = []
    for t in range(T):
        cs = core[t]
        for i in range(len(cs) - 1):
            edges.append((cs[i], cs[i + 1]))
        for b in bridge[t]:
            if cs:
                k = min(spec.bridge_degree, len(cs))
                for c in rng.choice(cs, size=k, replace=False):
                    edges.append((b, int(c)))
    n_ent = len(evocab)
    for _ in range(spec.noise_edges):
        a, b = rng.integers(1, n_ent, size=2)
        if a != b:
            edges.append((int(a), int(b)))
    adj: dict[int, list[int]] = {}
    seen = set()
    for a, b in edges:
        for x, y in ((a, b), (b, a)):
            if (x, y) not in seen:
                seen.add((x, y))
                adj.setdefault(x, []).append(y)
    kg = build_knowledge_graph(adj, ev, spec.num_neighbors, seed)

    # news: round-robin topics; per topic the first ceil(frac) share is KG style
    news, topic_of, style_of, titles, ents_of = [], {}, {}, {}, {}
    per_topic_text = [[] for _ in range(T)]
    per_topic_kg = [[] for _ in range(T)]
    counts = np.bincount(np.arange(spec.news) % T, minlength=T)
    nid = 0
    for t in range(T):
        n_kg = int(round(counts[t] * spec.kg_signal_fraction))
        if spec.kg_signal_fraction > 0 and counts[t] >= 2:
            n_kg = min(max(n_kg, 1), counts[t] - 1)
        for j in range(counts[t]):
            style = "kg" if j < n_kg else "text"
            n_words = int(rng.integers(4, 8))
            if style == "text":
                body = [topic_words[t][0]] + list(rng.choice(topic_words[t][1:], size=n_words - 1))
                ents = list(rng.choice(core[t], size=min(2, len(core[t])), replace=False)) if core[t] else []
            else:
                body = list(rng.choice(shared, size=n_words))
                ents = list(rng.choice(bridge[t], size=min(2, len(bridge[t])), replace=False)) if bridge[t] else []
            words = body + list(rng.choice(len(STOPWORDS), size=2) + 1)
            words = [int(w) for w in rng.permutation(words)]
            ents = [int(e) for e in ents]
            name = f"N{nid}"
            nid += 1
            news.append(NewsRecord.build(name, words, ents, spec.title_len, spec.num_entities))
            topic_of[name], style_of[name] = t, style
            titles[name] = [vocab.itos[w] for w in words]
            ents_of[name] = [evocab.itos[e] for e in ents]
            (per_topic_kg if style == "kg" else per_topic_text)[t].append(name)

    # users
    user_topics = []
    histories = []
    for u in range(spec.users):
        k = 1 if T == 1 or rng.random() < 0.5 else 2
        tops = [int(x) for x in rng.choice(T, size=k, replace=False)]
        # distinct clicks covering every owned topic, leaving text news unclicked for positives
        h = int(rng.integers(spec.min_history, spec.max_history + 1))
        clicks = []
        for t in tops:
            pool = per_topic_text[t] or per_topic_kg[t]
            cap = max(1, len(pool) - 2)
            take = min(cap, max(1, h // len(tops)))
            clicks += [str(x) for x in rng.choice(pool, size=take, replace=False)]
        clicks = [clicks[i] for i in rng.permutation(len(clicks))]
        user_topics.append(tops)
        histories.append(UserHistory.build(f"U{u}", clicks, spec.history_len))

    all_news = [r.news_id for r in news]

    def draw(topics: list[int], positive: bool, exclude: set[str]) -> str:
        want_kg = rng.random() < spec.kg_signal_fraction
        if positive:
            pool_t = topics
        else:
            pool_t = [t for t in range(T) if t not in topics]
        pools = [per_topic_kg[t] if want_kg else per_topic_text[t] for t in pool_t]
        cand = [n for p in pools for n in p if n not in exclude]
        if not cand:
            pools = [per_topic_kg[t] + per_topic_text[t] for t in pool_t]
            cand = [n for p in pools for n in p if n not in exclude]
        if not cand and positive:
            cand = [n for p in pools for n in p]
        if not cand:
            # one-topic corpora: anything not yet used, labeled negative by construction
            cand = [n for n in all_news if n not in exclude] or all_news
        return str(rng.choice(cand))

    def impressions(count: int, prefix: str) -> list[ImpressionRecord]:
        out = []
        for i in range(count):
            u = int(rng.integers(spec.users))
            hist = histories[u]
            used = set(hist.real_clicks)
            n_pos = int(rng.integers(1, spec.max_positives + 1))
            cands = []
            for j in range(spec.candidates):
                pos = j < n_pos
                n = draw(user_topics[u], pos, used)
                used.add(n)
                lab = int(pos)
                if spec.label_noise and rng.random() < spec.label_noise:
                    lab = 1 - lab
                cands.append((n, lab))
            labs = [lab for _, lab in cands]
            if 0 not in labs:
                cands[-1] = (cands[-1][0], 0)
            if 1 not in labs:
                cands[0] = (cands[0][0], 1)
            order = rng.permutation(len(cands))
            out.append(ImpressionRecord(f"{prefix}{i}", hist, [cands[k] for k in order]))
        return out

    train = impressions(spec.train_impressions, "T")
    val = impressions(spec.val_impressions, "V")
    edge_names = sorted({(evocab.itos[min(a, b)], evocab.itos[max(a, b)]) for a, b in edges if a != b})
    return SyntheticCorpus(
        news, train, val, kg, EmbeddingTable(wv, 1.0), vocab, evocab,
        topic_of, style_of, titles, ents_of, edge_names,
    )


def kg_only_positive_fraction(corpus: SyntheticCorpus, impressions=None) -> float:
    """Share of positives whose title shares no non-stopword token with the user's history."""
    impressions = corpus.train if impressions is None else impressions
    stop = set(STOPWORDS)
    total = kg_only = 0
    for imp in impressions:
        hist_words = {w for n in imp.user.real_clicks for w in corpus.titles[n]} - stop
        for n, lab in imp.candidates:
            if lab == 1:
                total += 1
                if not (set(corpus.titles[n]) - stop) & hist_words:
                    kg_only += 1
    return kg_only / total if total else 0.0
