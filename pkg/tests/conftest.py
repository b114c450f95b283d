import numpy as np
import pytest
import torch

from kimrec.config import ModelConfig
from kimrec.ingest import KnowledgeGraph, NewsRecord, NewsTable, UserHistory
from kimrec.matcher import KIM


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        title_len=4, num_entities=2, num_neighbors=3, history_len=3, layers=1,
        word_dim=6, text_dim=8, entity_dim=6, news_dim=8, query_dim=5,
        word_heads=1, entity_heads=1, cnn_window=3, dropout=0.2,
    )
    base.update(kw)
    return ModelConfig(**base)


class TinyWorld:
    """Random vocabularies, KG and news for a tiny float64 model."""

    def __init__(self, cfg: ModelConfig, seed=0, n_news=6, n_words=12, n_entities=9, dense=False):
        # dense: every news fills all entity slots and every entity has B neighbors
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.rng = rng
        words = rng.normal(0, 0.5, (n_words, cfg.word_dim))
        words[0] = 0
        ents = rng.normal(0, 0.5, (n_entities, cfg.entity_dim))
        ents[0] = 0
        B = cfg.num_neighbors
        table = np.zeros((n_entities, B), dtype=np.int64)
        for e in range(1, n_entities):
            k = B if dense else rng.integers(0, B + 1)
            table[e, :k] = rng.choice(np.arange(1, n_entities), size=k, replace=False)
        self.kg = KnowledgeGraph({}, table, table != 0, ents)
        self.word_vectors = words
        self.records = []
        for i in range(n_news):
            nt = int(rng.integers(1, cfg.title_len + 1))
            ne = cfg.num_entities if dense else int(rng.integers(0, cfg.num_entities + 1))
            toks = rng.integers(1, n_words, nt).tolist()
            es = rng.choice(np.arange(1, n_entities), size=ne, replace=False).tolist()
            self.records.append(NewsRecord.build(f"N{i}", toks, es, cfg.title_len, cfg.num_entities))
        self.news = NewsTable(self.records)
        self.model = KIM.create(cfg, words, self.kg, seed=seed, dtype=torch.float64)

    def user(self, clicks, uid="U"):
        return UserHistory.build(uid, clicks, self.cfg.history_len)


@pytest.fixture
def world():
    return TinyWorld(tiny_config(), seed=3)


def np64(t):
    return t.detach().double().numpy()


_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a PASS/FAIL line for the acceptance summary, then assert.

    ``ok=None`` records SKIP and skips the test.
    """

    def record(name, ok, detail=""):
        tag = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        request.config.stash.setdefault(_RESULTS, []).append(f"{tag}  {name}  {detail}".rstrip())
        if ok is None:
            pytest.skip(detail)
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_RESULTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
