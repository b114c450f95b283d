import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kimrec.config import DataConfig, ModelConfig
from kimrec.ingest import (
    DataError,
    NewsRecord,
    ParseStats,
    Vocab,
    build_neighbor_table,
    load_kg_edges,
    load_mind_dataset,
    load_vector_file,
    parse_behaviors_file,
    parse_news_file,
    tokenize,
)


def ents_json(*wids):
    return json.dumps([{"Label": w, "WikidataId": w} for w in wids])


def news_line(nid, title, ents="[]"):
    return "\t".join([nid, "cat", "sub", title, "abstract", "url", ents, "[]"])


def write(tmp_path, name, lines):
    p = tmp_path / name
    p.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return p


def test_title_tokens_and_one_entity(tmp_path):
    p = write(tmp_path, "news.tsv", [news_line("N1", "Style is trending", ents_json("Q1"))])
    vocab, evocab = Vocab(), Vocab()
    [rec] = parse_news_file(p, vocab, evocab)
    w = vocab.stoi
    assert rec.token_ids.tolist() == [w["style"], w["is"], w["trending"]] + [0] * 27
    assert rec.entity_ids.tolist() == [evocab.stoi["Q1"], 0, 0, 0, 0]
    assert rec.token_mask.sum() == 3 and rec.entity_mask.tolist() == [True, False, False, False, False]


def test_empty_entity_column(tmp_path):
    p = write(tmp_path, "news.tsv", [news_line("N1", "a b", "")])
    [rec] = parse_news_file(p, Vocab(), Vocab())
    assert (rec.entity_ids == 0).all() and not rec.entity_mask.any()


def test_long_title_truncated(tmp_path):
    title = " ".join(f"w{i}" for i in range(40))
    p = write(tmp_path, "news.tsv", [news_line("N1", title)])
    vocab = Vocab()
    [rec] = parse_news_file(p, vocab, Vocab())
    assert rec.token_mask.all() and len(rec.token_ids) == 30
    assert rec.token_ids[-1] == vocab.stoi["w29"]


def test_entities_in_file_order_and_truncated(tmp_path):
    p = write(tmp_path, "news.tsv", [news_line("N1", "x", ents_json("Q7", "Q3", "Q9", "Q1", "Q2", "Q8", "Q5"))])
    ev = Vocab()
    [rec] = parse_news_file(p, Vocab(), ev)
    assert [ev.itos[i] for i in rec.entity_ids] == ["Q7", "Q3", "Q9", "Q1", "Q2"]


def test_bad_entity_json_counts_warning(tmp_path):
    p = write(tmp_path, "news.tsv", [news_line("N1", "x", "{not json"), news_line("N2", "y", ents_json("Q1"))])
    stats = ParseStats()
    ev = Vocab()
    recs = parse_news_file(p, Vocab(), ev, stats=stats)
    assert stats.bad_entity_json == 1
    assert not recs[0].entity_mask.any() and recs[1].entity_mask[0]
    assert len(ev) == 2


def test_malformed_news_row_names_line(tmp_path):
    p = write(tmp_path, "news.tsv", [news_line("N1", "x"), "N2\tcat\ttitle"])
    with pytest.raises(DataError, match=":2:"):
        parse_news_file(p, Vocab(), Vocab())


def test_tokenize():
    assert tokenize("Trump's Plan: U.S. jobs, now!") == ["trump's", "plan", "u", "s", "jobs", "now"]


@pytest.fixture
def index():
    return {f"N{i}": NewsRecord.build(f"N{i}", [1], []) for i in range(1, 80)}


def beh_line(imp, hist, cands):
    return "\t".join([imp, "U1", "11/11/2019 9:00:00 AM", hist, cands])


def test_history_padding(tmp_path, index):
    p = write(tmp_path, "b.tsv", [beh_line("1", "N1 N2 N3", "N4-1 N5-0")])
    [imp] = parse_behaviors_file(p, index)
    assert imp.user.history_mask.sum() == 3 and len(imp.user.history_mask) == 50
    assert imp.user.real_clicks == ["N3", "N2", "N1"]


def test_candidates_preserve_order(tmp_path, index):
    p = write(tmp_path, "b.tsv", [beh_line("1", "N1", "N1-1 N2-0")])
    [imp] = parse_behaviors_file(p, index)
    assert imp.candidates == [("N1", 1), ("N2", 0)]


def test_empty_history_retained(tmp_path, index):
    p = write(tmp_path, "b.tsv", [beh_line("1", "", "N1-1 N2-0")])
    [imp] = parse_behaviors_file(p, index)
    assert not imp.user.history_mask.any() and imp.user.clicked_news == [""] * 50


def test_history_keeps_last_50_most_recent_first(tmp_path, index):
    hist = " ".join(f"N{i}" for i in range(1, 61))
    p = write(tmp_path, "b.tsv", [beh_line("1", hist, "N1-0 N2-1")])
    [imp] = parse_behaviors_file(p, index)
    assert imp.user.clicked_news[0] == "N60" and imp.user.clicked_news[-1] == "N11"
    assert imp.user.history_mask.all()


def test_unknown_history_dropped_and_counted(tmp_path, index):
    p = write(tmp_path, "b.tsv", [beh_line("1", "N1 X9 N2", "N1-1")])
    stats = ParseStats()
    [imp] = parse_behaviors_file(p, index, stats=stats)
    assert stats.dropped_history == 1 and imp.user.real_clicks == ["N2", "N1"]


def test_unlabeled_candidate_names_line(tmp_path, index):
    p = write(tmp_path, "b.tsv", [beh_line("1", "N1", "N1-1"), beh_line("2", "N1", "N2 N3-0")])
    with pytest.raises(DataError, match=":2:"):
        parse_behaviors_file(p, index)
    imps = parse_behaviors_file(p, index, require_labels=False)
    assert imps[1].candidates == [("N2", 0), ("N3", 0)]


def test_vector_file_basic(tmp_path):
    p = write(tmp_path, "w.vec", ["the " + " ".join(["0.1"] * 4)])
    tab = load_vector_file(p, 4, Vocab(["the"]))
    assert tab.vectors[1].tolist() == [0.1] * 4 and tab.vectors[0].tolist() == [0.0] * 4
    assert tab.coverage == 1.0


def test_vector_file_empty(tmp_path):
    p = write(tmp_path, "w.vec", [])
    tab = load_vector_file(p, 3, Vocab(["a", "b"]), seed=1)
    assert tab.coverage == 0.0
    assert (tab.vectors[0] == 0).all()
    assert (np.abs(tab.vectors[1:]) <= 0.05).all() and (tab.vectors[1:] != 0).any()


def test_vector_file_duplicates_last_wins(tmp_path):
    p = write(tmp_path, "w.vec", ["a 1 1", "a 2 2"])
    tab = load_vector_file(p, 2, Vocab(["a"]))
    assert tab.vectors[1].tolist() == [2.0, 2.0] and tab.duplicates == 1


def test_vector_file_errors(tmp_path):
    with pytest.raises(DataError, match=":2"):
        load_vector_file(write(tmp_path, "a.vec", ["a 1 1", "b 1"]), 2, Vocab(["a"]))
    with pytest.raises(DataError):
        load_vector_file(write(tmp_path, "b.vec", ["a nan 1"]), 2, Vocab(["a"]))


def test_vector_file_seeded(tmp_path):
    p = write(tmp_path, "w.vec", [])
    a = load_vector_file(p, 3, Vocab(["x", "y"]), seed=5).vectors
    b = load_vector_file(p, 3, Vocab(["x", "y"]), seed=5).vectors
    assert np.array_equal(a, b)


def test_neighbor_table_few_neighbors():
    table, mask = build_neighbor_table({1: [2, 3, 4]}, 5, B=10, seed=0)
    assert table[1, :3].tolist() == [2, 3, 4] and (table[1, 3:] == 0).all()
    assert mask[1].tolist() == [True] * 3 + [False] * 7


def test_neighbor_table_many_neighbors():
    nbrs = list(range(2, 27))
    table, mask = build_neighbor_table({1: nbrs}, 27, B=10, seed=0)
    assert mask[1].all() and len(set(table[1].tolist())) == 10 and set(table[1].tolist()) <= set(nbrs)


def test_neighbor_table_deterministic():
    adj = {1: list(range(2, 30)), 2: [1, 5]}
    a = build_neighbor_table(adj, 30, 10, seed=4)
    b = build_neighbor_table(adj, 30, 10, seed=4)
    assert np.array_equal(a[0], b[0])


def test_kg_edges_undirected_and_unknown_skipped(tmp_path):
    ev = Vocab(["Q1", "Q2", "Q3"])
    p = write(tmp_path, "kg.tsv", ["Q1\tQ2", "Q2\tQ3", "Q1\tQ99"])
    stats = ParseStats()
    adj = load_kg_edges(p, ev, stats)
    assert adj[1] == [2] and sorted(adj[2]) == [1, 3] and adj[3] == [2]
    assert stats.skipped_edges == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(alphabet="abc xyz.,'", max_size=50), min_size=1, max_size=8))
def test_parse_pure_and_padded(tmp_path_factory, titles):
    tmp = tmp_path_factory.mktemp("n")
    p = write(tmp, "news.tsv", [news_line(f"N{i}", t) for i, t in enumerate(titles)])
    v1, v2 = Vocab(), Vocab()
    a = parse_news_file(p, v1, Vocab())
    b = parse_news_file(p, v2, Vocab())
    assert a == b and v1 == v2
    for r in a:
        assert len(r.token_ids) == 30
        assert np.array_equal(r.token_mask, r.token_ids != 0)
        n = int(r.token_mask.sum())
        assert r.token_mask[:n].all() and not r.token_mask[n:].any()
    for i, tok in enumerate(v1.itos[1:], 1):
        assert v1.stoi[tok] == i


def test_load_mind_dataset(tmp_path):
    write(tmp_path, "news.tsv", [news_line("N1", "alpha beta", ents_json("Q1")), news_line("N2", "gamma", ents_json("Q2"))])
    write(tmp_path, "train.tsv", [beh_line("1", "N1", "N2-1 N1-0")])
    write(tmp_path, "ents.vec", ["Q1 1 0", "Q2 0 1", "Q3 1 1"])
    write(tmp_path, "kg.tsv", ["Q1\tQ3", "Q2\tQ3"])
    data = DataConfig(news=str(tmp_path / "news.tsv"), train_behaviors=str(tmp_path / "train.tsv"),
                      entity_vectors=str(tmp_path / "ents.vec"), kg_edges=str(tmp_path / "kg.tsv"))
    cfg = ModelConfig(word_dim=4, entity_dim=2, num_neighbors=2)
    ds = load_mind_dataset(data, cfg)
    assert len(ds.news) == 3 and len(ds.train) == 1
    q3 = ds.entity_vocab.stoi["Q3"]
    assert ds.kg.neighbor_table[ds.entity_vocab.stoi["Q1"]].tolist() == [q3, 0]
    assert ds.kg.entity_vectors[q3].tolist() == [1.0, 1.0]
    assert ds.word_vectors.shape == (len(ds.word_vocab), 4) and (ds.word_vectors[0] == 0).all()


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError):
        parse_news_file(tmp_path / "nope.tsv", Vocab(), Vocab())
