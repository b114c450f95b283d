import numpy as np
import pytest
import torch

import reference as ref
from conftest import TinyWorld, tiny_config
from kimrec.ingest import NewsRecord, NewsTable, UserHistory
from kimrec.matcher import (
    KIM,
    encode_pair,
    history_rows,
    match,
    precompute_cache,
    score_grid,
    score_impression,
)
from kimrec.semantic import ContextualWords, semantic_coencode


def oracle_args(w):
    return w.kg.entity_vectors, w.kg.neighbor_table, w.kg.neighbor_mask, w.model.params


def tok_ent(r):
    return r.token_ids.tolist(), r.entity_ids.tolist()


def test_identity_fusion_gives_semantic_part(world):
    p = world.model.params
    d_t = world.cfg.text_dim
    with torch.no_grad():
        p["P_n"].copy_(torch.cat([torch.eye(d_t), torch.zeros(d_t, world.cfg.entity_dim)], 1))
    a, b = world.records[0], world.records[1]
    pair = encode_pair(world.model, a, b)
    H, _ = world.model.encode_news(world.news, torch.tensor(world.news.lookup([a.news_id, b.news_id])))
    t_u, t_c = semantic_coencode(ContextualWords(H[0], torch.tensor(a.token_mask)), ContextualWords(H[1], torch.tensor(b.token_mask)), p)
    assert torch.allclose(pair.n_u, t_u, atol=1e-12)
    assert torch.allclose(pair.n_c, t_c, atol=1e-12)


def test_pad_clicked_news_gives_zero(world):
    blank = NewsRecord.build("blank", [], [], world.cfg.title_len, world.cfg.num_entities)
    pair = encode_pair(world.model, blank, world.records[0])
    assert (pair.n_u == 0).all()


@pytest.mark.parametrize("seed", range(3))
def test_encode_pair_matches_oracle(seed):
    w = TinyWorld(tiny_config(), seed=20 + seed)
    a, b = w.records[0], w.records[1]
    pair = encode_pair(w.model, a, b)
    n_u, n_c = ref.encode_pair(*tok_ent(a), *tok_ent(b), *oracle_args(w))
    np.testing.assert_allclose(pair.n_u.detach().numpy(), n_u, atol=1e-6)
    np.testing.assert_allclose(pair.n_c.detach().numpy(), n_c, atol=1e-6)


def test_single_click(world):
    res = match(world.model, world.news, world.user(["N1"]), "N2")
    pair = encode_pair(world.model, world.records[1], world.records[2])
    assert res.gamma_u[0].item() == 1.0 and (res.gamma_u[1:] == 0).all()
    assert torch.allclose(res.u, pair.n_u, atol=1e-12)
    assert torch.allclose(res.c, pair.n_c, atol=1e-12)
    assert res.z.item() == pytest.approx(torch.dot(pair.n_u, pair.n_c).item(), abs=1e-12)


def test_empty_history(world):
    res = match(world.model, world.news, world.user([]), "N2")
    assert (res.u == 0).all() and (res.c == 0).all() and res.z.item() == 0.0
    assert (res.gamma_u == 0).all()


def test_history_permutation_invariance(world):
    a = match(world.model, world.news, world.user(["N0", "N1", "N3"]), "N4")
    b = match(world.model, world.news, world.user(["N3", "N0", "N1"]), "N4")
    assert abs(a.z.item() - b.z.item()) < 1e-10


def test_extra_masked_history_slots(world):
    long_cfg = tiny_config(history_len=7)
    long_model = KIM(long_cfg, world.model.params, world.kg)
    u3 = UserHistory.build("U", ["N0", "N1"], 3)
    u7 = UserHistory.build("U", ["N0", "N1"], 7)
    a = match(world.model, world.news, u3, "N4")
    b = match(long_model, world.news, u7, "N4")
    assert abs(a.z.item() - b.z.item()) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_match_matches_oracle(seed):
    w = TinyWorld(tiny_config(), seed=30 + seed)
    user = w.user(["N2", "N4"])
    res = match(w.model, w.news, user, "N1")
    hist = [tok_ent(w.records[2]), tok_ent(w.records[4]), None]
    z, g_u, g_c = ref.match(hist, tok_ent(w.records[1]), *oracle_args(w))
    assert res.z.item() == pytest.approx(z, abs=1e-6)
    np.testing.assert_allclose(res.gamma_u.detach().numpy(), g_u, atol=1e-6)
    np.testing.assert_allclose(res.gamma_c.detach().numpy(), g_c, atol=1e-6)


def test_score_impression_single_candidate(world):
    user = world.user(["N0", "N5"])
    s = score_impression(world.model, world.news, user, ["N3"])
    assert s.shape == (1,)
    assert s[0] == pytest.approx(match(world.model, world.news, user, "N3").z.item(), abs=1e-10)


def test_score_impression_duplicates_and_order(world):
    user = world.user(["N0", "N5", "N2"])
    s = score_impression(world.model, world.news, user, ["N1", "N3", "N1", "N4"])
    assert abs(s[0] - s[2]) < 1e-12
    r = score_impression(world.model, world.news, user, ["N4", "N1", "N3"])
    np.testing.assert_allclose(r, s[[3, 0, 1]], atol=1e-12)


def test_score_impression_empty(world):
    with pytest.raises(ValueError):
        score_impression(world.model, world.news, world.user(["N0"]), [])


def test_grid_equals_individual_matches(world):
    users = [world.user(["N0", "N1"]), world.user(["N2"]), world.user([])]
    h, m = history_rows(world.news, users)
    c = torch.tensor(np.stack([world.news.lookup(x) for x in (["N3", "N4"], ["N5", "N0"], ["N1", "N2"])]))
    z = score_grid(world.model, world.news, h, m, c)
    for i, cands in enumerate((["N3", "N4"], ["N5", "N0"], ["N1", "N2"])):
        for j, cid in enumerate(cands):
            assert z[i, j].item() == pytest.approx(match(world.model, world.news, users[i], cid).z.item(), abs=1e-10)


def test_cache_matches_inline(world):
    cache = precompute_cache(world.model, world.news)
    user = world.user(["N0", "N5"])
    a = score_impression(world.model, world.news, user, ["N1", "N2", "N3"])
    b = score_impression(world.model, world.news, user, ["N1", "N2", "N3"], cache=cache)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert cache.news_hash == world.news.content_hash()


def test_precompute_rejects_empty_news():
    with pytest.raises(ValueError):
        NewsTable([])


def test_every_parameter_gets_gradient():
    # with one entity or one neighbor some softmaxes are singletons and their
    # score parameters get exactly zero gradient, so use a dense world
    world = TinyWorld(tiny_config(), seed=3, dense=True)
    users = [world.user(["N5", "N1"]), world.user(["N2", "N3", "N4"])]
    h, m = history_rows(world.news, users)
    c = torch.tensor(np.stack([world.news.lookup(["N5", "N1"]), world.news.lookup(["N0", "N3"])]))
    p = world.model.params
    p.zero_grad()
    score_grid(world.model, world.news, h, m, c).sum().backward()
    for name, t in p.trainable().items():
        assert t.grad is not None and t.grad.abs().sum() > 0, name
    assert p["entity_embedding"].grad is None
