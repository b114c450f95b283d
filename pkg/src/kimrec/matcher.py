"""Pair fusion, user-news co-attention and relevance scoring.

The scoring path is batched over a grid: ``S`` users, each with ``H`` history
slots and ``C`` candidates. Every (history slot, candidate) pair is encoded
jointly, so pair tensors carry leading dims ``[S, C, H]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .coattention import CoAttentionParams, coattend
from .config import ModelConfig
from .ingest import KnowledgeGraph, NewsTable, UserHistory
from .knowledge import EntityTree, build_entity_tree, gat_encode, knowledge_coencode
from .numerics import ParamRegistry, Tensor, glorot_uniform
from .semantic import ContextualWords, contextual_word_reps, semantic_coencode


def init_params(
    cfg: ModelConfig,
    word_vectors: np.ndarray,
    entity_vectors: np.ndarray,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> ParamRegistry:
    """Every model array, Glorot-uniform where not pretrained. No biases."""
    if word_vectors.shape[1] != cfg.word_dim:
        raise ValueError(f"word vectors have dim {word_vectors.shape[1]}, config says {cfg.word_dim}")
    if entity_vectors.shape[1] != cfg.entity_dim:
        raise ValueError(f"entity vectors have dim {entity_vectors.shape[1]}, config says {cfg.entity_dim}")
    gen = torch.Generator().manual_seed(seed)
    reg = ParamRegistry()

    def glorot(name, shape, **fans):
        reg.add(name, glorot_uniform(shape, gen, dtype, **fans))

    words = torch.as_tensor(word_vectors, dtype=dtype).clone()
    words[0] = 0
    ents = torch.as_tensor(entity_vectors, dtype=dtype).clone()
    ents[0] = 0
    reg.add("word_embedding", words)
    reg.add("entity_embedding", ents, frozen=True)

    dg, dt, dk, dn, dq = cfg.word_dim, cfg.text_dim, cfg.entity_dim, cfg.news_dim, cfg.query_dim
    w = cfg.cnn_window
    glorot("cnn.filters", (dt, dg, w), fan_in=dg * w, fan_out=dt * w)
    hw = dt // cfg.word_heads
    for k in ("W_q", "W_k", "W_v"):
        glorot(f"word_attn.{k}", (cfg.word_heads, dg, hw), fan_in=dg, fan_out=hw)

    he = dk // cfg.entity_heads
    for l in range(cfg.layers):
        glorot(f"gat.{l}.W", (dk, dk))
        glorot(f"gat.{l}.a", (2 * dk,))
        for k in ("W_q", "W_k", "W_v"):
            glorot(f"gcat.{l}.attn.{k}", (cfg.entity_heads, dk, he), fan_in=dk, fan_out=he)
        glorot(f"gcat.{l}.W_c_c", (dk, dk))
        glorot(f"gcat.{l}.W_c_s", (dq, dk))
        glorot(f"gcat.{l}.W_c_h", (dq, dk))
        glorot(f"gcat.{l}.q_e", (dq,))
        glorot(f"gcat.{l}.P_e", (dk, 2 * dk))

    for sym, d in (("k", dk), ("t", dt), ("n", dn)):
        glorot(f"W_{sym}_c", (d, d))
        glorot(f"W_{sym}_s", (dq, d))
        glorot(f"W_{sym}_h", (dq, d))
        glorot(f"q_{sym}", (dq,))
    glorot("P_n", (dn, dt + dk))
    return reg


class KIM:
    """Parameters plus the fixed knowledge-graph neighbor table."""

    def __init__(self, cfg: ModelConfig, params: ParamRegistry, kg: KnowledgeGraph):
        cfg.validate()
        self.cfg = cfg
        self.params = params
        if kg.neighbor_table.shape[1] != cfg.num_neighbors:
            raise ValueError("neighbor table width does not match config")
        self.neighbor_table = torch.as_tensor(kg.neighbor_table, dtype=torch.long)
        self.neighbor_mask = torch.as_tensor(kg.neighbor_mask, dtype=torch.bool)

    @classmethod
    def create(cls, cfg: ModelConfig, word_vectors, kg: KnowledgeGraph, seed=0, dtype=torch.float32) -> "KIM":
        return cls(cfg, init_params(cfg, word_vectors, kg.entity_vectors, seed, dtype), kg)

    def with_params(self, params: ParamRegistry) -> "KIM":
        out = KIM.__new__(KIM)
        out.__dict__.update(self.__dict__)
        out.params = params
        return out

    def entity_tree(self, entity_ids: Tensor) -> EntityTree:
        return build_entity_tree(entity_ids, self.neighbor_table, self.neighbor_mask, self.cfg.layers)

    def encode_news(self, news: NewsTable, rows: Tensor, training=False, gen=None) -> tuple[Tensor, Tensor]:
        """Per-news cacheable parts: contextual words ``H`` [n, M, d_t] and GAT ``M`` [n, D, d_k]."""
        tok = torch.as_tensor(news.tokens)[rows]
        words = contextual_word_reps(tok, tok != 0, self.params, self.cfg.dropout, training, gen)
        ents = torch.as_tensor(news.entities)[rows]
        M = gat_encode(self.entity_tree(ents), self.params, self.cfg.layers)
        return words.H, M


@dataclass
class PairEncoding:
    n_u: Tensor
    n_c: Tensor


@dataclass
class MatchResult:
    u: Tensor
    c: Tensor
    z: Tensor
    gamma_u: Tensor
    gamma_c: Tensor


@dataclass
class NewsCache:
    """Precomputed ``H`` and ``M`` for every row of a :class:`NewsTable`."""

    H: Tensor  # [n, M, d_t]
    M: Tensor  # [n, D, d_k]
    news_hash: str = ""


def fuse(t: Tensor, k: Tensor, P_n: Tensor) -> Tensor:
    return torch.cat([t, k], dim=-1) @ P_n.T


def score_grid(
    model: KIM,
    news: NewsTable,
    hist_idx: Tensor,
    hist_mask: Tensor,
    cand_idx: Tensor,
    training: bool = False,
    gen: torch.Generator | None = None,
    cache: NewsCache | None = None,
    details: bool = False,
):
    """Relevance ``z`` [S, C] for each (user, candidate) in the grid.

    ``hist_idx``/``hist_mask`` are ``[S, H]`` rows into ``news``;
    ``cand_idx`` is ``[S, C]``.
    """
    S, Hn = hist_idx.shape
    C = cand_idx.shape[1]
    params = model.params
    allrows = torch.cat([hist_idx.reshape(-1), cand_idx.reshape(-1)])
    uniq, inv = torch.unique(allrows, return_inverse=True)
    lh = inv[: S * Hn].view(S, Hn)
    lc = inv[S * Hn :].view(S, C)

    if cache is not None:
        Hw, M = cache.H[uniq].to(params.dtype), cache.M[uniq].to(params.dtype)
    else:
        Hw, M = model.encode_news(news, uniq, training, gen)
    tok = torch.as_tensor(news.tokens)[uniq]
    tmask = tok != 0
    ents = torch.as_tensor(news.entities)[uniq]

    words_u = ContextualWords(Hw[lh].unsqueeze(1), tmask[lh].unsqueeze(1))
    words_c = ContextualWords(Hw[lc].unsqueeze(2), tmask[lc].unsqueeze(2))
    t_u, t_c = semantic_coencode(words_u, words_c, params)

    tree_u = model.entity_tree(ents[lh].unsqueeze(1))
    tree_c = model.entity_tree(ents[lc].unsqueeze(2))
    k_u, k_c = knowledge_coencode(tree_u, tree_c, M[lh].unsqueeze(1), M[lc].unsqueeze(2), params, model.cfg.layers)

    hm = hist_mask.unsqueeze(1)  # [S, 1, H]
    n_u = fuse(t_u, k_u, params["P_n"]) * hm.unsqueeze(-1)
    n_c = fuse(t_c, k_c, params["P_n"]) * hm.unsqueeze(-1)
    out = coattend(n_u, n_c, hm, hm, CoAttentionParams.from_registry(params, "W_n"))
    z = (out.pooled_u * out.pooled_c).sum(-1)
    if details:
        return z, out, PairEncoding(n_u, n_c)
    return z


def history_rows(news: NewsTable, users: list[UserHistory], trim: bool = True) -> tuple[Tensor, Tensor]:
    """Stack user histories into ``[S, H]`` rows and mask.

    With ``trim`` the history axis is cut to the longest real history in the
    batch (at least 1); masked slots contribute nothing, so scores are the same.
    """
    idx = np.stack([news.lookup(u.clicked_news) for u in users])
    mask = np.stack([u.history_mask for u in users])
    if trim:
        keep = max(1, int(mask.sum(1).max()))
        idx, mask = idx[:, :keep], mask[:, :keep]
    return torch.as_tensor(idx), torch.as_tensor(mask)


def encode_pair(model: KIM, clicked, candidate) -> PairEncoding:
    """Interactive representations (n_u, n_c) of one (clicked, candidate) pair of ``NewsRecord``s."""
    table = NewsTable([clicked, candidate]) if clicked.news_id != candidate.news_id else NewsTable([clicked])
    rows = table.lookup([clicked.news_id, candidate.news_id])
    Hw, M = model.encode_news(table, torch.as_tensor(rows))
    tok = torch.as_tensor(table.tokens)[rows]
    ents = torch.as_tensor(table.entities)[rows]
    p = model.params
    t_u, t_c = semantic_coencode(ContextualWords(Hw[0], tok[0] != 0), ContextualWords(Hw[1], tok[1] != 0), p)
    k_u, k_c = knowledge_coencode(model.entity_tree(ents[0]), model.entity_tree(ents[1]), M[0], M[1], p, model.cfg.layers)
    return PairEncoding(fuse(t_u, k_u, p["P_n"]), fuse(t_c, k_c, p["P_n"]))


def match(model: KIM, news: NewsTable, user: UserHistory, candidate_id: str) -> MatchResult:
    h, m = history_rows(news, [user], trim=False)
    c = torch.as_tensor(news.lookup([candidate_id])).view(1, 1)
    z, out, _ = score_grid(model, news, h, m, c, details=True)
    return MatchResult(out.pooled_u[0, 0], out.pooled_c[0, 0], z[0, 0], out.weights_u[0, 0], out.weights_c[0, 0])


def score_impression(model: KIM, news: NewsTable, user: UserHistory, candidate_ids: list[str], cache: NewsCache | None = None) -> np.ndarray:
    """Scores in candidate order; each candidate is matched independently."""
    if not candidate_ids:
        raise ValueError("empty candidate list")
    h, m = history_rows(news, [user])
    c = torch.as_tensor(news.lookup(candidate_ids)).view(1, -1)
    with torch.no_grad():
        z = score_grid(model, news, h, m, c, cache=cache)
    return z[0].double().numpy()


def precompute_cache(model: KIM, news: NewsTable, chunk: int = 256) -> NewsCache:
    if len(news) <= 1:
        raise ValueError("empty news set")
    Hs, Ms = [], []
    with torch.no_grad():
        for start in range(0, len(news), chunk):
            rows = torch.arange(start, min(start + chunk, len(news)))
            H, M = model.encode_news(news, rows)
            Hs.append(H)
            Ms.append(M)
    return NewsCache(torch.cat(Hs), torch.cat(Ms), news.content_hash())
