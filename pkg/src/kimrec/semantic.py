"""Per-news contextual word representations and the pairwise semantic co-attention."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .coattention import CoAttentionParams, coattend, multihead_self_attention
from .numerics import ParamRegistry, Tensor, dropout_apply


@dataclass
class ContextualWords:
    H: Tensor  # [..., M, d_t], PAD rows zero
    mask: Tensor  # [..., M]


def contextual_word_reps(
    token_ids: Tensor,
    token_mask: Tensor,
    params: ParamRegistry,
    dropout: float = 0.0,
    training: bool = False,
    gen: torch.Generator | None = None,
) -> ContextualWords:
    """Local (CNN) plus global (self-attention) word context for each title.

    ``token_ids`` is ``[n, M]``; returns ``H`` of shape ``[n, M, d_t]``.
    """
    table = params["word_embedding"]
    if token_ids.numel() and (int(token_ids.min()) < 0 or int(token_ids.max()) >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    T = F.embedding(token_ids, table)
    T = dropout_apply(T, dropout, training, gen)

    filters = params["cnn.filters"]  # [d_t, d_g, w]
    lead = T.shape[:-2]
    flat = T.reshape(-1, *T.shape[-2:])
    L = torch.relu(F.conv1d(flat.transpose(1, 2), filters, padding=filters.shape[-1] // 2)).transpose(1, 2)
    L = L.reshape(*lead, *L.shape[-2:])

    J = multihead_self_attention(
        T, token_mask, params["word_attn.W_q"], params["word_attn.W_k"], params["word_attn.W_v"]
    )
    H = (L + J) * token_mask.unsqueeze(-1)
    H = dropout_apply(H, dropout, training, gen)
    return ContextualWords(H, token_mask)


def semantic_coencode(words_u: ContextualWords, words_c: ContextualWords, params: ParamRegistry):
    """(t_u, t_c) for every broadcast pair of clicked/candidate titles."""
    out = coattend(words_u.H, words_c.H, words_u.mask, words_c.mask, CoAttentionParams.from_registry(params, "W_t"))
    return out.pooled_u, out.pooled_c
