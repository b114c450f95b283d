"""Knowledge co-encoder: GAT stack, graph co-attention (GCAT) stack, entity co-attention.

Both stacks work on a K-hop neighborhood tree per news. Depth ``j`` of the
tree holds the entity ids reached after ``j`` hops, shaped ``[..., D] + [B]*j``;
a layer updates depth ``j`` from depths ``j`` and ``j + 1``, so after ``K``
layers only depth 0 (the news's own entities) is left.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .coattention import CoAttentionParams, coattend, guided_attention, multihead_self_attention
from .numerics import ParamRegistry, Tensor, masked_softmax

LEAKY_SLOPE = 0.2


@dataclass
class EntityTree:
    ids: list[Tensor]  # ids[j]: [..., D] + [B]*j, PAD 0
    masks: list[Tensor]

    @property
    def depth(self) -> int:
        return len(self.ids) - 1

    def map(self, fn) -> "EntityTree":
        return EntityTree([fn(x) for x in self.ids], [fn(m) for m in self.masks])


def build_entity_tree(entity_ids: Tensor, neighbor_table: Tensor, neighbor_mask: Tensor, hops: int) -> EntityTree:
    ids = [entity_ids]
    masks = [entity_ids != 0]
    for _ in range(hops):
        parent, pmask = ids[-1], masks[-1]
        ids.append(neighbor_table[parent])
        masks.append(neighbor_mask[parent] & pmask.unsqueeze(-1))
    return EntityTree(ids, masks)


def gat_layer(center: Tensor, nbrs: Tensor, nbr_mask: Tensor, W: Tensor, a: Tensor) -> Tensor:
    """Additive single-head graph attention over ``{self} + neighbors``.

    ``center`` is ``[..., d]``, ``nbrs`` ``[..., B, d]``.
    """
    d = W.shape[0]
    hc = center @ W.T
    cand = torch.cat([hc.unsqueeze(-2), nbrs @ W.T], dim=-2)  # [..., B+1, d]
    mask = torch.cat([torch.ones_like(nbr_mask[..., :1]), nbr_mask], dim=-1)
    e = F.leaky_relu((hc @ a[:d]).unsqueeze(-1) + cand @ a[d:], LEAKY_SLOPE)
    alpha = masked_softmax(e, mask, dim=-1)
    return (alpha.unsqueeze(-1) * cand).sum(-2)


def gat_encode(tree: EntityTree, params: ParamRegistry, layers: int) -> Tensor:
    """Entity representations ``M`` ``[..., D, d_k]`` after ``layers`` GAT layers."""
    if layers < 1 or tree.depth < layers:
        raise ValueError(f"need 1 <= layers <= tree depth ({tree.depth}), got {layers}")
    table = params["entity_embedding"]
    reps = [F.embedding(ids, table) for ids in tree.ids]
    for l in range(layers):
        W, a = params[f"gat.{l}.W"], params[f"gat.{l}.a"]
        reps = [
            gat_layer(reps[j], reps[j + 1], tree.masks[j + 1], W, a) * tree.masks[j].unsqueeze(-1)
            for j in range(len(reps) - 1)
        ]
    return reps[0]


def gcat_layer(
    center: Tensor,
    nbrs: Tensor,
    nbr_mask: Tensor,
    guide: Tensor,
    guide_mask: Tensor,
    params: ParamRegistry,
    layer: int,
    return_weights: bool = False,
):
    """One graph co-attention layer for a set of center entities.

    ``center`` [..., d] holds the previous-layer center representations,
    ``nbrs`` [..., B, d] the previous-layer neighbor representations, and
    ``guide`` [..., D', d] the other news's GAT entity matrix, already shaped
    to broadcast against ``center``'s leading dims.
    """
    p = f"gcat.{layer}."
    g_hat_all = multihead_self_attention(nbrs, nbr_mask, params[p + "attn.W_q"], params[p + "attn.W_k"], params[p + "attn.W_v"])
    lam, g_hat = guided_attention(
        g_hat_all, guide, nbr_mask, guide_mask,
        params[p + "W_c_c"], params[p + "W_c_s"], params[p + "W_c_h"], params[p + "q_e"],
    )
    g_hat = g_hat.expand(torch.broadcast_shapes(g_hat.shape, center.shape))
    out = torch.cat([g_hat, center.expand_as(g_hat)], dim=-1) @ params[p + "P_e"].T
    return (out, lam) if return_weights else out


def gcat_encode(tree: EntityTree, guide: Tensor, guide_mask: Tensor, params: ParamRegistry, layers: int) -> Tensor:
    """Match-aware entity representations ``S`` [..., D, d_k] guided by the other news.

    ``guide`` is the other news's ``M`` with shape ``[..., D', d_k]`` whose
    leading dims broadcast against the tree's leading dims.
    """
    if layers < 1 or tree.depth < layers:
        raise ValueError(f"need 1 <= layers <= tree depth ({tree.depth}), got {layers}")
    reps = [F.embedding(ids, params["entity_embedding"]) for ids in tree.ids]
    lead = guide.shape[:-2]
    for l in range(layers):
        new = []
        for j in range(len(reps) - 1):
            # center at depth j has j + 1 tree axes (D, B, ..., B) ahead of the feature axis
            ones = (1,) * (j + 1)
            g = guide.reshape(*lead, *ones, *guide.shape[-2:])
            gm = guide_mask.reshape(*lead, *ones, guide_mask.shape[-1])
            out = gcat_layer(reps[j], reps[j + 1], tree.masks[j + 1], g, gm, params, l)
            new.append(out * tree.masks[j].unsqueeze(-1))
        reps = new
    return reps[0]


def knowledge_coencode(
    tree_u: EntityTree,
    tree_c: EntityTree,
    M_u: Tensor,
    M_c: Tensor,
    params: ParamRegistry,
    layers: int,
    return_output: bool = False,
):
    """(k_u, k_c) for each broadcast (clicked, candidate) pair.

    ``M_u``/``M_c`` are the per-news GAT outputs; pass the values from
    :func:`gat_encode` or from a precomputed cache.
    """
    mask_u, mask_c = tree_u.masks[0], tree_c.masks[0]
    S_u = gcat_encode(tree_u, M_c, mask_c, params, layers)
    S_c = gcat_encode(tree_c, M_u, mask_u, params, layers)
    out = coattend(S_u, S_c, mask_u, mask_c, CoAttentionParams.from_registry(params, "W_k"))
    if return_output:
        return out, S_u, S_c
    return out.pooled_u, out.pooled_c
