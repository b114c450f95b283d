"""Co-attention between two sets of vectors.

Layout convention used across the package: a set of P vectors of width d is a
tensor ``[..., P, d]`` (one row per item). Leading dimensions broadcast, so a
clicked side shaped ``[S, 1, H, P, d]`` can be matched against a candidate side
shaped ``[S, C, 1, Q, d]`` without materializing the ``S*C*H`` grid of inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .numerics import ParamRegistry, Tensor, beinsum, masked_softmax


@dataclass
class CoAttentionParams:
    W_c: Tensor  # [d, d] affinity
    W_s: Tensor  # [d_q, d] self term
    W_h: Tensor  # [d_q, d] guidance term
    q: Tensor  # [d_q]

    @classmethod
    def from_registry(cls, params: ParamRegistry, prefix: str) -> "CoAttentionParams":
        return cls(params[f"{prefix}_c"], params[f"{prefix}_s"], params[f"{prefix}_h"], params[f"q_{prefix[-1]}"])

    @property
    def dim(self) -> int:
        return self.W_c.shape[0]


@dataclass
class CoAttentionOutput:
    weights_u: Tensor  # [..., P]
    weights_c: Tensor  # [..., Q]
    pooled_u: Tensor  # [..., d]
    pooled_c: Tensor  # [..., d]


def guided_attention(
    x: Tensor,
    guide: Tensor,
    mask_x: Tensor | None,
    mask_guide: Tensor | None,
    W_c: Tensor,
    W_s: Tensor,
    W_h: Tensor,
    q: Tensor,
    transpose_affinity: bool = False,
) -> tuple[Tensor, Tensor]:
    """Attention-pool the rows of ``x`` using relevance to the rows of ``guide``.

    Affinity ``A[j, i] = guide_j . W_c x_i`` is normalized over the guide rows
    (masked), mixed back into guide space, and scored with the query ``q``:
    ``a_i = q . tanh(W_s x_i + W_h sum_j A'[j, i] guide_j)``.
    With ``transpose_affinity`` the affinity is ``x_i . W_c guide_j`` instead,
    which is what the second side of a co-attention uses.

    Returns (weights [..., P], pooled [..., d]).
    """
    gw = guide @ (W_c.T if transpose_affinity else W_c)
    affinity = beinsum("...qe,...pe->...qp", gw, x)
    gmask = None if mask_guide is None else mask_guide.unsqueeze(-1)
    norm = masked_softmax(affinity, gmask, dim=-2)
    mixed = beinsum("...qp,...qk->...pk", norm, guide @ W_h.T)
    scores = torch.tanh(x @ W_s.T + mixed) @ q
    weights = masked_softmax(scores, mask_x, dim=-1)
    pooled = beinsum("...p,...pd->...d", weights, x)
    return weights, pooled


def coattend(
    x_u: Tensor,
    x_c: Tensor,
    mask_u: Tensor | None,
    mask_c: Tensor | None,
    params: CoAttentionParams,
) -> CoAttentionOutput:
    """Symmetric co-attention of ``x_u`` [..., P, d] and ``x_c`` [..., Q, d]."""
    d = params.dim
    if x_u.shape[-1] != d or x_c.shape[-1] != d:
        raise ValueError(f"input width {x_u.shape[-1]}/{x_c.shape[-1]} does not match parameters ({d})")
    w_u, pooled_u = guided_attention(x_u, x_c, mask_u, mask_c, params.W_c, params.W_s, params.W_h, params.q)
    w_c, pooled_c = guided_attention(
        x_c, x_u, mask_c, mask_u, params.W_c, params.W_s, params.W_h, params.q, transpose_affinity=True
    )
    return CoAttentionOutput(w_u, w_c, pooled_u, pooled_c)


def multihead_self_attention(
    x: Tensor, mask: Tensor | None, W_q: Tensor, W_k: Tensor, W_v: Tensor
) -> Tensor:
    """Scaled dot-product self-attention with per-head projections ``[h, d_in, d_head]``.

    Heads are concatenated to ``h * d_head``. Masked positions are excluded as
    keys and their output rows are zero.
    """
    q = beinsum("...pd,hde->...hpe", x, W_q)
    k = beinsum("...pd,hde->...hpe", x, W_k)
    v = beinsum("...pd,hde->...hpe", x, W_v)
    scores = q @ k.transpose(-1, -2) / (W_q.shape[-1] ** 0.5)
    kmask = None if mask is None else mask.unsqueeze(-2).unsqueeze(-2)
    attn = masked_softmax(scores, kmask, dim=-1)
    out = attn @ v  # [..., h, P, e]
    out = out.transpose(-3, -2).reshape(*out.shape[:-3], out.shape[-2], -1)
    if mask is not None:
        out = out * mask.unsqueeze(-1)
    return out
