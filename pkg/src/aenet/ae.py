"""Ambiguity eliminator block.

The block mines the most discriminative query FG pixels through the prior
generator run on projected features, fuses the resulting query prototype
with the support FG prototype, and injects the fused prototype back into
both feature streams. It is wrapped as a pre-norm Transformer block:
``x + AE(LN(x))`` followed by ``x + FFN(LN(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .prior import prior_pack_rows
from .tensorcore import FeedForward, LayerNorm, LinearLayer, Module, ShapeError, Var


@dataclass
class AEBlock(Module):
    proj_q: LinearLayer
    proj_k: LinearLayer
    proj_v: LinearLayer
    fuse_q: LinearLayer
    fuse_s: LinearLayer
    ln1: LayerNorm
    ln2: LayerNorm
    ffn: FeedForward

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, identity: bool = False) -> "AEBlock":
        """Random block; with ``identity=True`` both residual branches output zero."""
        block = cls(
            proj_q=LinearLayer.init(rng, c, c),
            proj_k=LinearLayer.init(rng, c, c),
            proj_v=LinearLayer.init(rng, c, c),
            fuse_q=LinearLayer.init(rng, 2 * c, c),
            fuse_s=LinearLayer.init(rng, 2 * c, c),
            ln1=LayerNorm.init(c),
            ln2=LayerNorm.init(c),
            ffn=FeedForward.init(rng, c),
        )
        if identity:
            for layer in (block.fuse_q, block.fuse_s, block.ffn.fc2):
                layer.weight.value[...] = 0.0
        return block

    @property
    def channels(self) -> int:
        return self.proj_q.n_in


@dataclass
class AEOutput:
    f_q: Var
    f_s: Var
    m_disc: Var
    alpha: Var
    p_fused: Var
    p_q_fg: Var
    p_s_fg: Var
    weights: Var  # softmax over query pixels used to pool P_Q^FG


def ae_core(block: AEBlock, q_rows, s_rows, m_s, temperature: float = 1.0) -> AEOutput:
    """The un-wrapped eliminator on ``N x C`` query rows and ``N' x C`` support rows.

    The returned ``f_q``/``f_s`` are the fused features before any residual.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    q_rows, s_rows, m_s = tc.as_var(q_rows), tc.as_var(s_rows), tc.as_var(m_s)
    n_q, n_s = q_rows.shape[0], s_rows.shape[0]

    q = block.proj_q(s_rows)
    k = block.proj_k(q_rows)
    v = block.proj_v(q_rows)

    pack = prior_pack_rows(k, [(q, m_s)])
    p_s = pack.proto_fg
    m_disc = pack.disc

    logits = m_disc if temperature == 1.0 else tc.scale(m_disc, 1.0 / temperature)
    weights = tc.softmax(logits)
    p_q = tc.matmul(weights, v)

    alpha = tc.scale(tc.add(tc.cosine(p_s, p_q), 1.0), 0.5)
    p_fused = tc.add(tc.mul(alpha, p_s), tc.mul(tc.sub(1.0, alpha), p_q))

    f_q = block.fuse_q(tc.concat([q_rows, tc.broadcast_rows(p_fused, n_q)], axis=1))
    f_s = block.fuse_s(tc.concat([s_rows, tc.broadcast_rows(p_fused, n_s)], axis=1))
    return AEOutput(f_q, f_s, m_disc, alpha, p_fused, p_q, p_s, weights)


def ae_forward_rows(block: AEBlock, q_rows, s_rows, m_s, temperature: float = 1.0) -> AEOutput:
    """Transformer-wrapped block on pixel rows; ``f_q``/``f_s`` are the block outputs."""
    q_rows, s_rows = tc.as_var(q_rows), tc.as_var(s_rows)
    core = ae_core(block, block.ln1(q_rows), block.ln1(s_rows), m_s, temperature)
    q1 = tc.add(q_rows, core.f_q)
    s1 = tc.add(s_rows, core.f_s)
    q2 = tc.add(q1, block.ffn(block.ln2(q1)))
    s2 = tc.add(s1, block.ffn(block.ln2(s1)))
    core.f_q, core.f_s = q2, s2
    return core


def ae_forward(block: AEBlock, f_q, f_s, m_s, temperature: float = 1.0) -> AEOutput:
    """Run one block on ``C x H x W`` query/support maps and an ``H x W`` support mask.

    ``f_q``, ``f_s`` come back as ``C x H x W`` and ``m_disc`` as ``H x W``.
    """
    f_q, f_s, m_s = tc.as_var(f_q), tc.as_var(f_s), tc.as_var(m_s)
    if f_q.ndim != 3 or f_s.shape != f_q.shape or m_s.shape != f_q.shape[1:]:
        raise ShapeError(f"query {f_q.shape}, support {f_s.shape}, mask {m_s.shape} disagree")
    _, h, w = f_q.shape
    out = ae_forward_rows(block, tc.chw_to_rows(f_q), tc.chw_to_rows(f_s), tc.reshape(m_s, (-1,)), temperature)
    out.f_q = tc.rows_to_chw(out.f_q, h, w)
    out.f_s = tc.rows_to_chw(out.f_s, h, w)
    out.m_disc = tc.reshape(out.m_disc, (h, w))
    return out


def ae_stack_forward(blocks, xattn_blocks, f_q, f_s, m_s, temperature: float = 1.0):
    """Alternate AE and cross-attention ``N`` times on ``C x H x W`` maps.

    Returns the final query features and the ``N`` discriminative masks.
    """
    from .xattn import xattn_forward_rows

    if len(blocks) != len(xattn_blocks) or not blocks:
        raise ValueError("need N >= 1 AE blocks and as many attention blocks")
    f_q, f_s, m_s = tc.as_var(f_q), tc.as_var(f_s), tc.as_var(m_s)
    _, h, w = f_q.shape
    q = tc.chw_to_rows(f_q)
    s = tc.chw_to_rows(f_s)
    m = tc.reshape(m_s, (-1,))
    masks = []
    for ae_block, xa_block in zip(blocks, xattn_blocks):
        out = ae_forward_rows(ae_block, q, s, m, temperature)
        masks.append(tc.reshape(out.m_disc, (h, w)))
        q, s = out.f_q, out.f_s
        q = xattn_forward_rows(xa_block, q, s, m)
    return tc.rows_to_chw(q, h, w), masks
