"""Generic cross-attention block and the toy segmentation model the plug-in attaches to."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .ae import AEBlock, ae_forward_rows
from .prior import final_prior, prior_pack
from .tensorcore import FeedForward, LayerNorm, LinearLayer, Module, ShapeError, Var

HEAD_INIT_SCALE = 0.1


@dataclass
class CrossAttnBlock(Module):
    proj_q: LinearLayer
    proj_k: LinearLayer
    proj_v: LinearLayer
    out: LinearLayer
    ln1: LayerNorm
    ln2: LayerNorm
    ffn: FeedForward

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, zero_residual: bool = False) -> "CrossAttnBlock":
        """Glorot block; ``zero_residual`` zeroes the output layer of both residual branches."""
        block = cls(
            proj_q=LinearLayer.init(rng, c, c),
            proj_k=LinearLayer.init(rng, c, c),
            proj_v=LinearLayer.init(rng, c, c),
            out=LinearLayer.init(rng, c, c),
            ln1=LayerNorm.init(c),
            ln2=LayerNorm.init(c),
            ffn=FeedForward.init(rng, c),
        )
        if zero_residual:
            block.out.weight.value[...] = 0.0
            block.ffn.fc2.weight.value[...] = 0.0
        return block


def fg_index(m_s) -> np.ndarray:
    m = np.asarray(m_s.value if isinstance(m_s, Var) else m_s).reshape(-1)
    idx = np.flatnonzero(m > 0)
    if idx.size == 0:
        raise ValueError("support FG mask empty")
    return idx


def cross_attention(block: CrossAttnBlock, xq, xs, m_s) -> tuple[Var, Var, np.ndarray]:
    """Scaled dot-product attention of query rows over support FG rows.

    Background keys are dropped, which is the same as giving them ``-inf``
    scores. Returns ``(output, weights over FG keys, FG key indices)``;
    ``output`` is before the residual and already passed through ``out``.
    """
    idx = fg_index(m_s)
    c = block.proj_q.n_out
    q = block.proj_q(xq)
    k = tc.take_rows(block.proj_k(xs), idx)
    v = tc.take_rows(block.proj_v(xs), idx)
    scores = tc.scale(tc.matmul(q, tc.transpose(k)), 1.0 / math.sqrt(c))
    weights = tc.softmax(scores, axis=1)
    return block.out(tc.matmul(weights, v)), weights, idx


def attention_weights(block: CrossAttnBlock, f_q, f_s, m_s) -> np.ndarray:
    """Full ``HW_q x HW_s`` attention matrix of the block (BG columns are zero)."""
    q_rows, s_rows = tc.chw_to_rows(f_q), tc.chw_to_rows(f_s)
    _, w, idx = cross_attention(block, block.ln1(q_rows), block.ln1(s_rows), m_s)
    full = np.zeros((q_rows.shape[0], s_rows.shape[0]))
    full[:, idx] = w.value
    return full


def xattn_forward_rows(block: CrossAttnBlock, q_rows, s_rows, m_s) -> Var:
    q_rows = tc.as_var(q_rows)
    o, _, _ = cross_attention(block, block.ln1(q_rows), block.ln1(s_rows), m_s)
    q1 = tc.add(q_rows, o)
    return tc.add(q1, block.ffn(block.ln2(q1)))


def xattn_forward(block: CrossAttnBlock, f_q, f_s, m_s) -> Var:
    """Pre-norm cross-attention block on ``C x H x W`` maps; returns updated query features."""
    f_q, f_s, m_s = tc.as_var(f_q), tc.as_var(f_s), tc.as_var(m_s)
    if f_q.ndim != 3 or f_s.shape != f_q.shape or m_s.shape != f_q.shape[1:]:
        raise ShapeError(f"query {f_q.shape}, support {f_s.shape}, mask {m_s.shape} disagree")
    _, h, w = f_q.shape
    out = xattn_forward_rows(block, tc.chw_to_rows(f_q), tc.chw_to_rows(f_s), tc.reshape(m_s, (-1,)))
    return tc.rows_to_chw(out, h, w)


# --- baseline prior ---------------------------------------------------------


def max_correlation_prior(f_q: np.ndarray, supports) -> np.ndarray:
    """Query prior from the max cosine against every support FG pixel, min-max scaled.

    This is the pairwise (HW x HW) prior of earlier methods, used by the
    baseline arms only.
    """
    c, h, w = f_q.shape
    q = f_q.reshape(c, -1).T
    q = q / (np.linalg.norm(q, axis=1, keepdims=True) + tc.EPS_COS)
    best = np.full(h * w, -1.0)
    for f_s, m in supports:
        s = np.asarray(f_s).reshape(c, -1).T[np.asarray(m).reshape(-1) > 0]
        if s.size == 0:
            continue
        s = s / (np.linalg.norm(s, axis=1, keepdims=True) + tc.EPS_COS)
        best = np.maximum(best, (q @ s.T).max(axis=1))
    best = best.reshape(h, w)
    return (best - best.min()) / (best.max() - best.min() + tc.EPS_MINMAX)


# --- toy model ----------------------------------------------------------------


@dataclass
class ToyModel(Module):
    input_proj: LinearLayer
    xattn: list[CrossAttnBlock]
    head: LinearLayer
    norm_out: LayerNorm
    ae: list[AEBlock] = field(default_factory=list)
    use_pg: bool = True
    temperature: float = 1.0

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c: int,
        n_blocks: int,
        with_ae: bool = True,
        use_pg: bool = True,
        temperature: float = 1.0,
    ) -> "ToyModel":
        input_proj = LinearLayer.init(rng, c + 2, c)
        # Residual branches start at zero so the untrained stack is the identity.
        # With full-size branches the attention output, which is nearly the same
        # vector at every query pixel, swamps the prior and Dice collapses to all-FG.
        xattn = [CrossAttnBlock.init(rng, c, zero_residual=True) for _ in range(n_blocks)]
        head = LinearLayer.init(rng, c, 2)
        # Small logits at the start keep the softmax out of saturation while
        # the residual branches grow; a saturated head gives Dice no gradient.
        head.weight.value *= HEAD_INIT_SCALE
        # AE parameters come from a separate stream so both arms share the rest
        ae_rng = np.random.default_rng(rng.integers(2**63))
        ae = [AEBlock.init(ae_rng, c, identity=True) for _ in range(n_blocks)] if with_ae else []
        return cls(input_proj, xattn, head, LayerNorm.init(c), ae, use_pg, temperature)

    def params(self, use_aenet: bool = True) -> list[Var]:
        out = self.input_proj.params() + [p for b in self.xattn for p in b.params()]
        out += self.norm_out.params() + self.head.params()
        if use_aenet:
            out += [p for b in self.ae for p in b.params()]
        return out

    def n_params(self, use_aenet: bool = True) -> int:
        return int(np.sum([p.value.size for p in self.params(use_aenet)]))


@dataclass
class Forward:
    pred: Var  # H x W FG probability
    aux_masks: list[Var]
    prior: Var  # 2 x H x W
    trace: dict = field(default_factory=dict)


def episode_prior(model: ToyModel, episode) -> Var:
    supports_high = [(s.feat_high, s.mask) for s in episode.supports]
    if model.use_pg:
        return final_prior(prior_pack(episode.query_feat_high, supports_high))
    p = max_correlation_prior(episode.query_feat_high, supports_high)
    return tc.Var(np.stack([p, p]))


def model_forward(model: ToyModel, episode, use_aenet: bool = True, trace: bool = False) -> Forward:
    """Predict the query FG probability map for one episode.

    Pipeline: prior from high-level features, concatenated onto mid-level
    query features (support features get their mask in both extra channels),
    shared input projection, ``N`` x (optional AE, cross-attention), final
    layer norm, linear head and per-pixel softmax.
    """
    if use_aenet and len(model.ae) != len(model.xattn):
        raise ValueError("model has no AE blocks; build it with with_ae=True")
    c, h, w = episode.query_feat.shape
    prior = episode_prior(model, episode)

    q = model.input_proj(tc.chw_to_rows(tc.concat_channels(episode.query_feat, prior)))
    s_parts, m_parts = [], []
    for sup in episode.supports:
        mask = np.asarray(sup.mask, dtype=float)
        s_in = np.concatenate([sup.feat, mask[None], mask[None]], axis=0)
        s_parts.append(model.input_proj(tc.chw_to_rows(s_in)))
        m_parts.append(mask.reshape(-1))
    s = s_parts[0] if len(s_parts) == 1 else tc.concat(s_parts, axis=0)
    m = tc.Var(np.concatenate(m_parts))

    aux: list[Var] = []
    info: dict = {}
    for i, xa in enumerate(model.xattn):
        if use_aenet:
            if trace and i == 0:
                info["before"] = (q.value.copy(), s.value.copy())
            out = ae_forward_rows(model.ae[i], q, s, m, model.temperature)
            q, s = out.f_q, out.f_s
            aux.append(tc.reshape(out.m_disc, (h, w)))
            if trace and i == 0:
                info["after"] = (q.value.copy(), s.value.copy())
                info["alpha"] = float(out.alpha.value)
        q = xattn_forward_rows(xa, q, s, m)

    probs = tc.softmax(model.head(model.norm_out(q)), axis=1)
    pred = tc.reshape(tc.take_cols(probs, 1), (h, w))
    return Forward(pred, aux, prior, info)
