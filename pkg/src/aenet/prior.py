"""Prior generator: support prototypes, FG/BG prior masks and the discriminative prior.

Every pixel of the query is compared against a single support prototype at
a time, so working memory stays linear in the number of pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import ShapeError, Var


class EmptyMaskError(ValueError):
    """The support mask selects no pixels for the requested region."""


@dataclass
class PriorPack:
    fg: Var  # M_Prior^FG
    bg: Var  # M_Prior^BG
    disc: Var  # relu(fg - bg)
    proto_fg: Var
    proto_bg: Var

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).value for k in ("fg", "bg", "disc", "proto_fg", "proto_bg")}


def _pool_rows(shots: Sequence[tuple[Var, Var]], region: str) -> Var:
    """Pixel-weighted mean of rows over all shots, weights given by the masks."""
    total = None
    mass = 0.0
    for rows, w in shots:
        part = tc.matmul(w, rows)
        total = part if total is None else tc.add(total, part)
        mass += float(w.value.sum())
    if mass <= 0.0:
        raise EmptyMaskError(f"support {region} mask empty")
    return tc.scale(total, 1.0 / mass)


def masked_gap_rows(rows, m, region: str = "FG") -> Var:
    rows, m = tc.as_var(rows), tc.as_var(m)
    if rows.ndim != 2 or m.shape != (rows.shape[0],):
        raise ShapeError(f"mask of shape {m.shape} does not match {rows.shape[0]} pixel rows")
    return _pool_rows([(rows, m)], region)


def masked_gap(f, m, region: str = "FG") -> Var:
    """Weighted global average pooling of a ``C x H x W`` map under an ``H x W`` mask.

    Soft mask values act as weights. Raises :class:`EmptyMaskError` when the
    mask sums to zero.
    """
    f, m = tc.as_var(f), tc.as_var(m)
    if f.ndim != 3 or m.shape != f.shape[1:]:
        raise ShapeError(f"feature map {f.shape} and mask {m.shape} disagree")
    return masked_gap_rows(tc.chw_to_rows(f), tc.reshape(m, (-1,)), region)


def prior_pack_rows(q_rows, supports: Sequence[tuple]) -> PriorPack:
    """Prior masks on flattened features.

    ``q_rows`` is ``N x C``; each support is ``(rows N' x C, mask N')``.
    Masks in the returned pack are length-``N`` vectors.
    """
    q_rows = tc.as_var(q_rows)
    if not supports:
        raise ValueError("at least one support is required")
    fg_shots, bg_shots = [], []
    for rows, m in supports:
        rows, m = tc.as_var(rows), tc.as_var(m)
        if rows.ndim != 2 or rows.shape[1] != q_rows.shape[1] or m.shape != (rows.shape[0],):
            raise ShapeError(f"support rows {rows.shape} / mask {m.shape} inconsistent with query {q_rows.shape}")
        fg_shots.append((rows, m))
        bg_shots.append((rows, tc.sub(1.0, m)))
    proto_fg = _pool_rows(fg_shots, "FG")
    proto_bg = _pool_rows(bg_shots, "BG")

    m_fg = tc.minmax_norm(tc.cosine_rows(q_rows, proto_fg))
    m_bg = tc.minmax_norm(tc.cosine_rows(q_rows, proto_bg))
    disc = tc.relu(tc.sub(m_fg, m_bg))
    return PriorPack(m_fg, m_bg, disc, proto_fg, proto_bg)


def prior_pack(f_q, supports: Sequence[tuple]) -> PriorPack:
    """Prior masks for a ``C x H x W`` query against k ``(C x H x W, H x W)`` supports."""
    f_q = tc.as_var(f_q)
    if f_q.ndim != 3:
        raise ShapeError(f"query features must be C x H x W, got {f_q.shape}")
    _, h, w = f_q.shape
    flat = []
    for f_s, m in supports:
        f_s, m = tc.as_var(f_s), tc.as_var(m)
        if f_s.shape != f_q.shape or m.shape != (h, w):
            raise ShapeError(f"support {f_s.shape} / mask {m.shape} do not match query {f_q.shape}")
        flat.append((tc.chw_to_rows(f_s), tc.reshape(m, (-1,))))
    pack = prior_pack_rows(tc.chw_to_rows(f_q), flat)
    return PriorPack(
        tc.reshape(pack.fg, (h, w)),
        tc.reshape(pack.bg, (h, w)),
        tc.reshape(pack.disc, (h, w)),
        pack.proto_fg,
        pack.proto_bg,
    )


def final_prior(pack: PriorPack) -> Var:
    """Two-channel prior: channel 0 is the FG prior, channel 1 the discriminative prior."""
    fg, disc = pack.fg, pack.disc
    return tc.concat([tc.reshape(fg, (1,) + fg.shape), tc.reshape(disc, (1,) + disc.shape)], axis=0)
