"""Synthetic few-shot episodes with controllable feature ambiguity.

Each pixel feature is a blend of the FG class signature and the signature
of the BG class owning that pixel, weighted by a Gaussian-blurred GT mask:

    F(p) = m~(p) * fg + (1 - m~(p)) * bg(p) + noise

The blur radius plays the part of a backbone's receptive field: at zero
every pixel carries exactly one class, and as it grows FG and BG features
leak into each other around object borders.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import convolve1d

SPLITS = ("base", "novel")
HIGH_BLUR_FACTOR = 1.5
_STREAMS = {"base": 0, "novel": 1, "base_holdout": 2}


class CoverageError(RuntimeError):
    """No mask with admissible coverage was drawn within the retry budget."""


@dataclass(frozen=True)
class ClassSignature:
    id: int
    vector: np.ndarray


@dataclass(frozen=True)
class GeneratorConfig:
    C: int = 16
    H: int = 32
    W: int = 32
    k: int = 1
    sigma: float = 2.0
    n_bg_classes_per_image: int = 2
    noise_std: float = 0.05
    n_base: int = 10
    n_novel: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.C < 2:
            raise ValueError("C must be >= 2")
        if self.H < 8 or self.W < 8:
            raise ValueError("H and W must be >= 8")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.sigma < 0 or self.noise_std < 0:
            raise ValueError("sigma and noise_std must be >= 0")
        if self.n_bg_classes_per_image < 1:
            raise ValueError("n_bg_classes_per_image must be >= 1")
        if self.n_base < 2 or self.n_novel < 1:
            raise ValueError("need >= 2 base classes and >= 1 novel class")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Support:
    feat: np.ndarray  # C x H x W mid-level
    feat_high: np.ndarray  # C x H x W high-level
    mask: np.ndarray  # H x W binary
    bg_classes: tuple[int, ...] = ()


@dataclass
class Episode:
    query_feat: np.ndarray
    query_feat_high: np.ndarray
    query_gt: np.ndarray
    supports: list[Support]
    fg_class: int
    blur_radius: float
    split: str = "base"
    query_bg_classes: tuple[int, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.supports)

    def class_ids(self) -> set[int]:
        ids = {self.fg_class, *self.query_bg_classes}
        for s in self.supports:
            ids.update(s.bg_classes)
        return ids


# --- class pools --------------------------------------------------------------


def make_class_pools(cfg: GeneratorConfig, max_cos: float = 0.95) -> tuple[list[ClassSignature], list[ClassSignature]]:
    """Disjoint base and novel pools of unit-norm signatures, seeded by ``cfg.seed``.

    When the total class count fits in ``C`` the signatures are a random
    orthonormal set, so that noise-free unblurred episodes are exactly
    separable. Otherwise random directions are drawn, redrawing any whose
    cosine to an accepted one reaches ``max_cos``.
    """
    rng = np.random.default_rng([cfg.seed, 7919])
    total = cfg.n_base + cfg.n_novel
    if total <= cfg.C:
        q, r = np.linalg.qr(rng.standard_normal((cfg.C, total)))
        accepted = list((q * np.sign(np.diag(r))).T)
    else:
        accepted = []
        tries = 0
        while len(accepted) < total:
            tries += 1
            if tries > 100 * total:
                raise RuntimeError("could not draw sufficiently distinct class signatures")
            v = rng.standard_normal(cfg.C)
            v /= np.linalg.norm(v)
            if all(abs(float(v @ u)) < max_cos for u in accepted):
                accepted.append(v)
    sigs = [ClassSignature(i, np.ascontiguousarray(v)) for i, v in enumerate(accepted)]
    return sigs[: cfg.n_base], sigs[cfg.n_base :]


# --- masks and blur -----------------------------------------------------------


def make_mask(rng: np.random.Generator, H: int, W: int, lo: float = 0.05, hi: float = 0.60, retries: int = 100) -> np.ndarray:
    """Binary union of 1-3 filled ellipses covering a fraction of pixels in ``[lo, hi]``."""
    if H < 8 or W < 8:
        raise ValueError("H and W must be >= 8")
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    for _ in range(retries):
        m = np.zeros((H, W), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.uniform(0, H), rng.uniform(0, W)
            ry, rx = rng.uniform(0.12, 0.4) * H, rng.uniform(0.12, 0.4) * W
            theta = rng.uniform(0, math.pi)
            dy, dx = yy - cy, xx - cx
            u = dx * math.cos(theta) + dy * math.sin(theta)
            v = -dx * math.sin(theta) + dy * math.cos(theta)
            m |= (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        if lo <= m.mean() <= hi:
            return m.astype(np.float64)
    raise CoverageError(f"no mask with coverage in [{lo}, {hi}] after {retries} draws")


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(m: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, radius ``ceil(3 sigma)``, clamp-to-edge borders."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    m = np.asarray(m, dtype=np.float64)
    if sigma == 0:
        return m.copy()
    k = gaussian_kernel(sigma)
    out = convolve1d(m, k, axis=0, mode="nearest")
    out = convolve1d(out, k, axis=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


# --- rendering ------------------------------------------------------------------


def voronoi_labels(rng: np.random.Generator, H: int, W: int, n: int) -> np.ndarray:
    """Partition the grid into ``n`` nearest-site regions; returns labels ``0..n-1``."""
    sites = rng.uniform(0, 1, size=(n, 2)) * [H, W]
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    d = (yy[None] - sites[:, 0, None, None]) ** 2 + (xx[None] - sites[:, 1, None, None]) ** 2
    return d.argmin(axis=0)


def render_features(
    gt: np.ndarray,
    fg: ClassSignature,
    bg_field: np.ndarray,
    sigma: float,
    noise_std: float,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Render a ``C x H x W`` map; ``bg_field`` holds each pixel's BG signature (``H x W x C``)."""
    gt = np.asarray(gt, dtype=np.float64)
    if bg_field.shape[:2] != gt.shape or bg_field.shape[2] != fg.vector.shape[0]:
        raise ValueError(f"BG field {bg_field.shape} does not match mask {gt.shape} / C={fg.vector.shape[0]}")
    mt = blur(gt, sigma)[..., None]
    f = mt * fg.vector + (1.0 - mt) * bg_field
    f = np.ascontiguousarray(f.transpose(2, 0, 1))
    if noise_std > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        f += rng.normal(0.0, noise_std, size=f.shape)
    return f


def _render_image(cfg: GeneratorConfig, rng, fg: ClassSignature, bg_pool: list[ClassSignature]):
    gt = make_mask(rng, cfg.H, cfg.W)
    n_bg = int(rng.integers(1, min(cfg.n_bg_classes_per_image, len(bg_pool)) + 1))
    chosen = rng.choice(len(bg_pool), size=n_bg, replace=False)
    labels = voronoi_labels(rng, cfg.H, cfg.W, n_bg)
    bg_field = np.stack([bg_pool[i].vector for i in chosen])[labels]
    mid = render_features(gt, fg, bg_field, cfg.sigma, cfg.noise_std, rng)
    high = render_features(gt, fg, bg_field, HIGH_BLUR_FACTOR * cfg.sigma, cfg.noise_std, rng)
    return gt, mid, high, tuple(sorted(int(bg_pool[i].id) for i in chosen))


def gen_episode(cfg: GeneratorConfig, split: str, rng: np.random.Generator, pools=None) -> Episode:
    """Draw one episode whose FG class comes from ``split``'s pool.

    Base episodes take BG classes from the base pool only; novel episodes
    may use any class other than the FG one. Query and every support get
    independent masks and BG layouts.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    base, novel = pools if pools is not None else make_class_pools(cfg)
    pool = base if split == "base" else novel
    if not pool:
        raise ValueError(f"{split} class pool is empty")
    fg = pool[int(rng.integers(len(pool)))]
    bg_pool = [s for s in (base if split == "base" else base + novel) if s.id != fg.id]

    gt, q_mid, q_high, q_bg = _render_image(cfg, rng, fg, bg_pool)
    supports = []
    for _ in range(cfg.k):
        m, s_mid, s_high, s_bg = _render_image(cfg, rng, fg, bg_pool)
        supports.append(Support(s_mid, s_high, m, s_bg))
    return Episode(q_mid, q_high, gt, supports, fg.id, cfg.sigma, split, q_bg)


def episode_rng(seed: int, stream: str, index: int) -> np.random.Generator:
    """Independent generator for draw ``index`` of a named stream."""
    return np.random.default_rng([seed, _STREAMS[stream], index])


def draw_episode(cfg: GeneratorConfig, stream: str, index: int, seed: int | None = None, pools=None) -> Episode:
    """Deterministic episode for ``(cfg, seed, stream, index)``.

    ``stream`` is ``base``, ``novel`` or ``base_holdout`` (base classes, a
    draw sequence disjoint from training).
    """
    split = "novel" if stream == "novel" else "base"
    seed = cfg.seed if seed is None else seed
    ep = gen_episode(cfg, split, episode_rng(seed, stream, index), pools)
    ep.meta = {"seed": seed, "stream": stream, "index": index}
    return ep
