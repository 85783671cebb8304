"""Episodic training, evaluation and the benchmark experiments."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import rankdata, wilcoxon

from . import tensorcore as tc
from .losses import EpisodeResult, LossConfig, binarize, fb_iou, miou, per_class_iou, total_loss
from .prior import prior_pack
from .synth import GeneratorConfig, draw_episode, make_class_pools
from .xattn import ToyModel, max_correlation_prior, model_forward

LAMBDA_GRID = (0.0, 0.5, 1.0, 1.5)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    episodes_train: int = 500
    episodes_eval: int = 100
    lr: float = 0.005
    momentum: float = 0.9
    N: int = 4
    C: int = 16
    H: int = 32
    W: int = 32
    k: int = 1
    sigma: float = 2.0
    noise_std: float = 0.05
    n_bg_classes_per_image: int = 2
    n_base: int = 10
    n_novel: int = 6
    lam: float = 1.0
    dice_smooth: float = 1.0
    bce_eps: float = 1e-7
    seed: int = 0
    use_aenet: bool = True
    use_pg: bool = True
    temperature: float = 1.0
    accum: int = 1
    threads: int = 1
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.episodes_train < 0 or self.episodes_eval < 1:
            raise ValueError("episode counts must be positive")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.N < 1 or self.accum < 1 or self.threads < 1:
            raise ValueError("N, accum and threads must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0 (0 disables clipping)")
        self.loss()

    def generator(self) -> GeneratorConfig:
        return GeneratorConfig(
            C=self.C, H=self.H, W=self.W, k=self.k, sigma=self.sigma,
            n_bg_classes_per_image=self.n_bg_classes_per_image, noise_std=self.noise_std,
            n_base=self.n_base, n_novel=self.n_novel, seed=self.seed,
        )

    def loss(self) -> LossConfig:
        return LossConfig(lam=self.lam, dice_smooth=self.dice_smooth, bce_eps=self.bce_eps)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EvalReport:
    miou: float
    fb_iou: float
    per_class: dict[int, float]
    records: list[dict]


@dataclass
class RunReport:
    novel: EvalReport
    base_holdout: EvalReport
    loss_curve: list[float]
    config: dict
    wall_clock: float
    n_params: int
    train_class_ids: list[int]
    model: ToyModel | None = field(default=None, repr=False)

    @property
    def novel_miou(self) -> float:
        return self.novel.miou

    def to_dict(self) -> dict:
        def ev(e: EvalReport) -> dict:
            return {"miou": e.miou, "fb_iou": e.fb_iou, "per_class_iou": {str(k): v for k, v in e.per_class.items()}, "episodes": e.records}

        return {
            "seed": self.config["seed"],
            "config": self.config,
            "novel": ev(self.novel),
            "base_holdout": ev(self.base_holdout),
            "loss_curve": self.loss_curve,
            "wall_clock_s": self.wall_clock,
            "n_params": self.n_params,
            "train_class_ids": self.train_class_ids,
        }

    def loss_curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(self.loss_curve):
            w.writerow([i, repr(v)])
        return buf.getvalue()


def build_model(cfg: TrainConfig) -> ToyModel:
    rng = np.random.default_rng([cfg.seed, 1009])
    return ToyModel.init(rng, cfg.C, cfg.N, with_ae=cfg.use_aenet, use_pg=cfg.use_pg, temperature=cfg.temperature)


def episode_loss(model: ToyModel, episode, cfg: TrainConfig):
    out = model_forward(model, episode, cfg.use_aenet)
    return total_loss(out.pred, episode.query_gt, out.aux_masks, cfg.loss()), out


class SGD:
    """Heavy-ball SGD: ``v = mu v + g``, ``p -= lr v``.

    With ``clip_norm > 0`` the gradient is rescaled to that global L2 norm
    when larger. A single episode with an extreme gradient otherwise kicks
    the softmax head into saturation, after which Dice gives it almost no
    way back.
    """

    def __init__(self, params, lr: float, momentum: float, clip_norm: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity = [np.zeros_like(p.value) for p in self.params]

    def zero_grad(self) -> None:
        tc.zero_grad(self.params)

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)))

    def step(self, scale: float = 1.0) -> None:
        if self.clip_norm > 0:
            norm = self.grad_norm() * scale
            if norm > self.clip_norm:
                scale *= self.clip_norm / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad * scale
            p.value -= self.lr * v


def evaluate(model: ToyModel, cfg: TrainConfig, stream: str = "novel", n: int | None = None, pools=None) -> EvalReport:
    """Threshold-0.5 metrics over ``n`` episodes of ``stream``."""
    gcfg = cfg.generator()
    pools = pools or make_class_pools(gcfg)
    n = cfg.episodes_eval if n is None else n

    def one(i: int):
        ep = draw_episode(gcfg, stream, i, pools=pools)
        pred = model_forward(model, ep, cfg.use_aenet).pred
        res = EpisodeResult.from_masks(ep.fg_class, binarize(pred), ep.query_gt > 0.5)
        return res, {"index": i, "fg_class": int(ep.fg_class), "iou": res.fg_inter / res.fg_union if res.fg_union else 1.0}

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            out = list(pool.map(one, range(n)))
    else:
        out = [one(i) for i in range(n)]
    results = [r for r, _ in out]
    return EvalReport(miou(results), fb_iou(results), per_class_iou(results), [rec for _, rec in out])


def train(cfg: TrainConfig, model: ToyModel | None = None) -> RunReport:
    """Train on base-class episodes, then evaluate on base holdout and novel episodes.

    Deterministic for a fixed ``cfg``. Raises :class:`DivergenceError` on a
    non-finite loss.
    """
    t0 = time.perf_counter()
    gcfg = cfg.generator()
    pools = make_class_pools(gcfg)
    model = model or build_model(cfg)
    opt = SGD(model.params(cfg.use_aenet), cfg.lr, cfg.momentum, cfg.clip_norm)
    novel_ids = {s.id for s in pools[1]}

    curve: list[float] = []
    seen: set[int] = set()
    opt.zero_grad()
    for i in range(cfg.episodes_train):
        ep = draw_episode(gcfg, "base", i, pools=pools)
        ids = ep.class_ids()
        if ids & novel_ids:
            raise AssertionError(f"novel classes {sorted(ids & novel_ids)} leaked into training episode {i}")
        seen |= ids
        loss, _ = episode_loss(model, ep, cfg)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"non-finite loss at training episode {i}")
        curve.append(value)
        loss.backward()
        if (i + 1) % cfg.accum == 0 or i + 1 == cfg.episodes_train:
            opt.step(1.0 / cfg.accum)
            opt.zero_grad()

    novel = evaluate(model, cfg, "novel", pools=pools)
    holdout = evaluate(model, cfg, "base_holdout", pools=pools)
    return RunReport(
        novel, holdout, curve, cfg.to_dict(), time.perf_counter() - t0,
        model.n_params(cfg.use_aenet), sorted(seen), model,
    )


# --- benchmarks -----------------------------------------------------------------


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic; tied scores count one half."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel() > 0.5
    n1, n0 = int(y.sum()), int((~y).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC needs both positive and negative pixels")
    r = rankdata(s)
    return float((r[y].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def bench_prior(cfg: TrainConfig, n_episodes: int = 200, sigmas=None, stream: str = "novel") -> dict:
    """Per-episode AUC of the FG, discriminative and max-correlation priors against GT.

    One block per blur radius with means, standard deviations and a
    one-sided paired Wilcoxon test of disc > fg.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    sigmas = [cfg.sigma] if sigmas is None else list(sigmas)
    out = {"seed": cfg.seed, "n_episodes": n_episodes, "noise_std": cfg.noise_std, "by_sigma": []}
    for sigma in sigmas:
        gcfg = replace(cfg.generator(), sigma=float(sigma))
        pools = make_class_pools(gcfg)
        fg, disc, maxc = [], [], []
        for i in range(n_episodes):
            ep = draw_episode(gcfg, stream, i, pools=pools)
            sups = [(s.feat_high, s.mask) for s in ep.supports]
            pack = prior_pack(ep.query_feat_high, sups)
            fg.append(roc_auc(pack.fg.value, ep.query_gt))
            disc.append(roc_auc(pack.disc.value, ep.query_gt))
            maxc.append(roc_auc(max_correlation_prior(ep.query_feat_high, sups), ep.query_gt))
        fg_a, disc_a = np.array(fg), np.array(disc)
        diff = disc_a - fg_a
        p = float(wilcoxon(disc_a, fg_a, alternative="greater").pvalue) if np.any(diff != 0) else 1.0
        out["by_sigma"].append({
            "sigma": float(sigma),
            "auc_fg_mean": float(fg_a.mean()), "auc_fg_std": float(fg_a.std()),
            "auc_disc_mean": float(disc_a.mean()), "auc_disc_std": float(disc_a.std()),
            "auc_maxcorr_mean": float(np.mean(maxc)),
            "p_disc_gt_fg": p,
            "auc_fg": fg, "auc_disc": disc,
        })
    return out


def _fg_cosines(q_rows: np.ndarray, s_rows: np.ndarray, q_gt: np.ndarray, s_mask: np.ndarray) -> float:
    w = s_mask.reshape(-1)
    proto = w @ s_rows / w.sum()
    q = q_rows[q_gt.reshape(-1) > 0.5]
    cos = q @ proto / (np.linalg.norm(q, axis=1) * np.linalg.norm(proto) + tc.EPS_COS)
    return float(cos.mean())


def bench_similarity(model: ToyModel, cfg: TrainConfig, n_episodes: int = 100, stream: str = "novel") -> dict:
    """Mean cosine of query-FG pixel features to the support FG prototype, before vs after the first AE block."""
    if not model.ae:
        raise ValueError("similarity benchmark needs a model with AE blocks")
    gcfg = cfg.generator()
    pools = make_class_pools(gcfg)
    pairs = []
    for i in range(n_episodes):
        ep = draw_episode(gcfg, stream, i, pools=pools)
        out = model_forward(model, ep, use_aenet=True, trace=True)
        s_mask = np.concatenate([s.mask.reshape(-1) for s in ep.supports])
        before = _fg_cosines(*out.trace["before"], ep.query_gt, s_mask)
        after = _fg_cosines(*out.trace["after"], ep.query_gt, s_mask)
        pairs.append({"index": i, "before": before, "after": after})
    b = np.array([p["before"] for p in pairs])
    a = np.array([p["after"] for p in pairs])
    return {
        "seed": cfg.seed, "n_episodes": n_episodes,
        "mean_before": float(b.mean()), "mean_after": float(a.mean()),
        "frac_improved": float(np.mean(a > b)), "episodes": pairs,
    }


def sweep_lambda(cfg: TrainConfig, values=LAMBDA_GRID) -> dict:
    """Train and evaluate once per loss weight; all runs share the seed and episode streams."""
    rows = []
    for lam in values:
        rep = train(replace(cfg, lam=float(lam), use_aenet=True))
        rows.append({"lambda": float(lam), "novel_miou": rep.novel.miou, "novel_fb_iou": rep.novel.fb_iou,
                     "base_miou": rep.base_holdout.miou})
    return {"seed": cfg.seed, "rows": rows}


ARMS = {
    "baseline": {"use_pg": False, "use_aenet": False},
    "pg": {"use_pg": True, "use_aenet": False},
    "ae": {"use_pg": False, "use_aenet": True},
    "aenet": {"use_pg": True, "use_aenet": True},
}


def run_arms(cfg: TrainConfig, arms=tuple(ARMS)) -> dict[str, RunReport]:
    """Component ablation: same seed and episode streams, one run per arm."""
    return {name: train(replace(cfg, **ARMS[name])) for name in arms}
