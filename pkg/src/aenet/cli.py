"""Command-line entry point: ``aenet {gen,prior,train,bench,gradcheck}``.

Exit codes: 0 success, 2 invalid input (flags, files, configs), 3 numeric
failure (divergence, failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import tio
from .gradcheck import run_suite
from .prior import prior_pack
from .synth import draw_episode, make_class_pools
from .tensorcore import ShapeError
from .trainer import DivergenceError, TrainConfig, bench_prior, bench_similarity, sweep_lambda, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3

# JSON key -> TrainConfig field where they differ
_ALIASES = {"lambda": "lam"}
_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


class UsageError(ValueError):
    """Bad flags, config contents or paths."""


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _flag(name: str) -> str:
    public = {v: k for k, v in _ALIASES.items()}.get(name, name)
    return "--" + public.replace("_", "-")


def add_config_flags(p: argparse.ArgumentParser) -> None:
    """One override flag per config field; unset flags leave the file/default value alone."""
    g = p.add_argument_group("config overrides (defaults in brackets)")
    g.add_argument("--config", type=Path, help="JSON file with any of the fields below")
    for name, f in _FIELDS.items():
        if name in ("seed", "threads", "use_aenet"):
            continue
        kind = _on_off if isinstance(f.default, bool) else type(f.default)
        default = ("on" if f.default else "off") if isinstance(f.default, bool) else f.default
        g.add_argument(_flag(name), dest=name, type=kind, default=None, help=f"[{default}]")


def load_config(args: argparse.Namespace) -> TrainConfig:
    values: dict = {}
    if getattr(args, "config", None) is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} does not exist") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        for key, v in raw.items():
            name = _ALIASES.get(key, key)
            if name not in _FIELDS:
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            values[name] = v
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None


def _write_json(path: Path, obj, force: bool) -> None:
    tio.atomic_write_text(path, json.dumps(obj, indent=2) + "\n", force)


# --- commands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_config(args)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    gcfg = cfg.generator()
    pools = make_class_pools(gcfg)
    out = Path(args.out_dir)
    manifest_path = out / "manifest.json"
    if manifest_path.exists() and not args.force:
        raise FileExistsError(f"{manifest_path} exists; pass --force to overwrite")
    entries = []
    for i in range(args.count):
        ep = draw_episode(gcfg, args.split, i, pools=pools)
        name = f"episode_{i:04d}"
        tio.save_episode(ep, out / name, force=args.force, cfg=gcfg)
        entries.append({"dir": name, "index": i, "fg_class": int(ep.fg_class)})
    _write_json(manifest_path, {"seed": cfg.seed, "split": args.split, "config": gcfg.to_dict(), "episodes": entries}, args.force)
    print(f"seed={cfg.seed} wrote {len(entries)} episodes to {out}")
    return EXIT_OK


def _prior_inputs(args):
    if args.episode_dir is not None:
        ep = tio.load_episode(args.episode_dir)
        return ep.query_feat_high, [(s.feat_high, s.mask) for s in ep.supports]
    if args.query is None or not args.support or len(args.support) != len(args.mask or []):
        raise UsageError("give --episode-dir, or --query with one --mask per --support")
    q = tio.read_tensor(args.query).astype(np.float64)
    sups = [(tio.read_tensor(s).astype(np.float64), tio.read_mask(m)) for s, m in zip(args.support, args.mask)]
    return q, sups


def cmd_prior(args) -> int:
    seed = 0 if args.seed is None else args.seed
    f_q, sups = _prior_inputs(args)
    pack = prior_pack(f_q, sups)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = {k: out / f"{k}.pgm" for k in ("fg", "bg", "disc")}
    for t in [*targets.values(), out / "prototypes.json"]:
        if t.exists() and not args.force:
            raise FileExistsError(f"{t} exists; pass --force to overwrite")
    for k, path in targets.items():
        tio.write_mask_pgm(path, getattr(pack, k).value)
    _write_json(
        out / "prototypes.json",
        {"seed": seed, "proto_fg": pack.proto_fg.value.tolist(), "proto_bg": pack.proto_bg.value.tolist()},
        args.force,
    )
    print(f"seed={seed} wrote fg/bg/disc priors to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    if args.aenet is not None:
        cfg = replace(cfg, use_aenet=args.aenet)
    out = Path(args.out)
    csv_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    for t in (out, csv_path):
        if t.exists() and not args.force:
            raise FileExistsError(f"{t} exists; pass --force to overwrite")
    rep = train(cfg)
    _write_json(out, rep.to_dict(), args.force)
    tio.atomic_write_text(csv_path, rep.loss_curve_csv(), args.force)
    print(f"seed={cfg.seed} aenet={'on' if cfg.use_aenet else 'off'} novel mIoU={rep.novel.miou:.4f} "
          f"FB-IoU={rep.novel.fb_iou:.4f} base-holdout mIoU={rep.base_holdout.miou:.4f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise FileExistsError(f"{out} exists; pass --force to overwrite")
    if args.mode == "prior":
        sigmas = [float(s) for s in args.sigmas.split(",")] if args.sigmas else None
        rep = bench_prior(cfg, args.episodes or 200, sigmas)
        for row in rep["by_sigma"]:
            print(f"seed={cfg.seed} sigma={row['sigma']:g} AUC fg={row['auc_fg_mean']:.4f} "
                  f"disc={row['auc_disc_mean']:.4f} p(disc>fg)={row['p_disc_gt_fg']:.3g}")
    elif args.mode == "similarity":
        cfg = replace(cfg, use_aenet=True)
        model = train(cfg).model
        rep = bench_similarity(model, cfg, args.episodes or 100)
        print(f"seed={cfg.seed} FG cosine before={rep['mean_before']:.4f} after={rep['mean_after']:.4f}")
    else:
        rep = sweep_lambda(cfg)
        for row in rep["rows"]:
            print(f"seed={cfg.seed} lambda={row['lambda']:g} novel mIoU={row['novel_miou']:.4f}")
    rep["config"] = cfg.to_dict()
    _write_json(out, rep, args.force)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rep = run_suite(seed, args.eps, args.tol)
    for c in rep["checks"]:
        print(f"{'ok  ' if c['passed'] else 'FAIL'} {c['name']:<18} max rel err {c['max_rel_error']:.2e}")
    print(f"seed={seed} {'passed' if rep['passed'] else 'FAILED'} in {rep['wall_clock_s']:.1f}s")
    if args.out:
        _write_json(Path(args.out), rep, args.force)
    return EXIT_OK if rep["passed"] else EXIT_NUMERIC


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aenet", description="Prior generator and ambiguity eliminator on synthetic few-shot episodes.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="[config file, else 0]")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--threads", type=int, default=None, help="evaluation fan-out [1]")

    sp = sub.add_parser("gen", help="write synthetic episodes (FTNS features, PGM masks, JSON manifest)")
    common(sp)
    add_config_flags(sp)
    sp.add_argument("--out-dir", required=True, type=Path)
    sp.add_argument("--split", choices=("base", "novel", "base_holdout"), default="novel")
    sp.add_argument("--count", type=int, default=1)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("prior", help="compute FG/BG/discriminative priors")
    common(sp)
    sp.add_argument("--episode-dir", type=Path)
    sp.add_argument("--query", type=Path, help="query features (FTNS, C x H x W)")
    sp.add_argument("--support", type=Path, action="append", help="support features (FTNS); repeat for k shots")
    sp.add_argument("--mask", type=Path, action="append", help="support mask (PGM or FTNS); one per --support")
    sp.add_argument("--out-dir", required=True, type=Path)
    sp.set_defaults(func=cmd_prior)

    sp = sub.add_parser("train", help="train and evaluate one arm")
    common(sp)
    add_config_flags(sp)
    sp.add_argument("--aenet", type=_on_off, default=None, help="plug in the AE stack [on]")
    sp.add_argument("--out", required=True, type=Path, help="report JSON")
    sp.add_argument("--loss-csv", type=Path, help="loss curve CSV [<out>.loss.csv]")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("bench", help="prior AUC, FG similarity or lambda sweep")
    common(sp)
    add_config_flags(sp)
    sp.add_argument("--mode", choices=("prior", "similarity", "lambda"), required=True)
    sp.add_argument("--episodes", type=int, help="episodes to score [200 prior, 100 similarity]")
    sp.add_argument("--sigmas", help="comma-separated blur radii for --mode prior")
    sp.add_argument("--out", required=True, type=Path)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every op and the full graph")
    common(sp)
    sp.add_argument("--eps", type=float, default=1e-4, help="[%(default)s]")
    sp.add_argument("--tol", type=float, default=1e-4, help="[%(default)s]")
    sp.add_argument("--out", type=Path, help="optional JSON report")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileExistsError, FileNotFoundError, tio.FormatError, ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
