"""Command-line entry points: dissect, intervene, diagnose, serve.

Exit codes: 0 success, 1 analysis failure (e.g. a concept with zero base
rate), 2 usage or I/O failure. The environment variable GD_THREADS caps
worker parallelism for precomputation.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import dissect as dissectmod
from . import diagnose as diagmod
from . import intervene as intmod
from . import persist, scenes, segment, weights
from .nn import forward, forward_from, infer_shapes


def worker_count() -> int:
    env = os.environ.get("GD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return min(4, os.cpu_count() or 1)


def _load_model(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"model file not found: {path}")
    return weights.load_weights(path)


def _load_universe(path):
    if path is None:
        return scenes.default_universe()
    return segment.ConceptUniverse.load(path)


def _unit_grid_png(net, report, zs, out_path, crops_per_unit: int = 5,
                   crop: int = 24):
    """Mosaic of top-activating crops per unit, one row per unit."""
    res = forward(net, zs)
    acts = res.featuremap
    d = acts.shape[1]
    img_size = res.image.shape[-1]
    block = img_size // acts.shape[-1]
    rows = []
    for u in range(d):
        mean_act = acts[:, u].mean(axis=(1, 2))
        top = np.argsort(-mean_act, kind="stable")[:crops_per_unit]
        tiles = []
        for i in top:
            pr, pc = np.unravel_index(np.argmax(acts[i, u]), acts.shape[-2:])
            cy = min(max(pr * block + block // 2, crop // 2), img_size - crop // 2)
            cx = min(max(pc * block + block // 2, crop // 2), img_size - crop // 2)
            tiles.append(res.image[i][:, cy - crop // 2:cy + crop // 2,
                                      cx - crop // 2:cx + crop // 2])
        while len(tiles) < crops_per_unit:
            tiles.append(np.full((3, crop, crop), -1.0, dtype=np.float32))
        rows.append(np.concatenate(tiles, axis=2))
    persist.save_png(np.concatenate(rows, axis=1), out_path)


def cmd_dissect(args) -> int:
    net = _load_model(args.model)
    universe = _load_universe(args.universe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    val_zs = scenes.sample_z(args.seed, args.val_samples, net.latent_dim)
    eval_zs = scenes.sample_z(args.seed + 1, args.samples, net.latent_dim)
    report = dissectmod.label_units(net, universe, val_zs, eval_zs,
                                    layer_index=args.layer,
                                    with_parts=not args.no_parts,
                                    min_val=min(args.val_samples, 200),
                                    min_eval=min(args.samples, 1000))
    persist.save_json(report.to_json(), out / "report.json")
    grid_zs = scenes.sample_z(args.seed + 2, min(args.samples, 200), net.latent_dim)
    _unit_grid_png(net, report, grid_zs, out / "units.png")
    print(f"wrote {out / 'report.json'} ({report.interpretable_count()} interpretable units)")
    return 0


def cmd_intervene(args) -> int:
    net = _load_model(args.model)
    universe = _load_universe(args.universe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    concept = args.concept

    k = intmod.compute_k(net, universe, concept,
                         scenes.sample_z(args.seed + 10, args.k_samples, net.latent_dim))
    if args.alpha and Path(args.alpha).exists():
        doc = persist.load_json(args.alpha, kind="alpha-vector")
        alpha = np.asarray(doc["alpha"], dtype=np.float32)
    else:
        if args.report and Path(args.report).exists():
            report = dissectmod.DissectionReport.from_json(
                persist.load_json(args.report, kind="dissection-report"))
        else:
            report = dissectmod.label_units(
                net, universe,
                scenes.sample_z(args.seed + 11, 120, net.latent_dim),
                scenes.sample_z(args.seed + 12, 300, net.latent_dim),
                min_val=100, min_eval=300, with_parts=False)
        init = intmod.alpha_init_from_report(report, concept)
        config = intmod.AceConfig(steps=args.opt_steps, minibatch=24, blocks=4,
                                  batch_z=6, seed=args.seed)
        result = intmod.optimize_alpha(net, universe, concept, k.k, init, config)
        alpha = result.alpha
        persist.save_json(result.to_json(), out / "alpha.json")
    units = intmod.clip_alpha_top_n(alpha, args.n_units) if args.n_units else []

    zs = scenes.sample_z(args.seed, args.samples, net.latent_dim)
    ace_res = intmod.ace(net, universe, concept, units, k.k, zs, seed=args.seed)
    persist.save_json(ace_res.to_json(), out / "ace.json")

    sizes = sorted({0, max(1, args.n_units // 4), max(1, args.n_units // 2), args.n_units})
    ranked = [int(u) for u in np.argsort(-alpha, kind="stable")]
    curve = intmod.ablation_curve(net, universe, concept, ranked, sizes, zs)
    persist.save_json({"kind": "ablation-curve", "concept": concept, "points": curve},
                      out / "curve.json")
    context = intmod.insertion_context_effect(net, universe, concept, units, k.k,
                                              zs, seed=args.seed)
    persist.save_json(context, out / "context.json")

    show = forward(net, zs[:args.pairs])
    for i in range(min(args.pairs, len(zs))):
        before = show.image[i]
        r = show.featuremap[i]
        if args.mode == "ablate":
            r2 = intmod.ablate(r, units)
        else:
            r2 = intmod.insert(r, units, None, k.k)
        persist.save_png(before, out / f"pair{i:02d}_before.png")
        persist.save_png(forward_from(net, r2), out / f"pair{i:02d}_after.png")
    print(f"wrote {out} (delta {ace_res.delta:+.3f} +/- {ace_res.half_width:.3f})")
    return 0


def cmd_diagnose(args) -> int:
    if args.n_generate < 100:
        raise UsageError(f"--n-generate must be >= 100, got {args.n_generate}")
    if args.top_k > args.n_generate:
        raise UsageError(f"--top-k {args.top_k} exceeds --n-generate {args.n_generate}")
    net = _load_model(args.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    truth_path = Path(args.truth) if args.truth else Path(str(args.model) + ".truth.json")
    disabled = []
    if truth_path.exists():
        disabled = scenes.load_truth(truth_path).artifact_units
    ref_zs = scenes.sample_z(args.seed + 1, max(args.n_generate // 2, 300), net.latent_dim)
    reference = diagmod.reference_stats(net, ref_zs, disabled_units=disabled)

    scores = diagmod.unit_fid_scores(net, reference, seed=args.seed,
                                     n_generate=args.n_generate, top_k=args.top_k)
    ranked = diagmod.rank_artifact_units(scores)
    persist.save_json({"kind": "unit-fid-scores",
                       "scores": [s.to_json() for s in scores]}, out / "scores.json")
    with open(out / "rank.txt", "w") as fh:
        for s in ranked:
            fh.write(f"unit {s.unit:3d}  fid {s.fid:10.4f}\n")

    if args.repair_m:
        to_ablate = diagmod.repair(scores, args.repair_m)
        zs = scenes.sample_z(args.seed + 2, 400, net.latent_dim)
        res = forward(net, zs)
        before_fid = diagmod.frechet_distance(
            diagmod.gaussian_stats(diagmod.embed(res.image)), reference)
        r = res.featuremap.copy()
        r[:, to_ablate] = 0.0
        repaired = forward_from(net, r)
        after_fid = diagmod.frechet_distance(
            diagmod.gaussian_stats(diagmod.embed(repaired)), reference)
        persist.save_json({"kind": "repair-result", "units": to_ablate,
                           "fid_before": before_fid, "fid_after": after_fid},
                          out / "repair.json")
        for i in range(min(4, len(zs))):
            persist.save_png(res.image[i], out / f"repair{i:02d}_before.png")
            persist.save_png(repaired[i], out / f"repair{i:02d}_after.png")
        print(f"repair: fid {before_fid:.3f} -> {after_fid:.3f} (ablated {to_ablate})")
    print(f"wrote {out}; worst unit {ranked[0].unit} (fid {ranked[0].fid:.3f})")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app
    app = create_app(args.model, universe_path=args.universe,
                     precompute=args.precompute, seed=args.seed)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gendissect",
                                     description="Generator dissection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dissect", help="label units by segmentation agreement")
    p.add_argument("--model", required=True)
    p.add_argument("--universe")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--val-samples", type=int, default=200)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--no-parts", action="store_true")
    p.set_defaults(func=cmd_dissect)

    p = sub.add_parser("intervene", help="causal ablation/insertion analysis")
    p.add_argument("--model", required=True)
    p.add_argument("--universe")
    p.add_argument("--concept", required=True)
    p.add_argument("--mode", choices=("ablate", "insert"), default="ablate")
    p.add_argument("--n-units", type=int, default=20)
    p.add_argument("--samples", type=int, default=300)
    p.add_argument("--k-samples", type=int, default=200)
    p.add_argument("--opt-steps", type=int, default=30)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="existing dissection report JSON")
    p.add_argument("--alpha", help="existing alpha-vector JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_intervene)

    p = sub.add_parser("diagnose", help="per-unit FID artifact diagnosis")
    p.add_argument("--model", required=True)
    p.add_argument("--truth", help="planted-truth sidecar (for the reference)")
    p.add_argument("--n-generate", type=int, default=2000)
    p.add_argument("--top-k", type=int, default=200)
    p.add_argument("--repair-m", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("serve", help="HTTP intervention service")
    p.add_argument("--model", required=True)
    p.add_argument("--universe")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--precompute", choices=("alpha", "iou"), default="alpha")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, weights.WeightFormatError, persist.ParseError,
            persist.SchemaVersionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (intmod.ZeroBaseRateError,) as exc:
        print(f"analysis failed: concept absent ({exc})", file=sys.stderr)
        return 1
    except (ValueError, intmod.DivergenceError) as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
