"""Command-line entry point.

Usage:
    sbsm-fit synth --out data --views 8 --bias 0.8 --size 64
    sbsm-fit fit --targets data/targets --bank data/bank --config fit.json --out out
    sbsm-fit eval --result out --targets data/targets
    sbsm-fit eval --self-test
    sbsm-fit bank inspect --bank data/bank
    sbsm-fit bank interpolate --bank data/bank --from 0 --to 1 --steps 5 --out interp
    sbsm-fit bank sample --bank data/bank --tokens 3 --count 4 --out samples
    sbsm-fit render --mesh out/base.obj --azimuth 30 --out base.png
    sbsm-fit skeleton --mesh out/base.obj --out skeleton.json
    sbsm-fit gradcheck
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from sbsm_fit.bank import describe, fuse_random, interpolate_bases
from sbsm_fit.config import DEFAULT_FOV_DEG, FitConfig, load_config
from sbsm_fit.errors import SbsmError
from sbsm_fit.features import lift_features, pca_reduce
from sbsm_fit.fileio import (
    load_bank,
    load_ground_truth,
    load_targets,
    read_fts,
    read_json,
    save_bank,
    save_image_png,
    save_mask_png,
    save_result,
    save_skeleton,
    save_targets,
    write_json,
)
from sbsm_fit.fit import camera_from_config, fit_instance
from sbsm_fit.geometry import load_obj, save_obj
from sbsm_fit.metrics import (
    aggregate_metrics,
    eval_keypoint_transfer,
    eval_pck_linear,
    view_metrics,
)
from sbsm_fit.render import Camera, project_points, rasterize, render_view
from sbsm_fit.selftest import run_gradient_suite, run_self_test
from sbsm_fit.skeleton import Pose, instantiate_quadruped, view_rotation
from sbsm_fit.synth import (
    DEFAULT_LIGHT,
    KeypointSet,
    SynthSpec,
    generate_views,
    make_bank,
    synth_quadruped,
)

logger = logging.getLogger(__name__)

DEFAULT_PAIRS = 1000
VARIANT_JITTER = 0.2


# ── synth ────────────────────────────────────────────────────────────────


def _variant_specs(spec: SynthSpec, count: int, rng: np.random.Generator) -> List[SynthSpec]:
    """Same-topology species with body proportions jittered by up to VARIANT_JITTER."""
    out = []
    for _ in range(count):
        s = 1.0 + rng.uniform(-VARIANT_JITTER, VARIANT_JITTER, 4)
        out.append(replace(
            spec,
            body_length=spec.body_length * s[0],
            body_width=spec.body_width * s[1],
            body_height=spec.body_height * s[2],
            leg_length=spec.leg_length * s[3],
        ))
    return out


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(read_json(args.spec)) if args.spec else SynthSpec()
    flags = (("bias", args.bias), ("leg_bend_deg", args.leg_bend), ("feature_noise", args.feature_noise))
    spec = replace(spec, seed=args.seed, **{k: v for k, v in flags if v is not None})
    scene = synth_quadruped(spec)
    cam = Camera(fov_deg=DEFAULT_FOV_DEG, width=args.size, height=args.size)
    views = generate_views(scene, cam, args.views, seed=args.seed, jobs=args.jobs)
    if args.raw_feature_dim:
        rng = np.random.default_rng(args.seed)
        masks = [v.mask for v in views]
        raw = lift_features([v.features for v in views], args.raw_feature_dim, rng, noise=spec.feature_noise, masks=masks)
        _, reduced = pca_reduce(raw, out_dim=scene.features.shape[1], masks=masks)
        for view, feats in zip(views, reduced):
            view.features = feats

    out = Path(args.out)
    save_targets(views, out / "targets")
    rng = np.random.default_rng(args.seed + 1)
    variants = [synth_quadruped(s) for s in _variant_specs(spec, args.variants, rng)]
    template = synth_quadruped(SynthSpec(neck=spec.neck, tail=spec.tail, subdivisions=spec.subdivisions, segments=spec.segments)).mesh
    save_bank(make_bank(template, rng, size=args.bank_size, variants=variants), out / "bank")
    (out / "scene").mkdir(parents=True, exist_ok=True)
    save_obj(scene.mesh, out / "scene" / "rest.obj")
    save_skeleton(scene.skeleton, out / "scene" / "skeleton.json")
    write_json(out / "scene" / "spec.json", spec.as_dict())
    print(f"wrote {len(views)} views, a {args.bank_size}-token bank and the ground-truth scene to {out}")
    return 0


# ── fit ──────────────────────────────────────────────────────────────────


def cmd_fit(args) -> int:
    config = load_config(args.config) if args.config else FitConfig()
    overrides = {"seed": args.seed, "jobs": args.jobs, "progress": sys.stderr.isatty()}
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    targets = load_targets(args.targets)
    overrides["image_size"] = targets[0].mask.shape[0]
    config = FitConfig.from_dict({**config.as_dict(), **overrides})
    bank = load_bank(args.bank)
    result = fit_instance(targets, bank, config)
    save_result(result, config, args.out)
    final = result.history[-1]
    print(f"fit done: {config.iterations} iterations, final loss {final.total:.5f} (mask {final.mask:.5f})")
    return 0


# ── eval ─────────────────────────────────────────────────────────────────


def _evaluate(result_dir: Path, targets_dir: Path, pairs: int, seed: int) -> dict:
    report = read_json(result_dir / "report.json")
    config = FitConfig.from_dict(report["config"])
    cam = camera_from_config(config)
    poses = read_json(result_dir / "poses.json")
    truth = load_ground_truth(targets_dir)
    targets = {t.name: t for t in load_targets(targets_dir)}

    per_view, meshes, keypoints = [], {}, {}
    for entry in report["views"]:
        name = entry["name"]
        mesh = load_obj(result_dir / f"deformed_{name}.obj")
        meshes[name] = mesh
        gt = truth.get(name, {})
        azimuth = entry["azimuths_deg"][entry["hypothesis"]]
        per_view.append(view_metrics(
            rasterize(mesh, cam).mask,
            targets[name].mask,
            Pose.from_dict(poses[name]),
            Pose.from_dict(gt["pose"]) if "pose" in gt else None,
            azimuth,
            gt.get("azimuth_deg"),
        ))
        if "keypoints" in gt:
            keypoints[name] = KeypointSet.from_dict(gt["keypoints"])

    summary = aggregate_metrics(per_view)
    names = sorted(keypoints)
    if len(names) >= 2:
        rng = np.random.default_rng(seed)
        scores = []
        for _ in range(pairs):
            a, b = rng.choice(len(names), size=2, replace=False)
            src, tgt = names[a], names[b]
            scores.append(eval_keypoint_transfer(meshes[src], meshes[tgt], keypoints[src], keypoints[tgt], cam))
        valid = [s for s in scores if not np.isnan(s)]
        summary["kt_pck"] = float(np.mean(valid)) if valid else float("nan")
    if names:
        projections = [project_points(cam, meshes[n].vertices)[0] for n in names]
        summary["pck_linear"] = eval_pck_linear(projections, [keypoints[n] for n in names])
    return {"summary": summary, "views": per_view}


def cmd_eval(args) -> int:
    if args.self_test:
        results = run_self_test(seed=args.seed)
        failed = [r for r in results if not r.passed]
        for r in results:
            print(f"{'ok  ' if r.passed else 'FAIL'} {r.name} {r.detail}")
        print(f"{len(results) - len(failed)}/{len(results)} checks passed")
        return 1 if failed else 0
    if not args.result or not args.targets:
        logger.error("eval needs --result and --targets (or --self-test)")
        return 2
    metrics = _evaluate(Path(args.result), Path(args.targets), args.pairs, args.seed)
    out = Path(args.out) if args.out else Path(args.result) / "metrics.json"
    write_json(out, metrics)
    for key, value in metrics["summary"].items():
        print(f"{key:24s} {value:.4f}")
    return 0


# ── bank ─────────────────────────────────────────────────────────────────


def _one_hot(size: int, index: int) -> np.ndarray:
    if not 0 <= index < size:
        raise SbsmError(f"token index must be in [0, {size}), got {index}")
    w = np.zeros(size)
    w[index] = 1.0
    return w


def cmd_bank(args) -> int:
    bank = load_bank(args.bank)
    if args.bank_command == "inspect":
        phi = read_fts(args.phi).astype(np.float64) if args.phi else None
        print(json.dumps(describe(bank, phi), indent=2))
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.bank_command == "interpolate":
        alphas = np.linspace(0.0, 1.0, args.steps)
        meshes = interpolate_bases(bank, _one_hot(bank.size, args.source), _one_hot(bank.size, args.target), alphas)
        for k, mesh in enumerate(meshes):
            save_obj(mesh, out / f"interp_{k:02d}.obj")
        print(f"wrote {len(meshes)} interpolated base shapes to {out}")
        return 0
    rng = np.random.default_rng(args.seed)
    samples = []
    for k in range(args.count):
        weights, mesh = fuse_random(bank, args.tokens, rng)
        save_obj(mesh, out / f"sample_{k:02d}.obj")
        samples.append(weights.tolist())
    write_json(out / "weights.json", samples)
    print(f"wrote {args.count} fused base shapes to {out}")
    return 0


# ── render / skeleton / gradcheck ────────────────────────────────────────


def cmd_render(args) -> int:
    mesh = load_obj(args.mesh)
    rotation = view_rotation(np.deg2rad(args.azimuth), np.deg2rad(args.elevation)).data
    posed = mesh.with_vertices(mesh.vertices @ rotation.T)
    cam = Camera(width=args.size, height=args.size)
    albedo = np.full((mesh.n_vertices, 3), 0.7)
    buffers = render_view(posed, cam, albedo, DEFAULT_LIGHT, jobs=args.jobs)
    out = Path(args.out)
    save_image_png(out, buffers.rgb)
    save_mask_png(out.with_name(out.stem + "_mask.png"), buffers.mask)
    print(f"rendered {mesh.n_faces} faces to {out}")
    return 0


def cmd_skeleton(args) -> int:
    skel = instantiate_quadruped(load_obj(args.mesh))
    save_skeleton(skel, args.out)
    print(f"wrote {skel.n_bones}-bone skeleton to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(seed=args.seed)
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name} {r.detail}")
    return 0 if all(r.passed for r in results) else 1


# ── Parser ───────────────────────────────────────────────────────────────


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sbsm-fit", description="Fit deformable articulated quadrupeds to images")
    parser.add_argument("--seed", type=int, default=0, help="Random seed")
    parser.add_argument("--jobs", type=int, default=1, help="Worker threads for rendering")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic target set, bank and ground truth")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--spec", type=Path, help="SynthSpec JSON")
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--bias", type=float, help="Fraction of frontal views")
    p.add_argument("--size", type=int, default=64, help="Image side in pixels")
    p.add_argument("--leg-bend", type=float, help="Upper-leg swing in degrees")
    p.add_argument("--feature-noise", type=float)
    p.add_argument("--raw-feature-dim", type=int, default=0,
                   help="Lift features to this many channels and PCA them back (0 = off)")
    p.add_argument("--bank-size", type=int, default=60)
    p.add_argument("--variants", type=int, default=4, help="Jittered species stored as bank tokens")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="Run the staged fit on a target set")
    p.add_argument("--targets", type=Path, required=True)
    p.add_argument("--bank", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("--iterations", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="Score a fit result, or run the self-test")
    p.add_argument("--self-test", action="store_true")
    p.add_argument("--result", type=Path)
    p.add_argument("--targets", type=Path)
    p.add_argument("--pairs", type=int, default=DEFAULT_PAIRS, help="Keypoint-transfer pairs")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bank", help="Inspect, interpolate or sample a bank")
    bank_sub = p.add_subparsers(dest="bank_command", required=True)
    b = bank_sub.add_parser("inspect")
    b.add_argument("--bank", type=Path, required=True)
    b.add_argument("--phi", type=Path, help="Embedding (.fts) to query")
    b = bank_sub.add_parser("interpolate")
    b.add_argument("--bank", type=Path, required=True)
    b.add_argument("--from", dest="source", type=int, default=0)
    b.add_argument("--to", dest="target", type=int, default=1)
    b.add_argument("--steps", type=int, default=5)
    b.add_argument("--out", type=Path, required=True)
    b = bank_sub.add_parser("sample")
    b.add_argument("--bank", type=Path, required=True)
    b.add_argument("--tokens", type=int, default=3)
    b.add_argument("--count", type=int, default=4)
    b.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("render", help="Render a mesh from an azimuth")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--elevation", type=float, default=0.0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("skeleton", help="Instantiate the quadruped skeleton on a mesh")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_skeleton)

    p = sub.add_parser("gradcheck", help="Compare analytic and finite-difference gradients")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SbsmError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
