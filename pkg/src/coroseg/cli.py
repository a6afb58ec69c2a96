"""Command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 data/format error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import blood as blood_mod
from . import seeds as seeds_mod
from . import skeleton as skel_mod
from .config import parse_config
from .errors import CorosegError, UsageError
from .levelset import EvolutionParams, segment_tree
from .phantoms import PhantomSpec, generate
from .pipeline import run_pipeline
from .vesselness import (FrangiParams, edge_measure, multiscale_vesselness,
                         suppress_edges)
from .volume import (BinaryMask, Volume3D, extract_axial_slice, load_volume,
                     save_volume)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _triple(text, cast=float):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 3:
        raise UsageError(f"expected three values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _pair(text):
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 2:
        raise UsageError(f"expected two values, got {text!r}")
    return float(parts[0]), float(parts[1])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coroseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("phantom", help="generate a synthetic volume with ground truth")
    g.add_argument("--kind", default="tube")
    g.add_argument("--radius", type=float, default=2.0)
    g.add_argument("--length", type=float, default=None,
                   help="tube length (mm), centred in z; default spans the volume")
    g.add_argument("--fg", type=float, default=495.0)
    g.add_argument("--bg", type=float, default=40.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--ramp", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", type=lambda s: _triple(s, int), default=(64, 64, 64))
    g.add_argument("--spacing", type=_triple, default=(0.5, 0.5, 0.5))
    g.add_argument("--profile", default="hard", choices=["hard", "gaussian"])
    g.add_argument("--out", required=True, help="output prefix")

    v = sub.add_parser("vesselness", help="multiscale tubularity filter")
    v.add_argument("input")
    v.add_argument("--scales", default="1.0,1.5,2.0,2.5")
    v.add_argument("--alpha", type=float, default=0.5)
    v.add_argument("--beta", type=float, default=0.5)
    v.add_argument("--c", type=float, default=None)
    v.add_argument("--gamma", type=float, default=1.0)
    v.add_argument("--edge-suppress", type=float, default=None, metavar="T_E")
    v.add_argument("--edge-scale", type=float, default=1.0)
    v.add_argument("--out", required=True, help="output prefix")

    s = sub.add_parser("seeds", help="automatic seed detection")
    s.add_argument("input")
    s.add_argument("--cr", type=float, default=0.5)
    s.add_argument("--tf", type=float, default=0.1)
    s.add_argument("--tgf", type=float, default=0.2)
    s.add_argument("--vt", type=float, default=None,
                   help="intensity threshold; default: blood-model lower bound")
    s.add_argument("--plane-gap", type=float, default=2.0)
    s.add_argument("--out", default=None, help="candidate JSON-lines file")

    b = sub.add_parser("blood-model", help="contrast-agent HU range estimation")
    b.add_argument("input")
    b.add_argument("--mu", type=float, default=None)
    b.add_argument("--sigma", type=float, default=None)
    b.add_argument("--aorta-z-band", type=float, default=0.25)
    b.add_argument("--bin-width", type=float, default=8.0)

    m = sub.add_parser("segment", help="bidirectional level-set segmentation")
    m.add_argument("input")
    m.add_argument("--seed", type=lambda s: _triple(s, int), default=None,
                   metavar="X,Y,Z")
    m.add_argument("--auto-seed", action="store_true")
    m.add_argument("--energy", default="chan_vese_localized")
    m.add_argument("--ball-radius", type=float, default=4.0)
    m.add_argument("--lambda", dest="lambda_weight", type=float, default=0.2)
    m.add_argument("--dt", type=float, default=0.25)
    m.add_argument("--eps", type=float, default=1.5)
    m.add_argument("--max-iters", type=int, default=300)
    m.add_argument("--hu-gate", type=_pair, default=None, metavar="LO,HI")
    m.add_argument("--auto-blood", action="store_true")
    m.add_argument("--cr", type=float, default=0.5)
    m.add_argument("--out", required=True, help="output mask header path")

    k = sub.add_parser("skeleton", help="sub-voxel centreline of a mask")
    k.add_argument("mask")
    k.add_argument("--n-branches", type=int, default=4)
    k.add_argument("--branch-floor", type=float, default=5.0)
    k.add_argument("--speed-exponent", type=float, default=4.0)
    k.add_argument("--out", required=True, help="centreline CSV path")

    c = sub.add_parser("cpr", help="straighten a volume along a centreline branch")
    c.add_argument("input")
    c.add_argument("centreline")
    c.add_argument("--branch", type=int, default=0)
    c.add_argument("--half-extent", type=float, default=10.0)
    c.add_argument("--spacing", type=float, default=0.25)
    c.add_argument("--out", required=True)

    r = sub.add_parser("pipeline", help="run every stage end to end")
    r.add_argument("--config", default=None)
    r.add_argument("--input", default=None)
    r.add_argument("--out-dir", default=None)
    r.add_argument("--cr", type=float, default=None)
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    return p


def _cmd_phantom(args) -> int:
    spec_kwargs = dict(kind=args.kind, radius=args.radius, foreground=args.fg,
                       background=args.bg, noise_sigma=args.noise,
                       ramp=args.ramp, seed=args.seed, dims=args.dims,
                       spacing=args.spacing, profile=args.profile)
    if args.length is not None:
        cx = (args.dims[0] - 1) * args.spacing[0] / 2.0
        cy = (args.dims[1] - 1) * args.spacing[1] / 2.0
        z_mid = (args.dims[2] - 1) * args.spacing[2] / 2.0
        spec_kwargs["p0"] = (cx, cy, z_mid - args.length / 2.0)
        spec_kwargs["p1"] = (cx, cy, z_mid + args.length / 2.0)
    vol, truth = generate(PhantomSpec(**spec_kwargs))
    vol.element_type = "MET_FLOAT"
    save_volume(vol, args.out + ".mhd")
    save_volume(truth.mask, args.out + "_mask.mhd")
    with open(args.out + "_centreline.csv", "w", encoding="ascii") as fh:
        fh.write("branch_id,point_index,x_mm,y_mm,z_mm,radius_mm\n")
        for bid, line in enumerate(truth.centrelines):
            for pid, pt in enumerate(line):
                fh.write(f"{bid},{pid},{pt[0]!r},{pt[1]!r},{pt[2]!r},"
                         f"{args.radius!r}\n")
    print(f"wrote {args.out}.mhd, {args.out}_mask.mhd, {args.out}_centreline.csv")
    return 0


def _cmd_vesselness(args) -> int:
    vol = load_volume(args.input)
    scales = tuple(float(s) for s in args.scales.replace(",", " ").split())
    params = FrangiParams(alpha=args.alpha, beta=args.beta, c=args.c,
                          scales=scales, gamma=args.gamma)
    vf = multiscale_vesselness(vol, params)
    if args.edge_suppress is not None:
        e = edge_measure(vol, args.edge_scale)
        vf = suppress_edges(vf, e, args.edge_suppress)
    save_volume(Volume3D(vf.v.data, vol.spacing, vol.origin, "MET_FLOAT"),
                args.out + ".mhd")
    save_volume(Volume3D(vf.best_scale.data, vol.spacing, vol.origin,
                         "MET_FLOAT"), args.out + "_scale.mhd")
    print(f"wrote {args.out}.mhd, {args.out}_scale.mhd")
    return 0


def _cmd_seeds(args) -> int:
    vol = load_volume(args.input)
    v_t = args.vt
    if v_t is None:
        model, _ = blood_mod.model_from_volume(vol)
        v_t = model.lo
    z = seeds_mod.select_reference_slice(vol, args.cr)
    ref = extract_axial_slice(vol, z)
    body = seeds_mod.body_region_mask(ref)
    rois = seeds_mod.detect_closed_rois(ref, body)
    vf = multiscale_vesselness(vol, FrangiParams())
    candidates = seeds_mod.select_seeds(vol, vf, rois, z,
                                        (args.tf, args.tgf, v_t),
                                        plane_gap=args.plane_gap)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for c in candidates:
                fh.write(json.dumps({
                    "x": c.point[0], "y": c.point[1], "z": c.point[2],
                    "frangi": c.frangi, "gf": c.gf, "intensity": c.intensity,
                    "accepted": c.accepted}, sort_keys=True) + "\n")
    for c in candidates:
        if c.accepted:
            print(f"{c.point[0]} {c.point[1]} {c.point[2]} "
                  f"{c.frangi:.6f} {c.gf:.6f} {c.intensity:.1f}")
    return 0


def _cmd_blood_model(args) -> int:
    vol = load_volume(args.input)
    if args.mu is not None and args.sigma is not None:
        model = blood_mod.BloodIntensityModel.from_fit(args.mu, args.sigma)
    else:
        model, _ = blood_mod.model_from_volume(vol, bin_width=args.bin_width,
                                               z_band=args.aorta_z_band)
    print(f"{model.mu:.3f} {model.sigma:.3f} {model.lo:.3f} {model.hi:.3f} "
          f"{model.residual:.6g}")
    return 0


def _cmd_segment(args) -> int:
    vol = load_volume(args.input)
    aorta = None
    if args.hu_gate is not None:
        gate = args.hu_gate
    elif args.auto_blood:
        model, aorta = blood_mod.model_from_volume(vol)
        gate = (model.lo, model.hi)
    else:
        raise UsageError("provide --hu-gate LO,HI or --auto-blood")
    if args.seed is not None:
        seed = args.seed
    elif args.auto_seed:
        z = seeds_mod.select_reference_slice(vol, args.cr)
        ref = extract_axial_slice(vol, z)
        body = seeds_mod.body_region_mask(ref)
        rois = seeds_mod.detect_closed_rois(ref, body)
        vf = multiscale_vesselness(vol, FrangiParams())
        candidates = seeds_mod.select_seeds(vol, vf, rois, z,
                                            (0.1, 0.2, gate[0]))
        seed = candidates[0].point
    else:
        raise UsageError("provide --seed X,Y,Z or --auto-seed")
    params = EvolutionParams(energy=args.energy, ball_radius=args.ball_radius,
                             lambda_weight=args.lambda_weight, dt=args.dt,
                             eps=args.eps, max_iters=args.max_iters,
                             hu_gate=gate)
    result = segment_tree(vol, seed, params, aorta=aorta)
    save_volume(result.mask, args.out)
    log_path = args.out.rsplit(".", 1)[0] + "_runlog.txt"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(f"seed: {tuple(seed)}\n")
        for z in sorted(result.iterations):
            fh.write(f"slice {z}: {result.iterations[z]} iterations "
                     f"({result.provenance[z]})\n")
        for direction, reason in result.stop_reasons.items():
            fh.write(f"stop {direction}: {reason}\n")
    print(f"wrote {args.out} ({result.mask.count()} voxels) and {log_path}")
    return 0


def _cmd_skeleton(args) -> int:
    vol = load_volume(args.mask)
    mask = BinaryMask(vol.data > 0.5, vol.spacing, vol.origin)
    centreline = skel_mod.extract_centreline(mask, n_branches=args.n_branches,
                                             speed_exponent=args.speed_exponent,
                                             branch_floor=args.branch_floor)
    skel_mod.save_centreline(centreline, args.out)
    print(f"wrote {args.out} ({len(centreline.branches)} branches)")
    return 0


def _cmd_cpr(args) -> int:
    vol = load_volume(args.input)
    centreline = skel_mod.load_centreline(args.centreline, vol.spacing)
    if not 0 <= args.branch < len(centreline.branches):
        raise UsageError(f"branch {args.branch} does not exist")
    straight = skel_mod.cpr_straighten(vol, centreline.branches[args.branch],
                                       half_extent=args.half_extent,
                                       spacing=args.spacing)
    save_volume(straight.volume, args.out)
    print(f"wrote {args.out} ({straight.volume.dims[2]} sections)")
    return 0


def _cmd_pipeline(args) -> int:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.input is not None:
        overrides["input"] = args.input
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if args.cr is not None:
        overrides["cr"] = args.cr
    cfg = parse_config(args.config, overrides)
    if not cfg.input:
        raise UsageError("no input volume; set input= in the config or --input")
    report, _ = run_pipeline(cfg)
    print(report.to_json())
    return 0


_COMMANDS = {
    "phantom": _cmd_phantom,
    "vesselness": _cmd_vesselness,
    "seeds": _cmd_seeds,
    "blood-model": _cmd_blood_model,
    "segment": _cmd_segment,
    "skeleton": _cmd_skeleton,
    "cpr": _cmd_cpr,
    "pipeline": _cmd_pipeline,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except CorosegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
