"""End-to-end orchestration: seed detection, vesselness, blood model,
bidirectional segmentation, skeleton and CPR, with a deterministic report."""

from __future__ import annotations

import json
import os
import time

import numpy as np

from . import blood as blood_mod
from . import seeds as seeds_mod
from . import skeleton as skel_mod
from .config import PipelineConfig
from .errors import CorosegError, UsageError
from .levelset import segment_tree
from .vesselness import edge_measure, multiscale_vesselness, suppress_edges
from .volume import (BinaryMask, Volume3D, connected_components,
                     extract_axial_slice, load_volume, save_volume)


class RunReport:
    """Append-only run record, serialised with sorted keys.

    Wall-clock timings live under the "timings" key so determinism checks can
    drop them.
    """

    def __init__(self):
        self.data = {"stages": [], "artifacts": [], "timings": {}}

    def stage(self, name: str, **payload):
        self.data["stages"].append(name)
        self.data[name] = _plain(payload)

    def artifact(self, path: str):
        self.data["artifacts"].append(str(path))

    def timing(self, name: str, seconds: float):
        self.data["timings"][name] = seconds

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=2)


def _plain(obj):
    """Recursively convert numpy scalars/arrays for JSON serialisation."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def run_pipeline(cfg: PipelineConfig):
    """Run every stage in order, persisting intermediates as they complete.

    On a stage failure the report (with the failed stage recorded) and all
    completed artifacts remain on disk, and the error propagates.
    """
    report = RunReport()
    os.makedirs(cfg.out_dir, exist_ok=True)
    artifacts = {}

    def out(name):
        return os.path.join(cfg.out_dir, name)

    def finish_report():
        path = out("report.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
        artifacts["report"] = path

    stage_name = "load"
    try:
        t0 = time.perf_counter()
        vol = load_volume(cfg.input)
        report.stage("load", input=cfg.input, dims=vol.dims, spacing=vol.spacing)
        report.timing("load", time.perf_counter() - t0)

        # --- seed detection, part 1: reference slice and closed-boundary ROIs
        stage_name = "seed_rois"
        t0 = time.perf_counter()
        ref_z = seeds_mod.select_reference_slice(vol, cfg.cr)
        ref_slice = extract_axial_slice(vol, ref_z)
        body = seeds_mod.body_region_mask(ref_slice)
        rois = seeds_mod.detect_closed_rois(ref_slice, body)
        report.stage("seed_rois", reference_slice=ref_z, roi_count=len(rois),
                     centroids=[list(r.centroid) for r in rois])
        report.timing("seed_rois", time.perf_counter() - t0)

        # --- vesselness
        stage_name = "vesselness"
        t0 = time.perf_counter()
        vf = multiscale_vesselness(vol, cfg.frangi_params())
        if cfg.edge_suppress is not None:
            e = edge_measure(vol, cfg.edge_scale, cfg.edge_gain, cfg.gamma)
            vf = suppress_edges(vf, e, cfg.edge_suppress)
        vf_vol = Volume3D(vf.v.data, vol.spacing, vol.origin, "MET_FLOAT")
        save_volume(vf_vol, out("vesselness.mhd"))
        save_volume(Volume3D(vf.best_scale.data, vol.spacing, vol.origin,
                             "MET_FLOAT"), out("best_scale.mhd"))
        report.stage("vesselness", scales=list(cfg.scales),
                     edge_suppress=cfg.edge_suppress,
                     max_score=float(vf.v.data.max()))
        report.artifact(out("vesselness.mhd"))
        report.artifact(out("best_scale.mhd"))
        report.timing("vesselness", time.perf_counter() - t0)

        # --- blood model
        stage_name = "blood_model"
        t0 = time.perf_counter()
        aorta = None
        if cfg.hu_lo is not None:
            model = blood_mod.BloodIntensityModel(
                mu=(cfg.hu_lo + cfg.hu_hi) / 2.0,
                sigma=max((cfg.hu_hi - cfg.hu_lo) / 6.0, 1e-6),
                lo=cfg.hu_lo, hi=cfg.hu_hi, residual=0.0)
            source = "manual_range"
        elif cfg.blood_mu is not None:
            model = blood_mod.BloodIntensityModel.from_fit(cfg.blood_mu,
                                                           cfg.blood_sigma)
            source = "manual_fit"
        else:
            model, aorta = blood_mod.model_from_volume(
                vol, bin_width=cfg.bin_width, z_band=cfg.aorta_z_band)
            save_volume(aorta, out("aorta.mhd"))
            report.artifact(out("aorta.mhd"))
            source = "auto"
        report.stage("blood_model", source=source, mu=model.mu,
                     sigma=model.sigma, lo=model.lo, hi=model.hi,
                     residual=model.residual)
        report.timing("blood_model", time.perf_counter() - t0)

        # --- seed detection, part 2: three-way thresholding
        stage_name = "seed_select"
        t0 = time.perf_counter()
        v_t = cfg.vt if cfg.vt is not None else model.lo
        if cfg.seed_point is not None:
            seed = tuple(int(c) for c in cfg.seed_point)
            candidates = []
            report.stage("seed_select", mode="manual", seed=list(seed), vt=v_t)
        else:
            candidates = seeds_mod.select_seeds(
                vol, vf, rois, ref_z, (cfg.tf, cfg.tgf, v_t),
                plane_gap=cfg.plane_gap, pairing=cfg.gf_pairing)
            seed = candidates[0].point
            report.stage("seed_select", mode="auto", seed=list(seed), vt=v_t,
                         candidates=[{
                             "point": list(c.point), "frangi": c.frangi,
                             "gf": c.gf, "intensity": c.intensity,
                             "accepted": c.accepted} for c in candidates])
        with open(out("seeds.jsonl"), "w", encoding="utf-8") as fh:
            for c in candidates:
                fh.write(json.dumps(_plain({
                    "x": c.point[0], "y": c.point[1], "z": c.point[2],
                    "frangi": c.frangi, "gf": c.gf,
                    "intensity": c.intensity, "accepted": c.accepted,
                }), sort_keys=True) + "\n")
        report.artifact(out("seeds.jsonl"))
        report.timing("seed_select", time.perf_counter() - t0)

        # --- bidirectional segmentation
        stage_name = "segment"
        t0 = time.perf_counter()
        params = cfg.evolution_params(hu_gate=(model.lo, model.hi))
        result = segment_tree(vol, seed, params, vesselness=vf, aorta=aorta)
        save_volume(result.mask, out("mask.mhd"))
        report.artifact(out("mask.mhd"))
        _, sizes = connected_components(result.mask, 26)
        report.stage("segment",
                     voxel_count=result.mask.count(),
                     component_count=int(len(sizes)),
                     stop_reasons=result.stop_reasons,
                     per_slice_iterations=result.iterations,
                     per_slice_contours=result.per_slice_contours,
                     provenance=result.provenance)
        with open(out("runlog.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"seed: {seed}\n")
            for z in sorted(result.iterations):
                fh.write(f"slice {z}: {result.iterations[z]} iterations "
                         f"({result.provenance[z]})\n")
            for direction, reason in result.stop_reasons.items():
                fh.write(f"stop {direction}: {reason}\n")
        report.artifact(out("runlog.txt"))
        report.timing("segment", time.perf_counter() - t0)

        # --- skeleton
        stage_name = "skeleton"
        t0 = time.perf_counter()
        centreline = skel_mod.extract_centreline(
            result.mask, n_branches=cfg.n_branches,
            speed_exponent=cfg.speed_exponent, branch_floor=cfg.branch_floor)
        skel_mod.save_centreline(centreline, out("centreline.csv"))
        report.artifact(out("centreline.csv"))
        report.stage("skeleton",
                     branch_count=len(centreline.branches),
                     branch_lengths=[skel_mod.arc_length(b.points)
                                     for b in centreline.branches])
        report.timing("skeleton", time.perf_counter() - t0)

        # --- curved planar reformation of the main branch
        stage_name = "cpr"
        t0 = time.perf_counter()
        straight = skel_mod.cpr_straighten(vol, centreline.branches[0],
                                           half_extent=cfg.cpr_half_extent,
                                           spacing=cfg.cpr_spacing)
        save_volume(straight.volume, out("cpr.mhd"))
        report.artifact(out("cpr.mhd"))
        report.stage("cpr", slices=straight.volume.dims[2],
                     grid=straight.volume.dims[:2])
        report.timing("cpr", time.perf_counter() - t0)

        finish_report()
        return report, {"mask": result.mask, "centreline": centreline,
                        "vesselness": vf, "blood_model": model,
                        "report_path": artifacts["report"]}
    except CorosegError as exc:
        report.stage("failure", failed_stage=stage_name, error=str(exc))
        finish_report()
        raise
