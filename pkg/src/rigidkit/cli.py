"""``rigidkit`` command line: simulate, costmaps, segment, sceneflow, evaluate."""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import RigidKitError
from .evalkit import csv_header, csv_row, score_flow, score_segmentation
from .geometry import CameraIntrinsics
from .pipeline import RansacParams, estimate_ego, run_segmentation, run_sceneflow
from .costmaps import MotionContext, compute_cost_maps
from .rigidfit import PARALLAX_MIN
from .segment import ThresholdConfig
from .simkit import (SCENARIO_KINDS, NoiseConfig, SceneDescription, SceneError, corrupt,
                     make_degenerate_scenario, render)

logger = logging.getLogger("rigidkit")

MANIFEST = "manifest.json"
EXIT_INPUT = 2
EXIT_STAGE = 3

SIM_FILES = {
    "flow": "flow.flo",
    "expansion": "expansion.pfm",
    "depth_prior": "depth_prior.pfm",
    "confidence": "confidence.pfm",
    "gt_flow": "gt_flow.flo",
    "gt_depth0": "gt_depth0.pfm",
    "gt_depth1": "gt_depth1.pfm",
    "gt_labels": "gt_labels.pgm",
}
COST_NAMES = ("epi", "hom", "pp3d", "depth")


class InputError(Exception):
    """Bad or missing user input; exit status 2."""


class StageError(Exception):
    """A pipeline stage failed; exit status 3."""


# --------------------------------------------------------------------------- helpers

def _load_json(path, what):
    try:
        return io.read_report(path)
    except FileNotFoundError:
        raise InputError(f"{what} file not found: {path}") from None
    except io.FormatError as exc:
        raise InputError(f"{what}: {exc}") from None


def load_config(path):
    """Pipeline config: ``thresholds``, ``ransac`` and ``parallax_min`` sections, all optional."""
    if path is None:
        return ThresholdConfig(), RansacParams(), PARALLAX_MIN
    cfg = _load_json(path, "config")
    try:
        th = ThresholdConfig(**cfg.get("thresholds", {}))
        rp = RansacParams(**cfg.get("ransac", {}))
        pmin = float(cfg.get("parallax_min", PARALLAX_MIN))
    except (TypeError, ValueError, AttributeError) as exc:
        raise InputError(f"invalid config {path}: {exc}") from None
    return th, rp, pmin


class Workspace:
    """An output directory whose manifest accumulates the files of successive commands."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / MANIFEST
        self.manifest = io.read_report(path) if path.exists() else {"files": {}}
        self.manifest.setdefault("files", {})

    def add(self, key, filename):
        self.manifest["files"][key] = filename
        return self.dir / filename

    def drop(self, key):
        name = self.manifest["files"].pop(key, None)
        if name and (self.dir / name).exists():
            (self.dir / name).unlink()

    def save(self):
        io.write_report(self.dir / MANIFEST, self.manifest)


class Inputs:
    """Resolves named inputs from explicit paths or from an input directory's manifest."""

    def __init__(self, input_dir=None, explicit=None):
        self.dir = Path(input_dir) if input_dir else None
        self.manifest = {}
        if self.dir is not None:
            mpath = self.dir / MANIFEST
            if not mpath.exists():
                raise InputError(f"input directory has no {MANIFEST}: {self.dir}")
            self.manifest = _load_json(mpath, "manifest")
        self.explicit = {k: v for k, v in (explicit or {}).items() if v}

    def path(self, key):
        if key in self.explicit:
            p = Path(self.explicit[key])
        elif key in self.manifest.get("files", {}):
            p = self.dir / self.manifest["files"][key]
        else:
            raise InputError(f"missing {key} input")
        if not p.exists():
            raise InputError(f"missing {key} input: {p}")
        return p

    def _read(self, key, reader):
        p = self.path(key)
        try:
            return reader(p)
        except (io.FormatError, ValueError) as exc:
            raise InputError(f"cannot read {key} input: {exc}") from None

    def flow(self, key="flow"):
        return self._read(key, io.read_flo).astype(np.float64)

    def raster(self, key):
        return self._read(key, io.read_pfm).astype(np.float64)

    def labels(self, key="labels"):
        return self._read(key, io.read_pgm16)

    def intrinsics(self):
        try:
            if "intrinsics" in self.explicit:
                d = _load_json(self.explicit["intrinsics"], "intrinsics")
                K0 = CameraIntrinsics.from_dict(d.get("K0", d))
                K1 = CameraIntrinsics.from_dict(d.get("K1", d.get("K0", d)))
                return K0, K1
            if "K0" in self.manifest:
                return (CameraIntrinsics.from_dict(self.manifest["K0"]),
                        CameraIntrinsics.from_dict(self.manifest.get("K1", self.manifest["K0"])))
        except (ValueError, AttributeError) as exc:
            raise InputError(f"invalid intrinsics: {exc}") from None
        raise InputError("missing intrinsics input")


def _check_dims(shape, **fields):
    for name, arr in fields.items():
        if arr.shape[:2] != shape:
            raise InputError(f"{name} has dimensions {arr.shape[:2]}, expected {shape}")


def _read_dense_inputs(inp):
    flow = inp.flow()
    shape = flow.shape[:2]
    fields = {k: inp.raster(k) for k in ("expansion", "depth_prior", "confidence")}
    _check_dims(shape, **fields)
    K0, K1 = inp.intrinsics()
    return flow, fields["expansion"], fields["depth_prior"], fields["confidence"], K0, K1


def _intrinsics_doc(ws, K0, K1):
    ws.manifest["K0"] = K0.to_dict()
    ws.manifest["K1"] = K1.to_dict()


def _ego_report(est):
    return {"R": est.transform.R, "T": est.transform.T, "degenerate": bool(est.degenerate),
            "n_inliers": est.n_inliers, "n_correspondences": int(len(est.inlier_mask)),
            "residual_median": est.residual_median}


def _write_costs(ws, costs):
    for name in COST_NAMES:
        key = f"cost_{name}"
        if name in costs:
            io.write_pfm(ws.add(key, f"{key}.pfm"), costs[name])
        else:
            ws.drop(key)


def _common_inputs(args):
    return Inputs(args.input, {"flow": args.flow, "expansion": args.expansion, "depth_prior": args.depth,
                               "confidence": args.confidence, "intrinsics": args.intrinsics,
                               "labels": getattr(args, "labels", None)})


# --------------------------------------------------------------------------- commands

def cmd_simulate(args):
    if args.scene:
        d = _load_json(args.scene, "scene")
        try:
            scene = SceneDescription.from_dict(d)
        except (SceneError, ValueError) as exc:
            raise InputError(str(exc)) from None
    else:
        scene = make_degenerate_scenario(args.scenario, args.seed, args.width, args.height)
    noise = scene.noise
    overrides = {k: v for k, v in (("flow_sigma", args.flow_sigma), ("expansion_sigma", args.expansion_sigma),
                                   ("outlier_fraction", args.outlier_fraction),
                                   ("prior_depth_model", args.prior)) if v is not None}
    if args.prior_params is not None:
        overrides["prior_params"] = tuple(args.prior_params)
    if overrides or not args.scene:
        try:
            noise = NoiseConfig(**{**noise.to_dict(), **overrides, "seed": args.seed})
        except (SceneError, TypeError, ValueError) as exc:
            raise InputError(str(exc)) from None
    try:
        gt = render(scene)
    except SceneError as exc:
        raise StageError(f"render: {exc}") from None
    data = corrupt(gt, noise)

    ws = Workspace(args.out)
    io.write_flo(ws.add("flow", SIM_FILES["flow"]), data["flow"])
    io.write_pfm(ws.add("expansion", SIM_FILES["expansion"]), data["expansion"])
    io.write_pfm(ws.add("depth_prior", SIM_FILES["depth_prior"]), data["depth_prior"])
    io.write_pfm(ws.add("confidence", SIM_FILES["confidence"]), data["confidence"])
    io.write_flo(ws.add("gt_flow", SIM_FILES["gt_flow"]), gt.flow)
    io.write_pfm(ws.add("gt_depth0", SIM_FILES["gt_depth0"]), gt.Z0)
    io.write_pfm(ws.add("gt_depth1", SIM_FILES["gt_depth1"]), gt.Z1)
    io.write_pgm16(ws.add("gt_labels", SIM_FILES["gt_labels"]), gt.labels)
    _intrinsics_doc(ws, gt.K0, gt.K1)
    ws.manifest["ego"] = gt.ego.to_dict()
    ws.manifest["body_motions"] = {str(k): v.to_dict() for k, v in sorted(gt.body_motions.items())}
    ws.manifest["relative_motions"] = {str(i): gt.relative_motion(i).to_dict()
                                       for i in [0] + sorted(gt.body_motions)}
    ws.manifest["noise"] = noise.to_dict()
    ws.manifest["scene"] = scene.to_dict()
    ws.save()
    return 0


def _estimate_and_costs(args, flow, expansion, prior, conf, K0, K1, ransac):
    try:
        est = estimate_ego(flow, conf, K0, K1, args.seed, ransac)
    except RigidKitError as exc:
        raise StageError(f"egomotion: {exc}") from None
    ctx = MotionContext.from_estimate(est, K0, K1)
    try:
        costs, _ = compute_cost_maps(flow, expansion, prior, ctx, conf)
    except RigidKitError as exc:
        raise StageError(f"costmaps: {exc}") from None
    return est, costs


def cmd_costmaps(args):
    th, ransac, _ = load_config(args.config)
    flow, expansion, prior, conf, K0, K1 = _read_dense_inputs(_common_inputs(args))
    est, costs = _estimate_and_costs(args, flow, expansion, prior, conf, K0, K1, ransac)
    ws = Workspace(args.out)
    _write_costs(ws, costs)
    io.write_report(ws.add("ego_report", "ego.json"), _ego_report(est))
    _intrinsics_doc(ws, K0, K1)
    ws.save()
    return 0


def cmd_segment(args):
    th, ransac, _ = load_config(args.config)
    flow, expansion, prior, conf, K0, K1 = _read_dense_inputs(_common_inputs(args))
    try:
        res = run_segmentation(flow, expansion, prior, conf, K0, K1, th, args.seed, ransac)
    except RigidKitError as exc:
        raise StageError(f"segmentation: {exc}") from None
    ws = Workspace(args.out)
    io.write_pgm16(ws.add("labels", "labels.pgm"), res.segmentation.labels)
    _write_costs(ws, res.costs)
    report = _ego_report(res.ego)
    report["gamma"] = res.extras.get("gamma")
    report["instances"] = [{"id": i.id, "area": i.area, "centroid": list(i.centroid)}
                           for i in res.segmentation.instances]
    io.write_report(ws.add("ego_report", "ego.json"), report)
    _intrinsics_doc(ws, K0, K1)
    ws.save()
    return 0


def cmd_sceneflow(args):
    _, _, pmin = load_config(args.config)
    if args.parallax_min is not None:
        pmin = args.parallax_min
    inp = _common_inputs(args)
    flow, expansion, prior, conf, K0, K1 = _read_dense_inputs(inp)
    labels = inp.labels("gt_labels" if args.gt_labels else "labels")
    _check_dims(flow.shape[:2], labels=labels)
    trusted = None
    if args.trusted_depth:
        trusted = Inputs(None, {"trusted_depth": args.trusted_depth}).raster("trusted_depth")
        _check_dims(flow.shape[:2], trusted_depth=trusted)
    try:
        res = run_sceneflow(flow, expansion, prior, conf, labels, K0, K1, args.seed, args.threads,
                            pmin, trusted)
    except RigidKitError as exc:
        raise StageError(f"rigidfit: {exc}") from None
    out = res.output
    ws = Workspace(args.out)
    io.write_pfm(ws.add("Z0", "Z0.pfm"), out.Z0)
    io.write_pfm(ws.add("Z1", "Z1.pfm"), out.Z1)
    io.write_flo(ws.add("flow_refined", "flow_refined.flo"), out.flow_refined)
    io.write_report(ws.add("fits", "fits.json"), {"parallax_min": pmin,
                                                   "segments": [f.to_dict() for f in res.fits]})
    _intrinsics_doc(ws, K0, K1)
    ws.save()
    return 0


def evaluate_dirs(pred_dir, gt_dir, bf=1.0):
    """Scores from a prediction directory against a simulated ground-truth directory."""
    pred = Inputs(pred_dir)
    gt = Inputs(gt_dir)
    gt_labels = gt.labels("gt_labels")
    seg = flow_scores = None
    if "labels" in pred.manifest.get("files", {}):
        pl = pred.labels("labels")
        _check_dims(gt_labels.shape, labels=pl)
        seg = score_segmentation(pl, gt_labels)
    if "flow_refined" in pred.manifest.get("files", {}):
        gflow = gt.flow("gt_flow")
        g0, g1 = gt.raster("gt_depth0"), gt.raster("gt_depth1")
        pflow = pred.flow("flow_refined")
        p0, p1 = pred.raster("Z0"), pred.raster("Z1")
        _check_dims(gflow.shape[:2], flow_refined=pflow, Z0=p0, Z1=p1, gt_depth0=g0, gt_depth1=g1)
        flow_scores = score_flow(pflow, gflow, p0, p1, g0, g1, valid=gt_labels >= 0, bf=bf,
                                 fg_mask=gt_labels > 0)
    if seg is None and flow_scores is None:
        raise InputError(f"prediction directory {pred_dir} has neither labels nor refined flow")
    return seg, flow_scores


def cmd_evaluate(args):
    seg, fl = evaluate_dirs(args.pred, args.gt, args.bf)
    text = csv_header() + "\n" + csv_row(seg, fl) + "\n"
    report = {}
    if seg is not None:
        report["segmentation"] = vars(seg)
    if fl is not None:
        report["flow"] = vars(fl)
    if args.out:
        ws = Workspace(args.out)
        Path(ws.add("scores_csv", "scores.csv")).write_text(text)
        io.write_report(ws.add("scores", "scores.json"), report)
        ws.save()
    else:
        sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="rigidkit", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="worker cap for per-segment fits")
    common.add_argument("--config", help="JSON pipeline config (thresholds, ransac, parallax_min)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="render a synthetic scene and noisy inputs")
    s.add_argument("--scenario", choices=SCENARIO_KINDS, default="general")
    s.add_argument("--scene", help="JSON scene description (overrides --scenario)")
    s.add_argument("--width", type=int, default=320)
    s.add_argument("--height", type=int, default=240)
    s.add_argument("--flow-sigma", type=float)
    s.add_argument("--expansion-sigma", type=float)
    s.add_argument("--outlier-fraction", type=float)
    s.add_argument("--prior", choices=("exact", "scaled", "smooth-ramp", "noisy"))
    s.add_argument("--prior-params", type=float, nargs="*")
    s.add_argument("-o", "--out", required=True)
    s.set_defaults(func=cmd_simulate)

    def dense_inputs(sp):
        sp.add_argument("-i", "--input", help="directory with a manifest.json")
        sp.add_argument("--flow")
        sp.add_argument("--expansion")
        sp.add_argument("--depth", help="depth prior PFM")
        sp.add_argument("--confidence")
        sp.add_argument("--intrinsics", help="JSON intrinsics ({fx, fy, cx, cy, skew} or {K0, K1})")
        sp.add_argument("-o", "--out", required=True)

    for name, func, helptext in (("costmaps", cmd_costmaps, "egomotion and cost maps only"),
                                 ("segment", cmd_segment, "egomotion, cost maps and segmentation")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        dense_inputs(sp)
        sp.set_defaults(func=func)

    sf = sub.add_parser("sceneflow", parents=[common], help="rigid-body fits and refined depth/flow")
    dense_inputs(sf)
    sf.add_argument("--labels", help="label PGM (default: the manifest's labels)")
    sf.add_argument("--gt-labels", action="store_true", help="use the manifest's ground-truth labels")
    sf.add_argument("--trusted-depth", help="frame-0 depth PFM enabling PnP refinement")
    sf.add_argument("--parallax-min", type=float)
    sf.set_defaults(func=cmd_sceneflow)

    ev = sub.add_parser("evaluate", parents=[common], help="score predictions against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--bf", type=float, default=1.0, help="baseline times focal length for disparity")
    ev.add_argument("-o", "--out", help="directory for scores.csv/scores.json (default: CSV to stdout)")
    ev.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None):
    level = os.environ.get("RIGIDKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("rigidkit: --threads must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    from threadpoolctl import threadpool_limits
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except InputError as exc:
        print(f"rigidkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StageError as exc:
        print(f"rigidkit {args.command}: stage failed: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
