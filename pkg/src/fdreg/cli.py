"""Command-line interface: ``fdreg register|synth|eval|apply|report``.

Every command exits 0 on success. Failures print a single JSON object
``{"error": ..., "type": ...}`` to stderr and exit with status 1 (2 for
usage errors, as argparse does).
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from fdreg import evaluation, io
from fdreg.deformation import warp
from fdreg.pipeline import RegistrationConfig, register
from fdreg.synthetic import MAPPINGS, make_case


def _emit(row, out=None):
    line = json.dumps(row, sort_keys=True)
    print(line)
    if out:
        with open(out, "a") as fh:
            fh.write(line + "\n")


def cmd_register(args):
    config = io.load_config(args.config) if args.config else RegistrationConfig()
    if args.seed is not None:
        config.seed = args.seed
        config.validate()
    fixed = io.load_nifti(args.fixed)
    moving = io.load_nifti(args.moving)

    def progress(level, it, loss):
        logging.getLogger("fdreg").debug("level %d iter %d loss %.6f", level, it, loss)

    result = register(fixed, moving, config, callback=progress)
    out = io.save_deformation(result, args.out, voxel_units=args.voxel_units)
    if args.dump_residuals:
        io.save_nifti(io.residual_volume(result, fixed.geometry), out / "residuals.nii.gz")
    _emit({"command": "register", "out": str(out), "iterations": len(result.loss_trace),
           "final_loss": result.loss_trace[-1], "wall_time": round(result.wall_time, 3)})


def cmd_synth(args):
    geometry = tuple(args.geometry) if len(args.geometry) == 3 else args.geometry[0]
    case = make_case(geometry, seed=args.seed, amplitude=args.amplitude, mapping=args.mapping,
                     noise_sigma=args.noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_nifti(case.fixed, out / "fixed.nii.gz")
    io.save_nifti(case.moving, out / "moving.nii.gz")
    io.save_displacement(case.ground_truth, out / "ground_truth.nii.gz")
    io.save_nifti(case.fixed.replace(data=case.foreground.astype(float)), out / "foreground.nii.gz")
    _emit({"command": "synth", "out": str(out), "seed": args.seed})


def _mask(path):
    return None if path is None else io.load_nifti(path).data[0] > 0.5


def cmd_eval(args):
    if args.metric == "tre":
        pred = io.load_displacement(args.a)
        truth = io.load_displacement(args.b)
        row = evaluation.tre(pred, truth, _mask(args.mask), clip=args.clip)
    elif args.metric == "dice":
        a = io.load_nifti(args.a).data[0]
        b = io.load_nifti(args.b).data[0]
        row = evaluation.dice(np.rint(a).astype(np.int64), np.rint(b).astype(np.int64))
        row["per_label"] = {str(k): v for k, v in row["per_label"].items()}
    else:
        row = {"mean": evaluation.mae(io.load_nifti(args.a), io.load_nifti(args.b), _mask(args.mask),
                                      clip=args.clip)}
    row.update({"metric": args.metric, "case": args.case or Path(args.b).name})
    _emit(row, args.out)


def cmd_apply(args):
    vol = io.load_nifti(args.volume)
    d = io.load_displacement(args.deformation)
    io.save_nifti(warp(vol, d), args.out)
    _emit({"command": "apply", "out": args.out})


def cmd_report(args):
    rows = [json.loads(line) for line in Path(args.rows).read_text().splitlines() if line.strip()]
    values = [r["mean"] for r in rows if args.metric is None or r.get("metric") == args.metric]
    if not values:
        raise ValueError("no matching rows")
    summary = evaluation.aggregate(values, clip=args.clip)
    summary["metric"] = args.metric
    _emit(summary)


def build_parser():
    p = argparse.ArgumentParser(prog="fdreg", description="Multimodal deformable registration.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("register", help="register a moving image to a fixed image")
    r.add_argument("fixed")
    r.add_argument("moving")
    r.add_argument("--config", help="YAML file with RegistrationConfig fields")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--dump-residuals", action="store_true",
                   help="write the final per-center loss terms as residuals.nii.gz")
    r.add_argument("--voxel-units", action="store_true", help="export displacements in voxels, not mm")
    r.set_defaults(func=cmd_register)

    s = sub.add_parser("synth", help="generate a synthetic case")
    s.add_argument("--geometry", type=int, nargs="+", default=[64], help="N or D H W")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--amplitude", type=float, default=3.0)
    s.add_argument("--mapping", choices=MAPPINGS, default="nonmonotone")
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    e = sub.add_parser("eval", help="compute a metric and print a JSON row")
    e.add_argument("metric", choices=("tre", "dice", "mae"))
    e.add_argument("a", help="prediction (deformation, labels or volume)")
    e.add_argument("b", help="reference")
    e.add_argument("--mask")
    e.add_argument("--clip", type=float)
    e.add_argument("--case", help="case name recorded in the row")
    e.add_argument("--out", help="append the row to this file")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("apply", help="warp a volume with a saved deformation")
    a.add_argument("volume")
    a.add_argument("deformation")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_apply)

    rp = sub.add_parser("report", help="aggregate JSON rows written by eval")
    rp.add_argument("rows")
    rp.add_argument("--metric", choices=("tre", "dice", "mae"))
    rp.add_argument("--clip", type=float)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # report every failure as one parseable line
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
