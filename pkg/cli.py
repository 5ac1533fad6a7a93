"""
Command-line entry point.

    python cli.py run DATASET --output OUT [--config FILE] [--seed N] [--realtime] [--dump-tracks [FILE]]
    python cli.py simulate {flight,dark_room,room,FILE.yaml} --output DATASET [--seed N]
    python cli.py evaluate ESTIMATE.csv GROUND_TRUTH.csv [--output DIR]
    python cli.py detect DATASET --frame K --output DIR
    python cli.py calibrate-dark-noise CALIB.cfg [IMAGE_OR_DIR...] [--input DIR] [--output CALIB.cfg]

Exit codes: 0 ok, 2 usage, 3 configuration, 4 data, 5 numerical fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from config import load_calibration, load_config, read_yaml, save_calibration
from dataset_io import (
    open_dataset,
    read_gray,
    read_pose_csv,
    write_dataset,
    write_gray,
    write_pose_csv,
    write_table,
)
from descriptor import calibrate_dark_noise
from errors import ConfigError, DataError, DveoError, NumericalFault
from feature_detection import detect, score_map_to_image
from pipeline import Odometry, fault_dump, write_run_outputs
from sim_harness import (
    evaluate_ate,
    evaluate_axis_errors,
    evaluate_rpe,
    final_drift,
    simulate,
    simulation_from_dict,
    simulation_preset,
)

logger = logging.getLogger("dveo")

PRESETS = ("flight", "dark_room", "room")
IMAGE_SUFFIXES = (".pgm", ".png")


# ============================================================
# 1. COMMANDS
# ============================================================
def _config(args):
    config = load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def cmd_run(args):
    config = _config(args)
    dataset = open_dataset(args.dataset)
    position = dataset.manifest.metadata.get("initial_position")
    odometry = Odometry(dataset.calibration, config, realtime=args.realtime, position=position)
    out = Path(args.output)
    try:
        for event in dataset.events(prefetch=not args.no_prefetch):
            odometry.feed(event)
        result = odometry.finish()
    except NumericalFault as e:
        out.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(out / "fault_dump.npz", **fault_dump(odometry, e))
        logger.error("numerical fault, diagnostics written to %s", out / "fault_dump.npz")
        raise
    tracks = None if args.dump_tracks is None else (args.dump_tracks or out / "tracks.csv")
    write_run_outputs(result, out, tracks_path=tracks)
    return 0


def cmd_simulate(args):
    scenario = args.scenario
    if scenario in PRESETS:
        spec = simulation_preset(scenario, seed=args.seed or 0)
    else:
        spec = simulation_from_dict(read_yaml(scenario))
        if args.seed is not None:
            spec = dataclasses.replace(spec, seed=args.seed)
    noise = load_config(args.config).noise if args.config else None
    sim = simulate(spec, noise=noise)
    out = Path(args.output)
    metadata = {
        "source": "simulator",
        "scenario": str(scenario),
        "seed": spec.seed,
        "imu_rate": spec.trajectory.imu_rate,
        "frame_rate": spec.trajectory.frame_rate,
        "ambient": spec.scene.ambient,
        "initial_position": [float(x) for x in sim.ground_truth.position[0]] if len(sim.ground_truth) else None,
    }
    write_dataset(sim.events(), out, sim.calibration, metadata)
    try:
        write_pose_csv(out / "ground_truth.csv", sim.ground_truth)
    except OSError as e:
        raise DataError(f"cannot write ground truth to {out}: {e}") from e
    logger.info("ground truth written to %s", out / "ground_truth.csv")
    return 0


def cmd_evaluate(args):
    est = read_pose_csv(args.estimate)
    gt = read_pose_csv(args.ground_truth)
    align = not args.no_align
    ate = evaluate_ate(est, gt, align=align)
    rows = [
        ("ate_rmse_m", ate.rmse), ("ate_mean_m", ate.mean), ("ate_median_m", ate.median),
        ("ate_max_m", ate.max), ("ate_pairs", ate.n), ("final_drift_m", final_drift(est, gt)),
    ]
    try:
        rpe = evaluate_rpe(est, gt, delta=args.delta)
        rows += [("rpe_trans_rmse_m", rpe.trans_rmse), ("rpe_rot_rmse_rad", rpe.rot_rmse), ("rpe_pairs", rpe.n)]
    except DataError as e:
        logger.warning("RPE skipped: %s", e)
    times, err, axis_rmse = evaluate_axis_errors(est, gt, align=align)
    rows += [("rmse_x_m", axis_rmse[0]), ("rmse_y_m", axis_rmse[1]), ("rmse_z_m", axis_rmse[2])]

    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        print(f"{name:<{width}}  {value:.6f}" if isinstance(value, float) else f"{name:<{width}}  {value}")

    out = Path(args.output) if args.output else Path(args.estimate).parent
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "evaluation.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)
    write_table(out / "axis_errors.csv", ["t", "ex", "ey", "ez"], np.column_stack([times, err]))
    logger.info("ATE RMSE %.4f m over %d poses; tables in %s", ate.rmse, ate.n, out)
    return 0


def cmd_detect(args):
    config = load_config(args.config)
    dataset = open_dataset(args.dataset)
    frame = dataset.frame(args.frame)
    V_s, D_s, C_s, keypoints = detect(frame, config.detector)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    for name, score_map in (("visual", V_s), ("depth", D_s), ("combined", C_s)):
        write_gray(out / f"score_{name}.pgm", score_map_to_image(score_map))
    with open(out / "keypoints.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["u", "v", "score", "modality", "depth"])
        for kp in keypoints:
            writer.writerow([kp.pixel[0], kp.pixel[1], kp.score, kp.modality.value,
                             "" if kp.depth is None else kp.depth])
    logger.info("frame %d: %d keypoints (%d visual, %d depth score pixels) written to %s",
                args.frame, len(keypoints), int((V_s.values > 0).sum()), int((D_s.values > 0).sum()), out)
    return 0


def _image_paths(items):
    paths = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            paths += sorted(q for q in p.iterdir() if q.suffix.lower() in IMAGE_SUFFIXES)
        else:
            paths.append(p)
    return paths


def cmd_calibrate_dark_noise(args):
    calib = load_calibration(args.calibration)
    paths = _image_paths(list(args.images) + list(args.input))
    if not paths:
        raise ConfigError("no dark images given")
    model = calibrate_dark_noise(read_gray(p) for p in paths)
    target = Path(args.output or args.calibration)
    save_calibration(dataclasses.replace(calib, dark_noise=model.i_dn), target)
    print(f"dark_noise  {model.i_dn:.4f}")
    logger.info("wrote %s with dark_noise %.4f from %d images", target, model.i_dn, len(paths))
    return 0


# ============================================================
# 2. ARGUMENT PARSING
# ============================================================
def build_parser():
    parser = argparse.ArgumentParser(prog="dveo", description="Depth-visual-inertial odometry")
    parser.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="pipeline YAML (default: $DVEO_CONFIG or built-in defaults)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="overrides the configured seed")

    p = sub.add_parser("run", help="run odometry on a dataset")
    p.add_argument("dataset")
    p.add_argument("--output", "-o", required=True)
    p.add_argument("--realtime", action="store_true", help="pace processing by timestamps")
    p.add_argument("--dump-tracks", nargs="?", const="", default=None, metavar="FILE",
                   help="also write the per-frame track CSV (default OUTPUT/tracks.csv)")
    p.add_argument("--no-prefetch", action="store_true", help="decode frames on the main thread")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="render a simulated dataset with ground truth")
    p.add_argument("scenario", help=f"preset ({', '.join(PRESETS)}) or simulation YAML")
    p.add_argument("--output", "-o", required=True)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="ATE / RPE of an estimate against ground truth")
    p.add_argument("estimate")
    p.add_argument("ground_truth")
    p.add_argument("--output", "-o", default=None)
    p.add_argument("--delta", type=float, default=1.0, help="RPE spacing in seconds")
    p.add_argument("--no-align", action="store_true", help="skip rigid alignment")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("detect", help="dump score maps and keypoints of one frame")
    p.add_argument("dataset")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--output", "-o", required=True)
    common(p, seed=False)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("calibrate-dark-noise", help="estimate I_DN from images taken in darkness")
    p.add_argument("calibration")
    p.add_argument("images", nargs="*", help="dark PGM/PNG images or directories of them")
    p.add_argument("--input", "-i", action="append", default=[], help="directory of dark images (repeatable)")
    p.add_argument("--output", "-o", default=None, help="calibration file to write (default: in place)")
    p.set_defaults(func=cmd_calibrate_dark_noise)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except DveoError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
