"""Command-line entry points: dataset replay, evaluation, simulation.

Exit codes: 0 success, 2 bad input (files, config, arguments), 3 filter
failure during replay (partial trajectory is still written).
"""

import argparse
import glob as globmod
import json
import os
import sys

from .config import load_run_config
from .errors import RadarSlamError
from .evaluation import aggregate_runs, compute_metrics
from .replay import ReplayAborted, ReplayOptions, load_dataset, read_trajectory_csv, run_replay


def _add_run_parser(sub):
    p = sub.add_parser("run", help="replay a dataset through the filter")
    p.add_argument("--config", required=True)
    p.add_argument("--imu", required=True)
    p.add_argument(
        "--radar",
        action="append",
        default=[],
        metavar="ID=FILE",
        help="radar csv for one sensor id; repeatable",
    )
    p.add_argument("--out", required=True, help="trajectory csv output")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--disable-doppler-coupling", action="store_true")
    p.add_argument("--drop-doppler", action="store_true",
                   help="remove the Doppler row from association and updates")
    p.add_argument("--disable-cross-matching", action="store_true")
    p.add_argument("--max-features", type=int, default=None)
    p.add_argument("--diag", default=None, help="diagnostics json output")


def _cmd_run(args):
    config = load_run_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    radar_paths = {}
    for spec in args.radar:
        if "=" not in spec:
            raise RadarSlamError(f"--radar expects ID=FILE, got {spec!r}")
        sid, path = spec.split("=", 1)
        radar_paths[sid] = path
    stream = load_dataset(args.imu, radar_paths, config)
    opts = ReplayOptions(
        doppler_coupling=not args.disable_doppler_coupling,
        use_doppler=not args.drop_doppler,
        cross_matching=not args.disable_cross_matching,
        max_features=args.max_features,
    )
    try:
        traj, diag = run_replay(stream, config, opts)
    except ReplayAborted as exc:
        exc.trajectory.write_csv(args.out)
        if args.diag:
            exc.diagnostics.write_json(args.diag)
        print(f"replay aborted: {exc}", file=sys.stderr)
        return 3
    traj.write_csv(args.out)
    if args.diag:
        diag.write_json(args.diag)
    print(
        f"replayed {diag.n_imu} imu samples, {diag.n_scans} scans; "
        f"match rate {diag.match_rate:.2f}, mean features {diag.mean_feature_count:.1f}"
    )
    return 0


def _cmd_eval(args):
    est = read_trajectory_csv(args.est)
    ref = read_trajectory_csv(args.ref)
    report = compute_metrics(est, ref, sample_rate=args.rate)
    payload = report.to_dict()
    for key, val in payload.items():
        print(f"{key}: {val:.6g}" if isinstance(val, float) else f"{key}: {val}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_eval_batch(args):
    est_files = sorted(globmod.glob(args.glob))
    if not est_files:
        raise RadarSlamError(f"no files match {args.glob!r}")
    reports = []
    for est_file in est_files:
        ref_file = args.ref or os.path.join(os.path.dirname(est_file), "gt.csv")
        reports.append(
            compute_metrics(
                read_trajectory_csv(est_file), read_trajectory_csv(ref_file), args.rate
            )
        )
    table = aggregate_runs(reports)
    lines = ["metric,p63,p95,max"]
    lines += [
        f"{metric},{row['p63']:.9g},{row['p95']:.9g},{row['max']:.9g}"
        for metric, row in table.items()
    ]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_simulate(args):
    from .config import save_run_config
    from .sim import generate_dataset, load_scenario, run_config_for, write_dataset

    spec = load_scenario(args.scenario)
    if args.seed is not None:
        spec.seed = args.seed
    gt, imu, scans = generate_dataset(spec)
    write_dataset(args.out_dir, gt, imu, scans, spec)
    save_run_config(run_config_for(spec, gt), os.path.join(args.out_dir, "config.json"))
    n_det = sum(len(s.detections) for s in scans)
    print(
        f"wrote {len(imu)} imu samples, {len(scans)} scans ({n_det} detections) to {args.out_dir}"
    )
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(prog="radarslam")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_run_parser(sub)

    p = sub.add_parser("eval", help="trajectory metrics against a reference")
    p.add_argument("--est", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--rate", type=float, default=2.0)
    p.add_argument("--report", default=None)

    p = sub.add_parser("eval-batch", help="percentile table over many runs")
    p.add_argument("--glob", required=True)
    p.add_argument("--ref", default=None, help="common reference; default sibling gt.csv")
    p.add_argument("--rate", type=float, default=2.0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "eval": _cmd_eval,
        "eval-batch": _cmd_eval_batch,
        "simulate": _cmd_simulate,
    }
    try:
        return handlers[args.command](args)
    except ReplayAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except RadarSlamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
