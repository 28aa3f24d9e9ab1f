"""Command-line workflows: synth, train, match, track, eval, stats.

Every subcommand writes into ``--out DIR`` and records its effective
configuration in ``DIR/manifest.txt``. Option values resolve as command-line
flag, then the ``--config`` JSON file (top-level keys or a section named after
the subcommand), then built-in defaults.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core_types import default_camera
from .encoder_gnn import EncoderConfig, init_weights
from .errors import PlvoError
from .feature_codec import (atomic_write_text, load_features, load_trajectory, load_weights,
                            read_pgm, save_features, save_matches, save_series, save_trajectory,
                            save_weights)
from .matching import MatchParams, line_match_counts, match_frames, precision_recall
from .synthetic_world import (WorldConfig, builtin_profiles, get_profile, ground_truth_matches,
                              make_trajectory, render_frame, world_from_config)
from .training import (PairSampler, SequencePairSampler, TrainConfig, evaluate_loss,
                       line_training_worlds, train_matcher)
from .vo_pipeline import (MatchStats, PairLog, TrackConfig, Trajectory, evaluate_trajectory,
                          match_stats, track)

log = logging.getLogger("plvo")

PROFILE_NAMES = ["noise-free", *builtin_profiles()]


class UsageError(Exception):
    pass


def _profiles(text):
    names = [n.strip() for n in str(text).split(",") if n.strip()]
    for n in names:
        if n not in PROFILE_NAMES:
            raise ValueError(f"unknown profile {n!r}")
    if not names:
        raise ValueError("at least one profile is required")
    return ",".join(names)


def _stops(text):
    out = []
    for part in str(text).split(","):
        if part.strip():
            a, b = part.split(":")
            out.append((int(a), int(b)))
    return str(text)


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be non-negative")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be at least 1")
    return v


def _pos_float(text):
    v = float(text)
    if not v > 0:
        raise ValueError("must be positive")
    return v


# name -> (type, default, help, choices)
COMMON = {
    "seed": (int, 0, "seed for all randomness", None),
    "jobs": (_pos_int, 1, "worker threads for frame-pair processing", None),
}
OPTIONS = {
    "synth": {
        "frames": (_nonneg_int, 20, "number of frames to render", None),
        "trajectory": (str, "straight", "camera path", ["straight", "arc", "figure8"]),
        "speed": (float, 1.0, "meters travelled per frame", None),
        "radius": (_pos_float, 40.0, "arc / figure-eight radius (m)", None),
        "stops": (_stops, "", "stationary frame ranges, e.g. '10:15,30:35'", None),
        "profile": (str, "daytime", "degradation profile", PROFILE_NAMES),
        "points": (_nonneg_int, 300, "point landmarks", None),
        "lines": (_nonneg_int, 40, "line landmarks", None),
        "repeat_copies": (_nonneg_int, 0, "extra translated copies of the line motif", None),
        "extent": (_pos_float, 60.0, "far edge of the world along z (m)", None),
    },
    "train": {
        "data": (str, None, "train on consecutive pairs of a synth directory", None),
        "steps": (_nonneg_int, 2000, "optimizer steps per network", None),
        "kind": (str, "both", "which network(s) to train", ["point", "line", "both"]),
        "lr": (_pos_float, 1e-3, "Adam learning rate", None),
        "point_profiles": (_profiles, "daytime", "profiles for P-point pairs", None),
        "line_profiles": (_profiles, "daytime,fog,nighttime", "profiles for L-point pairs", None),
        "init": (str, None, "checkpoint to start from", None),
        "heldout": (_nonneg_int, 0, "held-out pairs for a final loss report", None),
    },
    "match": {
        "weights": (str, None, "weights checkpoint", None),
        "data": (str, None, "synth directory; consecutive frames are paired", None),
        "a": (str, None, "first feature file", None),
        "b": (str, None, "second feature file", None),
        "score_threshold": (float, 0.2, "minimum assignment probability", None),
        "sinkhorn_iters": (_pos_int, 100, "Sinkhorn iteration cap", None),
    },
    "track": {
        "weights": (str, None, "weights checkpoint", None),
        "data": (str, None, "synth directory (frames/*.plvo)", None),
        "masks": (str, None, "directory of PGM masks named after the feature files", None),
        "modality": (str, "both", "correspondences used for pose", ["both", "points", "lines"]),
        "ransac_iters": (_pos_int, 200, "RANSAC hypotheses", None),
        "inlier_px": (_pos_float, 3.0, "RANSAC inlier threshold (px)", None),
        "huber": (_pos_float, 2.0, "Huber threshold (px)", None),
        "stationary_px": (float, 0.3, "snap to identity below this median displacement", None),
        "score_threshold": (float, 0.2, "minimum assignment probability", None),
    },
    "eval": {
        "traj": (str, None, "estimated trajectory CSV", None),
        "gt": (str, None, "ground-truth trajectory CSV", None),
        "align": (str, "se3", "alignment before APE", ["se3", "sim3", "none"]),
    },
    "stats": {
        "runs": (str, None, "label=frame_log.csv entries", None),
    },
}
REQUIRED = {"match": ["weights"], "track": ["weights", "data"], "eval": ["traj", "gt"],
            "stats": ["runs"]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plvo", description="Point and line stereo odometry.")
    parser.add_argument("--version", action="version", version=f"plvo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"synth": "render a synthetic sequence", "train": "train the matching networks",
             "match": "match frame pairs", "track": "run odometry over a sequence",
             "eval": "absolute position error against ground truth",
             "stats": "detection and match totals across runs"}
    for name, opts in OPTIONS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="JSON config file")
        p.add_argument("-v", "--verbose", action="store_true")
        for key, (_, default, text, choices) in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            if key == "runs":
                p.add_argument(key, nargs="+", help=text)
            else:
                p.add_argument(flag, dest=key, default=None, choices=choices,
                               help=f"{text} (default: {default})")
    return parser


def resolve(args) -> dict:
    """Effective options: flags over config file over defaults, type-checked."""
    specs = {**COMMON, **OPTIONS[args.command]}
    file_cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        section = raw.get(args.command, {})
        file_cfg = {k: v for k, v in raw.items() if k not in OPTIONS}
        file_cfg.update(section)
        unknown = set(file_cfg) - set(specs)
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {sorted(unknown)}")
    cfg = {}
    for key, (conv, default, _, choices) in specs.items():
        value = getattr(args, key, None)
        if value is None:
            value = file_cfg.get(key, default)
        if value is not None and key != "runs":
            try:
                value = conv(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid value for {key}: {value!r} ({exc})") from None
            if choices and value not in choices:
                raise UsageError(f"{key} must be one of {choices}")
        cfg[key] = value
    for key in REQUIRED.get(args.command, []):
        if cfg.get(key) is None:
            raise UsageError(f"--{key.replace('_', '-')} is required")
    cfg["out"] = args.out
    return cfg


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    lines = [f"command={command}", f"version={__version__}"]
    for key in sorted(cfg):
        value = cfg[key]
        lines.append(f"{key}={'' if value is None else value}")
    atomic_write_text(out / "manifest.txt", "\n".join(lines) + "\n")


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def load_sequence(data) -> list:
    files = sorted(Path(data, "frames").glob("*.plvo"))
    if not files:
        raise UsageError(f"no feature files under {Path(data, 'frames')}")
    frames = [load_features(f) for f in files]
    return sorted(frames, key=lambda f: f.frame_id)


# -- subcommands ------------------------------------------------------------------

def _world_config(cfg) -> WorldConfig:
    base = WorldConfig()
    lo = base.bounds_lo
    return WorldConfig(n_points=cfg["points"], n_lines=cfg["lines"], bounds_lo=lo,
                       bounds_hi=(base.bounds_hi[0], base.bounds_hi[1], cfg["extent"]),
                       repeat_copies=cfg["repeat_copies"])


def cmd_synth(cfg, out: Path) -> int:
    if cfg["frames"] == 0:
        print("frames=0")
        return 0
    stops = [tuple(int(x) for x in part.split(":")) for part in cfg["stops"].split(",") if part]
    wcfg = _world_config(cfg)
    if wcfg.bounds_hi[2] <= wcfg.bounds_lo[2]:
        raise UsageError("--extent must exceed the near edge of the world")
    world = world_from_config(wcfg, cfg["seed"])
    camera = default_camera()
    profile = get_profile(cfg["profile"])
    poses = make_trajectory(cfg["trajectory"], cfg["frames"], cfg["speed"], cfg["radius"], stops)
    seeds = np.random.SeedSequence(cfg["seed"]).generate_state(cfg["frames"])
    frames = []
    for k, pose in enumerate(poses):
        frame = render_frame(world, pose, camera, profile, int(seeds[k]), frame_id=k)
        save_features(frame, out / "frames" / f"frame_{k:05d}.plvo")
        frames.append(frame)
    save_trajectory(list(enumerate(poses)), out / "gt_trajectory.csv")
    rows = []
    for fa, fb in zip(frames, frames[1:]):
        gt = ground_truth_matches(fa, fb)
        rows += [(fa.frame_id, fb.frame_id, "point", i, j, 1.0) for i, j in gt.points.pairs]
        rows += [(fa.frame_id, fb.frame_id, "line", i, j, 1.0) for i, j in gt.lines.pairs]
    save_matches(rows, out / "gt_matches.csv")
    atomic_write_text(out / "world.json", json.dumps(
        {"world": wcfg.as_dict(), "seed": cfg["seed"], "profile": cfg["profile"],
         "camera": vars(camera)}, indent=2, sort_keys=True) + "\n")
    from .plotting import plot_trajectories
    plot_trajectories(out / "gt_trajectory.svg", {}, np.array([p.translation for p in poses]),
                      title="Ground-truth trajectory")
    print(f"frames={len(frames)} ppoints={sum(len(f.ppoints) for f in frames)} "
          f"lines={sum(len(f.lines) for f in frames)}")
    return 0


def _precision_recall_text(c, p, g):
    prec = c / p if p else 0.0
    rec = c / g if g else 0.0
    return f"precision={prec:.4f} recall={rec:.4f}"


def cmd_train(cfg, out: Path) -> int:
    from .plotting import plot_loss
    kinds = ["point", "line"] if cfg["kind"] == "both" else [cfg["kind"]]
    tcfg = TrainConfig(lr=cfg["lr"])
    start = load_weights(_existing(cfg["init"], "checkpoint")) if cfg["init"] else {}
    frames = load_sequence(_existing(cfg["data"], "data directory")) if cfg["data"] else None
    nets, curves = {}, {}
    for offset, kind in enumerate(kinds):
        seed = cfg["seed"] + 1000 * offset
        weights = start.get(kind) or init_weights(EncoderConfig(), seed)
        if kind == "point":
            worlds = WorldConfig(n_points=150, n_lines=20)
            profiles = [get_profile(n) for n in cfg["point_profiles"].split(",")]
        else:
            worlds = line_training_worlds()
            profiles = [get_profile(n) for n in cfg["line_profiles"].split(",")]
        sampler = SequencePairSampler(frames, seed + 1) if frames else None
        res = train_matcher(worlds, profiles, cfg["steps"], tcfg, kind=kind, seed=seed,
                            weights=weights, sampler=sampler)
        nets[kind] = res.weights
        curves[kind] = res.losses
        save_series(out / f"loss_{kind}.csv", ["step", "loss"], list(enumerate(res.losses)))
        if res.losses:
            plot_loss(out / f"loss_{kind}.svg", res.losses, title=f"{kind} network loss")
        msg = f"{kind}: steps={len(res.losses)}"
        if res.losses:
            msg += f" final_loss={np.mean(res.losses[-50:]):.6f}"
        if cfg["heldout"]:
            held = PairSampler(worlds, profiles, seed + 7919)
            pairs = [held.next(kind) for _ in range(cfg["heldout"])]
            msg += f" heldout_loss={evaluate_loss(res.weights, pairs, kind):.12g}"
        print(msg)
    for kind, w in start.items():
        nets.setdefault(kind, w)
    save_weights(nets, out / "weights.plvo")
    return 0


def _load_nets(path):
    nets = load_weights(_existing(path, "weights checkpoint"))
    missing = {"point", "line"} - set(nets)
    if missing:
        raise UsageError(f"checkpoint lacks network(s): {sorted(missing)}")
    return nets["point"], nets["line"]


def cmd_match(cfg, out: Path) -> int:
    from concurrent.futures import ThreadPoolExecutor
    if cfg["data"]:
        frames = load_sequence(_existing(cfg["data"], "data directory"))
        pairs = list(zip(frames, frames[1:]))
    elif cfg["a"] and cfg["b"]:
        pairs = [(load_features(_existing(cfg["a"], "feature file")),
                  load_features(_existing(cfg["b"], "feature file")))]
    else:
        raise UsageError("give --data, or both --a and --b")
    pw, lw = _load_nets(cfg["weights"])
    params = MatchParams(sinkhorn_iters=cfg["sinkhorn_iters"], score_threshold=cfg["score_threshold"])

    def work(pair):
        return match_frames(pw, lw, pair[0], pair[1], params)

    with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
        results = list(pool.map(work, pairs))
    rows, summary = [], []
    totals = np.zeros(6, dtype=int)
    for (fa, fb), fm in zip(pairs, results):
        ida, idb = fa.frame_id, fb.frame_id
        rows += [(ida, idb, "point", i, j, float(s)) for i, j, s in fm.points.pairs]
        rows += [(ida, idb, "line", m.line_id_a, m.line_id_b, float(m.score)) for m in fm.lines]
        line = [ida, idb, len(fa.ppoints), len(fm.points.pairs), len(fa.lines), len(fm.lines)]
        if fa.gt_point_ids is not None and fb.gt_point_ids is not None:
            gt = ground_truth_matches(fa, fb)
            pc = precision_recall(fm.points, gt.points.pairs)
            lc = line_match_counts(fm.lines, gt.lines.pairs)
            totals += np.array([*pc, *lc])
        summary.append(line)
    save_matches(rows, out / "matches.csv")
    save_series(out / "match_summary.csv", ["frame_a", "frame_b", "point_detections",
                                            "point_matches", "line_detections", "line_matches"],
                summary)
    det = sum(s[2] for s in summary)
    got = sum(s[3] for s in summary)
    print(f"pairs={len(pairs)} point_matches={got} point_match_pct={100.0 * got / det if det else 0.0:.2f} "
          f"line_matches={sum(s[5] for s in summary)}")
    if totals[2] or totals[5]:
        print("points " + _precision_recall_text(*totals[:3]))
        print("lines " + _precision_recall_text(*totals[3:]))
    return 0


def _masks_for(frames, mask_dir):
    masks = []
    for f in frames:
        path = Path(mask_dir) / f"frame_{f.frame_id:05d}.pgm"
        if not path.is_file():
            raise UsageError(f"missing mask {path}")
        masks.append(read_pgm(path))
    return masks


def cmd_track(cfg, out: Path) -> int:
    from .plotting import plot_trajectories
    data = _existing(cfg["data"], "data directory")
    frames = load_sequence(data)
    masks = _masks_for(frames, _existing(cfg["masks"], "mask directory")) if cfg["masks"] else None
    pw, lw = _load_nets(cfg["weights"])
    tcfg = TrackConfig(match=MatchParams(score_threshold=cfg["score_threshold"]),
                       ransac_iterations=cfg["ransac_iters"], inlier_threshold_px=cfg["inlier_px"],
                       huber_delta=cfg["huber"], stationary_px=cfg["stationary_px"],
                       use_points=cfg["modality"] != "lines", use_lines=cfg["modality"] != "points",
                       seed=cfg["seed"])
    result = track(frames, default_camera(), pw, lw, tcfg, masks, jobs=cfg["jobs"])
    save_trajectory(list(result.trajectory), out / "trajectory.csv")
    save_series(out / "frame_log.csv", PairLog.CSV_HEADER, [e.row() for e in result.logs])
    write_stats(out, {"run": result.stats})
    gt_path = data / "gt_trajectory.csv"
    gt = Trajectory.from_rows(load_trajectory(gt_path)).anchored() if gt_path.is_file() else None
    plot_trajectories(out / "trajectory.svg", {"estimate": result.trajectory.positions()},
                      None if gt is None else gt.positions())
    fallbacks = sum(e.fallback for e in result.logs)
    print(f"frames={len(frames)} fallbacks={fallbacks} "
          f"stationary={sum(e.stationary for e in result.logs)}")
    return 0


def cmd_eval(cfg, out: Path) -> int:
    from .plotting import plot_ape, plot_trajectories
    est = Trajectory.from_rows(load_trajectory(_existing(cfg["traj"], "trajectory")))
    gt = Trajectory.from_rows(load_trajectory(_existing(cfg["gt"], "ground truth")))
    ev = evaluate_trajectory(est, gt, align=cfg["align"] != "none", with_scale=cfg["align"] == "sim3")
    head = ev.headline
    save_series(out / "ape.csv", ["frame_id", "ape_m"], head.rows())
    save_series(out / "ape_raw.csv", ["frame_id", "ape_m"], ev.raw.rows())
    series = {"raw": (ev.raw.frame_ids, ev.raw.errors)}
    if ev.aligned is not None:
        series["aligned"] = (ev.aligned.frame_ids, ev.aligned.errors)
    plot_ape(out / "ape.svg", series)
    plot_trajectories(out / "trajectory.svg", {"estimate": est.anchored().positions()},
                      gt.anchored().positions())
    lines = [f"aligned={int(ev.aligned is not None)}",
             f"rmse_m={head.rmse!r}", f"mean_m={head.mean!r}", f"max_m={head.max!r}",
             f"raw_rmse_m={ev.raw.rmse!r}",
             f"final_position_error_m={float(ev.raw.errors[-1])!r}"]
    if ev.note:
        lines.append(f"note={ev.note}")
    atomic_write_text(out / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def stats_table(stats: dict) -> str:
    header = ["run", *MatchStats.CSV_HEADER]
    body = [[label, *(f"{v:.2f}" if isinstance(v, float) else str(v) for v in s.row())]
            for label, s in stats.items()]
    widths = [max(len(r[k]) for r in [header, *body]) for k in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header, *body]) + "\n"


def write_stats(out: Path, stats: dict) -> None:
    save_series(out / "stats.csv", ["run", *MatchStats.CSV_HEADER],
                [[label, *s.row()] for label, s in stats.items()])
    atomic_write_text(out / "stats.txt", stats_table(stats))


def _read_log(path) -> list:
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [PairLog(int(r["frame_a"]), int(r["frame_b"]), int(r["point_detections"]),
                    int(r["point_matches"]), int(r["line_detections"]), int(r["line_matches"]))
            for r in rows]


def cmd_stats(cfg, out: Path) -> int:
    from .plotting import plot_match_stats
    stats = {}
    for entry in cfg["runs"]:
        label, sep, path = entry.partition("=")
        if not sep:
            label, path = Path(entry).parent.name or entry, entry
        p = _existing(path, "frame log")
        if p.is_dir():
            p = _existing(p / "frame_log.csv", "frame log")
        stats[label] = match_stats(_read_log(p))
    write_stats(out, stats)
    plot_match_stats(out / "stats.svg", stats)
    print(stats_table(stats), end="")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "match": cmd_match, "track": cmd_track,
            "eval": cmd_eval, "stats": cmd_stats}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "stats":
            cfg["runs"] = list(args.runs)
        out = Path(cfg["out"])
        if out.exists() and not out.is_dir():
            raise UsageError(f"--out is not a directory: {out}")
        if args.command == "synth" and cfg["frames"] == 0:
            return COMMANDS["synth"](cfg, out)
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, {k: v for k, v in cfg.items() if k != "out"})
        return code
    except UsageError as exc:
        print(f"plvo {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PlvoError, OSError, ValueError, KeyError) as exc:
        print(f"plvo {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
