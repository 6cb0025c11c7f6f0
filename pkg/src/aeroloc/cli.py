"""Command line entry point: ``aeroloc <command> [options]``.

Every command accepts ``--config FILE`` with flat ``key = value`` lines;
explicit flags win over the file, the file wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import plotting
from .dataset import Dataset, write_scenario
from .formats import FormatError, atomic_write, config_to_text, read_config, read_trajectory, write_trajectory
from .matcher import (
    HypothesisGrid, MatchParams, match, read_distribution, rotation_set, world_pose, write_distribution,
)
from .pipeline import ScenarioConfig, aerial_patch, eval_report, frames_to_text, prune, simulate
from .posegraph import pseudolabel_graph, optimize, write_graph
from .tracking import gaussian_measurement, measurement_to_world, moments, track


class CliError(Exception):
    pass


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# option tables: (name, type, default, help); defaults of None mean "required"
COMMON = [("config", str, "", "key = value file; flags override it")]
MATCH_OPTS = [
    ("scenario", str, None, "scenario directory"),
    ("out", str, None, "output directory"),
    ("radius", float, math.nan, "search radius in meters (default: scenario search_radius)"),
    ("rotation_bound_deg", float, math.nan, "rotation bound in degrees (default: scenario value)"),
    ("bin_deg", float, 2.0, "rotation bin width in degrees"),
    ("patch_size", int, 0, "aerial patch size in pixels (default: scenario patch_size)"),
    ("projection_seed", int, 0, "seed of the BEV-to-aerial channel projection"),
    ("jobs", int, 1, "frames matched in parallel"),
]
TRACK_OPTS = [
    ("scenario", str, None, "scenario directory"),
    ("matches", str, None, "output directory of `match`"),
    ("out", str, None, "trajectory file to write"),
    ("window_radius", int, 10, "moment window around the mode, in cells"),
]
PSEUDO_OPTS = TRACK_OPTS + [
    ("ratio", float, 100.0, "odometry / measurement information ratio"),
    ("max_iters", int, 100, "optimizer iteration cap"),
    ("graph", str, "", "also dump the pose graph here"),
]
PRUNE_OPTS = [
    ("scenario", str, None, "scenario directory"),
    ("matches", str, None, "output directory of `match`"),
    ("out", str, None, "pruned frame manifest to write"),
    ("fraction", float, 0.01, "fraction of hardest frames to drop"),
]
EVAL_OPTS = [
    ("gt", str, None, "ground-truth trajectory"),
    ("pred", str, None, "predicted trajectory"),
    ("out", str, None, "report text file"),
    ("figure", str, "", "figure path (default: report path with .png)"),
    ("label", str, "", "row label (default: prediction file stem)"),
    ("thresholds", str, "1,3,5", "recall thresholds in meters"),
]


def _scenario_opts():
    out = [("out", str, None, "scenario directory to create")]
    for f in fields(ScenarioConfig):
        t = {"int": int, "float": float, "str": str}[f.type]
        out.append((f.name, t, f.default, f"scenario {f.name}"))
    return out


def _add(parser: argparse.ArgumentParser, opts) -> None:
    for name, _, default, help_ in COMMON + opts:
        flag = "--" + name.replace("_", "-")
        shown = "" if default in (None, "", 0) or (isinstance(default, float) and math.isnan(default)) else f" [{default}]"
        parser.add_argument(flag, dest=name, default=None, help=help_ + shown)


def _resolve(args: argparse.Namespace, opts) -> dict:
    file_values = read_config(args.config) if args.config else {}
    out = {}
    for name, typ, default, _ in opts:
        raw = getattr(args, name)
        source = "--" + name.replace("_", "-")
        if raw is None and name in file_values:
            raw, source = file_values[name], f"{args.config}: {name}"
        if raw is None:
            if default is None:
                raise CliError(f"missing required option --{name.replace('_', '-')}")
            out[name] = default
            continue
        try:
            out[name] = _bool(raw) if typ is bool else typ(raw)
        except ValueError as exc:
            raise CliError(f"{source}: {exc}") from exc
    return out


# -- commands -------------------------------------------------------------------


def cmd_simulate(o: dict) -> str:
    values = {k: v for k, v in o.items() if k != "out"}
    cfg = ScenarioConfig(**values)
    scenario = simulate(cfg)
    write_scenario(o["out"], scenario)
    return f"metric frames {len(scenario.frames)}\nmetric aerial_pixels {scenario.aerial.height * scenario.aerial.width}\n"


def _setting(ds: Dataset, override, key: str, cast, fallback):
    if not (isinstance(override, float) and math.isnan(override)) and override not in (0, None):
        return override
    if key in ds.settings:
        return cast(ds.settings[key])
    return fallback


def cmd_match(o: dict) -> str:
    ds = Dataset.load(o["scenario"])
    out = Path(o["out"])
    aerial = ds.aerial
    radius = _setting(ds, o["radius"], "search_radius", float, 6.0)
    bound = _setting(ds, o["rotation_bound_deg"], "rotation_bound_deg", float, 10.0)
    size = _setting(ds, o["patch_size"], "patch_size", int, 80)
    grid = HypothesisGrid(radius, aerial.resolution, rotation_set(math.radians(bound), math.radians(o["bin_deg"])))
    first = ds.bev(ds.frames[0])
    mask = ds.mask(first)
    if first.channels == aerial.channels:
        params = MatchParams(c_A=aerial.channels, q_A=aerial.resolution, d_A=size)
    else:
        params = MatchParams.seeded(first.channels, o["projection_seed"], c_A=aerial.channels,
                                    q_A=aerial.resolution, d_A=size)

    def one(fr):
        P = match(aerial_patch(aerial, fr.prior, size), ds.bev(fr), mask, params, grid)
        write_distribution(out / "dist" / f"{fr.frame_id:06d}", P)
        return world_pose(fr.prior, P.mode()), float(P.probs.max())

    jobs = max(1, o["jobs"])
    if jobs == 1:
        results = [one(fr) for fr in ds.frames]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, ds.frames))
    write_trajectory(out / "argmax.traj", [f.frame_id for f in ds.frames], [f.timestamp for f in ds.frames],
                     [r[0] for r in results])
    used = {"radius": radius, "rotation_bound_deg": bound, "bin_deg": o["bin_deg"], "patch_size": size,
            "rotations": len(grid.rotations), "cells": grid.size}
    atomic_write(out / "match.cfg", config_to_text(used))
    peak = float(np.mean([r[1] for r in results]))
    return f"metric frames {len(results)}\nmetric mean_peak_probability {peak!r}\n"


def _distributions(ds: Dataset, matches) -> list:
    root = Path(matches)
    if not root.is_dir():
        raise FormatError(f"{root}: match directory not found")
    return [read_distribution(root / "dist" / f"{fr.frame_id:06d}") for fr in ds.frames]


def _need_odometry(ds: Dataset) -> list:
    if len(ds.frames) > 1 and not ds.odometry:
        raise FormatError(f"{ds.root / 'odometry.txt'}: odometry required")
    return ds.odometry


def cmd_track(o: dict) -> str:
    ds = Dataset.load(o["scenario"])
    odometry = _need_odometry(ds)
    dists = _distributions(ds, o["matches"])
    meas = [measurement_to_world(fr.prior, *gaussian_measurement(P, o["window_radius"]))
            for fr, P in zip(ds.frames, dists)]
    states = track(meas, odometry)
    write_trajectory(o["out"], [f.frame_id for f in ds.frames], [f.timestamp for f in ds.frames],
                     [s.mean for s in states])
    return f"metric frames {len(states)}\n"


def cmd_pseudolabel(o: dict) -> str:
    ds = Dataset.load(o["scenario"])
    odometry = _need_odometry(ds)
    dists = _distributions(ds, o["matches"])
    graph = pseudolabel_graph(ds.frames, dists, odometry, o["ratio"], o["window_radius"])
    if o["graph"]:
        write_graph(o["graph"], graph)
    res = optimize(graph, max_iters=o["max_iters"])
    write_trajectory(o["out"], [f.frame_id for f in ds.frames], [f.timestamp for f in ds.frames], res.poses)
    return (f"metric frames {len(res.poses)}\nmetric cost {res.cost!r}\n"
            f"metric iterations {res.iterations}\nmetric converged {int(res.converged)}\n")


def cmd_prune(o: dict) -> str:
    ds = Dataset.load(o["scenario"])
    dists = _distributions(ds, o["matches"])
    difficulty = [moments(P).generalized_variance for P in dists]
    kept = prune(ds.frames, difficulty, o["fraction"])
    atomic_write(o["out"], frames_to_text(kept))
    kept_ids = {f.frame_id for f in kept}
    dropped = [f.frame_id for f in ds.frames if f.frame_id not in kept_ids]
    return (f"metric kept {len(kept)}\nmetric dropped {len(dropped)}\n"
            + "".join(f"dropped {i}\n" for i in dropped))


def cmd_eval(o: dict) -> str:
    gid, _, gt = read_trajectory(o["gt"])
    pid, _, pred = read_trajectory(o["pred"])
    if gid != pid:
        by_id = dict(zip(gid, gt))
        missing = [i for i in pid if i not in by_id]
        if missing:
            raise FormatError(f"{o['pred']}: frame {missing[0]} has no ground truth in {o['gt']}")
        gt = [by_id[i] for i in pid]
    try:
        thresholds = tuple(float(t) for t in o["thresholds"].split(","))
    except ValueError as exc:
        raise CliError(f"--thresholds: {exc}") from exc
    rep = eval_report(pred, gt, thresholds)
    label = o["label"] or Path(o["pred"]).stem
    text = rep.to_text(label)
    atomic_write(o["out"], text)
    fig_path = o["figure"] or str(Path(o["out"]).with_suffix(".png"))
    plotting.save_figure(plotting.report_figure(rep, gt, pred, label), fig_path)
    return text


COMMANDS: dict[str, tuple[Callable[[dict], str], list, str]] = {
    "simulate": (cmd_simulate, _scenario_opts(), "generate a synthetic scenario directory"),
    "match": (cmd_match, MATCH_OPTS, "score pose hypotheses for every frame"),
    "track": (cmd_track, TRACK_OPTS, "Kalman-filter the per-frame distributions"),
    "pseudolabel": (cmd_pseudolabel, PSEUDO_OPTS, "pose-graph refinement of the per-frame distributions"),
    "prune": (cmd_prune, PRUNE_OPTS, "drop the frames with the largest generalized variance"),
    "eval": (cmd_eval, EVAL_OPTS, "recall / error / APE report plus figure"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aeroloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, opts, help_) in COMMANDS.items():
        _add(sub.add_parser(name, help=help_, description=help_), opts)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    func, opts, _ = COMMANDS[args.command]
    try:
        text = func(_resolve(args, opts))
    except (CliError, FormatError, ValueError, OSError, ArithmeticError) as exc:
        print(f"aeroloc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
