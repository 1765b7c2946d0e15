"""Command-line entry point: ``hetloc <verb> [--config PATH] [--out DIR] [--seed N]``.

Verbs: ``simulate``, ``train-pr``, ``train-pt``, ``eval-pr``, ``eval-pt`` and
``report``. Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric, 5 tracking
lost. Every output directory receives ``config.json``, the resolved config
echo, which replays the run exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from . import storage
from .config import RunConfig, load_config, to_json
from .errors import (
    ConfigError,
    DataError,
    DatasetIOError,
    EstimationError,
    GenerationError,
    NumericError,
    QueryError,
    TrackingLostError,
    UsageError,
)
from .nn.layers import ScEncoder, UNet3
from .parallel import pmap
from .placerec import (
    PlaceData,
    PlaceIndex,
    ScanContextIndex,
    describe_batch,
    evaluate_recall,
    train_place_recognition,
)
from .simworld import LIDAR, RADAR, dead_reckoning, simulate_multisession
from .tracking import (
    build_lidar_map,
    build_training_samples,
    evaluate_rmse,
    make_unet,
    track,
    train_tracking,
)

log = logging.getLogger("hetloc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_LOST = 0, 2, 3, 4, 5
PAIRS = ("L2L", "R2R", "R2L")


# ---------------------------------------------------------------------------
# Output helpers


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    """Stable text form for CSV cells."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _loss_trace(path: Path, history, keys):
    _write_csv(path, ["epoch", *keys], [[row["epoch"], *(_fmt(row[k]) for k in keys)] for row in history])


def trajectory_svg(est: np.ndarray, gt: np.ndarray, title: str, size: int = 600) -> str:
    """Static overlay of an estimated path (red) on ground truth (black)."""
    pts = np.concatenate([est[:, :2], gt[:, :2]])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-6))
    pad = 30.0
    scale = (size - 2 * pad) / span

    def poly(a):
        xy = [(pad + (x - lo[0]) * scale, size - pad - (y - lo[1]) * scale) for x, y in a[:, :2]]
        return " ".join(f"{x:.2f},{y:.2f}" for x, y in xy)

    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'  <title>{escape(title)}</title>\n'
        f'  <rect width="{size}" height="{size}" fill="white"/>\n'
        f'  <polyline fill="none" stroke="black" stroke-width="1.5" points="{poly(gt)}"/>\n'
        f'  <polyline fill="none" stroke="red" stroke-width="1" points="{poly(est)}"/>\n'
        f'  <text x="10" y="18" font-size="13" font-family="sans-serif">{escape(title)}</text>\n'
        f'  <text x="10" y="{size - 10}" font-size="11" font-family="sans-serif">'
        f'black: ground truth, red: estimate, scale bar {span:.1f} m full width</text>\n'
        "</svg>\n"
    )


def _load_sessions(cfg: RunConfig):
    cfg.require("dataset")
    return storage.load_dataset(cfg.dataset)


def _by_modality(sessions, modality):
    return [s for s in sessions if s.modality == modality]


# ---------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    params = cfg.simulation_config().params(cfg.seed)
    world, _, sessions = simulate_multisession(params)
    storage.save_dataset(out / "dataset", sessions, config=cfg.to_dict(),
                         extra={"world": {"seed": world.seed, "obstacles": world.n_obstacles}})
    summary = {"sessions": [s.session_id for s in sessions],
               "scans": int(sum(len(s) for s in sessions)),
               "dataset_crc32": storage.file_digest(out / "dataset")}
    _write(out / "summary.json", to_json(summary))
    return summary


def cmd_train_pr(cfg: RunConfig, out: Path) -> dict:
    sessions = _load_sessions(cfg)
    pr = cfg.placerec_config()
    data = PlaceData.from_sessions(sessions, pr)
    enc, history = train_place_recognition(data, pr)
    n_batches = max(1, len(data.scs[0]) // pr.batch_places)
    storage.save_checkpoint(out / "checkpoint", enc, pr.seed, pr.epochs * n_batches,
                            extra={"pipeline": "placerec"})
    _loss_trace(out / "loss_trace.csv", history, ["loss", "active_fraction"])
    return {"checksum": enc.checksum(), "epochs": len(history)}


def cmd_train_pt(cfg: RunConfig, out: Path) -> dict:
    sessions = _load_sessions(cfg)
    tc = cfg.tracking_config()
    lidar = _pick_map(sessions, cfg)
    radar = _pick_radar(sessions, cfg)
    m = build_lidar_map([lidar], tc.resolution)
    per = max(1, tc.samples // len(radar))
    samples = []
    for k, s in enumerate(radar):
        sub = dataclasses.replace(tc, seed=tc.seed + k, samples=per)
        samples += build_training_samples(m, s, sub)
    net, history = train_tracking(samples, tc, make_unet(tc))
    storage.save_checkpoint(out / "checkpoint", net, tc.seed, tc.epochs * len(samples),
                            extra={"pipeline": "tracking", "samples": len(samples)})
    _loss_trace(out / "loss_trace.csv", history, ["loss", "L1", "L2"])
    return {"checksum": net.checksum(), "epochs": len(history), "samples": len(samples)}


def _pick_map(sessions, cfg: RunConfig):
    if cfg.map_session:
        hits = [s for s in sessions if s.session_id == cfg.map_session]
        if not hits:
            raise DataError(f"map session {cfg.map_session!r} not in dataset")
        if hits[0].modality != LIDAR:
            raise DataError(f"map session {cfg.map_session!r} is not lidar")
        return hits[0]
    lid = _by_modality(sessions, LIDAR)
    if not lid:
        raise DataError("dataset has no lidar session to build a map from")
    return lid[0]


def _pick_radar(sessions, cfg: RunConfig):
    if cfg.sessions:
        ids = {s.session_id: s for s in sessions}
        missing = [i for i in cfg.sessions if i not in ids]
        if missing:
            raise DataError(f"sessions not in dataset: {missing}")
        chosen = [ids[i] for i in cfg.sessions]
        bad = [s.session_id for s in chosen if s.modality != RADAR]
        if bad:
            raise DataError(f"tracking needs radar sessions, got lidar {bad}")
        return chosen
    rad = _by_modality(sessions, RADAR)
    if not rad:
        raise DataError("dataset has no radar session")
    return rad


def _load_net(cfg: RunConfig, kind):
    cfg.require("checkpoint")
    net, manifest = storage.load_checkpoint(cfg.checkpoint)
    if not isinstance(net, kind):
        raise DataError(f"checkpoint {cfg.checkpoint} holds a {manifest['network']['kind']}, "
                        f"not a {kind.__name__}")
    return net


def cmd_eval_pr(cfg: RunConfig, out: Path) -> dict:
    sessions = _load_sessions(cfg)
    enc = _load_net(cfg, ScEncoder)
    pr = cfg.placerec_config()
    if (enc.rings, enc.sectors) != (pr.rings, pr.sectors):
        raise DataError(f"checkpoint expects {enc.rings}x{enc.sectors} Scan Context, "
                        f"config produces {pr.rings}x{pr.sectors}")
    data = PlaceData.from_sessions(sessions, pr)
    entries, mats = data.all_entries()
    descs = np.concatenate(pmap(lambda sc: describe_batch(sc, enc), data.scs))
    learned = PlaceIndex(entries, descs)
    storage.save_index(out / "index", learned)
    results = {"learned": evaluate_recall(learned, descs, entries, cfg.threshold),
               "scan_context": evaluate_recall(ScanContextIndex(entries, mats), mats, entries,
                                               cfg.threshold)}
    report = {"threshold_m": cfg.threshold, "recall_at_1": {}, "queries": {}}
    rows = []
    for method, res in results.items():
        report["recall_at_1"][method] = {p: res[p].recall for p in PAIRS}
        report["queries"][method] = {p: res[p].n_queries for p in PAIRS}
        for p in PAIRS:
            r = res[p]
            for e, d, ok in zip(r.query_entries, r.rank1_distances, r.correct):
                rows.append([method, p, e.session_id, e.place_id, _fmt(float(d)), _fmt(bool(ok))])
    _write(out / "recall.json", to_json(report))
    _write_csv(out / "queries.csv",
               ["method", "pair", "session_id", "place_id", "rank1_distance_m", "correct"], rows)
    return report


def _trajectory_rows(session, result):
    rows = []
    for rec in result.steps:
        t = rec.step
        gt = session.poses[t]
        m = rec.measured.as_array() if rec.measured is not None else (None, None, None)
        ent = rec.entropy if rec.entropy is not None else (None, None, None)
        rows.append([t, t, *(_fmt(float(v)) for v in result.poses[t]),
                     *(_fmt(float(v)) for v in gt), *(_fmt(v) for v in m), *(_fmt(v) for v in ent)])
    return rows


TRAJ_HEADER = ["step", "t", "est_x", "est_y", "est_theta_rad", "gt_x", "gt_y", "gt_theta_rad",
               "meas_dx", "meas_dy", "meas_dtheta", "entropy_x", "entropy_y", "entropy_theta"]


def cmd_eval_pt(cfg: RunConfig, out: Path) -> dict:
    sessions = _load_sessions(cfg)
    tc = cfg.tracking_config()
    net = _load_net(cfg, UNet3) if tc.measurement == "network" else None
    lidar = _pick_map(sessions, cfg)
    radar = _pick_radar(sessions, cfg)
    m = build_lidar_map([lidar], tc.resolution)
    report = {"map_session": lidar.session_id, "sessions": {}}
    lost = None
    for s in radar:
        t0 = time.perf_counter()
        try:
            res = track(s, m, net, tc)
            failed = False
        except TrackingLostError as exc:
            res, failed = exc.partial, True
            lost = lost or exc
        n = len(res.poses)
        trans, rot = evaluate_rmse(res.poses, s.poses[:n])
        dr = np.array(dead_reckoning(s, s.pose(0)))
        dr_t, dr_r = evaluate_rmse(dr, s.poses)
        entry = {"trans_rmse_m": trans, "rot_rmse_deg": rot, "steps": n, "lost": failed,
                 "dead_reckoning": {"trans_rmse_m": dr_t, "rot_rmse_deg": dr_r}}
        report["sessions"][s.session_id] = entry
        _write_csv(out / f"trajectory_{s.session_id}.csv", TRAJ_HEADER, _trajectory_rows(s, res))
        _write(out / f"trajectory_{s.session_id}.svg",
               trajectory_svg(res.poses, s.poses[:n], f"{s.session_id} on {lidar.session_id}"))
        _write(out / f"diagnostics_{s.session_id}.json",
               to_json({"config": cfg.to_dict(), "rmse": [trans, rot], "failed": failed}))
        log.info("eval-pt %s: trans %.3f m rot %.3f deg (%.1f s)", s.session_id, trans, rot,
                 time.perf_counter() - t0)
    _write(out / "tracking.json", to_json(report))
    if lost is not None:
        raise lost
    return report


def cmd_report(cfg: RunConfig, out: Path) -> dict:
    if not cfg.inputs:
        raise ConfigError("inputs: list the run directories to summarise")
    recall, tracking = {}, {}
    for d in cfg.inputs:
        p = Path(d)
        if not p.is_dir():
            raise DataError(f"input {d} is not a directory")
        if (p / "recall.json").is_file():
            recall[p.name] = json.loads((p / "recall.json").read_text())
        if (p / "tracking.json").is_file():
            tracking[p.name] = json.loads((p / "tracking.json").read_text())
    if not recall and not tracking:
        raise DataError("no recall.json or tracking.json found in the inputs")
    lines = ["# Results", ""]
    for name, r in sorted(recall.items()):
        lines += [f"## Recall@1 (%) at {r['threshold_m']} m: {name}", "",
                  "| Method | " + " | ".join(PAIRS) + " |", "|---|" + "---|" * len(PAIRS)]
        for method, cells in sorted(r["recall_at_1"].items()):
            lines.append(f"| {method} | " + " | ".join(_cell(cells[p]) for p in PAIRS) + " |")
        lines.append("")
    for name, r in sorted(tracking.items()):
        lines += [f"## Pose tracking RMSE: {name} (map {r['map_session']})", "",
                  "| Session | Trans. (m) | Rot. (deg) | Dead reckoning trans. (m) | Lost |",
                  "|---|---|---|---|---|"]
        for sid, e in sorted(r["sessions"].items()):
            lines.append(f"| {sid} | {e['trans_rmse_m']:.3f} | {e['rot_rmse_deg']:.3f} | "
                         f"{e['dead_reckoning']['trans_rmse_m']:.3f} | {'yes' if e['lost'] else 'no'} |")
        lines.append("")
    _write(out / "report.md", "\n".join(lines))
    summary = {"recall": recall, "tracking": tracking}
    _write(out / "report.json", to_json(summary))
    return summary


def _cell(v):
    return "n/a" if v is None else f"{v:.1f}"


COMMANDS = {
    "simulate": cmd_simulate,
    "train-pr": cmd_train_pr,
    "train-pt": cmd_train_pt,
    "eval-pr": cmd_eval_pr,
    "eval-pt": cmd_eval_pt,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hetloc", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", metavar="PATH", help="JSON run configuration")
    ap.add_argument("--out", metavar="DIR", default="out", help="output directory")
    ap.add_argument("--seed", metavar="N", type=int, help="overrides the config seed")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                            stream=sys.stderr)
    out = Path(args.out)
    try:
        cfg = load_config(args.config, args.seed).resolved()
        out.mkdir(parents=True, exist_ok=True)
        _write(out / "config.json", to_json(cfg.to_dict()))
        t0 = time.perf_counter()
        COMMANDS[args.command](cfg, out)
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return EXIT_OK
    except (ConfigError, UsageError, GenerationError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, DatasetIOError, QueryError, EstimationError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericError as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    except TrackingLostError as exc:
        log.error("tracking lost: %s", exc)
        return EXIT_LOST


if __name__ == "__main__":
    sys.exit(main())
