"""Batch Monte-Carlo runs, summary statistics and file export."""

from __future__ import annotations

import csv
import io
import json
import math
import subprocess
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ScenarioConfig
from .controller import EpisodeRecord, run_episode
from .costs import in_track

COST_CONVENTION = "sum of the unscaled running cost over stages 0..T_max-1, divided by T_max"

TRAJECTORY_COLUMNS = (
    ["k"] + [f"x{i}" for i in range(4)] + ["u0", "u1"] + [f"xbar{i}" for i in range(4)]
    + ["lam_max", "min_margin", "max_slack", "status", "safe"]
)


def safe_mask(cfg: ScenarioConfig, positions) -> np.ndarray:
    """Per-stage membership of the safe set (outside every obstacle, inside the track band)."""
    positions = np.asarray(positions, dtype=float)
    ok = np.ones(len(positions), dtype=bool)
    for obs in cfg.obstacles:
        ok &= np.linalg.norm(positions - np.array(obs.center), axis=1) > obs.radius
    if cfg.kind == "track":
        ok &= in_track(positions, cfg.track.R_c, cfg.track.band)
    return ok


@dataclass(frozen=True)
class Episode:
    record: EpisodeRecord
    safe: np.ndarray

    @property
    def failed(self) -> bool:
        return not bool(self.safe.all())


@dataclass(frozen=True)
class RunStats:
    n_sim: int
    n_fail: int
    pr_fail: float
    avg_speed_mean: float | None
    avg_speed_std: float | None
    max_speed_mean: float | None
    max_speed_std: float | None
    cost_mean: float | None
    cost_std: float | None

    def row(self) -> str:
        def pm(m, s):
            if m is None:
                return "n/a"
            return f"{m:.2f}" if s is None else f"{m:.2f} ± {s:.2f}"
        return (f"avg speed {pm(self.avg_speed_mean, self.avg_speed_std)} | "
                f"max speed {pm(self.max_speed_mean, self.max_speed_std)} | "
                f"pr_fail {self.pr_fail:.2f} ({self.n_fail}/{self.n_sim}) | "
                f"cost {pm(self.cost_mean, self.cost_std)}")


def _mean_std(values: np.ndarray):
    if values.size == 0:
        return None, None
    mean = float(values.mean())
    std = float(values.std(ddof=1)) if values.size > 1 else None
    return mean, std


def episode_metrics(record: EpisodeRecord, T_max: int) -> tuple[float, float, float]:
    """(average speed, max speed, normalized cost) of one episode."""
    speeds = record.speeds
    return float(speeds.mean()), float(speeds.max()), float(record.cost[:T_max].sum() / T_max)


def compute_stats(episodes: Sequence[Episode], T_max: int) -> RunStats:
    if len(episodes) == 0:
        raise ValueError("compute_stats needs at least one episode")
    metrics = np.array([episode_metrics(e.record, T_max) for e in episodes])
    n_fail = sum(e.failed for e in episodes)
    a = _mean_std(metrics[:, 0])
    m = _mean_std(metrics[:, 1])
    c = _mean_std(metrics[:, 2])
    return RunStats(len(episodes), n_fail, n_fail / len(episodes), *a, *m, *c)


def empty_stats() -> RunStats:
    return RunStats(0, 0, 0.0, None, None, None, None, None, None)


def _run_one(args) -> EpisodeRecord:
    cfg, seed = args
    scenario, config = cfg.build()
    return run_episode(config, scenario, seed, cfg.controller, **cfg.controller_options())


def run_batch(cfg: ScenarioConfig) -> tuple[list[Episode], RunStats]:
    """Run ``cfg.n_sim`` episodes with seeds ``cfg.seed + i``.

    Episodes are independent; with ``cfg.workers > 1`` they run in a process
    pool, and results are always collected in seed order.
    """
    jobs = [(cfg, cfg.seed + i) for i in range(cfg.n_sim)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(job) for job in jobs]
    episodes = [Episode(r, safe_mask(cfg, r.positions)) for r in records]
    stats = compute_stats(episodes, cfg.T_max) if episodes else empty_stats()
    return episodes, stats


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def trajectory_csv(episode: Episode) -> str:
    """Delimited text, one row per stage ``k = 0..T``; inputs and solver data are blank at ``k = T``."""
    r = episode.record
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for k in range(r.T + 1):
        row = [k] + [_fmt(v) for v in r.states[k]]
        if k < r.T:
            row += [_fmt(v) for v in r.inputs[k]]
        else:
            row += ["", ""]
        row += [_fmt(v) for v in r.nominal[k]] + [_fmt(r.lam_max[k])]
        if k < r.T:
            row += [_fmt(r.min_margin[k]), _fmt(r.max_slack[k]), r.status[k]]
        else:
            row += ["", "", ""]
        row.append(_fmt(episode.safe[k]))
        w.writerow(row)
    return buf.getvalue()


def read_trajectory(path) -> dict[str, np.ndarray]:
    """Columns of an exported trajectory file as float arrays (status as strings)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in TRAJECTORY_COLUMNS:
        vals = [row[col] for row in rows]
        out[col] = np.array(vals) if col == "status" else np.array([float(v) if v else np.nan for v in vals])
    return out


def git_commit(cwd=None) -> str:
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, check=True,
                             cwd=cwd or Path(__file__).parent)
        return res.stdout.strip()
    except (OSError, subprocess.CalledProcessError):
        return "unknown"


def stats_document(cfg: ScenarioConfig, stats: RunStats, episodes: Sequence[Episode]) -> dict:
    per_episode = []
    for e in episodes:
        avg, mx, cost = episode_metrics(e.record, cfg.T_max)
        per_episode.append({"seed": e.record.seed, "failed": e.failed, "avg_speed": avg,
                            "max_speed": mx, "cost": cost,
                            "resets": int(e.record.reset.sum()),
                            "fallback_steps": sum(s != "optimal" for s in e.record.status
                                                  if s != "none")})
    return {
        "scenario": cfg.name,
        "controller": cfg.controller,
        "stats": asdict(stats),
        "episodes": per_episode,
        "metadata": {
            "base_seed": cfg.seed,
            "n_sim": cfg.n_sim,
            "config_hash": cfg.digest(),
            "commit": git_commit(),
            "cost_convention": COST_CONVENTION,
            "noise_scaling": cfg.noise_scaling,
        },
    }


def export(episodes: Sequence[Episode], stats: RunStats | None, cfg: ScenarioConfig, out_dir) -> list[Path]:
    """Write ``traj_<controller>_seed<seed>.csv`` per episode, ``stats.json`` and ``config.yaml``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for e in episodes:
            path = out / f"traj_{cfg.controller}_seed{e.record.seed}.csv"
            path.write_text(trajectory_csv(e))
            written.append(path)
        doc = stats_document(cfg, stats or empty_stats(), episodes)
        path = out / "stats.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        written.append(path)
        path = out / "config.yaml"
        path.write_text(cfg.dumps())
        written.append(path)
    except OSError as exc:
        raise OSError(f"failed writing results to {out}: {exc}") from exc
    return written
