"""Line-delimited metrics files, summary tables and plot-data export.

A metrics file starts with one header line
``{"schema": "metasg.metrics", "version": 1, ...}`` followed by one JSON
object per FL round. Keys are sorted and floats use Python's shortest
round-trip repr, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from .trajectory import Trajectory

SCHEMA = "metasg.metrics"
SCHEMA_VERSION = 1
FIELDS = (
    "run_id", "seed", "round", "main_accuracy", "backdoor_accuracy", "surrogate_loss",
    "true_loss", "r_D", "r_A", "defense_action", "wall_ms",
)


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    round: int
    main_accuracy: Optional[float]
    backdoor_accuracy: Optional[float]
    surrogate_loss: Optional[float]
    true_loss: Optional[float]
    r_D: float
    r_A: float
    defense_action: list[float]
    wall_ms: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("main_accuracy", "backdoor_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.round < 0:
            raise ValueError("round must be non-negative")
        for name in ("r_D", "r_A"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        data = json.loads(line)
        missing = set(FIELDS) - set(data)
        extra = set(data) - set(FIELDS)
        if missing or extra:
            raise ValueError(f"metrics line has missing keys {sorted(missing)} / unknown keys {sorted(extra)}")
        return cls(**data)


def records_from_trajectory(traj: Trajectory, run_id: str, seed: int, round_offset: int = 0) -> list[MetricsRecord]:
    out = []
    for i, s in enumerate(traj.steps):
        info = s.info
        out.append(MetricsRecord(
            run_id=run_id, seed=seed, round=round_offset + i,
            main_accuracy=info.get("main_accuracy"), backdoor_accuracy=info.get("backdoor_accuracy"),
            surrogate_loss=info.get("surrogate_loss"), true_loss=info.get("true_loss"),
            r_D=float(s.r_D), r_A=float(s.r_A),
            defense_action=[float(x) for x in np.asarray(s.defender_action).ravel()],
            wall_ms=info.get("wall_ms"),
        ))
    return out


class MetricsWriter:
    """Append-only writer; every line is flushed so a crash leaves a readable prefix."""

    def __init__(self, path: str | Path, meta: dict[str, Any] | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
        header = {"schema": SCHEMA, "version": SCHEMA_VERSION, "fields": list(FIELDS), **(meta or {})}
        self._fh.write(json.dumps(header, sort_keys=True) + "\n")
        self._fh.flush()
        self._last: dict[str, int] = {}

    def write(self, rec: MetricsRecord) -> None:
        prev = self._last.get(rec.run_id)
        if prev is not None and rec.round != prev + 1:
            raise ValueError(f"run {rec.run_id}: round {rec.round} does not follow {prev}")
        self._last[rec.run_id] = rec.round
        self._fh.write(rec.to_json() + "\n")
        self._fh.flush()

    def write_all(self, recs: Iterable[MetricsRecord]) -> None:
        for r in recs:
            self.write(r)

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_metrics(path: str | Path) -> tuple[dict[str, Any], list[MetricsRecord]]:
    """Parse and validate a metrics file; rounds must be contiguous per run."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ValueError(f"{path}: empty metrics file")
    header = json.loads(lines[0])
    if header.get("schema") != SCHEMA:
        raise ValueError(f"{path}: not a metrics file")
    if header.get("version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {header.get('version')}")
    recs = [MetricsRecord.from_json(l) for l in lines[1:] if l.strip()]
    last: dict[str, int] = {}
    for r in recs:
        if r.run_id in last and r.round != last[r.run_id] + 1:
            raise ValueError(f"{path}: run {r.run_id} rounds are not contiguous")
        last[r.run_id] = r.round
    return header, recs


def final_rows(paths: Sequence[str | Path]) -> list[dict[str, Any]]:
    """Last-round metrics of every run in ``paths``."""
    rows = []
    for p in paths:
        header, recs = read_metrics(p)
        last: dict[str, MetricsRecord] = {}
        for r in recs:
            last[r.run_id] = r
        for run_id in sorted(last):
            r = last[run_id]
            rows.append({"run_id": run_id, "seed": r.seed, "round": r.round, "main_accuracy": r.main_accuracy,
                         "backdoor_accuracy": r.backdoor_accuracy, "true_loss": r.true_loss, "r_D": r.r_D})
    return rows


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def write_summary(paths: Sequence[str | Path], out: str | Path) -> list[dict[str, Any]]:
    """Per-run final-round table plus mean/std per run name (``run_id`` without the seed prefix)."""
    rows = final_rows(paths)
    keys = ("main_accuracy", "backdoor_accuracy", "true_loss", "r_D")
    groups: dict[str, list[dict[str, Any]]] = defaultdict(list)
    for r in rows:
        groups[r["run_id"].split("/", 1)[-1]].append(r)
    out = Path(out)
    with open(out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "seed", "round", *keys])
        for r in rows:
            w.writerow([r["run_id"], r["seed"], r["round"], *(_fmt(r[k]) for k in keys)])
        for name in sorted(groups):
            stats = []
            for k in keys:
                vals = [g[k] for g in groups[name] if g[k] is not None]
                stats.append(f"{np.mean(vals):.6g}+-{np.std(vals):.6g}" if vals else "")
            w.writerow([f"mean+-std:{name}", len(groups[name]), "", *stats])
    return rows


def export_plot_data(metrics_paths: Sequence[str | Path], grouping: str, out_dir: str | Path) -> list[Path]:
    """Per-group mean and std of main / backdoor accuracy versus round.

    ``grouping`` is ``"run"`` (the run name without the seed prefix) or any
    header key of the metrics files (for example ``"mode"``). Writes one CSV
    per group and returns the paths.
    """
    if not metrics_paths:
        raise ValueError("no metrics files given")
    series: dict[str, dict[int, list[tuple[float, float]]]] = defaultdict(lambda: defaultdict(list))
    for p in metrics_paths:
        header, recs = read_metrics(p)
        for r in recs:
            if grouping == "run":
                key = r.run_id.split("/", 1)[-1]
            else:
                if grouping not in header:
                    raise ValueError(f"{p}: header has no key {grouping!r}")
                key = f"{header[grouping]}/{r.run_id.split('/', 1)[-1]}"
            series[key][r.round].append((
                np.nan if r.main_accuracy is None else r.main_accuracy,
                np.nan if r.backdoor_accuracy is None else r.backdoor_accuracy,
            ))
    if not series:
        raise ValueError("metrics files contain no records")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key in sorted(series):
        path = out_dir / (key.replace("/", "__").replace(" ", "_") + ".csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["round", "n", "main_accuracy_mean", "main_accuracy_std", "backdoor_accuracy_mean", "backdoor_accuracy_std"])
            for rnd in sorted(series[key]):
                a = np.array(series[key][rnd], dtype=float)
                w.writerow([rnd, a.shape[0], repr(float(a[:, 0].mean())), repr(float(a[:, 0].std())),
                            repr(float(a[:, 1].mean())), repr(float(a[:, 1].std()))])
        written.append(path)
    return written
