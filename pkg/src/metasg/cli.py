"""Command-line experiment runner.

    metasg <mode> --config cfg.json [--seed-override N] [--out DIR]
    metasg run --config cfg.json          # mode taken from the config
    metasg export --metrics a.jsonl b.jsonl --grouping run --out plots/
    metasg summary --metrics runs/*/seed_*/metrics.jsonl --out summary.csv

Log verbosity comes from ``METASG_LOG`` (default ``WARNING``). Each seed
writes into ``<out>/seed_<s>/``; a ``PARTIAL`` marker stays there if the seed
did not finish. The exit status is 1 if any seed failed, 2 on a bad config.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from . import oracles
from .config import MODES, ExperimentConfig, dump_config, format_validation_error, load_config
from .env import FLGame, make_attacker_policy, make_defender_policy
from .meta import (
    attacker_best_response,
    bse_baseline,
    meta_stackelberg,
    online_adapt,
    reptile_meta_rl,
)
from .metrics import MetricsWriter, export_plot_data, records_from_trajectory, write_summary
from .policy import load_policy, save_policy
from .seeding import child_seed

log = logging.getLogger("metasg")


def _setup_logging() -> None:
    level = os.environ.get("METASG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _attackers(cfg: ExperimentConfig, game: FLGame, entries, seed: int):
    """Attack specs plus their initial attacker policies (RL kinds are pre-trained)."""
    specs, phis = [], []
    steps = cfg.attacker_pretrain_steps if cfg.attacker_pretrain_steps is not None else cfg.meta.N_A
    for j, e in enumerate(entries):
        xi = e.build(game.config)
        phi = None
        if xi.is_rl:
            phi = make_attacker_policy(game, xi.kind, child_seed(seed, "init", j), log_std=cfg.policy_log_std)
            if e.pretrain_against is not None and steps > 0:
                phi = attacker_best_response(e.pretrain_against, phi, xi, steps, cfg.meta.kappa_A, game,
                                             cfg.meta, child_seed(seed, "meta", j, "br"))
            xi.policy = phi
        specs.append(xi)
        phis.append(phi)
    return specs, phis


def _write_run(writer: MetricsWriter, traj, run_id: str, seed: int, elapsed_ms: float | None) -> None:
    recs = records_from_trajectory(traj, run_id, seed)
    if elapsed_ms is not None and recs:
        for r in recs:
            r.wall_ms = elapsed_ms / len(recs)
    writer.write_all(recs)


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path) -> None:
    mode = cfg.mode
    seed_dir.mkdir(parents=True, exist_ok=True)
    if mode == "agg-bench":
        results = oracles.run_bench(cfg.bench_instances, seed)
        lines = [r.line() for r in results]
        for line in lines:
            print(line)
        (seed_dir / "bench.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        if not all(r.ok for r in results):
            raise RuntimeError("aggregation bench reported failures")
        return

    env = cfg.env.model_copy(update={"data_seed": seed})
    meta = cfg.meta.model_copy(update={"seed": seed})
    game = FLGame(env)
    timing = cfg.record_timing
    header = {"mode": mode, "seed": seed}
    with MetricsWriter(seed_dir / "metrics.jsonl", header) as writer:
        eval_specs, eval_phis = _attackers(cfg, game, cfg.eval_entries(), child_seed(seed, "eval"))

        if mode in ("pretrain-meta-rl", "pretrain-meta-sg", "pretrain-bse"):
            specs, phis = _attackers(cfg, game, cfg.train_entries(), seed)
            Q = cfg.type_distribution()
            theta0 = make_defender_policy(game, child_seed(seed, "init"), hidden=cfg.policy_hidden,
                                          log_std=cfg.policy_log_std)
            ckpt = seed_dir / "checkpoints"
            ckpt.mkdir(exist_ok=True)
            train_log = open(seed_dir / "train.jsonl", "w", encoding="utf-8", newline="\n")

            def on_iter(t, res) -> None:
                save_policy(ckpt / f"theta_{t + 1:04d}.txt", res.theta)
                norms = res.grad_norms
                train_log.write(json.dumps({"iteration": t + 1, "types": res.types[-1],
                                            "theta_norm": float((res.theta.vector() ** 2).sum() ** 0.5),
                                            "grad_norm_last": norms[-1] if norms else None}, sort_keys=True) + "\n")
                train_log.flush()

            with train_log:
                if mode == "pretrain-meta-rl":
                    res = reptile_meta_rl(theta0, specs, Q, meta, game, phis, callback=on_iter)
                elif mode == "pretrain-meta-sg":
                    res = meta_stackelberg(theta0, phis, Q, meta, game, specs, callback=on_iter)
                else:
                    res = bse_baseline(theta0, phis, Q, meta, game, specs, callback=on_iter)
            save_policy(seed_dir / "policy_final.txt", res.theta)
            for xi, phi in zip(specs, res.phis):
                if phi is not None:
                    save_policy(seed_dir / f"attacker_{xi.name}.txt", phi)
            adapt = mode != "pretrain-bse"
            for xi, phi in zip(eval_specs, eval_phis):
                t0 = time.perf_counter()
                n = min(meta.online_rounds, env.horizon) if adapt else 0
                _, traj = online_adapt(res.theta, game, xi, phi, meta, child_seed(seed, "eval", "online"),
                                       n_rounds=n, total_rounds=env.horizon)
                _write_run(writer, traj, f"seed{seed}/{mode}/{xi.name}", seed,
                           (time.perf_counter() - t0) * 1e3 if timing else None)
            return

        if mode == "adapt":
            theta = (load_policy(cfg.policy_path) if cfg.policy_path else
                     make_defender_policy(game, child_seed(seed, "init"), hidden=cfg.policy_hidden,
                                          log_std=cfg.policy_log_std))
            for xi, phi in zip(eval_specs, eval_phis):
                t0 = time.perf_counter()
                adapted, traj = online_adapt(theta, game, xi, phi, meta, child_seed(seed, "eval", "online"),
                                             n_rounds=min(meta.online_rounds, env.horizon), total_rounds=env.horizon)
                save_policy(seed_dir / f"adapted_{xi.name}.txt", adapted)
                _write_run(writer, traj, f"seed{seed}/adapt/{xi.name}", seed,
                           (time.perf_counter() - t0) * 1e3 if timing else None)
            return

        # evaluate
        fixed = cfg.fixed_defense()
        if fixed is None:
            if not cfg.policy_path:
                raise ValueError("evaluate needs defense_fixed or policy_path")
            fixed = load_policy(cfg.policy_path)
        runs = [(None, None, "no-attack")] if cfg.include_no_attack else []
        runs += [(xi, phi, xi.name) for xi, phi in zip(eval_specs, eval_phis)]
        for xi, phi, name in runs:
            t0 = time.perf_counter()
            traj = game.rollout(fixed, phi, xi, seed, diagnostics=True)
            _write_run(writer, traj, f"seed{seed}/evaluate/{name}", seed,
                       (time.perf_counter() - t0) * 1e3 if timing else None)


def run(cfg: ExperimentConfig, out_dir: str | Path) -> int:
    """Run every seed of ``cfg``; returns the process exit status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg), encoding="utf-8")
    failed = []
    metrics_paths = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        marker = seed_dir / "PARTIAL"
        marker.write_text("run started; this file is removed when the seed finishes\n", encoding="utf-8")
        try:
            run_seed(cfg, seed, seed_dir)
        except Exception:
            log.error("seed %d failed", seed)
            marker.write_text(traceback.format_exc(), encoding="utf-8")
            failed.append(seed)
            continue
        marker.unlink()
        if (seed_dir / "metrics.jsonl").exists():
            metrics_paths.append(seed_dir / "metrics.jsonl")
    if metrics_paths:
        write_summary(metrics_paths, out / "summary.csv")
    if failed:
        print(f"{len(failed)} of {len(cfg.seeds)} seeds failed: {failed}", file=sys.stderr)
        return 1
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metasg", description="Meta-Stackelberg defense experiments for federated learning.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", *MODES):
        s = sub.add_parser(name, help="run the mode named in the config" if name == "run" else f"run mode {name}")
        s.add_argument("--config", required=(name not in ("agg-bench",)), help="JSON experiment config")
        s.add_argument("--seed-override", type=int, action="append", help="replace the config's seeds (repeatable)")
        s.add_argument("--out", help="output directory (default: the config's output_dir)")
    e = sub.add_parser("export", help="per-group mean/std accuracy curves as CSV")
    e.add_argument("--metrics", nargs="+", required=True)
    e.add_argument("--grouping", default="run")
    e.add_argument("--out", required=True)
    s = sub.add_parser("summary", help="final-round table from metrics files")
    s.add_argument("--metrics", nargs="+", required=True)
    s.add_argument("--out", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = _parser().parse_args(argv)
    if args.command == "export":
        try:
            paths = export_plot_data(args.metrics, args.grouping, args.out)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        for path in paths:
            print(path)
        return 0
    if args.command == "summary":
        try:
            write_summary(args.metrics, args.out)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        return 0

    try:
        if args.config:
            cfg = load_config(args.config)
        else:
            cfg = ExperimentConfig(mode="agg-bench")
        updates = {}
        if args.command != "run":
            updates["mode"] = args.command
        if args.seed_override:
            updates["seeds"] = args.seed_override
        if updates:
            cfg = ExperimentConfig.model_validate({**cfg.model_dump(), **updates})
    except ValidationError as err:
        for line in format_validation_error(err):
            print(f"config error: {line}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return run(cfg, args.out or cfg.output_dir)


if __name__ == "__main__":
    sys.exit(main())
