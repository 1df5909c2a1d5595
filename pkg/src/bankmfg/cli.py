"""Command-line runner tying training, rollout, and evaluation together.

Four subcommands operate on one run document (default: the shipped
benchmark profile): ``train`` writes checkpoints and the loss log,
``rollout`` exports trajectory CSVs from a checkpoint, ``evaluate`` writes
a best-response exploitability report, and ``project-demo`` projects an
empirical measure file onto the lattice.  Every command takes a lock on
its output directory, writes a run manifest before doing any work, and
finalizes it afterwards with SHA-256 hashes of the files it wrote.  All
emitted artifacts are validated against the schemas shipped in-repo.

Exit codes: 0 on success, 2 for configuration and usage errors, 1 for
operational failures (held locks, missing files, invalid inputs).
"""

import argparse
import hashlib
import json
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import ArtifactError, validate_csv, validate_json
from .config import (
    ConfigError,
    default_profile_path,
    load_run_config,
    subsystem_seeds,
)
from .evaluate import (
    exploitability_report,
    policies_from_checkpoint,
    rollout,
    write_report_json,
    write_trajectories_csv,
)
from .measures import EmpiricalMeasure, project
from .trainer import FictitiousPlayTrainer

_LOCK_NAME = ".bankmfg.lock"
_MANIFEST_NAME = "run_manifest.json"


class CliError(Exception):
    """A command failed for an operational (non-configuration) reason."""


# ---------------------------------------------------------------------------
# shared command plumbing


@contextmanager
def _directory_lock(out_dir):
    """One command at a time per output directory, via an exclusive file."""
    lock = out_dir / _LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(
            f"output directory {out_dir} is locked by another command "
            f"({lock}); remove the stale lock file if none is running")
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _utc_now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out_dir, doc):
    validate_json("run_manifest", doc)
    (out_dir / _MANIFEST_NAME).write_text(json.dumps(doc, indent=2) + "\n")


def _begin_manifest(command, cfg, cfg_path, seed, out_dir):
    echo = dict(cfg.raw)
    echo["seed"] = seed
    echo["output_dir"] = str(out_dir)
    doc = {
        "command": command,
        "version": __version__,
        "config_path": str(cfg_path),
        "config": echo,
        "seed": seed,
        "out_dir": str(out_dir),
        "started_at": _utc_now(),
        "status": "running",
    }
    _write_manifest(out_dir, doc)
    return doc


def _finalize_manifest(doc, out_dir, written, status):
    doc["status"] = status
    doc["finished_at"] = _utc_now()
    doc["artifacts"] = {
        name: _sha256(out_dir / name)
        for name in sorted(written) if (out_dir / name).exists()
    }
    _write_manifest(out_dir, doc)


def _run_command(command, args, body):
    """Load config, lock the output directory, bracket ``body`` with the
    run manifest; ``body(cfg, seed, out_dir)`` returns (written, summary)."""
    cfg_path = args.config if args.config else str(default_profile_path())
    cfg = load_run_config(cfg_path)
    seed = cfg.seed if getattr(args, "seed", None) is None else args.seed
    out_dir = Path(args.out if args.out else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with _directory_lock(out_dir):
        doc = _begin_manifest(command, cfg, cfg_path, seed, out_dir)
        try:
            written, summary = body(cfg, seed, out_dir)
        except Exception:
            _finalize_manifest(doc, out_dir, [], "failed")
            raise
        _finalize_manifest(doc, out_dir, written, "complete")
    print(summary)
    return 0


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    def body(cfg, seed, out_dir):
        train_cfg = replace(cfg.train, seed=subsystem_seeds(seed)["train"])
        trainer = FictitiousPlayTrainer(cfg.params, cfg.chain, cfg.grid,
                                        train_cfg, init=cfg.init,
                                        out_dir=out_dir)
        trainer.train(progress=False)
        train_manifest = json.loads((out_dir / "manifest.json").read_text())
        validate_json("train_manifest", train_manifest)
        written = list(train_manifest["artifacts"]) + ["manifest.json"]
        validate_csv("losses", out_dir / "losses.csv")
        for name in written:
            if name.startswith("checkpoint_"):
                validate_json("checkpoint",
                              json.loads((out_dir / name).read_text()))
        summary = (f"train: wrote {len(written)} artifacts to {out_dir} "
                   f"({len(trainer.records)} loss records)")
        return written, summary

    return _run_command("train", args, body)


def cmd_rollout(args):
    def body(cfg, seed, out_dir):
        policies, _ = policies_from_checkpoint(args.checkpoint, cfg.params,
                                               cfg.grid)
        mode = args.mode if args.mode else cfg.rollout_mode
        if mode == "sampled":
            rng = np.random.default_rng(subsystem_seeds(seed)["rollout"])
            trajectories = rollout(policies, cfg.params, cfg.chain, cfg.grid,
                                   init=cfg.init, mode="sampled",
                                   n_paths=cfg.rollout_paths, rng=rng)
        else:
            trajectories = rollout(policies, cfg.params, cfg.chain, cfg.grid,
                                   init=cfg.init, mode="full-tree")
        path = out_dir / "trajectories.csv"
        write_trajectories_csv(trajectories, path)
        validate_csv("trajectories", path)
        summary = (f"rollout: {len(trajectories)} {mode} paths over "
                   f"{cfg.params.horizon_T} epochs in {path}")
        return ["trajectories.csv"], summary

    return _run_command("rollout", args, body)


def cmd_evaluate(args):
    def body(cfg, seed, out_dir):
        policies, meta = policies_from_checkpoint(args.checkpoint, cfg.params,
                                                  cfg.grid)
        # best responses search the same action grid the networks trained on
        action_grid = np.asarray(meta["action_grid"], dtype=float)
        report = exploitability_report(
            policies, cfg.params, cfg.chain, cfg.grid, init=cfg.init,
            action_grid=action_grid,
            p_grid_points=cfg.eval_p_grid_points,
            major_horizon=cfg.eval_major_horizon,
            major_budget=cfg.eval_major_budget)
        payload = {"major": asdict(report.major),
                   "minor": asdict(report.minor)}
        validate_json("exploitability_report", payload)
        path = out_dir / "exploitability.json"
        write_report_json(report, path)
        summary = (f"evaluate: minor gap {report.minor.gap_abs:.3e} "
                   f"(relative {report.minor.gap_rel:.3e}), major gap "
                   f"{report.major.gap_abs:.3e}; report in {path}")
        return ["exploitability.json"], summary

    return _run_command("evaluate", args, body)


def cmd_project_demo(args):
    def body(cfg, seed, out_dir):
        try:
            data = json.loads(Path(args.measure).read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"{args.measure} is not valid JSON: {e}")
        validate_json("empirical_measure", data)
        mu = EmpiricalMeasure(np.asarray(data["p"], dtype=float),
                              np.asarray(data["r"], dtype=float),
                              np.asarray(data["w"], dtype=float))
        projected = project(mu, cfg.grid)
        payload = {
            "p_points": [float(x) for x in cfg.grid.p_points],
            "r_points": [float(x) for x in cfg.grid.r_points],
            "weights": [float(x) for x in projected.weights],
            "mass": float(projected.weights.sum()),
        }
        validate_json("projected_measure", payload)
        path = out_dir / "projected_measure.json"
        path.write_text(json.dumps(payload, indent=2) + "\n")
        summary = (f"project-demo: {len(mu.w)} atoms onto "
                   f"{cfg.grid.n_nodes} nodes in {path}")
        return ["projected_measure.json"], summary

    return _run_command("project-demo", args, body)


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="bankmfg",
        description="Train, roll out, and evaluate the deposit-rate "
                    "major-minor mean-field game solver.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="command")

    def common(p, checkpoint=False, mode=False):
        p.add_argument("--config", metavar="PATH",
                       help="run document (default: the shipped benchmark "
                            "profile)")
        p.add_argument("--seed", type=int, metavar="N",
                       help="root seed override (default: the config's seed)")
        p.add_argument("--out", metavar="DIR",
                       help="output directory override (default: the "
                            "config's output_dir)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, metavar="PATH",
                           help="checkpoint file holding the policies")
        if mode:
            p.add_argument("--mode", choices=("full-tree", "sampled"),
                           help="trajectory mode override")

    p = sub.add_parser("train", help="run fictitious-play training, write "
                                     "checkpoints and the loss log")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="export policy trajectories to CSV")
    common(p, checkpoint=True, mode=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="write a best-response "
                                        "exploitability report")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("project-demo", help="project an empirical measure "
                                            "file onto the lattice")
    p.add_argument("measure", metavar="MEASURE",
                   help="JSON file with atom arrays p, r, w")
    common(p)
    p.set_defaults(func=cmd_project_demo)
    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:  # argparse has already printed its message
        return int(e.code) if e.code else 0
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (CliError, ArtifactError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
