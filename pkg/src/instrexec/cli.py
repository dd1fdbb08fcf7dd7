"""Command-line entry point: train-skill, train-meta, eval, gradcheck, inspect.

Exit codes: 0 ok, 1 failed check, 2 bad config key, 3 missing checkpoint, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bench.baselines import SCRIPTED, MissingCheckpoint, make_baseline
from .bench.evaluate import evaluate
from .config import ConfigError, derive_seed, load_config
from .env.gridworld import N_ACTIONS
from .env.tables import default_tables, load_tables, use_tables
from .meta import gradcheck_builder, load_meta, save_meta
from .skill import load_skill, save_skill
from .tasks import TaskSplit, build_split
from .tensor import archive
from .tensor.gradcheck import grad_check, run_suite
from .train.curriculum import META_RANGES, SKILL_RANGES, CurriculumState
from .train.meta_training import META_STAGES, train_meta
from .train.skill_training import STAGES, TrainingDiverged, train_skill

AGENT_GATES = {"ours": "learned", "hier_short": "always", "hier_long": "termination", "flat": "flat"}
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4


def _file_id(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _split(cfg):
    if cfg.split.file:
        if not Path(cfg.split.file).exists():
            raise MissingCheckpoint(f"split file not found: {cfg.split.file}")
        return TaskSplit.load(cfg.split.file)
    objects = None
    if cfg.split.objects:
        objects = tuple(default_tables().type_id(n) for n in cfg.split.objects)
    return build_split(cfg.split.scenario, cfg.split.holdout_fraction, cfg.split.seed, objects)


def _manifest(cfg, command, stage, seed, inputs=()):
    tables = default_tables()
    return {
        "command": command,
        "stage": stage,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "stage_seed": seed,
        "tables_id": tables.digest(),
        "inputs": {Path(p).name: _file_id(p) for p in inputs},
        "code_version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }


def _printer(quiet):
    if quiet:
        return None

    def log(row):
        keys = ("iteration", "stage", "loss", "mean_reward", "success_rate", "termination_accuracy", "update_rate",
                "curriculum_tier")
        print(" ".join(f"{k}={row[k]:.4g}" if isinstance(row.get(k), float) else f"{k}={row.get(k)}"
                       for k in keys if k in row), flush=True)
    return log


def _require(path, what):
    if path is None or not Path(path).exists():
        raise MissingCheckpoint(f"{what} checkpoint not found: {path}")
    return path


def cmd_train_skill(args, cfg, out):
    split = _split(cfg)
    scfg = cfg.skill_config(split)
    stages = STAGES if args.stage == "all" else (args.stage,)
    params, inputs = None, []
    if args.init:
        params, scfg, _ = load_skill(_require(args.init, "skill"))
        inputs.append(args.init)
    elif stages[0] == "actor_critic":
        raise MissingCheckpoint("actor_critic fine-tuning starts from a distilled skill (--init)")
    split.save(out / "split.yaml")
    ckpt = None
    for i, stage in enumerate(stages):
        seed = derive_seed(cfg.seed, f"skill/{stage}", i)
        curriculum = None
        if cfg.skill_train.curriculum:
            curriculum = CurriculumState(0, cfg.curriculum_ranges(replace(
                SKILL_RANGES, sizes=tuple(cfg.skill_train.sizes), wall_density=tuple(cfg.skill_train.wall_density),
                object_density=tuple(cfg.skill_train.object_density))))
        manifest = _manifest(cfg, "train-skill", stage, seed, inputs)
        manifest["split"] = split.to_dict()
        try:
            run = train_skill(stage, split, cfg.skill_train, scfg, params, seed, metrics_path=out / "metrics.jsonl",
                              divergence_path=out / f"skill_{stage}_diverged.ckpt", log=_printer(args.quiet),
                              curriculum=curriculum)
        except TrainingDiverged as exc:
            print(f"error: {exc}; last finite checkpoint: {exc.checkpoint}", file=sys.stderr)
            return EXIT_DIVERGED
        params = run.params
        ckpt = out / f"skill_{stage}.ckpt"
        save_skill(ckpt, params, scfg, seed, manifest)
        inputs = [ckpt]
    final = out / "skill.ckpt"
    final.write_bytes(Path(ckpt).read_bytes())
    (out / "manifest.json").write_text(json.dumps(archive.load(final)[2], indent=1, sort_keys=True))
    print(f"wrote {final}")
    return EXIT_OK


def cmd_train_meta(args, cfg, out):
    split = _split(cfg)
    flat = args.agent == "flat"
    skill, inputs = None, []
    if flat:
        meta_cfg = cfg.meta_config((N_ACTIONS,))
    else:
        skill_path = _require(args.skill, "skill")
        skill_params, scfg, skill_manifest = load_skill(skill_path)
        skill, inputs = (skill_params, scfg), [skill_path]
        if "split" in skill_manifest and not args.split_from_config:
            split = TaskSplit.from_dict(skill_manifest["split"])
        meta_cfg = cfg.meta_config((split.space.n_actions, split.space.n_objects))
    stages = META_STAGES if args.stage == "all" else (args.stage,)
    params, base_inputs = None, list(inputs)
    if args.init:
        params, meta_cfg, _ = load_meta(_require(args.init, "meta"))
        inputs.append(args.init)
    elif stages[0] != "soft":
        raise MissingCheckpoint(f"{stages[0]} starts from a soft-trained controller (--init)")
    ckpt = None
    for i, stage in enumerate(stages):
        seed = derive_seed(cfg.seed, f"meta/{stage}", i)
        curriculum = CurriculumState(0, cfg.curriculum_ranges(META_RANGES))
        manifest = _manifest(cfg, "train-meta", stage, seed, inputs)
        manifest["split"] = split.to_dict()
        manifest["agent"] = args.agent
        try:
            run = train_meta(stage, skill, split, cfg.meta_train, meta_cfg, params, seed,
                             metrics_path=out / "metrics.jsonl", divergence_path=out / f"meta_{stage}_diverged.ckpt",
                             log=_printer(args.quiet), curriculum=curriculum, gate=AGENT_GATES[args.agent])
        except TrainingDiverged as exc:
            print(f"error: {exc}; last finite checkpoint: {exc.checkpoint}", file=sys.stderr)
            return EXIT_DIVERGED
        params = run.params
        ckpt = out / f"meta_{stage}.ckpt"
        save_meta(ckpt, params, meta_cfg, seed, manifest)
        inputs = base_inputs + [ckpt]
    final = out / "meta.ckpt"
    final.write_bytes(Path(ckpt).read_bytes())
    (out / "manifest.json").write_text(json.dumps(archive.load(final)[2], indent=1, sort_keys=True))
    print(f"wrote {final}")
    return EXIT_OK


def cmd_eval(args, cfg, out):
    split = _split(cfg)
    if args.skill and Path(args.skill).exists() and not args.split_from_config:
        manifest = archive.load(args.skill)[2] or {}
        if "split" in manifest:
            split = TaskSplit.from_dict(manifest["split"])
    ec = cfg.eval
    agents = {}
    seed = derive_seed(cfg.seed, "eval", 0) % 2**31
    for kind in ec.agents:
        if kind in SCRIPTED:
            agents[kind] = make_baseline(kind, engage_radius=ec.engage_radius)
            continue
        skill = None if kind == "flat" else _require(args.skill, f"skill (needed by {kind})")
        per_agent = dict(x.split("=", 1) for x in args.agent_ckpt)
        meta = per_agent.get(kind) or (args.flat_meta if kind == "flat" else args.meta)
        agents[kind] = make_baseline(kind, skill, _require(meta, f"controller ({kind})"), ec.mode, seed, ec.greedy)
    report = evaluate(agents, split, list(ec.instruction_counts), ec.episodes_per_cell, seed, ec.world, cfg.workers)
    report.save(out)
    inputs = [p for p in (args.skill, args.meta, args.flat_meta) if p]
    inputs += [x.split("=", 1)[1] for x in args.agent_ckpt]
    (out / "manifest.json").write_text(json.dumps(_manifest(cfg, "eval", None, seed, inputs), indent=1,
                                                  sort_keys=True))
    print(report.to_text())
    return EXIT_OK


def cmd_gradcheck(args, cfg, out):
    seeds = range(args.seeds)
    reports = run_suite(seeds=seeds)
    reports += [grad_check(gradcheck_builder("soft"), seed=s, name=f"meta_step_soft[seed={s}]") for s in seeds]
    lines = []
    for r in reports:
        lines += r.lines()
    ok = all(r.passed for r in reports)
    summary = f"{sum(r.passed for r in reports)}/{len(reports)} checks passed, " \
              f"max rel err {max(r.max_rel_err for r in reports):.2e}"
    lines.append(summary)
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines if args.verbose else [summary]))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_inspect(args, cfg, out):
    path = _require(args.path, "input")
    entries, seed, manifest = archive.load(path)
    info = {"path": str(path), "id": _file_id(path), "seed": seed, "manifest": manifest,
            "tensors": {k: list(np.shape(v)) for k, v in entries.items()}}
    print(json.dumps(info, indent=1, sort_keys=True, default=str))
    return EXIT_OK


COMMANDS = {"train-skill": cmd_train_skill, "train-meta": cmd_train_meta, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--out", default="runs/latest", help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--quiet", action="store_true")
    parser = argparse.ArgumentParser(prog="instrexec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train-skill", parents=[common], help="distill then fine-tune the parameterized skill")
    p.add_argument("--stage", choices=STAGES + ("all",), default="all")
    p.add_argument("--init", help="skill checkpoint to continue from")
    p = sub.add_parser("train-meta", parents=[common], help="train the meta controller on a frozen skill")
    p.add_argument("--skill", help="skill checkpoint (required except for the flat agent)")
    p.add_argument("--agent", choices=tuple(AGENT_GATES), default="ours", help="controller variant to train")
    p.add_argument("--stage", choices=META_STAGES + ("all",), default="all")
    p.add_argument("--init", help="controller checkpoint to continue from")
    p.add_argument("--split-from-config", action="store_true", help="ignore the split stored with the skill")
    p = sub.add_parser("eval", parents=[common], help="evaluate agents on paired seeds")
    p.add_argument("--skill", help="skill checkpoint for hierarchical agents")
    p.add_argument("--meta", help="controller checkpoint for ours / hier_short / hier_long")
    p.add_argument("--flat-meta", help="controller checkpoint for the flat agent")
    p.add_argument("--agent-ckpt", action="append", default=[], metavar="KIND=PATH",
                   help="controller checkpoint for one agent kind, repeatable")
    p.add_argument("--split-from-config", action="store_true", help="ignore the split stored with the skill")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and a meta step")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--verbose", action="store_true")
    p = sub.add_parser("inspect", parents=[common], help="print a checkpoint manifest")
    p.add_argument("path")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set, args.seed)
        if cfg.tables_file:
            use_tables(load_tables(_require(cfg.tables_file, "tables")))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](args, cfg, out)
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
