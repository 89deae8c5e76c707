"""Command-line entry point: ``intuit <command>``.

Every artifact gets a sibling ``*.manifest.json`` naming the config hash,
seed and git describe string that produced it. Stages refuse to consume
inputs whose manifest disagrees with the current config unless
``--override`` is given.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import subprocess
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import RunConfig, load_config
from .worldgen import (
    SPLITS,
    config_dict,
    generate_splits,
    instance_records,
    instances_from_records,
    read_jsonl,
    teacher_dataset,
    traces_from_records,
    write_jsonl,
)

log = logging.getLogger("intuit")


class StageOrderError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# provenance


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            timeout=10,
            cwd=Path(__file__).resolve().parent,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path(artifact: Path) -> Path:
    artifact = Path(artifact)
    return artifact.with_name(artifact.name.split(".")[0] + ".manifest.json")


def write_manifest(artifact: Path, cfg: RunConfig, kind: str, inputs: dict[str, Path], extra: dict | None = None) -> None:
    body = {
        "artifact": Path(artifact).name,
        "kind": kind,
        "sha256": sha256_file(artifact),
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "git_describe": git_describe(),
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(inputs.items())},
        **(extra or {}),
    }
    manifest_path(artifact).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def require(artifact: Path, cfg: RunConfig, override: bool, what: str) -> dict:
    """Check an input artifact against its manifest and the current config."""
    artifact = Path(artifact)
    if not artifact.exists():
        raise StageOrderError(f"{what} not found at {artifact}; run the earlier stage first")
    mpath = manifest_path(artifact)
    problems = []
    manifest: dict = {}
    if not mpath.exists():
        problems.append(f"no manifest next to {artifact}")
    else:
        manifest = json.loads(mpath.read_text())
        if manifest.get("config_hash") != cfg.hash():
            problems.append(f"{what} was built with config {manifest.get('config_hash')}, current config is {cfg.hash()}")
        if manifest.get("sha256") != sha256_file(artifact):
            problems.append(f"{artifact} does not match the checksum in its manifest")
    if problems:
        if not override:
            raise StageOrderError("; ".join(problems) + " (pass --override to proceed anyway)")
        for p in problems:
            log.warning("override: %s", p)
    return manifest


def _csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _mkdir(path: Path) -> Path:
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    world = cfg.world_seeded
    out = _mkdir(Path(cfg.paths.data_dir))
    splits = generate_splits(world, cfg.sizes)
    for name in SPLITS:
        traces = teacher_dataset(splits[name], world, budget=cfg.sampler.max_trace_tokens) if name == "cold_start" else None
        path = out / f"{name}.jsonl"
        write_jsonl(path, instance_records(splits[name], traces))
        write_manifest(path, cfg, "dataset", {}, {"split": name, "records": len(splits[name]), "world": config_dict(world)})
        print(f"wrote {path} ({len(splits[name])} records)")
    return 0


def _load_split(cfg: RunConfig, name: str, override: bool):
    path = cfg.paths.data(f"{name}.jsonl")
    require(path, cfg, override, f"{name} data")
    return path, read_jsonl(path)


def cmd_train(cfg: RunConfig, args) -> int:
    from .pipeline import train_stage3
    from .stages import CalibrationRecord, train_cold_start, train_grpo

    world = cfg.world_seeded
    out = _mkdir(Path(cfg.paths.checkpoint_dir))
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed}
    if args.stage == "cold-start":
        path, recs = _load_split(cfg, "cold_start", args.override)
        from .reasoner import PolicyModel

        policy = PolicyModel(cfg.model_config, seed=cfg.seed)
        curve = train_cold_start(policy, instances_from_records(recs), traces_from_records(recs), cfg.hp, world.vocab)
        policy.snap_to_float32()
        target = cfg.paths.checkpoint("stage1")
        _mkdir(target.parent)
        ckpt.save_policy(policy, target, meta)
        (out / "stage1_loss.csv").write_text(_csv([{"epoch": i, "loss": v} for i, v in enumerate(curve)]))
        write_manifest(target, cfg, "policy", {"cold_start_data": path}, {"stage": "stage1", "stats_csv": "stage1_loss.csv"})
    elif args.stage == "grpo":
        src = cfg.paths.checkpoint("stage1")
        require(src, cfg, args.override, "stage-1 checkpoint")
        path, recs = _load_split(cfg, "grpo", args.override)
        policy, _ = ckpt.load_policy(src)
        reference = None
        if cfg.hp.kl_coef > 0:
            reference, _ = ckpt.load_policy(src)
        stats = train_grpo(policy, instances_from_records(recs), cfg.hp, cfg.rewards, world, reference=reference,
                           callback=lambda s: log.info("round %d mean reward %.3f", s.round, s.mean_reward))
        policy.snap_to_float32()
        target = cfg.paths.checkpoint("stage2")
        _mkdir(target.parent)
        ckpt.save_policy(policy, target, meta)
        (out / "stage2_rounds.csv").write_text(_csv([s.to_row() for s in stats]))
        write_manifest(target, cfg, "policy", {"stage1": src, "grpo_data": path}, {"stage": "stage2", "stats_csv": "stage2_rounds.csv"})
    else:
        src = cfg.paths.checkpoint("stage2")
        require(src, cfg, args.override, "stage-2 checkpoint")
        data = cfg.paths.data("calibration_records.jsonl")
        require(data, cfg, args.override, "calibration records")
        records = [CalibrationRecord.from_record(r) for r in read_jsonl(data)]
        policy, _ = ckpt.load_policy(src)
        calibrator, curve = train_stage3(cfg, records, policy)
        target = cfg.paths.checkpoint("calibrator")
        _mkdir(target.parent)
        ckpt.save_calibrator(calibrator, target, meta)
        (out / "stage3_loss.csv").write_text(_csv([{"epoch": i, "loss": v} for i, v in enumerate(curve)]))
        write_manifest(target, cfg, "calibrator", {"stage2": src, "calibration_records": data}, {"stage": "stage3", "stats_csv": "stage3_loss.csv"})
    print(f"wrote {target}")
    return 0


def cmd_build_cal_data(cfg: RunConfig, args) -> int:
    from .stages import build_calibration_dataset, teacher_calibration_records

    world = cfg.world_seeded
    path, recs = _load_split(cfg, "calibration", args.override)
    instances = instances_from_records(recs)
    inputs = {"calibration_data": path}
    if args.source == "teacher":
        records = teacher_calibration_records(instances, teacher_dataset(instances, world, budget=cfg.sampler.max_trace_tokens))
    else:
        src = cfg.paths.checkpoint("stage2")
        require(src, cfg, args.override, "stage-2 checkpoint")
        policy, _ = ckpt.load_policy(src)
        records = build_calibration_dataset(policy, instances, cfg.hp, world)
        inputs["stage2"] = src
    target = cfg.paths.data("calibration_records.jsonl")
    write_jsonl(target, [r.to_record() for r in records])
    write_manifest(target, cfg, "calibration-records", inputs, {"source": args.source, "records": len(records)})
    print(f"wrote {target} ({len(records)} records)")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    from .evaluation import correction_rates
    from .pipeline import evaluate_calibrator, evaluate_policy

    path, recs = _load_split(cfg, "eval", args.override)
    instances = instances_from_records(recs)
    inputs = {"eval_data": path}
    reports = {}
    s1 = cfg.paths.checkpoint("stage1")
    if s1.exists():
        require(s1, cfg, args.override, "stage-1 checkpoint")
        p1, _ = ckpt.load_policy(s1)
        reports["stage1_provisional"] = evaluate_policy(cfg, p1, instances)[1]
        inputs["stage1"] = s1
    s2 = cfg.paths.checkpoint("stage2")
    require(s2, cfg, args.override, "stage-2 checkpoint")
    p2, _ = ckpt.load_policy(s2)
    trajs, reports["stage2_provisional"] = evaluate_policy(cfg, p2, instances)
    inputs["stage2"] = s2
    extra = {}
    cal = cfg.paths.checkpoint("calibrator")
    if cal.exists():
        require(cal, cfg, args.override, "calibrator checkpoint")
        calibrator, _ = ckpt.load_calibrator(cal)
        dists, reports["calibrated"] = evaluate_calibrator(cfg, calibrator, instances, trajs)
        extra = correction_rates([t.provisional for t in trajs], dists.argmax(axis=1), [i.y for i in instances])
        inputs["calibrator"] = cal
    out = _mkdir(cfg.paths.report())
    target = out / "metrics.json"
    body = {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "reports": {k: r.to_dict() for k, r in reports.items()},
        "macro_f1": {k: r.macro_f1 for k, r in reports.items()},
        **extra,
    }
    target.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    write_manifest(target, cfg, "metrics", inputs)
    for k, r in reports.items():
        print(f"{k:20s} macro-F1 {100 * r.macro_f1:6.2f}  accuracy {100 * r.accuracy:6.2f}  ECE {r.ece:.3f}")
    print(f"wrote {target}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    from . import evaluation as ev

    harness = {
        "length-sweep": lambda c: ev.run_length_sweep(c, budgets=tuple(args.budgets)),
        "source": ev.run_source_ablation,
        "imitation-vs-calibration": ev.run_imitation_vs_calibration,
        "tau-sweep": lambda c: ev.run_tau_sweep(c, taus=tuple(args.taus)),
    }[args.which]
    table = ev.AblationTable()
    for seed in args.seeds or [cfg.seed]:
        for row in harness(cfg.with_seed(seed)):
            table.add(row)
    out = _mkdir(cfg.paths.report())
    target = out / f"ablation_{args.which}.csv"
    target.write_text(table.to_csv())
    write_manifest(target, cfg, "ablation", {}, {"which": args.which, "seeds": args.seeds or [cfg.seed]})
    print(table.to_csv(), end="")
    print(f"wrote {target}")
    return 0


def cmd_verify(cfg: RunConfig, args) -> int:
    from .verify import run_all

    checks = run_all(quick=not args.full)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return 1 if failed else 0


def cmd_show_config(cfg: RunConfig, args) -> int:
    print(cfg.to_ini(), end="")
    print(f"# config hash {cfg.hash()}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intuit", description="Three-stage reasoning and calibration lab on a synthetic world.")
    p.add_argument("--config", "-c", help="INI config file (missing keys keep their defaults)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one config value")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="write the four dataset splits as JSON Lines").set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("stage", choices=["cold-start", "grpo", "calibration"])
    t.add_argument("--override", action="store_true", help="accept inputs whose manifest does not match the config")
    t.set_defaults(func=cmd_train)

    b = sub.add_parser("build-cal-data", help="sample calibration records from the stage-2 policy")
    b.add_argument("--source", choices=["rollout", "teacher"], default="rollout")
    b.add_argument("--override", action="store_true")
    b.set_defaults(func=cmd_build_cal_data)

    e = sub.add_parser("eval", help="score checkpoints on the eval split")
    e.add_argument("--override", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation harness and write a CSV table")
    a.add_argument("which", choices=["length-sweep", "source", "imitation-vs-calibration", "tau-sweep"])
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--budgets", type=int, nargs="+", default=[0, 16, 48, 128])
    a.add_argument("--taus", type=float, nargs="+", default=[0.25, 0.5, 1.0, 2.0])
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("verify", help="run the fast invariant suite")
    v.add_argument("--full", action="store_true", help="full-size checks instead of the quick ones")
    v.set_defaults(func=cmd_verify)

    sub.add_parser("show-config", help="print the resolved config with every default").set_defaults(func=cmd_show_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return args.func(cfg, args)
    except Exception as e:  # one machine-readable line, nonzero exit
        print(json.dumps({"error": type(e).__name__, "message": str(e), "command": args.command}), file=sys.stderr)
        if args.verbose:
            raise
        return 2 if isinstance(e, StageOrderError) else 1


if __name__ == "__main__":
    sys.exit(main())
