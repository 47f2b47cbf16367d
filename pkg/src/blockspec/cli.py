"""Command-line harness: run strategies over task files, compare them, and
emit trajectory/metrics/roofline artifacts.

Exit codes (also shown by --help):
  0  success
  2  invalid arguments or malformed input file (message names the field)
  3  usage error detected after parsing (e.g. fewer than two strategies)
  4  decode invariant violation (step dump on stderr)
  1  unexpected internal error
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .decoder import STRATEGIES, RunConfig, decode
from .errors import ConfigError, ProgressError, RangeError, ShapeError
from .layout import build_block_layout, build_spec_layout
from .metrics import (
    HardwareProfile,
    ROOFLINE_CSV_COLUMNS,
    estimate_speedup,
    phase_summary,
    step_cost_records,
    trajectory_metrics,
)
from .model import ModelConfig, ScriptedModel, ScriptedSchedule, ToyModel
from .speculative import Candidate, CandidateSet, SpecSet

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_PARSE = 2
EXIT_USAGE = 3
EXIT_INVARIANT = 4

EPILOG = __doc__


@dataclass(frozen=True)
class TaskRecord:
    id: str
    prompt_tokens: tuple[int, ...]
    note: str = ""


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def load_tasks(path) -> list[TaskRecord]:
    """Parse a JSONL task file; diagnostics carry line and field."""
    tasks: list[TaskRecord] = []
    seen = set()
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as err:
        raise CliError(f"cannot read tasks file {path}: {err}", EXIT_PARSE) from err
    for ln, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as err:
            raise CliError(f"{path}:{ln}: invalid JSON: {err}", EXIT_PARSE) from err
        for key in ("id", "prompt_tokens"):
            if key not in raw:
                raise CliError(f"{path}:{ln}: missing field '{key}'", EXIT_PARSE)
        if not isinstance(raw["prompt_tokens"], list) or not raw["prompt_tokens"]:
            raise CliError(
                f"{path}:{ln}: field 'prompt_tokens' must be a non-empty list", EXIT_PARSE
            )
        task_id = str(raw["id"])
        if task_id in seen:
            raise CliError(f"{path}:{ln}: duplicate task id '{task_id}'", EXIT_PARSE)
        seen.add(task_id)
        tasks.append(
            TaskRecord(
                id=task_id,
                prompt_tokens=tuple(int(t) for t in raw["prompt_tokens"]),
                note=str(raw.get("note", "")),
            )
        )
    if not tasks:
        raise CliError(f"{path}: no tasks found", EXIT_PARSE)
    return tasks


def _load_model(args):
    try:
        cfg = ModelConfig.from_json(args.model_config)
    except (ConfigError, OSError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise CliError(f"model config {args.model_config}: {err}", EXIT_PARSE) from err
    if getattr(args, "scripted", None):
        try:
            schedule = ScriptedSchedule.from_json(
                args.scripted, cfg.vocab_size, cfg.mask_token_id, cfg.eos_token_id
            )
        except (ConfigError, RangeError, OSError, json.JSONDecodeError) as err:
            raise CliError(f"schedule {args.scripted}: {err}", EXIT_PARSE) from err
        return ScriptedModel(cfg, schedule)
    return ToyModel(cfg)


def _load_profile(path) -> HardwareProfile:
    try:
        return HardwareProfile.from_json(path)
    except (ConfigError, OSError, json.JSONDecodeError, ValueError) as err:
        raise CliError(f"profile {path}: {err}", EXIT_PARSE) from err


def _run_config(args, strategy: str) -> RunConfig:
    base = {}
    if getattr(args, "run_config", None):
        try:
            with open(args.run_config) as fh:
                base = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise CliError(f"run config {args.run_config}: {err}", EXIT_PARSE) from err
    base["strategy"] = strategy
    base.setdefault("gen_length", args.gen_length)
    base.setdefault("block_size", args.block_size)
    base.setdefault("accept_threshold", args.accept_threshold)
    base.setdefault("truncate_threshold", args.truncate_threshold)
    if args.stage2_min_decoded is not None:
        base["stage2_min_decoded"] = args.stage2_min_decoded
    base.setdefault("seed", args.seed)
    if getattr(args, "tau_steps", None) is not None:
        base["tau_steps"] = args.tau_steps
    try:
        return RunConfig.from_dict(base)
    except (ConfigError, TypeError) as err:
        raise CliError(f"run config: {err}", EXIT_PARSE) from err


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _decode_task(model, task: TaskRecord, config: RunConfig):
    try:
        return decode(model, list(task.prompt_tokens), config)
    except ProgressError as err:
        raise CliError(f"task {task.id}: invariant violation: {err}", EXIT_INVARIANT) from err
    except (ConfigError, RangeError, ShapeError) as err:
        raise CliError(f"task {task.id}: {err}", EXIT_PARSE) from err


def _dump_masks(out_dir: Path, model, config: RunConfig) -> None:
    """Write representative dense masks (block, stage-1, stage-2 layouts)."""
    masks = out_dir / "masks"
    masks.mkdir(exist_ok=True)
    bs = config.block_size
    start, end = bs, 2 * bs  # pretend prompt of one block
    ctx = [p for p in range(3 * bs) if not (start <= p < end)]
    build_block_layout((start, end), ctx).dump_mask_csv(masks / "mask_block.csv")
    cands = CandidateSet(
        tuple(Candidate(start + bs // 2 + i, 1 + i, 0.5) for i in range(4))
    )
    spec1 = SpecSet.build(CandidateSet(cands.candidates[:2]), stage=1)
    build_spec_layout((start, end), spec1, 1, [], ctx).dump_mask_csv(
        masks / "mask_spec_stage1.csv"
    )
    decoded = list(range(start, start + bs // 4))
    spec2 = SpecSet.build(cands, stage=2)
    build_spec_layout((start, end), spec2, 2, decoded, ctx).dump_mask_csv(
        masks / "mask_spec_stage2.csv"
    )


def cmd_run(args) -> int:
    tasks = load_tasks(args.tasks)
    model = _load_model(args)
    config = _run_config(args, args.strategy)
    profile = _load_profile(args.profile) if args.profile else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = {"strategy": args.strategy, "run_config": config.to_dict(), "tasks": {}}
    metrics_rows = []
    roofline_rows = []
    for task in tasks:
        traj = _decode_task(model, task, config)
        _write_json(out_dir / f"trajectory_{task.id}.json", traj.to_dict())
        entry = {
            "nfe": traj.nfe,
            "total_jumps": traj.total_jumps,
            "prefill_steps": traj.prefill_steps,
            "gen_length_final": traj.gen_length_final,
            "truncations": len(traj.truncations),
        }
        if profile is not None:
            report = trajectory_metrics(traj, profile)
            entry["metrics"] = report.to_dict()
            metrics_rows.append({"task": task.id, **report.to_dict()})
            for i, rec in enumerate(step_cost_records(traj, profile)):
                roofline_rows.append(
                    [task.id, i, rec.phase, rec.t_tokens, rec.c_tokens,
                     repr(rec.flops), repr(rec.bytes), repr(rec.arithmetic_intensity),
                     rec.bound, repr(rec.est_time_s)]
                )
        summary["tasks"][task.id] = entry
    if profile is not None:
        summary["profile"] = profile.to_dict()
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            cols = ["task"] + list(metrics_rows[0].keys())[1:]
            writer.writerow(cols)
            for row in metrics_rows:
                writer.writerow([_csv_cell(row[c]) for c in cols])
        with open(out_dir / "roofline.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["task"] + list(ROOFLINE_CSV_COLUMNS))
            writer.writerows(roofline_rows)
    _write_json(out_dir / "summary.json", summary)
    if args.dump_mask:
        _dump_masks(out_dir, model, config)
    return EXIT_OK


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def cmd_compare(args) -> int:
    if len(args.strategies) < 2:
        raise CliError("compare needs at least two strategies", EXIT_USAGE)
    for s in args.strategies:
        if s not in STRATEGIES:
            raise CliError(f"unknown strategy '{s}'", EXIT_USAGE)
    if len(set(args.strategies)) != len(args.strategies):
        raise CliError("strategies must be distinct", EXIT_USAGE)
    tasks = load_tasks(args.tasks)
    model = _load_model(args)
    profile = _load_profile(args.profile)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    pairs = [
        (args.strategies[i], args.strategies[j])
        for i in range(len(args.strategies))
        for j in range(i + 1, len(args.strategies))
    ]
    speedup_cols = [f"{b}/{a}" for a, b in pairs]
    table = []
    aggregate = {s: {"nfe": 0, "eff_nfe": 0, "tokens": 0, "truncations": 0, "time": 0.0}
                 for s in args.strategies}
    for task in tasks:
        trajs = {}
        row = {"task": task.id}
        for strategy in args.strategies:
            config = _run_config(args, strategy)
            traj = _decode_task(model, task, config)
            _write_json(out_dir / f"trajectory_{task.id}_{strategy}.json", traj.to_dict())
            report = trajectory_metrics(traj, profile)
            trajs[strategy] = traj
            row[f"{strategy}_nfe"] = report.nfe
            row[f"{strategy}_eff_nfe"] = report.eff_nfe
            row[f"{strategy}_tokens"] = report.tokens_generated
            row[f"{strategy}_truncations"] = report.truncation_count
            agg = aggregate[strategy]
            agg["nfe"] += report.nfe
            agg["eff_nfe"] += report.eff_nfe
            agg["tokens"] += report.tokens_generated
            agg["truncations"] += report.truncation_count
            agg["time"] += report.total_est_time_s
        for a, b in pairs:
            row[f"{b}/{a}"] = estimate_speedup(trajs[a], trajs[b], profile)
        table.append(row)

    agg_speedups = {
        f"{b}/{a}": (aggregate[a]["time"] / aggregate[b]["time"]) for a, b in pairs
    }
    payload = {
        "strategies": list(args.strategies),
        "profile": profile.to_dict(),
        "per_task": table,
        "aggregate": {
            "totals": aggregate,
            "speedups": agg_speedups,
        },
        "speedup_columns": speedup_cols,
    }
    _write_json(out_dir / "compare.json", payload)
    with open(out_dir / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        cols = list(table[0].keys())
        writer.writerow(cols)
        for row in table:
            writer.writerow([_csv_cell(row[c]) for c in cols])
    return EXIT_OK


def cmd_roofline(args) -> int:
    tasks = load_tasks(args.tasks)
    model = _load_model(args)
    config = _run_config(args, args.strategy)
    profile = _load_profile(args.profile)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    summaries = {}
    for task in tasks:
        traj = _decode_task(model, task, config)
        for i, rec in enumerate(step_cost_records(traj, profile)):
            rows.append(
                [task.id, i, rec.phase, rec.t_tokens, rec.c_tokens,
                 repr(rec.flops), repr(rec.bytes), repr(rec.arithmetic_intensity),
                 rec.bound, repr(rec.est_time_s)]
            )
        summaries[task.id] = phase_summary(traj, profile)
    with open(out_dir / "roofline.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task"] + list(ROOFLINE_CSV_COLUMNS))
        writer.writerows(rows)
    _write_json(
        out_dir / "roofline_summary.json",
        {"profile": profile.to_dict(), "balance": profile.balance, "tasks": summaries},
    )
    return EXIT_OK


def cmd_gen_tasks(args) -> int:
    try:
        cfg = ModelConfig.from_json(args.model_config)
    except (ConfigError, OSError, json.JSONDecodeError, KeyError, TypeError) as err:
        raise CliError(f"model config {args.model_config}: {err}", EXIT_PARSE) from err
    if args.count < 1 or args.prompt_len < 1:
        raise CliError("count and prompt-len must be positive", EXIT_USAGE)
    rng = np.random.default_rng(args.seed)
    special = {cfg.mask_token_id, cfg.eos_token_id}
    ordinary = [t for t in range(cfg.vocab_size) if t not in special]
    lines = []
    for i in range(args.count):
        prompt = rng.choice(ordinary, size=args.prompt_len, replace=True)
        lines.append(
            json.dumps(
                {
                    "id": f"task{i:03d}",
                    "prompt_tokens": [int(t) for t in prompt],
                    "note": f"seeded synthetic prompt {i}",
                },
                sort_keys=True,
            )
        )
    Path(args.out).write_text("\n".join(lines) + "\n")

    if args.schedule_out:
        if args.eos_offset is None:
            raise CliError("--schedule-out requires --eos-offset", EXIT_USAGE)
        if not (0 <= args.eos_offset < args.gen_length):
            raise CliError("--eos-offset must lie inside the generation window", EXIT_USAGE)
        positions = {}
        for off in range(args.gen_length):
            pos = args.prompt_len + off
            token = ordinary[(7 + 3 * off) % len(ordinary)]
            positions[str(pos)] = [int(token), args.fill_confidence]
        schedule = {
            "0": {
                "positions": positions,
                "eos": [[args.prompt_len + args.eos_offset, args.eos_confidence]],
            }
        }
        _write_json(Path(args.schedule_out), schedule)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockspec",
        description="Masked-diffusion block decoding harness with speculative jumps and roofline modeling.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_strategy=True):
        p.add_argument("--model-config", required=True, help="model config JSON")
        p.add_argument("--scripted", help="scripted schedule JSON (replaces the toy model)")
        p.add_argument("--tasks", required=True, help="JSONL task file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--run-config", help="RunConfig JSON; flags below override")
        if with_strategy:
            p.add_argument("--strategy", default="fast", choices=STRATEGIES)
        p.add_argument("--gen-length", type=int, default=128)
        p.add_argument("--block-size", type=int, default=32)
        p.add_argument("--accept-threshold", type=float, default=0.9)
        p.add_argument("--truncate-threshold", type=float, default=0.9)
        p.add_argument("--stage2-min-decoded", type=int, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--tau-steps", type=int, default=None)

    p_run = sub.add_parser("run", help="decode every task under one strategy")
    common(p_run)
    p_run.add_argument("--profile", help="hardware profile JSON (enables cost outputs)")
    p_run.add_argument("--dump-mask", action="store_true",
                       help="dump dense attention masks as 0/1 CSV grids")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several strategies and tabulate speedups")
    common(p_cmp, with_strategy=False)
    p_cmp.add_argument("--strategies", nargs="+", required=True)
    p_cmp.add_argument("--profile", required=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_roof = sub.add_parser("roofline", help="per-step cost records and phase summary")
    common(p_roof)
    p_roof.add_argument("--profile", required=True)
    p_roof.set_defaults(func=cmd_roofline)

    p_gen = sub.add_parser("gen-tasks", help="generate seeded synthetic tasks (and optional schedules)")
    p_gen.add_argument("--model-config", required=True)
    p_gen.add_argument("--count", type=int, default=3)
    p_gen.add_argument("--prompt-len", type=int, default=16)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--gen-length", type=int, default=128)
    p_gen.add_argument("--eos-offset", type=int, default=None,
                       help="response offset of a scripted high-confidence EOS")
    p_gen.add_argument("--eos-confidence", type=float, default=0.99)
    p_gen.add_argument("--fill-confidence", type=float, default=0.95)
    p_gen.add_argument("--schedule-out", help="write a constant scripted schedule JSON")
    p_gen.set_defaults(func=cmd_gen_tasks)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.code
    except Exception as err:  # pragma: no cover - last-resort diagnostics
        print(f"internal error: {err!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
