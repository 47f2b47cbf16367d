import csv
import json
from pathlib import Path

import pytest

from blockspec.cli import main

from conftest import TOY


@pytest.fixture
def workdir(tmp_path):
    model = tmp_path / "model.json"
    model.write_text(json.dumps(TOY, sort_keys=True))
    profile = tmp_path / "profile.json"
    profile.write_text(json.dumps(
        {"name": "test", "peak_flops": 312e12, "mem_bandwidth": 2.039e12}
    ))
    tasks = tmp_path / "tasks.jsonl"
    lines = [
        json.dumps({"id": f"t{i}", "prompt_tokens": [1 + i, 2, 3, 4]})
        for i in range(3)
    ]
    tasks.write_text("\n".join(lines) + "\n")
    return tmp_path, model, profile, tasks


def read_dir(path: Path) -> dict:
    return {
        p.relative_to(path).as_posix(): p.read_bytes()
        for p in sorted(path.rglob("*"))
        if p.is_file()
    }


def base_args(model, tasks, out, extra=()):
    return [
        "--model-config", str(model), "--tasks", str(tasks), "--out", str(out),
        "--gen-length", "64", "--block-size", "32",
        "--accept-threshold", "0.05", "--seed", "3", *extra,
    ]


def test_run_writes_one_trajectory_per_task(workdir):
    tmp, model, profile, tasks = workdir
    out = tmp / "out_run"
    code = main(["run", *base_args(model, tasks, out), "--strategy", "fast",
                 "--profile", str(profile)])
    assert code == 0
    names = set(read_dir(out))
    assert {"summary.json", "metrics.csv", "roofline.csv",
            "trajectory_t0.json", "trajectory_t1.json", "trajectory_t2.json"} <= names
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["tasks"]) == {"t0", "t1", "t2"}


def test_run_twice_is_byte_identical(workdir):
    tmp, model, profile, tasks = workdir
    out1, out2 = tmp / "o1", tmp / "o2"
    for out in (out1, out2):
        code = main(["run", *base_args(model, tasks, out), "--strategy", "fast",
                     "--profile", str(profile), "--dump-mask"])
        assert code == 0
    assert read_dir(out1) == read_dir(out2)


def test_run_rejects_malformed_task_file(workdir, capsys):
    tmp, model, _, _ = workdir
    bad = tmp / "bad.jsonl"
    bad.write_text('{"id": "x"}\n')
    code = main(["run", *base_args(model, bad, tmp / "nope"), "--strategy", "fast"])
    assert code == 2
    err = capsys.readouterr().err
    assert "prompt_tokens" in err and "bad.jsonl:1" in err


def test_run_rejects_bad_json_line(workdir, capsys):
    tmp, model, _, _ = workdir
    bad = tmp / "bad2.jsonl"
    bad.write_text("{not json}\n")
    code = main(["run", *base_args(model, bad, tmp / "nope"), "--strategy", "fast"])
    assert code == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_compare_emits_all_pair_speedups(workdir):
    tmp, model, profile, tasks = workdir
    out = tmp / "out_cmp"
    code = main(["compare", *base_args(model, tasks, out),
                 "--strategies", "vanilla", "fast", "odb",
                 "--profile", str(profile)])
    assert code == 0
    payload = json.loads((out / "compare.json").read_text())
    assert payload["speedup_columns"] == ["fast/vanilla", "odb/vanilla", "odb/fast"]
    with open(out / "compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    for col in ("fast/vanilla", "odb/vanilla", "odb/fast"):
        assert col in rows[0]
    for strategy in ("vanilla", "fast", "odb"):
        assert (out / f"trajectory_t0_{strategy}.json").exists()


def test_compare_requires_two_strategies(workdir, capsys):
    tmp, model, profile, tasks = workdir
    code = main(["compare", *base_args(model, tasks, tmp / "x"),
                 "--strategies", "fast", "--profile", str(profile)])
    assert code == 3
    assert "two strategies" in capsys.readouterr().err


def test_roofline_rows_alternate_per_block_cycle(workdir):
    tmp, model, profile, tasks = workdir
    out = tmp / "out_roof"
    code = main(["roofline", *base_args(model, tasks, out), "--strategy", "fast",
                 "--profile", str(profile)])
    assert code == 0
    with open(out / "roofline.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["task"] == "t0"]
    phases = [r["phase"] for r in rows]
    # per block cycle: one prefill row then decode rows
    assert phases[0] == "prefill"
    assert phases.count("prefill") == 2  # 64 tokens / 32 per block
    idx = [i for i, p in enumerate(phases) if p == "prefill"]
    for i in idx[1:]:
        assert phases[i - 1] == "decode"
    summary = json.loads((out / "roofline_summary.json").read_text())
    t0 = summary["tasks"]["t0"]
    assert t0["prefill"]["mean_ai"] > t0["decode"]["mean_ai"]


def test_roofline_tiny_bandwidth_is_all_compute(workdir):
    tmp, model, _, tasks = workdir
    tiny = tmp / "tiny.json"
    tiny.write_text(json.dumps(
        {"name": "tiny-bw", "peak_flops": 1.0, "mem_bandwidth": 1e15}
    ))
    out = tmp / "out_tiny"
    code = main(["roofline", *base_args(model, tasks, out), "--strategy", "fast",
                 "--profile", str(tiny)])
    assert code == 0
    with open(out / "roofline.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["bound"] == "compute" for r in rows)


def test_dump_mask_writes_grids(workdir):
    tmp, model, profile, tasks = workdir
    out = tmp / "out_masks"
    code = main(["run", *base_args(model, tasks, out), "--strategy", "fast",
                 "--dump-mask"])
    assert code == 0
    for name in ("mask_block.csv", "mask_spec_stage1.csv", "mask_spec_stage2.csv"):
        grid = (out / "masks" / name).read_text().splitlines()
        assert len(grid) > 1


def test_gen_tasks_and_schedule(workdir):
    tmp, model, _, _ = workdir
    tasks_out = tmp / "gen.jsonl"
    sched_out = tmp / "sched.json"
    code = main(["gen-tasks", "--model-config", str(model), "--count", "2",
                 "--prompt-len", "8", "--seed", "5", "--out", str(tasks_out),
                 "--gen-length", "128", "--eos-offset", "87",
                 "--schedule-out", str(sched_out)])
    assert code == 0
    lines = tasks_out.read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert len(rec["prompt_tokens"]) == 8
    assert TOY["mask_token_id"] not in rec["prompt_tokens"]
    sched = json.loads(sched_out.read_text())
    assert sched["0"]["eos"] == [[8 + 87, 0.99]]
    # regenerating with the same seed is identical
    tasks_out2 = tmp / "gen2.jsonl"
    main(["gen-tasks", "--model-config", str(model), "--count", "2",
          "--prompt-len", "8", "--seed", "5", "--out", str(tasks_out2),
          "--gen-length", "128"])
    assert tasks_out.read_text() == tasks_out2.read_text()


def test_scripted_alp_compare_consistency(workdir):
    """The compare table's odb/fast column equals estimate_speedup on the
    same trajectories (cross-module consistency on the ALP scenario)."""
    from blockspec import (
        HardwareProfile,
        ModelConfig,
        RunConfig,
        ScriptedModel,
        ScriptedSchedule,
        decode,
        estimate_speedup,
    )

    tmp, model, profile, _ = workdir
    sched_out = tmp / "sched.json"
    tasks_out = tmp / "alp_tasks.jsonl"
    main(["gen-tasks", "--model-config", str(model), "--count", "1",
          "--prompt-len", "8", "--seed", "5", "--out", str(tasks_out),
          "--gen-length", "256", "--eos-offset", "87",
          "--schedule-out", str(sched_out)])
    out = tmp / "out_alp"
    code = main(["compare", "--model-config", str(model), "--scripted", str(sched_out),
                 "--tasks", str(tasks_out), "--out", str(out),
                 "--gen-length", "256", "--block-size", "32",
                 "--accept-threshold", "0.9", "--truncate-threshold", "0.9",
                 "--seed", "3", "--strategies", "fast", "odb",
                 "--profile", str(profile)])
    assert code == 0
    payload = json.loads((out / "compare.json").read_text())
    row = payload["per_task"][0]

    cfg = ModelConfig.from_dict(json.loads(model.read_text()))
    schedule = ScriptedSchedule.from_json(sched_out, cfg.vocab_size,
                                          cfg.mask_token_id, cfg.eos_token_id)
    smodel = ScriptedModel(cfg, schedule)
    prompt = json.loads(tasks_out.read_text().splitlines()[0])["prompt_tokens"]
    fast = decode(smodel, prompt, RunConfig(strategy="fast", gen_length=256, block_size=32))
    odb = decode(smodel, prompt, RunConfig(strategy="odb", gen_length=256,
                                           block_size=32, truncate_threshold=0.9))
    prof = HardwareProfile.from_json(profile)
    assert row["odb/fast"] == pytest.approx(estimate_speedup(fast, odb, prof), abs=1e-12)
    assert row["odb/fast"] > 1.0


def test_vanilla_tau_mode_through_cli(workdir):
    tmp, model, profile, tasks = workdir
    out = tmp / "out_tau"
    code = main(["run", *base_args(model, tasks, out), "--strategy", "vanilla",
                 "--tau-steps", "8", "--profile", str(profile)])
    assert code == 0
    traj = json.loads((out / "trajectory_t0.json").read_text())
    assert all(s["kind"] == "tau" for s in traj["steps"])
    assert traj["nfe"] <= 8
